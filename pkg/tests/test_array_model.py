import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccloc.array_model import (ArrayConfig, SingularCovarianceError, SpectrumGrid, codebook, codeword,
                               codeword_to_aod, default_grid, mvdr_combiner, power_spectrum,
                               steering_vector)

WL = 0.0107
angles = st.floats(-np.pi, np.pi - 1e-9, allow_nan=False)


def cfg(m=8, d=0.5):
    return ArrayConfig(m, WL, d)


def test_array_config_validation():
    for bad in (dict(n_elements=0, wavelength=WL), dict(n_elements=4, wavelength=0.0),
                dict(n_elements=4, wavelength=WL, spacing_ratio=0.0), dict(n_elements=2.5, wavelength=WL)):
        with pytest.raises(ValueError):
            ArrayConfig(**bad)
    c = cfg()
    assert ArrayConfig.from_dict(c.to_dict()) == c


def test_steering_broadside_is_all_ones():
    np.testing.assert_array_equal(steering_vector(cfg(), 0.0), np.ones(8))


def test_steering_two_element_endfire():
    np.testing.assert_allclose(steering_vector(cfg(2), np.pi / 2), [1, -1], atol=1e-15)


@given(angles)
def test_steering_odd_symmetry_and_unit_first_element(a):
    c = cfg(16)
    v = steering_vector(c, a)
    assert v[0] == 1 + 0j
    np.testing.assert_allclose(steering_vector(c, -a), v.conj(), atol=1e-12)


def test_steering_matrix_columns():
    g = np.array([-0.3, 0.0, 0.4])
    A = steering_vector(cfg(), g)
    assert A.shape == (8, 3)
    for j, a in enumerate(g):
        np.testing.assert_array_equal(A[:, j], steering_vector(cfg(), a))


def test_codeword_center_is_uniform():
    np.testing.assert_allclose(codeword(8, 16, 4), np.ones(4) / 2, atol=1e-15)


def test_codeword_k0_k2_n2():
    # direct evaluation: exp(j*pi) = -1
    np.testing.assert_allclose(codeword(0, 2, 2), np.array([1, -1]) / np.sqrt(2), atol=1e-15)


@given(st.integers(1, 1024), st.integers(1, 1024), st.data())
def test_codeword_unit_norm(K, N, data):
    k = data.draw(st.integers(0, K - 1))
    assert abs(np.linalg.norm(codeword(k, K, N)) - 1) < 1e-12


def test_codeword_index_errors():
    with pytest.raises(IndexError):
        codeword(4, 4, 8)
    with pytest.raises(IndexError):
        codeword(-1, 4, 8)
    with pytest.raises(IndexError):
        codeword_to_aod(4, 4)


def test_codebook_shape():
    cb = codebook(32, 16)
    assert cb.columns.shape == (16, 32) and cb.n_codewords == 32 and cb.n_antennas == 16


def test_codeword_to_aod_values():
    assert codeword_to_aod(8, 16) == 0.0
    assert codeword_to_aod(0, 2) == -np.pi / 2
    assert codeword_to_aod(12, 16) == pytest.approx(0.5235987755982989, abs=1e-15)


def test_codeword_matches_transmit_steering():
    # the AoD mapping makes the codeword a (normalised) half-wavelength steering vector
    K, N = 16, 8
    for k in range(K):
        a = steering_vector(ArrayConfig(N, WL), codeword_to_aod(k, K))
        np.testing.assert_allclose(codeword(k, K, N), a / np.sqrt(N), atol=1e-12)


def test_mvdr_identity_covariance():
    a = steering_vector(cfg(), 0.3)
    q = mvdr_combiner(np.eye(8), a)
    np.testing.assert_allclose(q, a / 8, atol=1e-14)
    assert abs(np.vdot(q, a) - 1) < 1e-12


@given(st.integers(0, 2**31), angles)
def test_mvdr_distortionless(seed, ang):
    r = np.random.default_rng(seed)
    X = r.normal(size=(8, 20)) + 1j * r.normal(size=(8, 20))
    R = X @ X.conj().T / 20 + 1e-3 * np.eye(8)
    a = steering_vector(cfg(), ang)
    q = mvdr_combiner(R, a)
    assert abs(np.vdot(q, a) - 1) < 1e-9


def test_mvdr_singular_raises():
    with pytest.raises(SingularCovarianceError):
        mvdr_combiner(np.zeros((4, 4)), np.ones(4))


def test_white_noise_spectrum_is_flat():
    sigma2 = 0.7
    sp = power_spectrum(sigma2 * np.eye(8), default_grid(64), cfg())
    np.testing.assert_allclose(sp.powers, sigma2 / 8, rtol=1e-12)


def _single_source_cov(c, phi, snr):
    a = steering_vector(c, phi)
    return snr * np.outer(a, a.conj()) + np.eye(c.n_elements)


def test_single_source_peak_on_grid():
    c = cfg(16)
    grid = default_grid(128)
    for idx in (20, 64, 100):
        sp = power_spectrum(_single_source_cov(c, grid[idx], 100.0), grid, c)
        assert int(np.argmax(sp.powers)) == idx


def test_two_sources_resolved():
    c = cfg(16)
    grid = default_grid(256)
    i, j = 100, 160  # sin-separation far beyond two beamwidths (2/M)
    a, b = steering_vector(c, grid[i]), steering_vector(c, grid[j])
    R = 100 * (np.outer(a, a.conj()) + np.outer(b, b.conj())) + np.eye(16)
    p = power_spectrum(R, grid, c).powers
    left, right = np.r_[-np.inf, p[:-1]], np.r_[p[1:], -np.inf]
    peaks = np.flatnonzero((p > left) & (p > right))
    top = peaks[np.argsort(-p[peaks])][:2]
    assert sorted(top.tolist()) == [i, j]


@given(st.floats(0, 2 * np.pi))
def test_spectrum_phase_rotation_invariance(theta):
    c = cfg(8)
    R = _single_source_cov(c, 0.2, 10.0)
    U = np.exp(1j * theta) * np.eye(8)
    g = default_grid(32)
    p0 = power_spectrum(R, g, c).powers
    p1 = power_spectrum(U.conj().T @ R @ U, g, c).powers
    np.testing.assert_allclose(p0, p1, rtol=1e-9)


def test_spectrum_grid_requires_increasing_angles():
    with pytest.raises(ValueError):
        SpectrumGrid(np.array([0.0, 0.0]), np.ones(2))
    with pytest.raises(ValueError):
        power_spectrum(np.eye(4), [], cfg(4))


def test_default_grid():
    g = default_grid(512)
    assert g[0] == -np.pi / 2 and g[-1] < np.pi / 2 and len(g) == 512
    assert np.all(np.diff(g) > 0)
