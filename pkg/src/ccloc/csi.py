"""Beam-training simulation and per-link channel-parameter estimation.

Pipeline for one BS-UE link: the UE sweeps a codebook while the BS records
snapshots; the BS forms a sample covariance, picks AoAs from the MVDR
spectrum, reads each path's AoD off the codeword that lights it up most,
solves a least-squares problem for the complex gains, and pairs them with
clock-synchronised delay measurements.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .array_model import (ArrayConfig, DEFAULT_LOADING, SPEED_OF_LIGHT, codebook,
                          codeword_to_aod, default_grid, mvdr_combiner,
                          power_spectrum, steering_vector)
from .scene import wrap_angle

N_FIELDS = 5
FIELD_NAMES = ("aod", "aoa", "toa", "gain_mag", "gain_phase")


class DisconnectedLinkError(RuntimeError):
    """No usable path between a BS and a UE."""


def default_pilot_symbols(K):
    # unit-modulus chirp, so no two codewords share a pilot phase pattern
    k = np.arange(K)
    return np.exp(1j * np.pi * k * k / K)


@dataclass(frozen=True)
class PilotConfig:
    tx_power: float = 1.0
    noise_var: float = 1e-12
    n_snapshots: int = 8
    n_codewords: int = 32
    grid_size: int = 512
    sigma_toa: float = 1e-9
    max_paths: int = 5
    peak_floor: float = 0.05
    loading: float = DEFAULT_LOADING
    # extra loading (x tr(R)/M) for the AoD/gain combiners; exact MVDR
    # self-nulls when the look direction is one grid step off the source
    combiner_loading: float = 10.0
    pilot_symbols: tuple = None

    def __post_init__(self):
        if not self.tx_power > 0:
            raise ValueError("tx_power must be > 0")
        if self.noise_var < 0:
            raise ValueError("noise_var must be >= 0")
        if self.n_snapshots < 1 or self.n_codewords < 1:
            raise ValueError("n_snapshots and n_codewords must be >= 1")
        if self.max_paths < 1:
            raise ValueError("max_paths must be >= 1")
        if self.sigma_toa < 0:
            raise ValueError("sigma_toa must be >= 0")
        if self.pilot_symbols is not None:
            s = np.asarray(self.pilot_symbols)
            if s.shape != (self.n_codewords,) or not np.allclose(np.abs(s), 1.0, atol=1e-12):
                raise ValueError("pilot_symbols must be n_codewords unit-magnitude values")

    @property
    def symbols(self):
        if self.pilot_symbols is None:
            return default_pilot_symbols(self.n_codewords)
        return np.asarray(self.pilot_symbols, complex)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pilot keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "pilot_symbols"}
        return d


@dataclass
class CsiFeature:
    """Per-link state vector: L slots of (aod, aoa, toa, |gain|, angle(gain))."""

    aod: np.ndarray
    aoa: np.ndarray
    toa: np.ndarray
    gain_mag: np.ndarray
    gain_phase: np.ndarray
    valid_mask: np.ndarray
    low_confidence: bool = field(default=False, compare=False)

    @property
    def n_slots(self):
        return len(self.valid_mask)

    def vector(self):
        """Flatten to length 5L, grouped by parameter."""
        return np.concatenate([self.aod, self.aoa, self.toa, self.gain_mag, self.gain_phase])

    @classmethod
    def from_vector(cls, vec, mask):
        vec = np.asarray(vec, float)
        mask = np.asarray(mask, bool)
        L = len(mask)
        if vec.shape != (N_FIELDS * L,):
            raise ValueError(f"expected vector of length {N_FIELDS * L}, got {vec.shape}")
        parts = vec.reshape(N_FIELDS, L)
        return cls(*(parts[i].copy() for i in range(N_FIELDS)), valid_mask=mask.copy())

    @classmethod
    def empty(cls, L):
        z = np.zeros(L)
        return cls(z.copy(), z.copy(), z.copy(), z.copy(), z.copy(), np.zeros(L, bool))


def simulate_pilot_rx(paths, cbook, pilot, bs_array, seed=None, ue_array=None):
    """Received snapshots for every codeword, shape (K, M, n_snapshots).

    Snapshot t of codeword k is ``sum_l sqrt(rho) H_l w_k s_k + n`` with
    circular Gaussian noise of variance ``noise_var`` per element.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    W = cbook.columns
    N, K = W.shape
    if ue_array is None:
        ue_array = ArrayConfig(N, bs_array.wavelength)
    if ue_array.n_elements != N:
        raise ValueError("codebook length does not match the UE array")
    s = pilot.symbols
    if len(s) != K:
        raise ValueError("pilot has a different number of symbols than the codebook")
    M, T = bs_array.n_elements, pilot.n_snapshots
    Ar = steering_vector(bs_array, paths.aoa).reshape(M, -1)
    At = steering_vector(ue_array, paths.aod).reshape(N, -1)
    tx_gain = At.conj().T @ W  # (L, K): a_t(psi_l)^H w_k
    clean = np.sqrt(pilot.tx_power) * (Ar @ (paths.gain[:, None] * tx_gain)) * s[None, :]  # (M, K)
    out = np.repeat(clean.T[:, :, None], T, axis=2)
    if pilot.noise_var > 0:
        sd = np.sqrt(pilot.noise_var / 2)
        out = out + sd * (rng.standard_normal(out.shape) + 1j * rng.standard_normal(out.shape))
    return out


def estimate_covariance(snapshots, loading=DEFAULT_LOADING):
    """Sample covariance over every codeword and snapshot, plus diagonal loading.

    ``snapshots`` is (K, M, T) as produced by :func:`simulate_pilot_rx`, or a
    plain (M, T) matrix.
    """
    X = np.asarray(snapshots)
    if X.ndim == 3:
        X = X.transpose(1, 0, 2).reshape(X.shape[1], -1)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError("need at least one snapshot")
    M = X.shape[0]
    R = (X @ X.conj().T) / X.shape[1]
    R = 0.5 * (R + R.conj().T)
    if loading:
        R = R + (loading * np.trace(R).real / M) * np.eye(M)
    return R


def find_peaks(powers, n_peaks, peak_floor=0.05):
    """Indices of strict local maxima above ``peak_floor * max``, strongest first."""
    p = np.asarray(powers, float)
    if p.size == 0:
        return np.zeros(0, int)
    left = np.r_[-np.inf, p[:-1]]
    right = np.r_[p[1:], -np.inf]
    cand = np.flatnonzero((p > left) & (p > right) & (p >= peak_floor * p.max()))
    order = np.argsort(-p[cand], kind="stable")
    return cand[order][:n_peaks]


def estimate_aoa(R, grid, n_peaks, cfg, peak_floor=0.05, loading=0.0):
    """AoAs (radians) at the strongest local maxima of the MVDR spectrum."""
    spec = power_spectrum(R, grid, cfg, loading=loading)
    idx = find_peaks(spec.powers, n_peaks, peak_floor)
    return [float(spec.angles[i]) for i in idx]


def spectrum_is_flat(powers, tol=0.10):
    p = np.asarray(powers)
    return bool(p.max() <= (1 + tol) * p.min())


def estimate_aod(mean_rx, combiner, K):
    """AoD read off the codeword with the strongest combined reception."""
    power = np.abs(mean_rx.conj() @ combiner) ** 2  # mean_rx: (K, M); q^H r_k
    return codeword_to_aod(int(np.argmax(power)), K)


def gain_design_matrix(W, Q, s, rho, est_aods, est_aoas, bs_array, ue_array):
    """Stacked observation matrix F (K x L).

    Row k is ``sqrt(rho) s_k (w_k^T kron q_k^H) (A_t^* khatri-rao A_r)``.
    """
    Ar = steering_vector(bs_array, np.asarray(est_aoas, float)).reshape(bs_array.n_elements, -1)
    At = steering_vector(ue_array, np.asarray(est_aods, float)).reshape(ue_array.n_elements, -1)
    L = Ar.shape[1]
    KR = np.stack([np.kron(At[:, l].conj(), Ar[:, l]) for l in range(L)], axis=1)  # (N*M, L)
    rows = np.stack([np.kron(W[:, k], Q[:, k].conj()) for k in range(W.shape[1])], axis=0)
    return np.sqrt(rho) * np.asarray(s)[:, None] * (rows @ KR)


def estimate_gains(v, W, Q, s, rho, est_aods, est_aoas, bs_array, ue_array):
    """Least-squares complex gains from K combined observations.

    Solves ``(F^H F) beta = F^H v``. Columns that add no rank (duplicated
    angle estimates) are dropped before the solve; their gain is reported as
    0 and their entry in the returned ``kept`` mask is False.
    """
    v = np.asarray(v, complex)
    F = gain_design_matrix(W, Q, s, rho, est_aods, est_aoas, bs_array, ue_array)
    K, L = F.shape
    if K < L:
        raise ValueError(f"need at least as many observations as paths (K={K} < L={L})")
    kept = np.zeros(L, bool)
    scale = np.linalg.norm(F, axis=0)
    for l in range(L):
        trial = kept.copy()
        trial[l] = True
        if scale[l] > 0 and np.linalg.matrix_rank(F[:, trial] / scale[trial], tol=1e-10) == trial.sum():
            kept = trial
    beta = np.zeros(L, complex)
    if kept.any():
        Fk = F[:, kept]
        beta[kept] = np.linalg.solve(Fk.conj().T @ Fk, Fk.conj().T @ v)
    return beta, kept


def measure_toa(paths, sigma_toa, seed=None):
    """Delays with additive Gaussian timing error, clamped positive."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    toa = np.asarray(paths.toa, float)
    if sigma_toa == 0:
        return toa.copy()
    noisy = toa + sigma_toa * rng.standard_normal(toa.shape)
    return np.maximum(noisy, 1e-12)


def assemble_feature(est_aods, est_aoas, est_toas, est_gains, L):
    """Pack up to L estimated paths into a delay-sorted, zero-padded feature."""
    n = len(est_toas)
    if not (len(est_aods) == len(est_aoas) == len(est_gains) == n):
        raise ValueError("estimate lists must have equal lengths")
    if n > L:
        raise ValueError(f"got {n} paths for {L} slots")
    if n == 0:
        raise DisconnectedLinkError("no paths to assemble")
    toas = np.asarray(est_toas, float)
    g = np.asarray(est_gains, complex)
    # lexsort makes the order independent of the input permutation even on ties
    order = np.lexsort((np.asarray(est_aoas, float), np.asarray(est_aods, float), toas))
    feat = CsiFeature.empty(L)
    feat.aod[:n] = np.asarray(est_aods, float)[order]
    feat.aoa[:n] = np.asarray(est_aoas, float)[order]
    feat.toa[:n] = toas[order]
    feat.gain_mag[:n] = np.abs(g[order])
    feat.gain_phase[:n] = wrap_angle(np.angle(g[order]))
    feat.valid_mask[:n] = True
    return feat


def measure_link(paths, bs_array, ue_array, pilot, seed=None):
    """Run the whole beam-training estimator for one link and return a :class:`CsiFeature`.

    Raises :class:`DisconnectedLinkError` if the link carries no path or the
    spectrum shows no peak.
    """
    if not paths.connected:
        raise DisconnectedLinkError("link has no propagation path")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rx_rng, toa_rng = rng.spawn(2)
    K, L = pilot.n_codewords, pilot.max_paths
    cb = codebook(K, ue_array.n_elements)
    s = pilot.symbols
    snaps = simulate_pilot_rx(paths, cb, pilot, bs_array, rx_rng, ue_array=ue_array)
    R = estimate_covariance(snaps, pilot.loading)
    grid = default_grid(pilot.grid_size)
    spec = power_spectrum(R, grid, bs_array)
    peaks = find_peaks(spec.powers, L, pilot.peak_floor)
    if len(peaks) == 0:
        raise DisconnectedLinkError("no spectral peak")
    aoas = spec.angles[peaks]

    # pair each resolved beam with the physical path it observes; the delay
    # measurement is per beam, so unmatched spurious beams carry no delay
    cost = np.abs(np.sin(aoas)[:, None] - np.sin(paths.aoa)[None, :])
    est_i, path_i = linear_sum_assignment(cost)
    aoas = aoas[est_i]
    toas = measure_toa(paths, pilot.sigma_toa, toa_rng)[path_i]

    mean_rx = snaps.mean(axis=2)  # (K, M)
    combiners = np.stack([mvdr_combiner(R, steering_vector(bs_array, a), loading=pilot.combiner_loading)
                          for a in aoas], axis=1)
    aods = np.array([estimate_aod(mean_rx, combiners[:, j], K) for j in range(len(aoas))])

    # codeword k is combined toward the path whose departure beam it matches best
    At = steering_vector(ue_array, aods).reshape(ue_array.n_elements, -1)
    owner = np.argmax(np.abs(At.conj().T @ cb.columns), axis=0)
    Q = combiners[:, owner]
    v = np.einsum("mk,km->k", Q.conj(), mean_rx)
    gains, kept = estimate_gains(v, cb.columns, Q, s, pilot.tx_power, aods, aoas, bs_array, ue_array)

    feat = assemble_feature(aods[kept], aoas[kept], toas[kept], gains[kept], L)
    feat.low_confidence = spectrum_is_flat(spec.powers)
    return feat


def toa_to_distance(toa):
    return np.asarray(toa) * SPEED_OF_LIGHT
