"""Uniform linear array math: steering vectors, DFT-style codebook, MVDR.

All angles are radians measured from the array boresight. Complex values
are numpy ``complex128`` (a pair of float64).
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg

SPEED_OF_LIGHT = 299_792_458.0

#: relative diagonal loading applied before inverting a covariance
DEFAULT_LOADING = 1e-6


class SingularCovarianceError(ArithmeticError):
    """Raised when a covariance cannot be factorised even after loading."""


@dataclass(frozen=True)
class ArrayConfig:
    """ULA description: element count, spacing in wavelengths, wavelength (m)."""

    n_elements: int
    wavelength: float
    spacing_ratio: float = 0.5

    def __post_init__(self):
        if int(self.n_elements) != self.n_elements or self.n_elements < 1:
            raise ValueError(f"n_elements must be a positive integer, got {self.n_elements}")
        if not self.spacing_ratio > 0:
            raise ValueError(f"spacing_ratio must be > 0, got {self.spacing_ratio}")
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be > 0, got {self.wavelength}")

    def to_dict(self):
        return {"n_elements": int(self.n_elements), "spacing_ratio": float(self.spacing_ratio),
                "wavelength": float(self.wavelength)}

    @classmethod
    def from_dict(cls, d):
        return cls(n_elements=int(d["n_elements"]), wavelength=float(d["wavelength"]),
                   spacing_ratio=float(d["spacing_ratio"]))


@dataclass(frozen=True)
class Codebook:
    """K unit-norm codewords of length N, stored column-wise in ``columns`` (N x K)."""

    columns: np.ndarray

    @property
    def n_antennas(self):
        return self.columns.shape[0]

    @property
    def n_codewords(self):
        return self.columns.shape[1]


@dataclass(frozen=True)
class SpectrumGrid:
    angles: np.ndarray
    powers: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.angles) <= 0):
            raise ValueError("spectrum angles must be strictly increasing")


def steering_vector(cfg, angle):
    """Array response ``exp(-j m 2 pi (d/lambda) sin(angle))``.

    A scalar angle gives a length-M vector; an array of G angles gives an
    (M, G) matrix with one steering vector per column.
    """
    m = np.arange(cfg.n_elements)
    ang = np.asarray(angle, dtype=float)
    phase = -2.0 * np.pi * cfg.spacing_ratio * np.multiply.outer(m, np.sin(ang))
    return np.exp(1j * phase)


def codeword(k, K, N):
    if not 0 <= k < K:
        raise IndexError(f"codeword index {k} outside [0, {K})")
    if N < 1:
        raise ValueError("N must be >= 1")
    n = np.arange(N)
    return np.exp(-1j * np.pi * (2.0 * k / K - 1.0) * n) / np.sqrt(N)


def codebook(K, N):
    return Codebook(np.stack([codeword(k, K, N) for k in range(K)], axis=1))


def codeword_to_aod(k, K):
    """Departure angle whose half-wavelength steering phase matches codeword ``k``."""
    if not 0 <= k < K:
        raise IndexError(f"codeword index {k} outside [0, {K})")
    return float(np.arcsin(2.0 * k / K - 1.0))


def _factor(R, loading):
    R = np.asarray(R, dtype=complex)
    M = R.shape[0]
    if loading:
        R = R + (loading * np.trace(R).real / M) * np.eye(M)
    try:
        return scipy.linalg.cho_factor(R, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularCovarianceError(
            f"covariance ({M}x{M}, trace={np.trace(R).real:.3e}) is not positive "
            f"definite after loading={loading}: {exc}") from exc


def mvdr_combiner(R, a, loading=0.0):
    """Return ``R^-1 a / (a^H R^-1 a)``.

    ``loading`` adds ``loading * tr(R)/M * I`` before factorising. Raises
    :class:`SingularCovarianceError` when R is still not positive definite.
    """
    c = _factor(R, loading)
    ria = scipy.linalg.cho_solve(c, np.asarray(a, dtype=complex))
    return ria / np.vdot(a, ria)


def power_spectrum(R, grid, cfg, loading=0.0):
    """MVDR output power ``q(phi)^H R q(phi) = 1 / (a^H R^-1 a)`` over ``grid``."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty angle grid")
    A = steering_vector(cfg, grid).reshape(cfg.n_elements, -1)
    c = _factor(R, loading)
    RiA = scipy.linalg.cho_solve(c, A)
    denom = np.einsum("mg,mg->g", A.conj(), RiA).real
    return SpectrumGrid(angles=grid, powers=1.0 / denom)


def default_grid(size=512):
    """Uniform grid of ``size`` angles over [-pi/2, pi/2)."""
    return -np.pi / 2 + np.pi * np.arange(size) / size
