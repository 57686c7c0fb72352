"""Direct-summation spherical harmonic transforms and power spectra.

Transforms sum directly over pixels, factorized by iso-latitude ring:
Legendre values are evaluated once per ring and combined with per-pixel
phases ``exp(i m phi)``.  No FFTs are used.
Coefficients use the real-field convention: only ``m >= 0`` is stored and
``a_{l,-m} = (-1)^m conj(a_{lm})``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .healpix import MaskMap, Resolution, SkyMap, as_resolution, pixel_angles


def n_alm(lmax: int) -> int:
    return (lmax + 1) * (lmax + 2) // 2


@lru_cache(maxsize=None)
def _lm_index(lmax: int):
    ell = np.concatenate([np.arange(m, lmax + 1) for m in range(lmax + 1)])
    em = np.concatenate([np.full(lmax + 1 - m, m) for m in range(lmax + 1)])
    return ell, em


def alm_index(lmax: int, ell: int, m: int) -> int:
    """Position of ``(ell, m)`` in the m-major packed layout."""
    if not 0 <= m <= ell <= lmax:
        raise IndexError(f"(l={ell}, m={m}) outside lmax={lmax}")
    return m * (2 * lmax + 3 - m) // 2 + ell - m


@dataclass(frozen=True, eq=False)
class AlmSet:
    lmax: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.complex128)
        if c.shape != (n_alm(self.lmax),):
            raise ValueError(f"expected {n_alm(self.lmax)} coefficients for lmax={self.lmax}, got {c.shape}")
        ell, em = _lm_index(self.lmax)
        c[em == 0] = c[em == 0].real
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, lmax: int) -> "AlmSet":
        return cls(lmax, np.zeros(n_alm(lmax), dtype=np.complex128))

    def get(self, ell: int, m: int) -> complex:
        return complex(self.coeffs[alm_index(self.lmax, ell, m)])

    def with_value(self, ell: int, m: int, value) -> "AlmSet":
        c = self.coeffs.copy()
        c[alm_index(self.lmax, ell, m)] = value
        return AlmSet(self.lmax, c)

    @property
    def ells(self) -> np.ndarray:
        return _lm_index(self.lmax)[0]

    @property
    def ms(self) -> np.ndarray:
        return _lm_index(self.lmax)[1]

    def __add__(self, other: "AlmSet") -> "AlmSet":
        if other.lmax != self.lmax:
            raise ValueError("lmax mismatch")
        return AlmSet(self.lmax, self.coeffs + other.coeffs)

    def scaled(self, factor) -> "AlmSet":
        return AlmSet(self.lmax, self.coeffs * factor)


@dataclass(frozen=True, eq=False)
class PowerSpectrum:
    cl: np.ndarray

    def __post_init__(self):
        cl = np.array(self.cl, dtype=np.float64)
        if cl.ndim != 1 or cl.size < 1:
            raise ValueError("C_ell must be a non-empty 1-D array")
        if np.any(cl < 0) or not np.all(np.isfinite(cl)):
            raise ValueError("C_ell must be finite and non-negative")
        cl.setflags(write=False)
        object.__setattr__(self, "cl", cl)

    @property
    def lmax(self) -> int:
        return self.cl.size - 1

    @property
    def ells(self) -> np.ndarray:
        return np.arange(self.cl.size)

    def dl(self) -> np.ndarray:
        """``l(l+1) C_l / 2 pi``."""
        ell = self.ells
        return ell * (ell + 1) * self.cl / (2 * np.pi)


@dataclass(frozen=True)
class Beam:
    fwhm_arcmin: float

    def __post_init__(self):
        if not self.fwhm_arcmin > 0:
            raise ValueError("beam FWHM must be positive")

    @property
    def sigma(self) -> float:
        return np.radians(self.fwhm_arcmin / 60.0) / np.sqrt(8.0 * np.log(2.0))

    def transfer(self, lmax: int) -> np.ndarray:
        ell = np.arange(lmax + 1)
        return np.exp(-ell * (ell + 1) * self.sigma**2 / 2.0)


# ---------------------------------------------------------------------------
# Legendre tables


def legendre_table(lmax: int, x: np.ndarray) -> np.ndarray:
    """Orthonormalized associated Legendre functions ``lambda_lm(x)``.

    ``Y_lm(theta, phi) = lambda_lm(cos theta) exp(i m phi)`` including the
    Condon-Shortley phase.  Rows follow the packed ``alm_index`` layout.
    Computed with the standard upward recurrence in ``l`` at fixed ``m``.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.maximum(0.0, (1.0 - x) * (1.0 + x)))
    out = np.empty((n_alm(lmax), x.size))
    pmm = np.full(x.shape, 1.0 / np.sqrt(4.0 * np.pi))
    for m in range(lmax + 1):
        if m > 0:
            pmm = -np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * pmm
        base = alm_index(lmax, m, m)
        out[base] = pmm
        if m == lmax:
            break
        p1 = np.sqrt(2.0 * m + 3.0) * x * pmm
        out[base + 1] = p1
        p2 = pmm
        for ell in range(m + 2, lmax + 1):
            a = np.sqrt((4.0 * ell * ell - 1.0) / (ell * ell - m * m))
            a_prev = np.sqrt((4.0 * (ell - 1) ** 2 - 1.0) / ((ell - 1) ** 2 - m * m))
            p = a * (x * p1 - p2 / a_prev)
            out[base + ell - m] = p
            p2, p1 = p1, p
    return out


@lru_cache(maxsize=16)
def _rings(nside: int):
    """Ring id per pixel and the ring colatitudes."""
    theta, phi = pixel_angles(nside)
    ring_theta, ring = np.unique(np.round(theta, 12), return_inverse=True)
    return ring.astype(np.int64), ring_theta, phi


@lru_cache(maxsize=16)
def _ring_legendre(nside: int, lmax: int) -> np.ndarray:
    _, ring_theta, _ = _rings(nside)
    lam = legendre_table(lmax, np.cos(ring_theta))
    lam.setflags(write=False)
    return lam


def _synth_values(nside: int, lmax: int, coeffs: np.ndarray) -> np.ndarray:
    ring, _, phi = _rings(nside)
    lam = _ring_legendre(nside, lmax)  # (n_alm, n_rings)
    out = np.zeros(phi.size)
    for m in range(lmax + 1):
        lo, hi = alm_index(lmax, m, m), alm_index(lmax, lmax, m) + 1
        fm = coeffs[lo:hi] @ lam[lo:hi]  # (n_rings,) complex
        fr = fm[ring]
        if m == 0:
            out += fr.real
        else:
            out += 2.0 * (fr.real * np.cos(m * phi) - fr.imag * np.sin(m * phi))
    return out


def _analysis_values(nside: int, lmax: int, values: np.ndarray) -> np.ndarray:
    ring, ring_theta, phi = _rings(nside)
    lam = _ring_legendre(nside, lmax)
    nr = ring_theta.size
    coeffs = np.empty(n_alm(lmax), dtype=np.complex128)
    for m in range(lmax + 1):
        gm = np.bincount(ring, weights=values * np.cos(m * phi), minlength=nr) \
            - 1j * np.bincount(ring, weights=values * np.sin(m * phi), minlength=nr)
        lo, hi = alm_index(lmax, m, m), alm_index(lmax, lmax, m) + 1
        coeffs[lo:hi] = lam[lo:hi] @ gm
    return coeffs * (4.0 * np.pi / values.size)


# ---------------------------------------------------------------------------
# transforms


def max_synth_lmax(res) -> int:
    return 3 * as_resolution(res).nside - 1


def synthesize(alm: AlmSet, res) -> SkyMap:
    """``f(p) = sum_lm a_lm Y_lm(p)`` for a real field."""
    res = as_resolution(res)
    if alm.lmax > max_synth_lmax(res):
        raise ValueError(f"lmax={alm.lmax} too large for nside={res.nside} (max {max_synth_lmax(res)})")
    return SkyMap(res, _synth_values(res.nside, alm.lmax, alm.coeffs)[None, :])


def _single_channel(m) -> tuple[Resolution, np.ndarray]:
    if isinstance(m, SkyMap):
        if m.channels != 1:
            raise ValueError(f"expected a single-channel map, got {m.channels} channels")
        return m.resolution, m.values[0]
    raise TypeError("expected a SkyMap")


def analyze(m: SkyMap, lmax: int, iterations: int = 3) -> AlmSet:
    """Quadrature estimate ``a_lm = Omega_pix sum_p f(p) conj(Y_lm(p))``.

    The raw quadrature is refined with ``iterations`` Jacobi steps on the
    residual map (``a += analyze(f - synthesize(a))``), which removes most of
    the pixelization error for band-limited maps.
    """
    res, values = _single_channel(m)
    if lmax < 0 or lmax > 2 * res.nside:
        raise ValueError(f"lmax must be in [0, {2 * res.nside}] for nside={res.nside}")
    coeffs = _analysis_values(res.nside, lmax, values)
    for _ in range(iterations):
        resid = values - _synth_values(res.nside, lmax, coeffs)
        coeffs = coeffs + _analysis_values(res.nside, lmax, resid)
    return AlmSet(lmax, coeffs)


def spectrum_from_alm(alm: AlmSet) -> PowerSpectrum:
    ell, em = alm.ells, alm.ms
    power = np.abs(alm.coeffs) ** 2 * np.where(em == 0, 1.0, 2.0)
    cl = np.bincount(ell, weights=power, minlength=alm.lmax + 1)
    return PowerSpectrum(cl / (2 * np.arange(alm.lmax + 1) + 1))


def sample_alm(spec: PowerSpectrum, rng: np.random.Generator, lmax: int | None = None) -> AlmSet:
    """Gaussian realization with ``<|a_lm|^2> = C_l``."""
    lmax = spec.lmax if lmax is None else lmax
    if lmax > spec.lmax:
        raise ValueError("lmax exceeds the spectrum's lmax")
    ell, em = _lm_index(lmax)
    cl = spec.cl[ell]
    re = rng.standard_normal(ell.size)
    im = rng.standard_normal(ell.size)
    real_part = np.where(em == 0, np.sqrt(cl) * re, np.sqrt(cl / 2.0) * re)
    imag_part = np.where(em == 0, 0.0, np.sqrt(cl / 2.0) * im)
    return AlmSet(lmax, real_part + 1j * imag_part)


def apply_beam(alm: AlmSet, beam: Beam) -> AlmSet:
    return AlmSet(alm.lmax, alm.coeffs * beam.transfer(alm.lmax)[alm.ells])


def masked_spectrum(m: SkyMap, mask: MaskMap, lmax: int) -> PowerSpectrum:
    """Pseudo-C_l of the masked map divided by the kept-sky fraction."""
    res, values = _single_channel(m)
    if mask.resolution != res:
        raise ValueError("mask and map resolutions differ")
    if mask.n_kept == 0:
        raise ValueError("mask keeps no pixels (f_sky = 0)")
    cut = SkyMap(res, np.where(mask.keep, values, 0.0)[None, :])
    # the cut map is not band-limited, so no iterative refinement
    cl = spectrum_from_alm(analyze(cut, lmax, iterations=0)).cl
    return PowerSpectrum(cl / mask.fsky)


# ---------------------------------------------------------------------------
# theory spectrum files


def read_spectrum_csv(path) -> PowerSpectrum:
    """Read a ``ell,C_ell`` CSV with one row per multipole from 0."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["ell", "C_ell"]:
            raise ValueError(f"{path}: expected header 'ell,C_ell', got {header}")
        rows = [(int(r[0]), float(r[1])) for r in reader if r]
    ells = [r[0] for r in rows]
    if ells != list(range(len(rows))):
        raise ValueError(f"{path}: ell must run 0..lmax without gaps")
    return PowerSpectrum(np.array([r[1] for r in rows]))


def write_spectrum_csv(spec: PowerSpectrum, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("ell,C_ell\n")
        for ell, c in enumerate(spec.cl):
            fh.write(f"{ell},{float(c)!r}\n")


def placeholder_spectrum(lmax: int, amplitude: float = 1000.0, ell_knee: float = 40.0) -> PowerSpectrum:
    """Smooth NON-COSMOLOGICAL stand-in for a CMB temperature spectrum.

    ``D_l = amplitude * (1 + (l / ell_knee)^2)^0.5`` for ``l >= 2`` (flat
    plateau, slow rise), monopole and dipole zero.  Only meant to give maps a
    CMB-like red spectrum with a realistic uK amplitude.
    """
    ell = np.arange(lmax + 1, dtype=np.float64)
    dl = amplitude * np.sqrt(1.0 + (ell / ell_knee) ** 2)
    cl = np.zeros_like(ell)
    cl[2:] = 2 * np.pi * dl[2:] / (ell[2:] * (ell[2:] + 1))
    return PowerSpectrum(cl)


def default_spectrum_path() -> Path:
    return Path(__file__).with_name("data") / "placeholder_cl.csv"
