"""Internal linear combination: the minimum-variance unit-sum channel mix."""

from __future__ import annotations

import numpy as np

from .healpix import MaskMap, SkyMap

RIDGE_TAU = 1e-10
COND_LIMIT = 1e12


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


def channel_covariance(x: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
    """Empirical (C, C) covariance over kept pixels after per-channel mean removal."""
    if keep is not None:
        x = x[:, keep]
    d = x - x.mean(axis=1, keepdims=True)
    return d @ d.T / d.shape[1]


def ilc_weights(x: SkyMap, mask: MaskMap | None = None) -> np.ndarray:
    """``w = C^-1 e / (e^T C^-1 e)``, renormalized so that ``sum(w) == 1``.

    A ridge ``tau * tr(C) / n * I`` is added when the covariance condition
    number exceeds 1e12.
    """
    vals = x.values
    n_ch = vals.shape[0]
    if n_ch < 2:
        raise ValueError("ILC needs at least 2 channels")
    keep = None
    if mask is not None:
        if mask.resolution != x.resolution:
            raise ValueError("mask resolution does not match the map")
        if mask.n_kept < 10:
            raise ValueError(f"mask keeps {mask.n_kept} pixels, need at least 10")
        keep = mask.keep
    cov = channel_covariance(vals, keep)
    if not np.all(np.isfinite(cov)) or np.linalg.cond(cov) > COND_LIMIT:
        cov = cov + RIDGE_TAU * np.trace(cov) / n_ch * np.eye(n_ch)
    e = np.ones(n_ch)
    try:
        if np.linalg.cond(cov) > 1.0 / np.finfo(np.float64).eps:
            raise np.linalg.LinAlgError("covariance is singular")
        cinv_e = np.linalg.solve(cov, e)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(f"channel covariance is singular even after ridge: {exc}") from exc
    w = cinv_e / (e @ cinv_e)
    # the closed form sums to 1 only up to rounding; fold the remainder in
    return w / w.sum()


def ilc_clean(x: SkyMap, w) -> SkyMap:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (x.channels,):
        raise ValueError(f"{w.shape[0] if w.ndim else 0} weights for {x.channels} channels")
    return SkyMap(x.resolution, (w @ x.values)[None, :], units=x.units)
