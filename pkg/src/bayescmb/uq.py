"""Monte Carlo prediction, variance decomposition and evaluation metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import harmonics as hm
from .autodiff import Tensor
from .healpix import MaskMap, SkyMap


@dataclass
class UQResult:
    """Per-pixel predictive moments over ``T`` dropout samples (uK, uK^2)."""

    mean: np.ndarray
    epistemic: np.ndarray
    aleatoric: np.ndarray
    total: np.ndarray
    T: int
    samples: np.ndarray | None = None

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.total)


def combine_samples(means: np.ndarray, variances: np.ndarray, keep_samples: bool = False) -> UQResult:
    """Reduce ``(T, ...)`` sample stacks into a :class:`UQResult`.

    ``epistemic = mean(y^2) - mean(y)^2``, evaluated as ``mean((y - mean(y))^2)``,
    ``aleatoric = mean(sigma^2)``, ``total = epistemic + aleatoric``.
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if means.shape != variances.shape:
        raise ValueError("mean and variance sample stacks differ in shape")
    T = means.shape[0]
    if T < 2:
        raise ValueError(f"need T >= 2 samples, got {T}")
    # shifting by the first sample keeps identical samples exactly zero-variance
    shift = means - means[0]
    mean = means[0] + shift.sum(axis=0) / T
    dev = shift - (mean - means[0])
    epistemic = (dev * dev).sum(axis=0) / T
    aleatoric = variances.sum(axis=0) / T
    return UQResult(mean, epistemic, aleatoric, epistemic + aleatoric, T,
                    means if keep_samples else None)


def mc_predict(model, x: np.ndarray, T: int, seed: int, keep_samples: bool = False) -> UQResult:
    """Sample ``T`` stochastic-dropout forward passes with BN in eval mode.

    ``x`` is a normalized input of shape ``(B, 9, N)``; moments have shape
    ``(B, N)``.  A deterministic model yields zero epistemic and aleatoric
    variance.
    """
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4D43]))
    model.eval()
    model.set_dropout_mode("stochastic")
    means = np.empty((T, x.shape[0], x.shape[2]))
    variances = np.zeros_like(means)
    for t in range(T):
        mu, logvar = model(Tensor(x), rng)
        means[t] = mu.data[:, 0]
        if logvar is not None:
            variances[t] = np.exp(logvar.data[:, 0])
    return combine_samples(means, variances, keep_samples)


# ---------------------------------------------------------------------------
# metrics


def _kept(pred, truth, mask: MaskMap | None):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth differ in size")
    if mask is not None:
        if mask.keep.shape != pred.shape:
            raise ValueError("mask does not match the maps")
        pred, truth = pred[mask.keep], truth[mask.keep]
    if pred.size == 0:
        raise ValueError("mask keeps no pixels")
    return pred, truth


def rmse(pred, truth, mask: MaskMap | None = None) -> float:
    p, t = _kept(pred, truth, mask)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def pearson_r(pred, truth, mask: MaskMap | None = None) -> float:
    p, t = _kept(pred, truth, mask)
    if p.size < 2:
        raise ValueError("need at least 2 kept pixels")
    dp, dt = p - p.mean(), t - t.mean()
    sp, st = np.sqrt(dp @ dp), np.sqrt(dt @ dt)
    if sp == 0 or st == 0:
        raise ValueError("correlation undefined: zero variance")
    return float(np.clip((dp @ dt) / (sp * st), -1.0, 1.0))


def calibration(mean, total, truth, mask: MaskMap | None = None) -> dict:
    """Coverage of ``|truth - mean| <= k sigma`` for k = 1, 2, 3 and corr(|err|, sigma)."""
    mean_k, truth_k = _kept(mean, truth, mask)
    _, total_k = _kept(mean, total, mask)
    if np.any(total_k <= 0):
        raise ValueError("total variance must be positive on kept pixels")
    sigma = np.sqrt(total_k)
    err = np.abs(truth_k - mean_k)
    table = {f"coverage_{k}sigma": float(np.mean(err <= k * sigma)) for k in (1, 2, 3)}
    try:
        table["corr_abs_error_sigma"] = pearson_r(err, sigma)
    except ValueError:
        table["corr_abs_error_sigma"] = float("nan")
    return table


@dataclass
class SpectralReport:
    ells: np.ndarray
    truth: np.ndarray
    cnn: np.ndarray
    ilc: np.ndarray
    diff_cnn: np.ndarray
    diff_ilc: np.ndarray

    COLUMNS = ("ell", "truth", "cnn", "ilc", "diff_cnn", "diff_ilc")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in zip(self.ells, self.truth, self.cnn, self.ilc, self.diff_cnn, self.diff_ilc):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def read_csv(cls, path) -> "SpectralReport":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if tuple(rows[0]) != cls.COLUMNS:
            raise ValueError(f"unexpected spectra header {rows[0]}")
        cols = np.array([[float(v) for v in r] for r in rows[1:]]).T
        return cls(cols[0].astype(int), *cols[1:])

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in self.COLUMNS[1:]} | {
            "ell": [int(v) for v in self.ells]}


def spectral_report(preds, truths, ilcs, mask: MaskMap, lmax: int) -> SpectralReport:
    """Instance-averaged masked spectra of truth, predictions and difference maps."""
    preds, truths, ilcs = (np.asarray(a, dtype=np.float64) for a in (preds, truths, ilcs))
    if not (preds.shape == truths.shape == ilcs.shape) or preds.ndim != 2:
        raise ValueError("prediction, truth and ILC sets must be aligned (n, N) arrays")
    res = mask.resolution
    acc = np.zeros((5, lmax + 1))
    for p, t, c in zip(preds, truths, ilcs):
        for row, m in enumerate((t, p, c, p - t, c - t)):
            acc[row] += hm.masked_spectrum(SkyMap(res, m[None, :]), mask, lmax).cl
    acc /= len(preds)
    return SpectralReport(np.arange(lmax + 1), *acc)


def decile_means(values: np.ndarray, lmin: int = 2) -> tuple[float, float]:
    """Mean over the bottom and top decile of multipoles ``lmin..lmax``."""
    v = np.asarray(values, dtype=np.float64)[lmin:]
    k = max(1, int(round(0.1 * v.size)))
    return float(v[:k].mean()), float(v[-k:].mean())


def to_dl(cl: np.ndarray) -> np.ndarray:
    ell = np.arange(len(cl))
    return ell * (ell + 1) * np.asarray(cl) / (2 * np.pi)


@dataclass
class EvalReport:
    rmse_cnn: float
    pearson_cnn: float
    rmse_ilc: float | None
    pearson_ilc: float | None
    calibration: dict | None
    cut_deg: float
    n_instances: int
    per_instance: list = field(default_factory=list)
    spectra: dict | None = None
    calibration_full_sky: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def __post_init__(self):
        for name in ("pearson_cnn", "pearson_ilc"):
            v = getattr(self, name)
            if v is not None and not -1.0 <= v <= 1.0:
                raise ValueError(f"{name} outside [-1, 1]")
        for name in ("rmse_cnn", "rmse_ilc"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} is negative")
