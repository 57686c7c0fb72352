"""Weighted pixel graph on the sphere, its Laplacian, and Chebyshev filtering."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import healpix
from .healpix import Resolution, as_resolution
from .kernels import lap_combine

LAMBDA_MARGIN = 0.01


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SphereGraph:
    """Neighbour-list graph: ``nbr[i, k]`` with weight ``w[i, k]``.

    Padding slots point at the row itself with zero weight so kernels can
    run branch-free; ``mask`` marks real edges.
    """

    resolution: Resolution
    nbr: np.ndarray
    w: np.ndarray
    mask: np.ndarray
    degree: np.ndarray
    weighted: bool = True

    @property
    def n_nodes(self) -> int:
        return self.resolution.n_pixels

    @property
    def n_edges(self) -> int:
        return int(self.mask.sum()) // 2

    def dense_adjacency(self) -> np.ndarray:
        n = self.n_nodes
        A = np.zeros((n, n))
        rows = np.repeat(np.arange(n), self.nbr.shape[1])
        np.add.at(A, (rows, self.nbr.ravel()), np.where(self.mask, self.w, 0.0).ravel())
        return A


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


@lru_cache(maxsize=None)
def _build_graph(nside: int, weighted: bool) -> SphereGraph:
    res = Resolution(nside)
    table = healpix.neighbor_table(res)
    mask = table >= 0
    rows = np.arange(res.n_pixels)[:, None]
    nbr = np.where(mask, table, rows).astype(np.int64)
    vec = healpix.pixel_vectors(res)
    cosd = np.einsum("nj,nkj->nk", vec, vec[nbr])
    dist = np.arccos(np.clip(cosd, -1.0, 1.0))
    if weighted:
        dbar = dist[mask].mean()
        w = np.exp(-(dist**2) / (2.0 * dbar**2))
    else:
        w = np.ones_like(dist)
    # dot products commute exactly, so w[i->j] == w[j->i] bitwise
    w = np.where(mask, w, 0.0)
    degree = w.sum(axis=1)
    w = np.ascontiguousarray(w)
    _freeze(nbr, w, mask, degree)
    return SphereGraph(res, nbr, w, mask, degree, weighted)


def build_graph(res, weighted: bool = True) -> SphereGraph:
    """Pixel graph with Gaussian weights ``exp(-d^2 / (2 dbar^2))``.

    ``d`` is the great-circle distance between neighbouring pixel centers
    and ``dbar`` the mean neighbour distance at this resolution.  With
    ``weighted=False`` every edge has weight 1.
    """
    return _build_graph(as_resolution(res).nside, bool(weighted))


@dataclass(frozen=True, eq=False)
class LaplacianOperator:
    """``L = D - A`` (combinatorial) or ``2 L / lambda_max - I`` (normalized_scaled)."""

    graph: SphereGraph
    form: str = "combinatorial"
    lambda_max: float | None = None

    def __post_init__(self):
        if self.form not in ("combinatorial", "normalized_scaled"):
            raise ValueError(f"unknown Laplacian form {self.form!r}")
        if (self.form == "normalized_scaled") != (self.lambda_max is not None):
            raise ValueError("lambda_max is required iff form is normalized_scaled")

    @property
    def resolution(self) -> Resolution:
        return self.graph.resolution

    @property
    def n(self) -> int:
        return self.graph.n_nodes

    @property
    def _ab(self):
        if self.form == "combinatorial":
            return 1.0, 0.0
        return 2.0 / self.lambda_max, -1.0

    def combine(self, x, out=None, z=None, c=0.0, g=None, d=0.0, scale=1.0):
        """``scale * (op @ x) + c*z + d*g`` row-wise on a 2-D ``(M, N)`` array."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n:
            raise ValueError(f"signal shape {x.shape} does not match {self.n} pixels")
        if out is None:
            out = np.empty_like(x)
        a, b = self._ab
        if z is not None:
            z = np.ascontiguousarray(z, dtype=np.float64)
        if g is not None:
            g = np.ascontiguousarray(g, dtype=np.float64)
        G = self.graph
        return lap_combine(x, G.nbr, G.w, G.degree, scale * a, scale * b, out, z, c, g, d)

    def matvec(self, x) -> np.ndarray:
        """Apply the operator along the last axis of ``x``."""
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, x.shape[-1])
        return self.combine(flat).reshape(x.shape)

    def dense(self) -> np.ndarray:
        return self.matvec(np.eye(self.n)).T.copy()


def laplacian(graph: SphereGraph) -> LaplacianOperator:
    return LaplacianOperator(graph, "combinatorial")


def estimate_lambda_max(L: LaplacianOperator, tol: float = 1e-8, max_iter: int = 10_000,
                        seed: int = 0) -> float:
    """Largest eigenvalue of the combinatorial Laplacian by power iteration.

    Returns the Rayleigh quotient once its relative change drops below
    ``tol``; a Rayleigh quotient never exceeds the true largest eigenvalue.
    """
    if L.form != "combinatorial":
        raise ValueError("power iteration expects the combinatorial Laplacian")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(L.n)
    v -= v.mean()  # drop the null-space component
    v /= np.linalg.norm(v)
    prev = None
    for _ in range(max_iter):
        Lv = L.matvec(v)
        rq = float(v @ Lv)
        nrm = np.linalg.norm(Lv)
        if nrm == 0.0:
            raise ConvergenceError("power iteration collapsed to the null space")
        v = Lv / nrm
        if prev is not None and abs(rq - prev) <= tol * abs(rq):
            return rq
        prev = rq
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations")


def normalize(L: LaplacianOperator, lambda_max: float) -> LaplacianOperator:
    if L.form != "combinatorial":
        raise ValueError("normalize expects the combinatorial Laplacian")
    if not lambda_max > 0:
        raise ValueError(f"lambda_max must be positive, got {lambda_max}")
    return LaplacianOperator(L.graph, "normalized_scaled", float(lambda_max))


@lru_cache(maxsize=None)
def _scaled_laplacian(nside: int, weighted: bool) -> LaplacianOperator:
    L = laplacian(build_graph(nside, weighted))
    lam = estimate_lambda_max(L)
    return normalize(L, lam * (1.0 + LAMBDA_MARGIN))


def scaled_laplacian(res, weighted: bool = True) -> LaplacianOperator:
    """Cached normalized Laplacian with the 1% safety margin on lambda_max."""
    return _scaled_laplacian(as_resolution(res).nside, bool(weighted))


# ---------------------------------------------------------------------------
# Chebyshev filtering


@dataclass(frozen=True)
class ChebCoeffs:
    theta: tuple

    def __init__(self, theta):
        object.__setattr__(self, "theta", tuple(float(t) for t in np.ravel(theta)))
        if len(self.theta) < 1:
            raise ValueError("need at least one coefficient")

    @property
    def order(self) -> int:
        return len(self.theta) - 1


def _check_scaled(Lhat: LaplacianOperator):
    if Lhat.form != "normalized_scaled":
        raise ValueError("Chebyshev filtering needs the normalized_scaled Laplacian")


def cheb_basis(Lhat: LaplacianOperator, x: np.ndarray, K: int) -> np.ndarray:
    """Stack ``[T_0(L) x, ..., T_K(L) x]`` for a 2-D ``(M, N)`` signal."""
    _check_scaled(Lhat)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != Lhat.n:
        raise ValueError(f"signal shape {x.shape} does not match {Lhat.n} pixels")
    out = np.empty((K + 1,) + x.shape)
    out[0] = x
    if K >= 1:
        Lhat.combine(x, out=out[1])
    for k in range(2, K + 1):
        Lhat.combine(out[k - 1], out=out[k], z=out[k - 2], c=-1.0, scale=2.0)
    return out


def cheb_adjoint(Lhat: LaplacianOperator, G: np.ndarray) -> np.ndarray:
    """``sum_k T_k(L) G[k]`` via Clenshaw's recurrence (L symmetric).

    This is the transpose of :func:`cheb_basis` and gives the input gradient
    of a Chebyshev layer.
    """
    _check_scaled(Lhat)
    G = np.ascontiguousarray(G, dtype=np.float64)
    K = G.shape[0] - 1
    if K == 0:
        return G[0].copy()
    b1 = G[K].copy()
    b2 = np.zeros_like(b1)
    for k in range(K - 1, 0, -1):
        b0 = Lhat.combine(b1, z=b2, c=-1.0, g=G[k], d=1.0, scale=2.0)
        b2, b1 = b1, b0
    return Lhat.combine(b1, z=b2, c=-1.0, g=G[0], d=1.0)


def cheb_apply(Lhat: LaplacianOperator, coeffs, f) -> np.ndarray:
    """Filter ``sum_k theta_k T_k(L) f`` along the last axis of ``f``."""
    if not isinstance(coeffs, ChebCoeffs):
        coeffs = ChebCoeffs(coeffs)
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != Lhat.n:
        raise ValueError(f"signal has {f.shape[-1]} pixels, operator expects {Lhat.n}")
    flat = f.reshape(-1, f.shape[-1])
    basis = cheb_basis(Lhat, flat, coeffs.order)
    out = np.zeros_like(flat)
    for k, t in enumerate(coeffs.theta):
        out += t * basis[k]
    return out.reshape(f.shape)
