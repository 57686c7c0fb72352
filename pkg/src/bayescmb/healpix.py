"""HEALPix pixelization in NESTED ordering.

Only the nested scheme is supported: pooling relies on the quad-tree
hierarchy where pixel ``p`` at resolution ``nside`` has children
``4p .. 4p+3`` at ``2*nside``.

Geometry follows the standard equal-area iso-latitude layout: 12 base
faces, each subdivided into ``nside x nside`` pixels addressed by
``(face, ix, iy)`` with the nested index formed by bit-interleaving
``ix`` and ``iy``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Base-face layout: ring index of the face's southern corner (in units of
# nside) and its longitude offset (in units of pi/4).
_JRLL = np.array([2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4], dtype=np.int64)
_JPLL = np.array([1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7], dtype=np.int64)

MAX_NSIDE = 128


@dataclass(frozen=True)
class Resolution:
    """HEALPix resolution parameter."""

    nside: int

    def __post_init__(self):
        nside = self.nside
        if isinstance(nside, bool) or not isinstance(nside, (int, np.integer)):
            raise TypeError(f"nside must be an integer, got {nside!r}")
        if nside < 1 or (nside & (nside - 1)) != 0:
            raise ValueError(f"nside must be a positive power of two, got {nside}")
        if nside > MAX_NSIDE:
            raise ValueError(f"nside > {MAX_NSIDE} is not supported, got {nside}")
        object.__setattr__(self, "nside", int(nside))

    @property
    def n_pixels(self) -> int:
        return 12 * self.nside * self.nside

    @property
    def pixel_area(self) -> float:
        """Solid angle of one pixel in steradians (all pixels are equal-area)."""
        return 4.0 * np.pi / self.n_pixels

    def coarser(self) -> "Resolution":
        if self.nside == 1:
            raise ValueError("nside=1 has no coarser resolution")
        return Resolution(self.nside // 2)

    def finer(self) -> "Resolution":
        return Resolution(self.nside * 2)


def as_resolution(res) -> Resolution:
    return res if isinstance(res, Resolution) else Resolution(res)


def n_pixels(res) -> int:
    return as_resolution(res).n_pixels


@dataclass(frozen=True)
class SkyMap:
    """Multi-channel map on a nested HEALPix grid, units of uK_CMB.

    ``values`` has shape ``(channels, n_pixels)`` and is stored read-only.
    """

    resolution: Resolution
    values: np.ndarray
    ordering: str = "nested"
    units: str = "uK_CMB"

    def __post_init__(self):
        if self.ordering != "nested":
            raise ValueError(f"only nested ordering is supported, got {self.ordering!r}")
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[None, :]
        if vals.ndim != 2 or vals.shape[0] < 1:
            raise ValueError(f"values must have shape (channels, n_pixels), got {vals.shape}")
        if vals.shape[1] != self.resolution.n_pixels:
            raise ValueError(
                f"values have {vals.shape[1]} pixels, nside={self.resolution.nside} "
                f"needs {self.resolution.n_pixels}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("map values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def nside(self) -> int:
        return self.resolution.nside

    def channel(self, i: int) -> "SkyMap":
        return SkyMap(self.resolution, self.values[i : i + 1], units=self.units)


@dataclass(frozen=True)
class MaskMap:
    """Per-pixel keep flags."""

    resolution: Resolution
    keep: np.ndarray

    def __post_init__(self):
        keep = np.array(self.keep, dtype=bool)
        if keep.shape != (self.resolution.n_pixels,):
            raise ValueError(
                f"mask length {keep.shape} does not match n_pixels={self.resolution.n_pixels}"
            )
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)

    @property
    def n_kept(self) -> int:
        return int(self.keep.sum())

    @property
    def fsky(self) -> float:
        return self.n_kept / self.resolution.n_pixels

    @classmethod
    def full(cls, res) -> "MaskMap":
        res = as_resolution(res)
        return cls(res, np.ones(res.n_pixels, dtype=bool))


# ---------------------------------------------------------------------------
# index arithmetic


def _compact_bits(v: np.ndarray) -> np.ndarray:
    """Extract the even bits of ``v`` (inverse of bit spreading)."""
    v = v & 0x5555555555555555
    v = (v | (v >> 1)) & 0x3333333333333333
    v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v | (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v | (v >> 16)) & 0x00000000FFFFFFFF
    return v


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v & 0x00000000FFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


def _check_pix(res: Resolution, pix) -> np.ndarray:
    pix = np.asarray(pix, dtype=np.int64)
    if np.any(pix < 0) or np.any(pix >= res.n_pixels):
        raise IndexError(f"pixel index out of range [0, {res.n_pixels}) for nside={res.nside}")
    return pix


def nest2xyf(res, pix):
    """Nested index -> (ix, iy, face)."""
    res = as_resolution(res)
    pix = _check_pix(res, pix)
    npface = res.nside * res.nside
    face = pix // npface
    ipf = pix % npface
    return _compact_bits(ipf), _compact_bits(ipf >> 1), face


def xyf2nest(res, ix, iy, face):
    res = as_resolution(res)
    ix = np.asarray(ix, dtype=np.int64)
    iy = np.asarray(iy, dtype=np.int64)
    face = np.asarray(face, dtype=np.int64)
    return face * res.nside * res.nside + _spread_bits(ix) + (_spread_bits(iy) << 1)


def face_to_zphi(x, y, face):
    """Continuous face coordinates ``x, y`` in [0, 1] -> (z = cos(theta), phi).

    ``(x, y) = (0, 0)`` is the southern corner of the face, ``(1, 1)`` the
    northern one.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    face = np.asarray(face, dtype=np.int64)
    jr = _JRLL[face] - x - y
    nr = np.where(jr < 1, jr, np.where(jr > 3, 4 - jr, 1.0))
    z = np.where(
        jr < 1,
        1.0 - nr * nr / 3.0,
        np.where(jr > 3, nr * nr / 3.0 - 1.0, (2.0 - jr) * 2.0 / 3.0),
    )
    tmp = _JPLL[face] * nr + x - y
    tmp = np.where(tmp < 0, tmp + 8, tmp)
    tmp = np.where(tmp >= 8, tmp - 8, tmp)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(nr < 1e-15, 0.0, (np.pi / 4.0) * tmp / np.where(nr < 1e-15, 1.0, nr))
    return z, phi


def pixel_center(res, pix):
    """Colatitude and longitude (radians) of pixel centers."""
    res = as_resolution(res)
    ix, iy, face = nest2xyf(res, pix)
    z, phi = face_to_zphi((ix + 0.5) / res.nside, (iy + 0.5) / res.nside, face)
    return np.arccos(np.clip(z, -1.0, 1.0)), phi


def _zphi_to_vec(z, phi):
    s = np.sqrt(np.maximum(0.0, (1.0 - z) * (1.0 + z)))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


@lru_cache(maxsize=None)
def _centers(nside: int):
    res = Resolution(nside)
    theta, phi = pixel_center(res, np.arange(res.n_pixels))
    for a in (theta, phi):
        a.setflags(write=False)
    return theta, phi


def pixel_angles(res):
    """Cached ``(theta, phi)`` arrays for every pixel, read-only."""
    return _centers(as_resolution(res).nside)


@lru_cache(maxsize=None)
def _center_vectors(nside: int) -> np.ndarray:
    theta, phi = _centers(nside)
    v = _zphi_to_vec(np.cos(theta), phi)
    v.setflags(write=False)
    return v


def pixel_vectors(res) -> np.ndarray:
    """Unit vectors of all pixel centers, shape ``(n_pixels, 3)``."""
    return _center_vectors(as_resolution(res).nside)


def pixel_corners(res, pix) -> np.ndarray:
    """Unit vectors of the 4 corners of each pixel, shape ``(..., 4, 3)``."""
    res = as_resolution(res)
    ix, iy, face = nest2xyf(res, pix)
    n = res.nside
    out = []
    for dx, dy in ((0, 0), (1, 0), (1, 1), (0, 1)):
        z, phi = face_to_zphi((ix + dx) / n, (iy + dy) / n, face)
        out.append(_zphi_to_vec(z, phi))
    return np.stack(out, axis=-2)


def parent(pix):
    pix = np.asarray(pix, dtype=np.int64)
    if np.any(pix < 0):
        raise IndexError("negative pixel index")
    out = pix >> 2
    return int(out) if out.ndim == 0 else out


def children(pix) -> np.ndarray:
    pix = int(pix)
    if pix < 0:
        raise IndexError("negative pixel index")
    return np.arange(4 * pix, 4 * pix + 4, dtype=np.int64)


# ---------------------------------------------------------------------------
# neighbours


@lru_cache(maxsize=None)
def _neighbor_table(nside: int) -> np.ndarray:
    """Padded ``(n_pixels, 8)`` table, -1 where a pixel has only 7 neighbours.

    Two pixels are neighbours iff they share at least one vertex; this covers
    both edge- and corner-adjacency and is exact for the HEALPix tessellation.
    """
    res = Resolution(nside)
    npix = res.n_pixels
    corners = pixel_corners(res, np.arange(npix))
    # Vertices are shared exactly by construction up to rounding; quantize.
    keys = np.round(corners.reshape(-1, 3) * 1e9).astype(np.int64)
    _, vid = np.unique(keys, axis=0, return_inverse=True)
    vid = vid.reshape(npix, 4)
    owners: dict[int, list[int]] = {}
    for p in range(npix):
        for v in vid[p]:
            owners.setdefault(int(v), []).append(p)
    table = np.full((npix, 8), -1, dtype=np.int64)
    for p in range(npix):
        nb = set()
        for v in vid[p]:
            nb.update(owners[int(v)])
        nb.discard(p)
        nb = sorted(nb)
        if not 1 <= len(nb) <= 8:
            raise RuntimeError(f"pixel {p} at nside={nside} has {len(nb)} neighbours")
        table[p, : len(nb)] = nb
    table.setflags(write=False)
    return table


def neighbor_table(res) -> np.ndarray:
    return _neighbor_table(as_resolution(res).nside)


def neighbors(res, pix: int) -> list[int]:
    """Sorted list of pixels sharing an edge or a corner with ``pix``."""
    res = as_resolution(res)
    pix = int(_check_pix(res, pix))
    row = _neighbor_table(res.nside)[pix]
    return [int(q) for q in row if q >= 0]


# ---------------------------------------------------------------------------
# masks


def latitude_mask(res, cut_deg: float) -> MaskMap:
    """Keep pixels whose center lies more than ``cut_deg`` from the equator."""
    res = as_resolution(res)
    if not 0.0 <= cut_deg < 90.0:
        raise ValueError(f"cut_deg must be in [0, 90), got {cut_deg}")
    theta, _ = pixel_angles(res)
    lat = np.abs(90.0 - np.degrees(theta))
    if cut_deg == 0.0:
        return MaskMap.full(res)
    return MaskMap(res, lat > cut_deg)
