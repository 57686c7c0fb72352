"""Binary ``.hmap`` map files and dataset directories.

``.hmap`` layout (all little-endian)::

    b"HMAP1"            magic
    u32 nside
    u8  ordering        0 = nested
    u32 channels
    u16 tag length, then that many UTF-8 bytes of the units tag
    f64 payload         channels * 12 * nside^2 values, channel-major
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .healpix import Resolution, SkyMap

MAGIC = b"HMAP1"
_HEAD = struct.Struct("<IBI")
_TAG = struct.Struct("<H")


class FormatError(ValueError):
    pass


def encode_map(m: SkyMap) -> bytes:
    tag = m.units.encode("utf-8")
    payload = np.ascontiguousarray(m.values, dtype="<f8").tobytes()
    return MAGIC + _HEAD.pack(m.nside, 0, m.channels) + _TAG.pack(len(tag)) + tag + payload


def decode_map(blob: bytes) -> SkyMap:
    if not blob.startswith(MAGIC):
        raise FormatError("not an .hmap file (bad magic)")
    off = len(MAGIC)
    if len(blob) < off + _HEAD.size + _TAG.size:
        raise FormatError("truncated .hmap header")
    nside, ordering, channels = _HEAD.unpack_from(blob, off)
    off += _HEAD.size
    if ordering != 0:
        raise FormatError(f"unsupported ordering byte {ordering}")
    (tag_len,) = _TAG.unpack_from(blob, off)
    off += _TAG.size
    tag = blob[off : off + tag_len]
    if len(tag) != tag_len:
        raise FormatError("truncated units tag")
    off += tag_len
    res = Resolution(nside)
    expected = channels * res.n_pixels * 8
    payload = blob[off:]
    if len(payload) != expected:
        kind = "trailing bytes" if len(payload) > expected else "truncated payload"
        raise FormatError(f"{kind}: payload has {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f8").reshape(channels, res.n_pixels).astype(np.float64)
    return SkyMap(res, values, units=tag.decode("utf-8"))


def save_map(path, m: SkyMap) -> None:
    Path(path).write_bytes(encode_map(m))


def load_map(path) -> SkyMap:
    return decode_map(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# dataset directories


def instance_path(root, inst_id: int) -> Path:
    return Path(root) / f"inst_{int(inst_id)}.hmap"


def write_dataset(root, instances, manifest) -> None:
    """``manifest.json`` plus one 10-channel ``.hmap`` (9 observed, 1 target) per instance."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for inst in instances:
        stacked = np.concatenate([inst.x.values, inst.y.values], axis=0)
        save_map(instance_path(root, inst.id), SkyMap(inst.x.resolution, stacked))
    (root / "manifest.json").write_text(manifest.to_json() + "\n")


def read_manifest(root):
    from .skysim import DatasetManifest

    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    return DatasetManifest.from_json(path.read_text())


class Dataset:
    """Lazy view of a dataset directory; observations normalized on load."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = read_manifest(root)
        self._cache: dict[int, np.ndarray] = {}

    @property
    def nside(self) -> int:
        return int(self.manifest.config["nside"])

    def ids(self, split: str) -> list[int]:
        if split not in self.manifest.splits:
            raise KeyError(f"unknown split {split!r}")
        return list(self.manifest.splits[split])

    def raw(self, inst_id: int) -> np.ndarray:
        if inst_id not in self._cache:
            path = instance_path(self.root, inst_id)
            if not path.is_file():
                raise FileNotFoundError(f"missing instance file {path}")
            values = load_map(path).values
            if values.shape[0] != 10:
                raise FormatError(f"{path} has {values.shape[0]} channels, expected 10")
            self._cache[inst_id] = values
        return self._cache[inst_id]

    def observation(self, inst_id: int) -> np.ndarray:
        return self.raw(inst_id)[:9]

    def target(self, inst_id: int) -> np.ndarray:
        return self.raw(inst_id)[9]

    def inputs(self, ids) -> np.ndarray:
        """Normalized observations, shape (B, 9, N)."""
        return np.stack([self.manifest.normalize(self.observation(i)) for i in ids])

    def targets(self, ids) -> np.ndarray:
        """Targets in uK, shape (B, 1, N)."""
        return np.stack([self.target(i)[None, :] for i in ids])


def directory_hash(root) -> str:
    """SHA-256 over sorted relative paths and file contents."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(b"\0")
        h.update(hashlib.sha256(path.read_bytes()).digest())
    return h.hexdigest()


def ensure_output_dir(path, force: bool) -> Path:
    """Create ``path``; refuse a non-empty existing directory unless ``force``."""
    path = Path(path)
    if path.exists():
        if not path.is_dir():
            raise FileExistsError(f"{path} exists and is not a directory")
        if any(path.iterdir()) and not force:
            raise FileExistsError(f"{path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
