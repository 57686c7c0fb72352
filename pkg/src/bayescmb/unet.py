"""Graph U-Net (deterministic and Bayesian), losses, and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import scaled_laplacian
from .layers import BatchNorm, ChebConv, ConcreteDropout, Module

N_BANDS = 9


@dataclass(frozen=True)
class UNetConfig:
    nside: int
    in_channels: int = N_BANDS
    depth: int = 3
    widths: tuple = (32, 64, 128)
    K: int = 3
    bayesian: bool = False
    weighted_graph: bool = True
    p_init: float = 1e-3
    temperature: float = 0.1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.nside < 1 or self.nside & (self.nside - 1):
            raise ValueError(f"nside must be a power of two, got {self.nside}")
        if self.depth < 1 or (1 << self.depth) > self.nside:
            raise ValueError(f"depth={self.depth} needs nside >= {1 << self.depth}, got {self.nside}")
        if len(self.widths) != self.depth:
            raise ValueError(f"widths {self.widths} must have length depth={self.depth}")
        if self.in_channels != N_BANDS:
            raise ValueError(f"the network takes {N_BANDS} frequency channels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)

    def replace(self, **kw) -> "UNetConfig":
        d = self.to_dict()
        d.update(kw)
        return UNetConfig.from_dict(d)


class ConvBlock(Module):
    """Two (ChebConv -> BatchNorm -> ReLU [-> ConcreteDropout]) stages."""

    def __init__(self, cin: int, cout: int, cfg: UNetConfig, rng: np.random.Generator):
        self.convs = [ChebConv(cin, cout, cfg.K, rng), ChebConv(cout, cout, cfg.K, rng)]
        self.bns = [BatchNorm(cout, cfg.bn_eps, cfg.bn_momentum) for _ in range(2)]
        self.drops = (
            [ConcreteDropout(cout, cfg.p_init, cfg.temperature) for _ in range(2)]
            if cfg.bayesian else []
        )

    def __call__(self, x: Tensor, Lhat, rng=None) -> Tensor:
        for i in range(2):
            x = ad.relu(self.bns[i](self.convs[i](x, Lhat)))
            if self.drops:
                x = self.drops[i](x, rng)
        return x


class UNet(Module):
    """U-Net on nested HEALPix graphs.

    Encoder level ``i`` runs at ``nside / 2**i``; a bottleneck block runs at
    ``nside / 2**depth``.  Decoder levels upsample, concatenate the matching
    encoder features, and apply a block.  Heads are ``K = 0`` convolutions
    (one-by-one) on the last decoder output.
    """

    def __init__(self, cfg: UNetConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        w = cfg.widths
        self.enc = []
        cin = cfg.in_channels
        for i in range(cfg.depth):
            self.enc.append(ConvBlock(cin, w[i], cfg, rng))
            cin = w[i]
        self.bottleneck = [ConvBlock(w[-1], w[-1], cfg, rng)]
        self.dec = []
        below = w[-1]
        for i in reversed(range(cfg.depth)):
            self.dec.append(ConvBlock(below + w[i], w[i], cfg, rng))
            below = w[i]
        self.mean_head = ChebConv(w[0], 1, 0, rng)
        if cfg.bayesian:
            self.logvar_head = ChebConv(w[0], 1, 0, rng)
        self._laps = [scaled_laplacian(cfg.nside >> i, cfg.weighted_graph) for i in range(cfg.depth + 1)]

    # -- modes ---------------------------------------------------------------

    def blocks(self) -> list[ConvBlock]:
        return self.enc + self.bottleneck + self.dec

    def batchnorms(self) -> list[BatchNorm]:
        return [bn for b in self.blocks() for bn in b.bns]

    def dropouts(self) -> list[ConcreteDropout]:
        return [d for b in self.blocks() for d in b.drops]

    def train(self):
        for bn in self.batchnorms():
            bn.training = True
        return self

    def eval(self):
        for bn in self.batchnorms():
            bn.training = False
        return self

    def set_dropout_mode(self, mode: str, mask=None):
        if mode not in ("stochastic", "frozen"):
            raise ValueError(f"unknown dropout mode {mode!r}")
        for d in self.dropouts():
            d.mode = mode
            d.frozen_mask = mask
        return self

    def clamp_dropout(self):
        for d in self.dropouts():
            d.clamp()

    # -- forward ---------------------------------------------------------------

    @property
    def n_pixels(self) -> int:
        return 12 * self.cfg.nside**2

    def __call__(self, x, rng: np.random.Generator | None = None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 3 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"input must be (B, {self.cfg.in_channels}, N), got {x.shape}")
        if x.shape[2] != self.n_pixels:
            raise ValueError(f"input has {x.shape[2]} pixels, nside={self.cfg.nside} needs {self.n_pixels}")
        if self.cfg.bayesian and rng is None and any(d.mode == "stochastic" for d in self.dropouts()):
            raise ValueError("stochastic Bayesian forward needs an rng")
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x, self._laps[i], rng)
            skips.append(x)
            x, _ = ad.max_pool4(x)
        x = self.bottleneck[0](x, self._laps[self.cfg.depth], rng)
        for j, block in enumerate(self.dec):
            level = self.cfg.depth - 1 - j
            x = ad.concat([ad.upsample4(x), skips[level]], axis=1)
            x = block(x, self._laps[level], rng)
        mean = self.mean_head(x, None)
        logvar = self.logvar_head(x, None) if self.cfg.bayesian else None
        return mean, logvar

    def conv_dropout_pairs(self):
        return [(b.convs[i], b.drops[i]) for b in self.blocks() for i in range(len(b.drops))]

    def kl(self, length_scale: float, n_data: int) -> Tensor:
        terms = [d.regularizer(c, length_scale, n_data) for c, d in self.conv_dropout_pairs()]
        if not terms:
            return Tensor(0.0)
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return total

    # -- state -----------------------------------------------------------------

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        names = self._bn_names()
        for name, bn in zip(names, self.batchnorms()):
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def _bn_names(self):
        names = []
        for prefix, blocks in (("enc", self.enc), ("bottleneck", self.bottleneck), ("dec", self.dec)):
            for i, b in enumerate(blocks):
                for j in range(len(b.bns)):
                    names.append(f"{prefix}.{i}.bns.{j}")
        return names

    def state(self) -> dict[str, np.ndarray]:
        d = {k: v.data for k, v in self.parameters().items()}
        d.update(self.buffers())
        return d

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True):
        params = self.parameters()
        expected = set(params) | set(self.buffers())
        missing = expected - set(state)
        unexpected = set(state) - expected
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            if k in state:
                arr = np.asarray(state[k], dtype=np.float64)
                if arr.shape != p.data.shape:
                    raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
                p.data = arr.copy()
        for name, bn in zip(self._bn_names(), self.batchnorms()):
            if f"{name}.running_mean" in state:
                bn.running_mean = np.asarray(state[f"{name}.running_mean"], dtype=np.float64).copy()
                bn.running_var = np.asarray(state[f"{name}.running_var"], dtype=np.float64).copy()
        return self


# ---------------------------------------------------------------------------
# losses


def _check_pair(name, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def loss_mse(pred, target) -> Tensor:
    """Mean over batch of ``(1/D) sum_i (y_i - yhat_i)^2``."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    _check_pair("loss_mse", pred, target)
    return ad.mean(ad.square(ad.sub(target, pred)))


def loss_heteroscedastic(pred, logvar, target, kl=None) -> Tensor:
    """``(1/D) sum_i [0.5 exp(-s_i) (y_i - yhat_i)^2 + 0.5 s_i] + kl``."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    logvar = logvar if isinstance(logvar, Tensor) else Tensor(logvar)
    target = target if isinstance(target, Tensor) else Tensor(target)
    _check_pair("loss_heteroscedastic", pred, target)
    _check_pair("loss_heteroscedastic", pred, logvar)
    r2 = ad.square(ad.sub(target, pred))
    nll = ad.add(ad.mul(ad.exp(ad.scale(logvar, -1.0)), r2), logvar)
    loss = ad.scale(ad.mean(nll), 0.5)
    if kl is not None:
        kl = kl if isinstance(kl, Tensor) else Tensor(kl)
        loss = ad.add(loss, ad.expand(kl, ()))
    return loss


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"BCMBCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    seed_label: str = ""

    def model_state(self) -> dict[str, np.ndarray]:
        return {k[len("model/"):]: v for k, v in self.arrays.items() if k.startswith("model/")}

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write a checkpoint: magic, version, JSON header, float64 LE payload.

    The header echoes the model config, a seed label, free-form metadata,
    and an ordered list of ``(name, shape)`` records describing the payload.
    """
    names = sorted(ckpt.arrays)
    records = [{"name": n, "shape": list(np.shape(ckpt.arrays[n]))} for n in names]
    header = {
        "config": ckpt.config,
        "meta": ckpt.meta,
        "seed_label": ckpt.seed_label,
        "records": records,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for n in names:
            fh.write(np.ascontiguousarray(ckpt.arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(raw[off : off + hlen].decode())
    off += hlen
    arrays = {}
    for rec in header["records"]:
        shape = tuple(rec["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[rec["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(header["config"], arrays, header["meta"], header["seed_label"])


def model_checkpoint(model: UNet, meta: dict | None = None, seed_label: str = "",
                     extra: dict[str, np.ndarray] | None = None) -> Checkpoint:
    arrays = {f"model/{k}": v for k, v in model.state().items()}
    for k, v in (extra or {}).items():
        arrays[k] = v
    return Checkpoint(model.cfg.to_dict(), arrays, dict(meta or {}), seed_label)


def model_from_checkpoint(ckpt: Checkpoint) -> UNet:
    model = UNet(UNetConfig.from_dict(ckpt.config))
    model.load_state(ckpt.model_state())
    return model


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
