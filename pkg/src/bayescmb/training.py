"""Two-stage training: SGD + MSE pre-training, then Adam on the heteroscedastic loss.

Every epoch writes ``epoch_<n>.ckpt`` (model, BN buffers, optimizer moments
and the history so far) and rewrites ``history.csv``.  Runs are resumable
from any epoch checkpoint and the continuation is bitwise identical to an
uninterrupted run: shuffling and dropout noise are derived from
``(seed, stage, epoch, step)`` rather than carried generator state.
"""

from __future__ import annotations

import csv
import math
import re
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward
from .layers import logit
from .unet import (
    Checkpoint,
    UNet,
    UNetConfig,
    load_checkpoint,
    loss_heteroscedastic,
    loss_mse,
    model_checkpoint,
    save_checkpoint,
)

STAGES = ("deterministic", "bayesian")
_STAGE_TAG = {"deterministic": 11, "bayesian": 12}
_SHUFFLE, _DROPOUT, _VALID = 1, 2, 3


class TrainingDivergedError(RuntimeError):
    pass


class ArchitectureMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "deterministic"
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 10
    optimizer: str = "sgd"
    length_scale: float = 1e-4
    weight_val: float = 0.8
    weight_train: float = 0.2
    patience: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.patience < 1:
            raise ValueError("epochs, batch_size, patience must be >= 1 and lr > 0")

    @classmethod
    def deterministic(cls, **kw) -> "TrainConfig":
        return cls(**({"stage": "deterministic", "lr": 1e-3, "batch_size": 10, "optimizer": "sgd"} | kw))

    @classmethod
    def bayesian(cls, **kw) -> "TrainConfig":
        return cls(**({"stage": "bayesian", "lr": 1e-5, "batch_size": 7, "optimizer": "adam"} | kw))


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt/m/{k}": a for k, a in self.m.items()}
        out.update({f"opt/v/{k}": a for k, a in self.v.items()})
        return out

    def meta(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step}

    @classmethod
    def restore(cls, meta: dict, ckpt: Checkpoint) -> "OptimizerState":
        st = cls(**meta)
        st.m = {k: a.copy() for k, a in ckpt.group("opt/m").items()}
        st.v = {k: a.copy() for k, a in ckpt.group("opt/v").items()}
        return st


def _check_shapes(params: dict, grads: dict):
    for k, p in params.items():
        if k not in grads:
            raise ValueError(f"no gradient for {k}")
        if np.shape(grads[k]) != p.shape:
            raise ValueError(f"{k}: gradient shape {np.shape(grads[k])} != parameter shape {p.shape}")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState):
    """In-place ``p <- p - lr * g``."""
    _check_shapes(params, grads)
    for k, p in params.items():
        p -= state.lr * grads[k]
    state.step += 1


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState):
    """In-place bias-corrected Adam update."""
    _check_shapes(params, grads)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"{k}: moment shape {m.shape} != parameter shape {p.shape}")
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# selection and history


def combined_metric(train_loss: float, val_loss: float, weight_val=0.8, weight_train=0.2) -> float:
    return weight_val * val_loss + weight_train * train_loss


def select_epoch(history, weight_val=0.8, weight_train=0.2) -> int:
    """1-based epoch minimizing ``0.8 val + 0.2 train``; earliest wins ties."""
    if not history:
        raise ValueError("empty history")
    best, best_epoch = math.inf, None
    for i, (tr, va) in enumerate(history, start=1):
        c = combined_metric(tr, va, weight_val, weight_train)
        if c < best:
            best, best_epoch = c, i
    if best_epoch is None:
        raise ValueError("history contains no finite combined metric")
    return best_epoch


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "combined")


def write_history(path, history, weight_val=0.8, weight_train=0.2) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for i, (tr, va) in enumerate(history, start=1):
            w.writerow([i, repr(tr), repr(va), repr(combined_metric(tr, va, weight_val, weight_train))])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
             "val_loss": float(r["val_loss"]), "combined": float(r["combined"])} for r in rows]


# ---------------------------------------------------------------------------
# weight transfer


def transfer_weights(det, bayes: UNet, seed: int = 0, p_init: float = 1e-3,
                     logvar_std: float = 1e-3) -> UNet:
    """Initialize a Bayesian U-Net from a deterministic checkpoint or model.

    Shared convolution, batch-norm and mean-head parameters (and BN running
    statistics) are copied exactly.  Log-variance head parameters are drawn
    from ``N(0, logvar_std^2)`` and every dropout probability is set to
    ``p_init``.
    """
    if isinstance(det, (str, Path)):
        det = load_checkpoint(det)
    src = det.model_state() if isinstance(det, Checkpoint) else det.state()
    if not bayes.cfg.bayesian:
        raise ArchitectureMismatchError("target model is not Bayesian")
    dst = bayes.state()
    new_only = {k for k in dst if k.startswith("logvar_head.") or k.endswith(".p_logit")}
    shared = set(dst) - new_only
    problems = sorted(set(src) ^ shared)
    problems += sorted(k for k in shared & set(src) if np.shape(src[k]) != np.shape(dst[k]))
    if problems:
        raise ArchitectureMismatchError(f"unmatched parameters: {problems}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A]))
    state = {k: np.array(src[k], dtype=np.float64) for k in shared}
    for k in sorted(new_only):
        if k.startswith("logvar_head."):
            state[k] = rng.normal(0.0, logvar_std, np.shape(dst[k]))
        else:
            state[k] = np.full(np.shape(dst[k]), logit(p_init))
    bayes.load_state(state)
    return bayes


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    history: list
    selected_epoch: int
    selected_path: Path
    stopped_early: bool
    out_dir: Path


def _seed(cfg: TrainConfig, *tags) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(cfg.seed), _STAGE_TAG[cfg.stage], *map(int, tags)])


def epoch_permutation(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(_seed(cfg, _SHUFFLE, epoch)).permutation(n)


def _loss(model: UNet, x, y, rng, cfg: TrainConfig, n_data: int):
    mean, logvar = model(Tensor(x), rng)
    if cfg.stage == "deterministic":
        return loss_mse(mean, y)
    return loss_heteroscedastic(mean, logvar, y, model.kl(cfg.length_scale, n_data))


def evaluate_loss(model: UNet, dataset, ids, cfg: TrainConfig, epoch: int, n_data: int) -> float:
    """Validation loss: BN in eval mode, dropout stochastic with a derived seed."""
    model.eval()
    rng = np.random.default_rng(_seed(cfg, _VALID, epoch))
    total, count = 0.0, 0
    for start in range(0, len(ids), cfg.batch_size):
        batch = ids[start : start + cfg.batch_size]
        loss = _loss(model, dataset.inputs(batch), dataset.targets(batch), rng, cfg, n_data)
        total += float(loss.data) * len(batch)
        count += len(batch)
    model.train()
    return total / count


def _epoch_ckpt(out_dir: Path, epoch: int) -> Path:
    return out_dir / f"epoch_{epoch}.ckpt"


def latest_epoch(out_dir) -> int:
    eps = [int(m.group(1)) for p in Path(out_dir).glob("epoch_*.ckpt")
           if (m := re.fullmatch(r"epoch_(\d+)\.ckpt", p.name))]
    return max(eps, default=0)


def run_training(model: UNet, dataset, cfg: TrainConfig, out_dir, resume: bool = False,
                 stop_after: int | None = None, log=None) -> TrainResult:
    """Train ``model`` in place, checkpointing every epoch into ``out_dir``.

    ``resume`` continues from the newest ``epoch_<n>.ckpt`` in ``out_dir``.
    ``stop_after`` interrupts after that many epochs in total (for testing
    resumption); selection then covers the epochs completed so far.
    """
    if (cfg.stage == "bayesian") != model.cfg.bayesian:
        raise ValueError(f"{cfg.stage} stage needs a {'Bayesian' if cfg.stage == 'bayesian' else 'deterministic'} model")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ids = dataset.ids("train")
    val_ids = dataset.ids("validation")
    if not train_ids or not val_ids:
        raise ValueError("dataset needs non-empty train and validation splits")
    n_data = len(train_ids)
    opt = OptimizerState(cfg.optimizer, cfg.lr)
    history: list[tuple[float, float]] = []
    start = 1
    if resume and latest_epoch(out_dir) > 0:
        last = latest_epoch(out_dir)
        ckpt = load_checkpoint(_epoch_ckpt(out_dir, last))
        if ckpt.meta.get("train_config") != asdict(cfg):
            raise ValueError("cannot resume: checkpoint was written with a different training config")
        model.load_state(ckpt.model_state())
        opt = OptimizerState.restore(ckpt.meta["optimizer"], ckpt)
        history = [tuple(h) for h in ckpt.meta["history"]]
        start = last + 1
    step_fn = sgd_step if cfg.optimizer == "sgd" else adam_step
    params = model.parameters()
    stopped_early = False
    model.train()
    for epoch in range(start, cfg.epochs + 1):
        if _stalled(history, cfg):
            stopped_early = True
            break
        if stop_after is not None and epoch > stop_after:
            break
        perm = epoch_permutation(cfg, epoch, n_data)
        running, seen = 0.0, 0
        for step, s in enumerate(range(0, n_data, cfg.batch_size)):
            batch = [train_ids[i] for i in perm[s : s + cfg.batch_size]]
            rng = np.random.default_rng(_seed(cfg, _DROPOUT, epoch, step))
            loss = _loss(model, dataset.inputs(batch), dataset.targets(batch), rng, cfg, n_data)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at {cfg.stage} epoch {epoch} step {step}; "
                    f"try a lower learning rate (current {cfg.lr})")
            model.zero_grad()
            backward(loss)
            step_fn({k: p.data for k, p in params.items()},
                    {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()},
                    opt)
            model.clamp_dropout()
            running += value * len(batch)
            seen += len(batch)
        train_loss = running / seen
        val_loss = evaluate_loss(model, dataset, val_ids, cfg, epoch, n_data)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at {cfg.stage} epoch {epoch}")
        history.append((train_loss, val_loss))
        meta = {
            "stage": cfg.stage,
            "epoch": epoch,
            "history": [list(h) for h in history],
            "train_config": asdict(cfg),
            "optimizer": opt.meta(),
        }
        save_checkpoint(_epoch_ckpt(out_dir, epoch),
                        model_checkpoint(model, meta, f"{cfg.stage}:{cfg.seed}", opt.arrays()))
        write_history(out_dir / "history.csv", history, cfg.weight_val, cfg.weight_train)
        if log is not None:
            log(f"[{cfg.stage}] epoch {epoch}: train {train_loss:.6g} val {val_loss:.6g}")
    if not history:
        raise ValueError("no epochs were run")
    sel = select_epoch(history, cfg.weight_val, cfg.weight_train)
    selected = out_dir / "selected.ckpt"
    shutil.copyfile(_epoch_ckpt(out_dir, sel), selected)
    return TrainResult(history, sel, selected, stopped_early, out_dir)


def _stalled(history, cfg: TrainConfig) -> bool:
    """True once the combined metric has not improved for ``patience`` epochs."""
    if len(history) <= cfg.patience:
        return False
    best = select_epoch(history, cfg.weight_val, cfg.weight_train)
    return len(history) - best >= cfg.patience


def train_deterministic(dataset, model_cfg: UNetConfig, cfg: TrainConfig, out_dir, **kw) -> tuple[UNet, TrainResult]:
    if model_cfg.bayesian:
        raise ValueError("deterministic pre-training needs bayesian=False")
    model = UNet(model_cfg, seed=cfg.seed)
    result = run_training(model, dataset, cfg, out_dir, **kw)
    return model, result


def train_bayesian(dataset, init, cfg: TrainConfig, out_dir, model_cfg: UNetConfig | None = None,
                   logvar_std: float = 1e-3, **kw) -> tuple[UNet, TrainResult]:
    """Fine-tune a Bayesian U-Net initialized from a deterministic checkpoint."""
    if init is None:
        raise ValueError("Bayesian training needs an initial model from the deterministic stage")
    det_ckpt = load_checkpoint(init) if isinstance(init, (str, Path)) else init
    if model_cfg is None:
        model_cfg = UNetConfig.from_dict(det_ckpt.config).replace(bayesian=True)
    model = UNet(model_cfg, seed=cfg.seed)
    transfer_weights(det_ckpt, model, seed=cfg.seed, p_init=model_cfg.p_init, logvar_std=logvar_std)
    result = run_training(model, dataset, cfg, out_dir, **kw)
    return model, result


def load_model(path) -> UNet:
    from .unet import model_from_checkpoint

    return model_from_checkpoint(load_checkpoint(path))
