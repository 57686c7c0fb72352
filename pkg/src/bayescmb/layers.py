"""Network layers on HEALPix graphs."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import LaplacianOperator

P_MIN = 1e-6
P_MAX = 1.0 - 1e-6
LOGIT_MIN = float(np.log(P_MIN / (1.0 - P_MIN)))
LOGIT_MAX = -LOGIT_MIN


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


class Module:
    """Minimal parameter container.

    Trainable tensors are discovered from instance attributes, nested modules
    and lists of modules, and named by their dotted attribute path.
    """

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                for k, v in value.parameters().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for k, v in item.parameters().items():
                            out[f"{name}.{i}.{k}"] = v
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


class ChebConv(Module):
    """Chebyshev graph convolution ``sum_k sum_c theta[k,c,o] T_k(L) x_c + bias_o``."""

    def __init__(self, in_channels: int, out_channels: int, K: int = 3,
                 rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.K = K
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (in_channels * (K + 1)))
        self.theta = Tensor(rng.normal(0.0, std, (K + 1, in_channels, out_channels)), True, "theta")
        self.bias = Tensor(np.zeros(out_channels), True, "bias")

    def __call__(self, x: Tensor, Lhat: LaplacianOperator | None) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ValueError(f"ChebConv expects (B, {self.in_channels}, N), got {x.shape}")
        if self.K == 0:
            basis = _lift(x)
        else:
            if Lhat is None or Lhat.n != x.shape[2]:
                raise ValueError("ChebConv: Laplacian resolution does not match input")
            basis = ad.cheb_basis(x, Lhat, self.K)
        out = ad.channel_mix(basis, self.theta)
        return ad.affine(out, shift=self.bias)


def _lift(x: Tensor) -> Tensor:
    # (B, C, N) -> (1, B, C, N) for the K = 0 case
    return ad._record(x.data[None], (x,), lambda g: (g[0],), "lift")


class BatchNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), True, "gamma")
        self.beta = Tensor(np.zeros(channels), True, "beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            out, mu, var = ad.batch_norm_train(x, self.gamma, self.beta, self.eps)
            n = x.shape[0] * x.shape[2]
            unbiased = var * n / max(n - 1, 1)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * unbiased
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = ad.mul(self.gamma, Tensor(inv))
        shift = ad.sub(self.beta, ad.mul(scale, Tensor(self.running_mean)))
        return ad.affine(x, scale, shift)


class ConcreteDropout(Module):
    """Spatial concrete dropout: one relaxed mask value per (sample, channel).

    ``stochastic`` mode draws ``u ~ U(0, 1)`` and scales by
    ``(1 - z) / (1 - p)``.  ``frozen`` mode multiplies by ``1 - mask`` with a
    fixed mask (default all zeros) and no rescaling, so a zero mask is an
    exact identity.
    """

    def __init__(self, channels: int, p_init: float = 1e-3, temperature: float = 0.1):
        self.channels = channels
        self.temperature = temperature
        self.p_logit = Tensor(np.array([logit(p_init)]), True, "p_logit")
        self.mode = "stochastic"
        self.frozen_mask: np.ndarray | None = None

    @property
    def p(self) -> float:
        return float(ad._sigmoid(self.p_logit.data)[0])

    def clamp(self):
        np.clip(self.p_logit.data, LOGIT_MIN, LOGIT_MAX, out=self.p_logit.data)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None,
                 u: np.ndarray | None = None) -> Tensor:
        B, C, _ = x.shape
        if C != self.channels:
            raise ValueError(f"ConcreteDropout expects {self.channels} channels, got {C}")
        if self.mode == "frozen":
            mask = np.zeros((B, C)) if self.frozen_mask is None else np.broadcast_to(self.frozen_mask, (B, C))
            return ad.affine(x, scale=Tensor(1.0 - mask))
        if u is None:
            if rng is None:
                raise ValueError("stochastic concrete dropout needs an rng")
            u = rng.uniform(size=(B, C))
        u = np.clip(np.asarray(u, dtype=np.float64), 1e-12, 1 - 1e-12)
        noise = Tensor(np.log(u) - np.log1p(-u))
        # logit(p) == p_logit inside the clamp range
        pl = ad.expand(self.p_logit, (B, C))
        z = ad.sigmoid(ad.scale(ad.add(pl, noise), 1.0 / self.temperature))
        p = ad.sigmoid(self.p_logit)
        retain = ad.reciprocal(ad.add_scalar(ad.scale(p, -1.0), 1.0))  # 1 / (1 - p)
        keep = ad.mul(ad.add_scalar(ad.scale(z, -1.0), 1.0), ad.expand(retain, (B, C)))
        return ad.affine(x, scale=keep)

    def regularizer(self, weights: ChebConv, length_scale: float, n_data: int) -> Tensor:
        """Concrete-dropout KL approximation with a standard Gaussian prior.

        ``l^2 (1 - p) / (2 N) * ||W||^2 + (C / N) * (p log p + (1 - p) log(1 - p))``
        where ``W`` are the associated convolution's Chebyshev weights and
        ``C`` the number of channels the mask covers.
        """
        if length_scale <= 0 or n_data < 1:
            raise ValueError("length_scale must be > 0 and n_data >= 1")
        p = ad.sigmoid(self.p_logit)
        one_minus_p = ad.add_scalar(ad.scale(p, -1.0), 1.0)
        wsq = ad.sum(ad.square(weights.theta))
        weight_term = ad.scale(ad.mul(one_minus_p, ad.expand(wsq, (1,))),
                               length_scale**2 / (2.0 * n_data))
        entropy = ad.add(ad.mul(p, ad.log(p)), ad.mul(one_minus_p, ad.log(one_minus_p)))
        return ad.sum(ad.add(weight_term, ad.scale(entropy, self.channels / n_data)))
