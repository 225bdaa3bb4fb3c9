"""Affine layers, heteroscedastic Gaussian dropout and the information-bottleneck penalty."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .tensor import (
    RngState,
    ShapeError,
    Tensor,
    absolute,
    as_tensor,
    cap,
    linear,
    log,
    log_softmax,
    pick,
    relu,
    softplus,
    tmean,
)


@dataclass
class AffineLayer:
    W: Tensor  # [out x in]
    b: Tensor  # [out]

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: RngState) -> "AffineLayer":
        """He-uniform weights (fan-in scaled), zero bias."""
        limit = math.sqrt(6.0 / n_in)
        W = Tensor(rng.uniform(-limit, limit, (n_out, n_in)), requires_grad=True)
        b = Tensor(np.zeros(n_out), requires_grad=True)
        return cls(W, b)

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def __call__(self, x) -> Tensor:
        return affine_forward(self, x)


def affine_forward(layer: AffineLayer, x) -> Tensor:
    return linear(x, layer.W, layer.b)


@dataclass(frozen=True)
class HeteroDropoutConfig:
    sigma_sq_max: float = 4.0
    mc_samples: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.sigma_sq_max) and self.sigma_sq_max > 0):
            raise ValueError(f"sigma_sq_max must be finite and > 0, got {self.sigma_sq_max}")
        if self.mc_samples < 1:
            raise ValueError(f"mc_samples must be >= 1, got {self.mc_samples}")


def variance_head_forward(features, head: Sequence[AffineLayer], config: HeteroDropoutConfig) -> Tensor:
    """Per-unit dropout variance from privileged features.

    Hidden layers use ReLU; the output goes through softplus and is then capped
    at ``config.sigma_sq_max``.
    """
    h = as_tensor(features)
    for i, layer in enumerate(head):
        h = layer(h)
        if i < len(head) - 1:
            h = relu(h)
    sigma = cap(softplus(h), config.sigma_sq_max)
    bad = ~np.isfinite(sigma.data)
    if bad.any():
        unit = np.argwhere(bad)[0]
        raise FloatingPointError(f"variance head produced a non-finite value at index {tuple(unit)}")
    return sigma


def hetero_dropout(h_mean, sigma, rng: RngState | None = None, mode: str = "train", eps=None) -> Tensor:
    """Multiply ``h_mean`` by ``N(1, sigma)`` noise using ``1 + sqrt(sigma) * eps``.

    In ``"eval"`` mode the input is returned unchanged and no randomness is
    drawn. ``eps`` may be supplied to freeze the noise.
    """
    h_mean = as_tensor(h_mean)
    if mode == "eval":
        return h_mean
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    sigma = as_tensor(sigma)
    if sigma.shape != h_mean.shape:
        raise ShapeError("hetero_dropout", h_mean.shape, sigma.shape)
    if np.any(sigma.data < 0):
        raise ValueError("hetero_dropout: negative variance entry")
    if eps is None:
        if rng is None:
            raise ValueError("hetero_dropout: train mode needs an rng or injected eps")
        eps = rng.normal(h_mean.shape)
    eps = np.ascontiguousarray(eps, dtype=np.float64)
    if eps.shape != h_mean.shape:
        raise ShapeError("hetero_dropout", h_mean.shape, eps.shape, "noise shape")

    shape = h_mean.shape
    h_flat = np.ascontiguousarray(h_mean.data).reshape(-1)
    s_flat = np.ascontiguousarray(sigma.data).reshape(-1)
    e_flat = eps.reshape(-1)
    out = kernels.dropout_forward(h_flat, s_flat, e_flat).reshape(shape)

    def bw(g):
        dh, ds = kernels.dropout_backward(np.ascontiguousarray(g).reshape(-1), h_flat, s_flat, e_flat)
        return dh.reshape(shape), ds.reshape(shape)

    return Tensor._result(out, (h_mean, sigma), "hetero_dropout", bw)


def ib_penalty(sigma_batch, beta: float) -> Tensor:
    """``beta * mean_batch(mean_units |log sigma|)``; zero exactly when sigma is all ones."""
    sigma_batch = as_tensor(sigma_batch)
    if np.any(sigma_batch.data <= 0):
        raise ValueError("ib_penalty: variances must be strictly positive")
    s = sigma_batch if sigma_batch.data.ndim == 2 else Tensor._result(
        sigma_batch.data.reshape(1, -1), (sigma_batch,), "reshape", lambda g: (g.reshape(sigma_batch.shape),)
    )
    per_sample = tmean(absolute(log(s)), axis=1)
    return tmean(per_sample) * beta


def cross_entropy(logits, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood through a stable log-softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"cross_entropy: label out of range [0, {n_classes})")
    return -tmean(pick(log_softmax(logits, axis=1), labels))


class KLCheck(NamedTuple):
    analytic: float
    monte_carlo: float
    stderr: float


def kl_mc_check(sigma, mean, samples: int, rng: RngState, chunk: int = 100_000) -> KLCheck:
    """Differential entropy of a diagonal Gaussian, closed form vs sampling.

    The Monte-Carlo side is ``-(1/S) sum log q(z_s)`` with ``z_s ~ N(mean, sigma)``.
    """
    sigma = np.asarray(as_tensor(sigma).data, dtype=np.float64).reshape(-1)
    mean = np.asarray(as_tensor(mean).data, dtype=np.float64).reshape(-1)
    if np.any(sigma <= 0):
        raise ValueError("kl_mc_check: variances must be strictly positive")
    if mean.shape != sigma.shape:
        raise ShapeError("kl_mc_check", mean.shape, sigma.shape)
    if samples < 1000:
        raise ValueError("kl_mc_check needs at least 1000 samples")

    analytic = float(np.sum(0.5 * (1.0 + np.log(2.0 * np.pi * sigma))))
    log_norm = 0.5 * np.log(2.0 * np.pi * sigma)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        z = mean + np.sqrt(sigma) * rng.normal((m, sigma.size))
        nll = np.sum(log_norm + (z - mean) ** 2 / (2.0 * sigma), axis=1)
        total += float(nll.sum())
        total_sq += float((nll * nll).sum())
        done += m
    mc = total / samples
    var = max(total_sq / samples - mc * mc, 0.0)
    return KLCheck(analytic, mc, math.sqrt(var / samples))


def gaussian_dropout_sigma(drop_prob: float) -> float:
    """Std of multiplicative Gaussian noise equivalent to Bernoulli drop probability ``p``."""
    if not 0.0 < drop_prob < 1.0:
        raise ValueError(f"drop_prob must be in (0, 1), got {drop_prob}")
    return math.sqrt((1.0 - drop_prob) / drop_prob)


def parameters_of(layers: Sequence[AffineLayer]) -> list[Tensor]:
    return [p for layer in layers for p in layer.parameters()]


__all__ = [
    "AffineLayer",
    "HeteroDropoutConfig",
    "KLCheck",
    "affine_forward",
    "cross_entropy",
    "gaussian_dropout_sigma",
    "hetero_dropout",
    "ib_penalty",
    "kl_mc_check",
    "parameters_of",
    "variance_head_forward",
]
