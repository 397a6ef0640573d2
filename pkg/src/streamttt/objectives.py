"""Losses and the Gaussian entropy score."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import DomainError, Tensor
from .ymodel import EDGE, MaskSpec, ModelParams, apply_mask, encode, plain_head, ss_head, task_head

HALF_LOG_2PI_E = 0.5 * math.log(2.0 * math.pi * math.e)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1e-3
    smooth_weight: float = 1e-3
    # weight of the plain reconstruction loss during joint source training
    plain_weight: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "smooth_weight", "plain_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class GaussianPrediction:
    """Per-pixel Gaussian, parameterized by log-variance."""
    mean: Tensor
    log_var: Tensor

    @classmethod
    def from_variance(cls, mean, variance) -> "GaussianPrediction":
        var = variance if isinstance(variance, Tensor) else Tensor(variance)
        if np.any(var.data <= 0):
            raise DomainError("variance must be positive")
        return cls(mean if isinstance(mean, Tensor) else Tensor(mean), gc.log(var))

    @property
    def variance(self) -> Tensor:
        return gc.exp(self.log_var)


def nll_gaussian(pred: GaussianPrediction, target: Tensor) -> Tensor:
    """Mean over elements of |mu - y|^2 / (2 var) + log(var) / 2."""
    if pred.mean.shape != target.shape:
        raise gc.ShapeError(f"nll: prediction {pred.mean.shape} vs target {target.shape}")
    sq = gc.square(gc.sub(pred.mean, target))
    # exp(-log_var) avoids a division and keeps the variance positive by construction
    scaled = gc.mul(gc.mul(sq, gc.exp(gc.mul(pred.log_var, -1.0))), 0.5)
    return gc.mean(gc.add(scaled, gc.mul(pred.log_var, 0.5)))


def ss_prediction(x: Tensor, params: ModelParams, mask_spec: MaskSpec) -> GaussianPrediction:
    x_masked, _ = apply_mask(x, mask_spec)
    recon, log_var = ss_head(encode(x_masked, params), params)
    return GaussianPrediction(recon, log_var)


def loss_uss(x: Tensor, params: ModelParams, mask_spec: MaskSpec) -> Tensor:
    """Uncertainty-aware masked-autoencoding loss against the unmasked input."""
    return nll_gaussian(ss_prediction(x, params, mask_spec), _flat(x))


def loss_recon_plain(x: Tensor, params: ModelParams, mask_spec: MaskSpec) -> Tensor:
    x_masked, _ = apply_mask(x, mask_spec)
    recon = plain_head(encode(x_masked, params), params)
    return gc.mean(gc.square(gc.sub(recon, _flat(x))))


SS_VARIANTS = ("plain_ss", "uss_mae", "combined")


def ss_objective(x: Tensor, params: ModelParams, mask_spec: MaskSpec, variant: str) -> Tensor:
    """Self-supervised test-time loss; the encoder pass is shared by both heads."""
    if variant not in SS_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    x_masked, _ = apply_mask(x, mask_spec)
    z = encode(x_masked, params)
    target = _flat(x)
    terms = []
    if variant in ("uss_mae", "combined"):
        recon, log_var = ss_head(z, params)
        terms.append(nll_gaussian(GaussianPrediction(recon, log_var), target))
    if variant in ("plain_ss", "combined"):
        terms.append(gc.mean(gc.square(gc.sub(plain_head(z, params), target))))
    return terms[0] if len(terms) == 1 else gc.add(terms[0], terms[1])


def smoothness(d: Tensor, x: Tensor) -> Tensor:
    """Edge-aware smoothness of mean-normalized depth ``d`` guided by image ``x``.

    Both arguments are square images (flat inputs are reshaped). Each
    direction is averaged over its valid difference positions.
    """
    n = _edge(d)
    d = gc.reshape(d, (n, n))
    xi = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).reshape(n, n)
    if np.any(d.data <= 0):
        raise DomainError("smoothness: depth must be positive")
    d_norm = gc.div(d, gc.mean(d))
    dx = gc.abs_(gc.sub(d_norm[:, 1:], d_norm[:, :-1]))
    dy = gc.abs_(gc.sub(d_norm[1:, :], d_norm[:-1, :]))
    wx = Tensor(np.exp(-np.abs(xi[:, 1:] - xi[:, :-1])))
    wy = Tensor(np.exp(-np.abs(xi[1:, :] - xi[:-1, :])))
    return gc.add(gc.mean(gc.mul(dx, wx)), gc.mean(gc.mul(dy, wy)))


def loss_task(y_hat: Tensor, y: Tensor, x: Tensor, w: LossWeights) -> Tensor:
    """Supervised L1 plus weighted edge-aware smoothness."""
    l1 = gc.mean(gc.abs_(gc.sub(y_hat, _flat(y))))
    if w.smooth_weight == 0.0:
        return l1
    return gc.add(l1, gc.mul(smoothness(y_hat, x), w.smooth_weight))


def loss_joint(x: Tensor, y: Tensor, params: ModelParams, w: LossWeights, mask_spec: MaskSpec,
               include_plain: bool = False) -> Tensor:
    """lambda1 * L_uSS + lambda2 * L_T (+ lambda1 * plain_weight * L_recon)."""
    y_hat = task_head(encode(x, params), params)
    total = gc.add(gc.mul(loss_uss(x, params, mask_spec), w.lambda1),
                   gc.mul(loss_task(y_hat, y, x, w), w.lambda2))
    if include_plain:
        total = gc.add(total, gc.mul(loss_recon_plain(x, params, mask_spec), w.lambda1 * w.plain_weight))
    return total


def gaussian_entropy(pred: GaussianPrediction) -> float:
    """Mean per-pixel differential entropy 0.5 * ln(2 pi e var)."""
    return HALF_LOG_2PI_E + 0.5 * float(np.mean(pred.log_var.data))


def entropy_from_variance(variance) -> float:
    var = np.asarray(variance, dtype=np.float64)
    if np.any(var <= 0):
        raise DomainError("entropy: variance must be positive")
    return HALF_LOG_2PI_E + 0.5 * float(np.mean(np.log(var)))


def _flat(x: Tensor) -> Tensor:
    return x if x.data.ndim == 1 else gc.reshape(x, (x.data.size,))


def _edge(t: Tensor) -> int:
    n = int(round(math.sqrt(t.data.size)))
    if n * n != t.data.size:
        raise gc.ShapeError(f"expected a square image, got {t.data.size} values")
    return n


__all__ = [
    "EDGE", "GaussianPrediction", "LossWeights", "entropy_from_variance", "gaussian_entropy",
    "loss_joint", "loss_recon_plain", "loss_task", "loss_uss", "nll_gaussian", "smoothness",
    "ss_prediction",
]
