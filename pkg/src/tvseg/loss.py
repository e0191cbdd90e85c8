"""Segmentation losses with analytic gradients w.r.t. the logits.

All losses take a :class:`~tvseg.model.PredictionMap` (softmax over the
channel axis) and integer labels of shape ``(n, h, w)``. Every function
returns ``(value, grad_wrt_logits)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError, LabelError
from .model import PredictionMap

KINDS = ("BCE", "BCE+DSC", "BCE+DSC+TV", "BCE+TV")
WEIGHT_POLICIES = ("uniform", "class-balanced")
DICE_SMOOTH = 1.0


@dataclass
class LossConfig:
    kind: str = "BCE+TV"
    lam: float = 1e-4
    weight_policy: str = "uniform"
    tv_smoothing_eps: float = 1e-6
    # divide each plane's TV by its pixel count so lam is comparable to mean CE
    tv_normalize: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"loss kind must be one of {KINDS}, got {self.kind!r}")
        if self.weight_policy not in WEIGHT_POLICIES:
            raise ConfigError(f"weight_policy must be one of {WEIGHT_POLICIES}, got {self.weight_policy!r}")
        if not self.lam >= 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if not self.tv_smoothing_eps >= 0:
            raise ConfigError(f"tv_smoothing_eps must be >= 0, got {self.tv_smoothing_eps}")

    @property
    def terms(self) -> tuple[str, ...]:
        return tuple(self.kind.split("+"))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown LossConfig fields: {sorted(unknown)}")
        return cls(**d)


def check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DimensionError(f"labels must have shape (n, h, w), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), found range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp)


def pixel_weights(labels, policy: str = "uniform", num_classes: int = 2) -> np.ndarray:
    """Per-pixel weight map. ``class-balanced`` uses ``1 / (K * frequency)`` of the pixel's class."""
    labels = np.asarray(labels)
    if policy == "uniform":
        return np.ones(labels.shape)
    if policy != "class-balanced":
        raise ConfigError(f"unknown weight policy {policy!r}")
    counts = np.bincount(labels.reshape(-1), minlength=num_classes).astype(np.float64)
    present = counts > 0
    per_class = np.zeros(num_classes)
    per_class[present] = labels.size / (present.sum() * counts[present])
    return per_class[labels]


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    return np.moveaxis(np.eye(k)[labels], -1, 1)


def _check_pred(pred: PredictionMap, labels: np.ndarray) -> np.ndarray:
    k = pred.probs.shape[1]
    labels = check_labels(labels, k)
    n, _, h, w = pred.probs.shape
    if labels.shape != (n, h, w):
        raise DimensionError(f"labels shape {labels.shape} does not match predictions {pred.probs.shape}")
    return labels


def _fg_grad_to_logits(pred: PredictionMap, g_fg: np.ndarray) -> np.ndarray:
    """Chain a gradient on the foreground probability plane through the softmax."""
    p = pred.probs
    f = pred.foreground_index
    pf = p[:, f]
    g = -(g_fg * pf)[:, None] * p
    g[:, f] += g_fg * pf
    return g


def weighted_ce(pred: PredictionMap, labels, weights=None):
    """Pixel-averaged weighted negative log-likelihood of the true class."""
    labels = _check_pred(pred, labels)
    n, k, h, w = pred.probs.shape
    omega = np.ones(labels.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    if omega.shape != labels.shape:
        raise DimensionError(f"weights shape {omega.shape} does not match labels {labels.shape}")
    count = labels.size
    log_p = np.take_along_axis(pred.log_probs, labels[:, None], axis=1)[:, 0]
    value = -float(np.sum(omega * log_p)) / count
    grad = (pred.probs - _onehot(labels, k)) * (omega / count)[:, None]
    return value, grad


def dice_loss(pred: PredictionMap, labels):
    """Soft Dice loss on the foreground plane, pooled over the whole batch."""
    labels = _check_pred(pred, labels)
    if pred.probs.shape[1] != 2:
        raise DimensionError(f"dice_loss needs K = 2, got {pred.probs.shape[1]}")
    pf = pred.foreground
    y = (labels == pred.foreground_index).astype(np.float64)
    num = 2.0 * np.sum(pf * y) + DICE_SMOOTH
    den = np.sum(pf) + np.sum(y) + DICE_SMOOTH
    value = 1.0 - num / den
    g_fg = -(2.0 * y * den - num) / den**2
    return float(value), _fg_grad_to_logits(pred, g_fg)


def tv1d(y) -> float:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size < 1:
        raise DimensionError(f"tv1d needs a non-empty vector, got shape {y.shape}")
    return float(np.abs(np.diff(y)).sum())


def _abs_smooth(t, eps):
    if eps == 0:
        return np.abs(t)
    return np.sqrt(t * t + eps * eps) - eps


def _abs_smooth_grad(t, eps):
    if eps == 0:
        return np.sign(t)
    return t / np.sqrt(t * t + eps * eps)


def tv2d_aniso(plane, smoothing_eps: float = 0.0):
    """Anisotropic TV over the last two axes; in-bounds neighbour pairs only.

    With ``smoothing_eps > 0`` each ``|t|`` becomes ``sqrt(t^2 + eps^2) - eps``.
    A 2-D input yields a float, a stack of planes yields one value per plane.
    """
    y = np.asarray(plane, dtype=np.float64)
    if y.ndim < 2:
        raise DimensionError(f"tv2d_aniso needs at least 2 dims, got shape {y.shape}")
    tv = (_abs_smooth(np.diff(y, axis=-2), smoothing_eps).sum(axis=(-2, -1))
          + _abs_smooth(np.diff(y, axis=-1), smoothing_eps).sum(axis=(-2, -1)))
    return float(tv) if y.ndim == 2 else tv


def tv2d_grad(plane, smoothing_eps: float = 0.0) -> np.ndarray:
    """(Sub)gradient of :func:`tv2d_aniso`; ``sign(0) = 0`` in the exact mode."""
    if smoothing_eps < 0:
        raise ValueError("smoothing_eps must be >= 0")
    y = np.asarray(plane, dtype=np.float64)
    g = np.zeros_like(y)
    sv = _abs_smooth_grad(np.diff(y, axis=-2), smoothing_eps)
    sh = _abs_smooth_grad(np.diff(y, axis=-1), smoothing_eps)
    g[..., 1:, :] += sv
    g[..., :-1, :] -= sv
    g[..., :, 1:] += sh
    g[..., :, :-1] -= sh
    return g


def tv_term(pred: PredictionMap, lam: float, smoothing_eps: float, normalize: bool = True):
    """``lam * mean_b TV(M_b)`` over the foreground planes, optionally per pixel."""
    m = pred.foreground
    n, h, w = m.shape
    scale = lam / n / (h * w if normalize else 1)
    value = scale * float(np.sum(tv2d_aniso(m, smoothing_eps)))
    g_fg = scale * tv2d_grad(m, smoothing_eps)
    return value, _fg_grad_to_logits(pred, g_fg)


def total_loss(config: LossConfig, pred: PredictionMap, labels, weights=None):
    """Sum of the terms selected by ``config.kind``.

    Returns ``(value, grad_wrt_logits, components)``; ``components`` holds the
    already-weighted value of each term and ``value == sum(components.values())``.
    """
    labels = _check_pred(pred, labels)
    if weights is None:
        weights = pixel_weights(labels, config.weight_policy, pred.probs.shape[1])
    components = {}
    ce, grad = weighted_ce(pred, labels, weights)
    components["ce"] = ce
    if "DSC" in config.terms:
        d, g = dice_loss(pred, labels)
        components["dice"] = d
        grad = grad + g
    if "TV" in config.terms:
        t, g = tv_term(pred, config.lam, config.tv_smoothing_eps, config.tv_normalize)
        components["tv"] = t
        grad = grad + g
    return sum(components.values()), grad, components
