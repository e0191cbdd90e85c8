"""Finite-difference checks of every hand-written backward pass.

Each check draws a random instance from ``seed``, contracts the layer output
with a random cotangent to get a scalar, and compares the analytic gradient
with :func:`tvseg.tensor.finite_diff_grad`. Inputs are kept at least
``KINK_MARGIN`` away from ReLU zeros and max-pool ties so the finite
differences never straddle a kink.
"""
from __future__ import annotations

import numpy as np

from . import loss as L
from . import model as net
from . import tensor as T

STEP = 1e-5
KINK_MARGIN = 1e-3


def rel_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    b = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _away_from_zero(x):
    return np.where(x >= 0, x + KINK_MARGIN, x - KINK_MARGIN)


def _untied(rng, shape):
    # distinct values spaced 10 * margin apart, randomly placed
    n = int(np.prod(shape))
    return (rng.permutation(n) * 10 * KINK_MARGIN - n * 5 * KINK_MARGIN).reshape(shape)


def check_conv2d(seed: int, corrupt: bool = False) -> float:
    rng = np.random.default_rng(seed)
    kh, kw = rng.integers(1, 4, size=2)
    pad = int(rng.integers(0, 2))
    x = rng.normal(size=(2, 2, 5, 4))
    k = T.ConvKernel(rng.normal(size=(3, 2, kh, kw)), rng.normal(size=3))
    g = rng.normal(size=T.conv2d(x, k, pad).shape)
    gx, gk = T.conv2d_backward(x, k, g, pad)
    if corrupt:
        gx = gx * (1 + 1e-3)
    fx = T.finite_diff_grad(lambda z: np.sum(T.conv2d(z, k, pad) * g), x, STEP)
    fw = T.finite_diff_grad(lambda w: np.sum(T.conv2d(x, T.ConvKernel(w, k.bias), pad) * g), k.weights, STEP)
    fb = T.finite_diff_grad(lambda b: np.sum(T.conv2d(x, T.ConvKernel(k.weights, b), pad) * g), k.bias, STEP)
    return max(rel_error(gx, fx), rel_error(gk.weights, fw), rel_error(gk.bias, fb))


def check_maxpool2(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _untied(rng, (2, 2, 4, 6))
    out, idx = T.maxpool2(x)
    g = rng.normal(size=out.shape)
    gx = T.maxpool2_backward(idx, g, x.shape)
    fx = T.finite_diff_grad(lambda z: np.sum(T.maxpool2(z)[0] * g), x, STEP)
    return rel_error(gx, fx)


def check_upconv2(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 3, 2))
    k = T.ConvKernel(rng.normal(size=(2, 3, 2, 2)), rng.normal(size=2))
    g = rng.normal(size=(2, 2, 6, 4))
    gx, gk = T.upconv2_backward(x, k, g)
    fx = T.finite_diff_grad(lambda z: np.sum(T.upconv2(z, k) * g), x, STEP)
    fw = T.finite_diff_grad(lambda w: np.sum(T.upconv2(x, T.ConvKernel(w, k.bias)) * g), k.weights, STEP)
    fb = T.finite_diff_grad(lambda b: np.sum(T.upconv2(x, T.ConvKernel(k.weights, b)) * g), k.bias, STEP)
    return max(rel_error(gx, fx), rel_error(gk.weights, fw), rel_error(gk.bias, fb))


def check_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng.normal(size=(2, 3, 4, 4)))
    g = rng.normal(size=x.shape)
    fx = T.finite_diff_grad(lambda z: np.sum(T.relu(z) * g), x, STEP)
    return rel_error(T.relu_backward(x, g), fx)


def check_concat(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=(2, 3, 3, 3))
    g = rng.normal(size=(2, 5, 3, 3))
    ga, gb = T.split_channels(g, 2)
    fa = T.finite_diff_grad(lambda z: np.sum(T.concat_channels(z, b) * g), a, STEP)
    fb = T.finite_diff_grad(lambda z: np.sum(T.concat_channels(a, z) * g), b, STEP)
    return max(rel_error(ga, fa), rel_error(gb, fb))


def _loss_check(seed: int, fn) -> float:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 2, 5, 5))
    labels = rng.integers(0, 2, size=(2, 5, 5))

    def value(z):
        return fn(net.PredictionMap.from_logits(z), labels)[0]

    _, g = fn(net.PredictionMap.from_logits(logits), labels)
    return rel_error(g, T.finite_diff_grad(value, logits, STEP))


def check_weighted_ce(seed: int) -> float:
    w = np.random.default_rng(seed + 10_000).uniform(0.5, 2.0, size=(2, 5, 5))
    return _loss_check(seed, lambda p, y: L.weighted_ce(p, y, w))


def check_dice(seed: int) -> float:
    return _loss_check(seed, L.dice_loss)


def check_tv(seed: int) -> float:
    cfg = L.LossConfig(kind="BCE+TV", lam=0.5, tv_smoothing_eps=1e-6)
    return _loss_check(seed, lambda p, y: L.tv_term(p, cfg.lam, cfg.tv_smoothing_eps))


def check_total_loss(seed: int) -> float:
    cfg = L.LossConfig(kind="BCE+DSC+TV", lam=0.5, tv_smoothing_eps=1e-6)
    return _loss_check(seed, lambda p, y: L.total_loss(cfg, p, y)[:2])


TINY = net.UNetConfig(in_channels=1, num_classes=2, depth=2, base_channels=2, input_size=(4, 4))


def check_network(seed: int, config: net.UNetConfig = TINY) -> float:
    """Loss-through-network check over every parameter of a tiny U-Net."""
    rng = np.random.default_rng(seed)
    params = net.build(config, seed)
    for k in params.values():
        k.bias[:] = rng.normal(scale=0.1, size=k.bias.shape)
    x = rng.normal(size=(2, config.in_channels, *config.input_size))
    labels = rng.integers(0, config.num_classes, size=(2, *config.input_size))
    cfg = L.LossConfig(kind="BCE+DSC+TV", lam=0.5, tv_smoothing_eps=1e-3)

    def loss_of(p):
        logits, _ = net.forward(p, config, x)
        return L.total_loss(cfg, net.PredictionMap.from_logits(logits), labels)[0]

    logits, tape = net.forward(params, config, x, record_tape=True)
    _, g, _ = L.total_loss(cfg, net.PredictionMap.from_logits(logits), labels)
    grads = net.backward(tape, g)
    worst = 0.0
    for name, k in params.items():
        def with_w(w, name=name, k=k):
            return loss_of({**params, name: T.ConvKernel(w, k.bias)})

        def with_b(b, name=name, k=k):
            return loss_of({**params, name: T.ConvKernel(k.weights, b)})

        worst = max(worst,
                    rel_error(grads[name].weights, T.finite_diff_grad(with_w, k.weights, STEP)),
                    rel_error(grads[name].bias, T.finite_diff_grad(with_b, k.bias, STEP)))
    return worst


LAYER_CHECKS = {
    "conv2d": check_conv2d,
    "maxpool2": check_maxpool2,
    "upconv2": check_upconv2,
    "relu": check_relu,
    "concat_channels": check_concat,
}
LOSS_CHECKS = {
    "weighted_ce": check_weighted_ce,
    "dice_loss": check_dice,
    "tv_term": check_tv,
    "total_loss": check_total_loss,
}
LAYER_TOL, LOSS_TOL, NETWORK_TOL = 1e-5, 1e-6, 1e-4


def run_all(seed: int = 0, n_seeds: int = 20, network_seeds: int = 5, corrupt: bool = False) -> list[tuple[str, float, float]]:
    """``(name, max relative error, tolerance)`` for each layer type, loss and the network."""
    rows = []
    for name, fn in LAYER_CHECKS.items():
        if name == "conv2d":
            err = max(fn(seed + i, corrupt=corrupt) for i in range(n_seeds))
        else:
            err = max(fn(seed + i) for i in range(n_seeds))
        rows.append((name, err, LAYER_TOL))
    for name, fn in LOSS_CHECKS.items():
        rows.append((name, max(fn(seed + i) for i in range(n_seeds)), LOSS_TOL))
    rows.append(("unet", max(check_network(seed + i) for i in range(network_seeds)), NETWORK_TOL))
    return rows
