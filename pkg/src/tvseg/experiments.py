"""Scaled-down experiments shared by ``scripts/`` and the acceptance tests.

``desk_scale`` trains a BCE U-Net on clean synthetic blobs. ``tv_sweep``
trains the same small model on a noisy variant for several TV weights and
seeds and reports predicted-mask fragmentation next to test Dice.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import model as net
from . import optim
from . import trainer as tr
from .loss import LossConfig
from .metrics import connected_components


@dataclass
class DeskScale:
    size: int = 64
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40
    noise_sigma: float = 0.05
    base_channels: int = 8
    depth: int = 3
    batch_size: int = 8
    epochs: int = 30
    lr: float = 1e-3
    threshold: float = 0.5
    seed: int = 0


def synth_splits(n_train, n_val, n_test, size, noise_sigma, seed):
    ds = D.synth_blobs(n_train + n_val + n_test, size, noise_sigma=noise_sigma, seed=D.derive_seed(seed, "synth"))
    s = ds.samples
    return D.Dataset(s[:n_train]), D.Dataset(s[n_train:n_train + n_val]), D.Dataset(s[n_train + n_val:])


def desk_scale(cfg: DeskScale = DeskScale(), run_dir=None) -> dict:
    train, val, test = synth_splits(cfg.n_train, cfg.n_val, cfg.n_test, cfg.size, cfg.noise_sigma, cfg.seed)
    config = tr.TrainConfig(
        unet=net.UNetConfig(depth=cfg.depth, base_channels=cfg.base_channels, input_size=(cfg.size, cfg.size)),
        loss=LossConfig(kind="BCE"),
        optimizer=optim.OptimizerSpec(kind="ADAM", lr=cfg.lr),
        epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed,
    )
    t0 = time.perf_counter()
    result = tr.fit(config, train, val, run_dir=run_dir)
    seconds = time.perf_counter() - t0
    ev = tr.evaluate(result.best_params, config.unet, test, [cfg.threshold])
    return {
        "dice": ev.reports[0].dice,
        "epochs_run": len(result.history),
        "stop_reason": result.stop_reason,
        "train_seconds": seconds,
        "average_precision": ev.average_precision,
    }


@dataclass
class TVSweep:
    size: int = 32
    n_train: int = 60
    n_val: int = 10
    n_test: int = 30
    noise_sigma: float = 0.5
    base_channels: int = 8
    depth: int = 3
    batch_size: int = 8
    epochs: int = 20
    lr: float = 1e-3
    threshold: float = 0.5
    lams: tuple = (0.0, 1e-5, 1e-4, 1e-3)
    seeds: tuple = (0, 1, 2, 3, 4)
    tv_normalize: bool = True


def tv_run(cfg: TVSweep, lam: float, seed: int) -> dict:
    train, val, test = synth_splits(cfg.n_train, cfg.n_val, cfg.n_test, cfg.size, cfg.noise_sigma, seed)
    loss = LossConfig(kind="BCE+TV", lam=lam, tv_normalize=cfg.tv_normalize) if lam > 0 else LossConfig(kind="BCE")
    config = tr.TrainConfig(
        unet=net.UNetConfig(depth=cfg.depth, base_channels=cfg.base_channels, input_size=(cfg.size, cfg.size)),
        loss=loss,
        optimizer=optim.OptimizerSpec(kind="ADAM", lr=cfg.lr),
        epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed, scheduler=False,
    )
    result = tr.fit(config, train, val)
    ev = tr.evaluate(result.best_params, config.unet, test, [cfg.threshold])
    gt_cc = float(np.mean([connected_components(m)[0] for m in test.masks()]))
    return {
        "lam": lam,
        "seed": seed,
        "components": tr.mean_component_count(ev.probs, cfg.threshold),
        "gt_components": gt_cc,
        "dice": ev.reports[0].dice,
    }


def tv_sweep(cfg: TVSweep = TVSweep(), progress=None) -> list[dict]:
    """Per-lambda means over seeds: ``lam, components, dice, gt_components`` plus the raw runs."""
    rows = []
    for lam in cfg.lams:
        runs = []
        for seed in cfg.seeds:
            runs.append(tv_run(cfg, lam, seed))
            if progress:
                progress(runs[-1])
        rows.append({
            "lam": lam,
            "components": float(np.mean([r["components"] for r in runs])),
            "dice": float(np.mean([r["dice"] for r in runs])),
            "gt_components": float(np.mean([r["gt_components"] for r in runs])),
            "runs": runs,
        })
    return rows


def tv_effect_holds(rows: list[dict], dice_slack: float = 0.02) -> tuple[bool, list[float]]:
    """True if some lambda > 0 fragments no more than lambda = 0 and keeps Dice within ``dice_slack``."""
    base = next(r for r in rows if r["lam"] == 0)
    winners = [r["lam"] for r in rows if r["lam"] > 0
               and r["components"] <= base["components"] and r["dice"] >= base["dice"] - dice_slack]
    return bool(winners), winners
