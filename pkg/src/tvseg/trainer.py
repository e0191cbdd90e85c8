"""Training loop: model + loss + optimizer + plateau schedule, with per-epoch logging."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics as M
from . import model as net
from . import optim
from .data import Dataset, batch_iter, derive_seed
from .errors import ConfigError, DimensionError, NotComputable, TrainingError
from .loss import LossConfig, pixel_weights, total_loss

log = logging.getLogger(__name__)


@dataclass
class DataConfig:
    """Where training data comes from; only consulted by the CLI."""

    source: str = "synth"              # "synth" | "dir"
    path: str | None = None            # dataset root (images/, masks/, groups.csv) for "dir"
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40
    noise_sigma: float = 0.05
    blob_count_range: tuple[int, int] = (1, 3)
    split: str = "fraction"            # "fraction" | "manifest" | "group"
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    manifest: str | None = None
    group_assignment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in ("synth", "dir"):
            raise ConfigError(f"data.source must be 'synth' or 'dir', got {self.source!r}")
        if self.source == "dir" and not self.path:
            raise ConfigError("data.path is required when data.source is 'dir'")
        if self.split not in ("fraction", "manifest", "group"):
            raise ConfigError(f"data.split must be fraction, manifest or group, got {self.split!r}")
        if self.split == "manifest" and not self.manifest:
            raise ConfigError("data.manifest is required when data.split is 'manifest'")
        self.blob_count_range = tuple(self.blob_count_range)
        self.fractions = tuple(self.fractions)


@dataclass
class TrainConfig:
    unet: net.UNetConfig = field(default_factory=net.UNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: optim.OptimizerSpec = field(default_factory=optim.OptimizerSpec)
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    eval_threshold: float = 0.5
    test_threshold: float = 0.3
    checkpoint: str | None = None
    scheduler: bool = True
    decay_factor: float = 0.5
    plateau_patience: int = 5
    stop_patience: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("eval_threshold", "test_threshold"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet"] = self.unet.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kw = dict(d)
        nested = {"unet": net.UNetConfig.from_dict, "loss": LossConfig.from_dict,
                  "optimizer": optim.OptimizerSpec.from_dict, "data": _data_from_dict}
        for key, make in nested.items():
            if key in kw:
                if not isinstance(kw[key], dict):
                    raise ConfigError(f"{key}: expected an object")
                try:
                    kw[key] = make(kw[key])
                except TypeError as e:
                    raise ConfigError(f"{key}: {e}") from e
        try:
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _data_from_dict(d: dict) -> DataConfig:
    unknown = set(d) - {f.name for f in fields(DataConfig)}
    if unknown:
        raise ConfigError(f"unknown data fields: {sorted(unknown)}")
    return DataConfig(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_precision: float
    train_recall: float
    val_precision: float
    val_recall: float
    lr: float
    action: str
    train_ce: float = 0.0
    train_dice: float = 0.0
    train_tv: float = 0.0
    val_ce: float = 0.0
    val_dice: float = 0.0
    val_tv: float = 0.0
    wall_time: float = 0.0  # excluded from history.csv so that file stays reproducible


HISTORY_COLUMNS = [f.name for f in fields(EpochRecord) if f.name != "wall_time"]


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history:
        row = []
        for c in HISTORY_COLUMNS:
            v = getattr(r, c)
            row.append(v if isinstance(v, (int, str)) else repr(float(v)))
        w.writerow(row)
    return buf.getvalue()


@dataclass
class FitResult:
    params: dict
    best_params: dict
    history: list[EpochRecord]
    stop_reason: str  # "completed" | "early_stopped"


def _loss_and_grads(config: TrainConfig, params, batch):
    logits, tape = net.forward(params, config.unet, batch.images, record_tape=True)
    pred = net.PredictionMap.from_logits(logits, config.unet.foreground_index)
    w = pixel_weights(batch.labels, config.loss.weight_policy, config.unet.num_classes)
    value, g_logits, comps = total_loss(config.loss, pred, batch.labels, w)
    return value, comps, pred, net.backward(tape, g_logits)


def _fg_truth(labels, config: TrainConfig) -> np.ndarray:
    return np.asarray(labels) == config.unet.foreground_index


def evaluate_loss(params, config: TrainConfig, dataset: Dataset, batch_size: int = 16):
    """Sample-weighted mean loss and components, plus pooled confusion at ``eval_threshold``."""
    total, comps_sum, conf = 0.0, {}, M.Confusion()
    for b in batch_iter(dataset, batch_size=batch_size):
        pred = net.predict(params, config.unet, b.images)
        w = pixel_weights(b.labels, config.loss.weight_policy, config.unet.num_classes)
        value, _, comps = total_loss(config.loss, pred, b.labels, w)
        n = len(b.names)
        total += value * n
        for k, v in comps.items():
            comps_sum[k] = comps_sum.get(k, 0.0) + v * n
        conf = conf + M.confusion(M.binarize(pred.foreground, config.eval_threshold), _fg_truth(b.labels, config))
    n = max(len(dataset), 1)
    return total / n, {k: v / n for k, v in comps_sum.items()}, conf


def fit(config: TrainConfig, train_set: Dataset, val_set: Dataset, run_dir=None, params=None) -> FitResult:
    """Train from ``config.seed``; writes best/last checkpoints when ``run_dir`` is given.

    RNG streams: ``init`` for weights, ``shuffle/<epoch>`` for batch order,
    both derived from the master seed with :func:`tvseg.data.derive_seed`.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    for s in (train_set[0], val_set[0]):
        if s.image.shape != tuple(config.unet.input_size):
            raise DimensionError(f"sample {s.name} has shape {s.image.shape}, config expects {config.unet.input_size}")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    if params is None:
        params = net.build(config.unet, derive_seed(config.seed, "init"))
    best_params = params
    opt_state = optim.OptimizerState()
    schedule = optim.ScheduleState(config.optimizer.lr, factor=config.decay_factor,
                                   plateau_patience=config.plateau_patience, stop_patience=config.stop_patience)
    history = []
    stop_reason = "completed"
    best_val = math.inf
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        spec = optim.OptimizerSpec(**{**config.optimizer.to_dict(), "lr": schedule.lr})
        lr_used = schedule.lr
        tr_loss, tr_comps, tr_conf, seen = 0.0, {}, M.Confusion(), 0
        batches = batch_iter(train_set, batch_size=config.batch_size,
                             shuffle_seed=derive_seed(config.seed, f"shuffle/{epoch}"))
        for bi, batch in enumerate(batches):
            value, comps, pred, grads = _loss_and_grads(config, params, batch)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            try:
                params, opt_state = optim.step(spec, opt_state, params, grads)
            except TrainingError as e:
                raise TrainingError(f"epoch {epoch}, batch {bi}: {e}") from e
            n = len(batch.names)
            seen += n
            tr_loss += value * n
            for k, v in comps.items():
                tr_comps[k] = tr_comps.get(k, 0.0) + v * n
            tr_conf = tr_conf + M.confusion(M.binarize(pred.foreground, config.eval_threshold),
                                            _fg_truth(batch.labels, config))
        val_loss, val_comps, val_conf = evaluate_loss(params, config, val_set)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < best_val:
            best_val = val_loss
            best_params = params
            if run_dir is not None:
                net.save_checkpoint(run_dir / "best.ckpt", params, config.unet)
        action = optim.CONTINUE
        if config.scheduler:
            schedule, action = optim.end_of_epoch(schedule, val_loss)
        rec = EpochRecord(
            epoch=epoch,
            train_loss=tr_loss / seen,
            val_loss=val_loss,
            train_precision=M.precision(tr_conf),
            train_recall=M.recall(tr_conf),
            val_precision=M.precision(val_conf),
            val_recall=M.recall(val_conf),
            lr=lr_used,
            action=action,
            train_ce=tr_comps.get("ce", 0.0) / seen,
            train_dice=tr_comps.get("dice", 0.0) / seen,
            train_tv=tr_comps.get("tv", 0.0) / seen,
            val_ce=val_comps.get("ce", 0.0),
            val_dice=val_comps.get("dice", 0.0),
            val_tv=val_comps.get("tv", 0.0),
            wall_time=time.perf_counter() - t0,
        )
        history.append(rec)
        log.info("epoch %d train %.5f val %.5f lr %.2e %s (%.1fs)",
                 epoch, rec.train_loss, rec.val_loss, rec.lr, action, rec.wall_time)
        if action == optim.STOP:
            stop_reason = "early_stopped"
            break
    if run_dir is not None:
        net.save_checkpoint(run_dir / "last.ckpt", params, config.unet)
        (run_dir / "history.csv").write_text(history_csv(history))
        (run_dir / "timing.csv").write_text(
            "epoch,wall_time\n" + "".join(f"{r.epoch},{r.wall_time:.3f}\n" for r in history))
    if config.checkpoint:
        net.save_checkpoint(config.checkpoint, best_params, config.unet)
    return FitResult(params, best_params, history, stop_reason)


@dataclass
class EvalResult:
    reports: list
    curve: M.PRCurve | None
    average_precision: float | None
    probs: np.ndarray


def predict_dataset(params, unet: net.UNetConfig, dataset: Dataset) -> np.ndarray:
    if len(dataset) and dataset[0].image.shape != tuple(unet.input_size):
        raise ConfigError(f"dataset images are {dataset[0].image.shape}, checkpoint expects {unet.input_size}")
    return net.predict_batched(params, unet, dataset.images())


def evaluate(params, unet: net.UNetConfig, dataset: Dataset, thresholds=M.DEFAULT_THRESHOLDS) -> EvalResult:
    """Threshold sweep plus pooled PR curve on ``dataset``."""
    net.check_params(params, unet)
    probs = predict_dataset(params, unet, dataset)
    gts = [s.mask.astype(bool) for s in dataset]
    reports = M.threshold_sweep(list(probs), gts, thresholds)
    try:
        curve = M.pr_curve(list(probs), gts)
        ap = M.average_precision(curve)
    except NotComputable:
        curve, ap = None, None
    return EvalResult(reports, curve, ap, probs)


def mean_component_count(probs, threshold: float = 0.5) -> float:
    counts = [M.connected_components(M.binarize(p, threshold))[0] for p in probs]
    return float(np.mean(counts)) if counts else 0.0
