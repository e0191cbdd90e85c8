"""SGD / Adam / Adagrad / Adadelta updates and the plateau schedule.

Updates are functional: ``step`` returns fresh parameter and state objects
and never mutates its inputs. Parameters are a mapping of name to either an
``ndarray`` or a :class:`~tvseg.tensor.ConvKernel`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, TrainingError
from .tensor import ConvKernel

KINDS = ("ADAM", "SGD", "Adagrad", "Adadelta")


@dataclass
class OptimizerSpec:
    kind: str = "ADAM"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    adagrad_eps: float = 1e-8
    rho: float = 0.95
    adadelta_eps: float = 1e-6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"optimizer kind must be one of {KINDS}, got {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2", "rho"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        for name in ("adam_eps", "adagrad_eps", "adadelta_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown OptimizerSpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    step: int = 0
    slots: dict = field(default_factory=dict)  # "<param>/<slot>" -> ndarray


def _flatten(tree) -> dict[str, np.ndarray]:
    flat = {}
    for name, v in tree.items():
        if isinstance(v, ConvKernel):
            flat[f"{name}.weights"] = v.weights
            flat[f"{name}.bias"] = v.bias
        else:
            flat[name] = np.asarray(v, dtype=np.float64)
    return flat


def _unflatten(like, flat: dict[str, np.ndarray]):
    out = {}
    for name, v in like.items():
        if isinstance(v, ConvKernel):
            out[name] = ConvKernel(flat[f"{name}.weights"], flat[f"{name}.bias"])
        else:
            out[name] = flat[name]
    return out


def step(spec: OptimizerSpec, state: OptimizerState, params, grads):
    """One optimizer update. Returns ``(new_params, new_state)``."""
    p_flat = _flatten(params)
    g_flat = _flatten(grads)
    if set(p_flat) != set(g_flat):
        raise ConfigError("gradient structure does not match parameters")
    t = state.step + 1
    slots = {}
    new = {}
    for key, p in p_flat.items():
        g = g_flat[key]
        if g.shape != p.shape:
            raise ConfigError(f"{key}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in layer {key.rsplit('.', 1)[0]}")
        if spec.kind == "SGD":
            new[key] = p - spec.lr * g
        elif spec.kind == "ADAM":
            m = spec.beta1 * state.slots.get(f"{key}/m", 0.0) + (1 - spec.beta1) * g
            v = spec.beta2 * state.slots.get(f"{key}/v", 0.0) + (1 - spec.beta2) * g * g
            m_hat = m / (1 - spec.beta1**t)
            v_hat = v / (1 - spec.beta2**t)
            new[key] = p - spec.lr * m_hat / (np.sqrt(v_hat) + spec.adam_eps)
            slots[f"{key}/m"], slots[f"{key}/v"] = m, v
        elif spec.kind == "Adagrad":
            acc = state.slots.get(f"{key}/sum_sq", 0.0) + g * g
            new[key] = p - spec.lr * g / (np.sqrt(acc) + spec.adagrad_eps)
            slots[f"{key}/sum_sq"] = acc
        else:  # Adadelta
            eg = spec.rho * state.slots.get(f"{key}/avg_sq_grad", 0.0) + (1 - spec.rho) * g * g
            edx = state.slots.get(f"{key}/avg_sq_delta", np.zeros_like(p))
            delta = np.sqrt(edx + spec.adadelta_eps) / np.sqrt(eg + spec.adadelta_eps) * g
            new[key] = p - spec.lr * delta
            slots[f"{key}/avg_sq_grad"] = eg
            slots[f"{key}/avg_sq_delta"] = spec.rho * edx + (1 - spec.rho) * delta * delta
    slots = {k: np.asarray(v, dtype=np.float64) for k, v in slots.items()}
    return _unflatten(params, new), OptimizerState(t, slots)


CONTINUE, DECAY_LR, STOP = "continue", "decay_lr", "stop"


@dataclass(frozen=True)
class ScheduleState:
    lr: float
    best: float = math.inf
    stale: int = 0          # epochs since the last improvement
    since_decay: int = 0    # stale epochs since the last improvement or decay
    factor: float = 0.5
    plateau_patience: int = 5
    stop_patience: int = 10
    tolerance: float = 1e-6

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.factor <= 1:
            raise ConfigError(f"decay factor must lie in (0, 1], got {self.factor}")


def end_of_epoch(schedule: ScheduleState, val_loss: float) -> tuple[ScheduleState, str]:
    """Advance the plateau/early-stop state machine by one validation result.

    Improvement means ``val_loss < best - tolerance``. After
    ``plateau_patience`` stale epochs the lr is multiplied by ``factor`` and
    only the decay counter resets; ``stop`` fires once ``stop_patience``
    consecutive epochs have passed without improvement.
    """
    if not math.isfinite(val_loss):
        raise ValueError(f"validation loss must be finite, got {val_loss}")
    if val_loss < schedule.best - schedule.tolerance:
        return replace(schedule, best=val_loss, stale=0, since_decay=0), CONTINUE
    s = replace(schedule, stale=schedule.stale + 1, since_decay=schedule.since_decay + 1)
    if s.stale >= s.stop_patience:
        return s, STOP
    if s.since_decay >= s.plateau_patience:
        return replace(s, lr=s.lr * s.factor, since_decay=0), DECAY_LR
    return s, CONTINUE
