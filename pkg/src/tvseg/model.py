"""U-Net assembled from the primitives in :mod:`tvseg.tensor`.

Layout for ``depth = d`` and ``c_i = base_channels * 2**i``::

    enc0 .. enc{d-1}   two 3x3 same-padded conv + ReLU each, max-pool between levels
    up{i}, dec{i}      2x2 stride-2 upconv, concat(skip, up), two 3x3 conv + ReLU
    head               1x1 conv to K logits

The last encoder level is the bottleneck. No batch norm or dropout.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, DimensionError, TVSegError
from .tensor import ConvKernel

MAGIC = b"TVSEG1"

UNetParams = dict  # layer name -> ConvKernel, in declaration order


@dataclass
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 2
    depth: int = 3
    base_channels: int = 16
    input_size: tuple[int, int] = (64, 64)
    foreground_index: int = 1

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ConfigError("in_channels and base_channels must be positive")
        if len(self.input_size) != 2:
            raise ConfigError(f"input_size must be (h, w), got {self.input_size}")
        div = 2 ** (self.depth - 1)
        h, w = self.input_size
        if h < div or w < div or h % div or w % div:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 2**(depth-1) = {div}")
        if not 0 <= self.foreground_index < self.num_classes:
            raise ConfigError(f"foreground_index {self.foreground_index} outside [0, {self.num_classes})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown UNetConfig fields: {sorted(unknown)}")
        return cls(**d)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


def layer_shapes(config: UNetConfig) -> dict[str, tuple[int, int, int, int]]:
    """Weight shape of every layer, in declaration order."""
    shapes = {}
    c_in = config.in_channels
    for i in range(config.depth):
        c = config.channels(i)
        shapes[f"enc{i}.conv1"] = (c, c_in, 3, 3)
        shapes[f"enc{i}.conv2"] = (c, c, 3, 3)
        c_in = c
    for i in reversed(range(config.depth - 1)):
        c = config.channels(i)
        shapes[f"up{i}"] = (c, config.channels(i + 1), 2, 2)
        shapes[f"dec{i}.conv1"] = (c, 2 * c, 3, 3)
        shapes[f"dec{i}.conv2"] = (c, c, 3, 3)
    shapes["head"] = (config.num_classes, config.channels(0), 1, 1)
    return shapes


def parameter_count(config: UNetConfig) -> int:
    return sum(int(np.prod(s)) + s[0] for s in layer_shapes(config).values())


def build(config: UNetConfig, seed: int) -> UNetParams:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_shapes(config).items():
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = ConvKernel(w, np.zeros(shape[0]))
    return params


def zeros_like_params(params: UNetParams) -> UNetParams:
    return {k: ConvKernel.zeros_like(v) for k, v in params.items()}


def check_params(params: UNetParams, config: UNetConfig) -> None:
    shapes = layer_shapes(config)
    if list(params) != list(shapes):
        raise DimensionError(f"parameter layers {list(params)} do not match config layers {list(shapes)}")
    for name, shape in shapes.items():
        if params[name].weights.shape != shape:
            raise DimensionError(f"layer {name}: weight shape {params[name].weights.shape}, expected {shape}")


@dataclass
class Tape:
    params: UNetParams
    config: UNetConfig
    input_shape: tuple
    inputs: dict = field(default_factory=dict)    # layer name -> layer input
    pre: dict = field(default_factory=dict)       # layer name -> pre-ReLU activation
    pools: dict = field(default_factory=dict)     # level -> (indices, input shape)


def _conv_relu(x, params, name, tape):
    z = T.conv2d(x, params[name], padding=1)
    if tape is not None:
        tape.inputs[name] = x
        tape.pre[name] = z
    return T.relu(z)


def forward(params: UNetParams, config: UNetConfig, batch, record_tape: bool = False):
    """Returns ``(logits, tape)``; ``tape`` is None unless ``record_tape``."""
    x = T.as_tensor4(batch, "batch")
    if x.shape[1] != config.in_channels or tuple(x.shape[2:]) != config.input_size:
        raise DimensionError(
            f"batch shape {x.shape} does not match config (c={config.in_channels}, size={config.input_size})"
        )
    tape = Tape(params, config, x.shape) if record_tape else None
    skips = []
    for i in range(config.depth):
        if i > 0:
            shape = x.shape
            x, idx = T.maxpool2(x)
            if tape is not None:
                tape.pools[i] = (idx, shape)
        x = _conv_relu(x, params, f"enc{i}.conv1", tape)
        x = _conv_relu(x, params, f"enc{i}.conv2", tape)
        skips.append(x)
    for i in reversed(range(config.depth - 1)):
        if tape is not None:
            tape.inputs[f"up{i}"] = x
        up = T.upconv2(x, params[f"up{i}"])
        x = T.concat_channels(skips[i], up)
        x = _conv_relu(x, params, f"dec{i}.conv1", tape)
        x = _conv_relu(x, params, f"dec{i}.conv2", tape)
    if tape is not None:
        tape.inputs["head"] = x
    logits = T.conv2d(x, params["head"], padding=0)
    return logits, tape


def _conv_relu_backward(g, tape, name, grads, input_grad=True):
    g = T.relu_backward(tape.pre[name], g)
    gx, grads[name] = T.conv2d_backward(tape.inputs[name], tape.params[name], g, padding=1,
                                        input_grad=input_grad)
    return gx


def backward(tape: Tape, grad_logits) -> UNetParams:
    """Parameter gradients of ``<logits, grad_logits>``."""
    if tape is None:
        raise TVSegError("backward needs the tape from forward(..., record_tape=True)")
    config, params = tape.config, tape.params
    grads = {}
    g, grads["head"] = T.conv2d_backward(tape.inputs["head"], params["head"], grad_logits, padding=0)
    skip_grads = {}
    for i in range(config.depth - 1):
        g = _conv_relu_backward(g, tape, f"dec{i}.conv2", grads)
        g = _conv_relu_backward(g, tape, f"dec{i}.conv1", grads)
        g_skip, g_up = T.split_channels(g, config.channels(i))
        skip_grads[i] = g_skip
        g, grads[f"up{i}"] = T.upconv2_backward(tape.inputs[f"up{i}"], params[f"up{i}"], g_up)
    for i in reversed(range(config.depth)):
        if i in skip_grads:
            g = g + skip_grads[i]
        g = _conv_relu_backward(g, tape, f"enc{i}.conv2", grads)
        g = _conv_relu_backward(g, tape, f"enc{i}.conv1", grads, input_grad=i > 0)
        if i > 0:
            idx, shape = tape.pools[i]
            g = T.maxpool2_backward(idx, g, shape)
    return {name: grads[name] for name in params}


@dataclass
class PredictionMap:
    probs: np.ndarray
    log_probs: np.ndarray
    foreground_index: int = 1

    @property
    def foreground(self) -> np.ndarray:
        """``(n, h, w)`` probability plane of the foreground class."""
        return self.probs[:, self.foreground_index]

    @classmethod
    def from_logits(cls, logits, foreground_index: int = 1) -> "PredictionMap":
        log_p = T.log_softmax_channels(logits)
        return cls(np.exp(log_p), log_p, foreground_index)


def predict(params: UNetParams, config: UNetConfig, batch) -> PredictionMap:
    logits, _ = forward(params, config, batch)
    return PredictionMap.from_logits(logits, config.foreground_index)


def predict_batched(params: UNetParams, config: UNetConfig, images, batch_size: int = 16) -> np.ndarray:
    """Foreground planes ``(n, h, w)`` for an ``(n, h, w)`` image stack."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for s in range(0, len(images), batch_size):
        out.append(predict(params, config, images[s:s + batch_size, None]).foreground)
    if not out:
        return np.zeros((0, *config.input_size))
    return np.concatenate(out)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, params: UNetParams, config: UNetConfig) -> None:
    """``TVSEG1`` | u32 LE JSON length | config JSON | per layer: weights then bias, f64 LE."""
    check_params(params, config)
    text = canonical_json(config.to_dict()).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for k in params.values():
        buf.write(k.weights.astype("<f8").tobytes())
        buf.write(k.bias.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[UNetParams, UNetConfig]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not raw.startswith(MAGIC) or len(raw) < len(MAGIC) + 4:
        raise CheckpointError(f"{path}: not a tvseg checkpoint (bad magic)")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    try:
        config = UNetConfig.from_dict(json.loads(raw[pos:pos + n].decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"{path}: invalid embedded config: {e}") from e
    pos += n
    params = {}
    for name, shape in layer_shapes(config).items():
        sizes = (int(np.prod(shape)), shape[0])
        need = 8 * sum(sizes)
        if pos + need > len(raw):
            raise CheckpointError(f"{path}: truncated at layer {name}")
        w = np.frombuffer(raw, "<f8", sizes[0], pos).reshape(shape)
        b = np.frombuffer(raw, "<f8", sizes[1], pos + 8 * sizes[0])
        params[name] = ConvKernel(w.astype(np.float64), b.astype(np.float64))
        pos += need
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes after last layer")
    return params, config
