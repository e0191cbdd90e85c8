"""Hand-built networks and small fixtures shared by the CLI and acceptance tests."""
import json

import numpy as np

from tvseg import model as net


def intensity_params(config: net.UNetConfig, gain: float = 20.0, cut: float = 0.45):
    """Weights that carry the input pixel unchanged to the head.

    Every conv routes channel 0 through its centre tap (inputs are >= 0 so
    ReLU is the identity on that path), decoders read the skip copy, and the
    head emits ``gain * (x - cut)`` as the foreground logit. The foreground
    probability is then a monotone function of intensity.
    """
    params = net.zeros_like_params(net.build(config, 0))
    for name, k in params.items():
        if name == "head":
            k.weights[config.foreground_index, 0, 0, 0] = gain
            k.bias[config.foreground_index] = -gain * cut
        elif name.startswith(("enc0", "dec")):
            k.weights[0, 0, 1, 1] = 1.0
    return params


def tiny_train_config(**overrides) -> dict:
    cfg = {
        "unet": {"depth": 2, "base_channels": 4, "input_size": [16, 16]},
        "loss": {"kind": "BCE+TV", "lam": 1e-3},
        "optimizer": {"kind": "ADAM", "lr": 1e-3},
        "data": {"source": "synth", "n_train": 8, "n_val": 4, "n_test": 4},
        "epochs": 2,
        "batch_size": 4,
        "seed": 0,
    }
    cfg.update(overrides)
    return cfg


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path
