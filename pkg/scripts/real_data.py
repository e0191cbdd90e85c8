"""Train and evaluate on a directory of CT slices with a patient-level split manifest.

The data directory holds ``images/``, ``masks/`` (PGM, or PNG with Pillow
installed) and optionally ``groups.csv`` mapping each slice to a patient. The
manifest is a ``name,split`` CSV or a JSON split file; slices are resized to
``--size``.

    python3 scripts/real_data.py --data ct/ --manifest split1.csv --out runs/split1
"""
import argparse
import json
import sys
from pathlib import Path

from tvseg import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True)
    ap.add_argument("--manifest", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--loss", default="BCE+TV")
    ap.add_argument("--lam", type=float, default=1e-4)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {
        "unet": {"depth": 4, "base_channels": 16, "input_size": [args.size, args.size]},
        "loss": {"kind": args.loss, "lam": args.lam},
        "optimizer": {"kind": "ADAM", "lr": 1e-3},
        "data": {"source": "dir", "path": args.data, "split": "manifest", "manifest": args.manifest},
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "seed": args.seed,
    }
    (out / "train_config.json").write_text(json.dumps(config, indent=2) + "\n")

    code = cli.main(["train", "--config", str(out / "train_config.json"), "--out", str(out / "run")])
    if code:
        sys.exit(code)
    code = cli.main(["prcurve", "--ckpt", str(out / "run" / "best.ckpt"), "--data", args.data,
                     "--manifest", args.manifest, "--split", "test", "--resize",
                     "--out-csv", str(out / "pr.csv"), "--out-svg", str(out / "pr.svg")])
    print((out / "run" / "test_sweep.csv").read_text(), end="")
    sys.exit(code)


if __name__ == "__main__":
    main()
