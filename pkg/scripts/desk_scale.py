"""Train the small BCE U-Net on clean synthetic blobs and report test Dice.

    python3 scripts/desk_scale.py --out runs/desk
"""
import argparse
import dataclasses
import json
import logging

from tvseg.experiments import DeskScale, desk_scale


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    defaults = DeskScale()
    ap.add_argument("--epochs", type=int, default=defaults.epochs)
    ap.add_argument("--seed", type=int, default=defaults.seed)
    ap.add_argument("--base-channels", type=int, default=defaults.base_channels)
    ap.add_argument("--noise", type=float, default=defaults.noise_sigma)
    ap.add_argument("--out", help="run directory for checkpoints and history.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = dataclasses.replace(defaults, epochs=args.epochs, seed=args.seed,
                              base_channels=args.base_channels, noise_sigma=args.noise)
    result = desk_scale(cfg, run_dir=args.out)
    print(json.dumps({"config": dataclasses.asdict(cfg), **result}, indent=2))


if __name__ == "__main__":
    main()
