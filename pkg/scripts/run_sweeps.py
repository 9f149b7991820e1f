"""Sensitivity sweeps on the reference FSBA config (one CSV per parameter).

psi and tau reuse a single trained model; gamma and trigger retrain per value.
"""

import argparse
import logging
from pathlib import Path

from fsba import harness
from fsba.config import load

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
GRIDS = {
    "psi": [0.005, 0.01, 0.02, 0.04],
    "tau": [0, 0.05, 0.1, 0.15, 0.2],
    "gamma": [0, 0.05, 0.1, 0.2],
    "trigger": ["checker", "random_bw", "frame", "color_noise"],
}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=str(CONFIGS / "reference_fsba.yaml"))
    p.add_argument("--params", nargs="+", default=["psi", "tau"], choices=sorted(GRIDS))
    p.add_argument("--out", default="runs")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    harness.configure_runtime()
    cfg = load(args.config)
    for param in args.params:
        run_dir, _ = harness.run_sweep(cfg, param, GRIDS[param], args.out)
        print((run_dir / "sweep.csv").read_text())


if __name__ == "__main__":
    main()
