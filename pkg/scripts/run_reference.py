"""Train the three reference models, then diagnose and defend the FSBA one.

Prints a compact summary table; every run keeps its own directory under --out.
"""

import argparse
import logging
from pathlib import Path

from fsba import harness
from fsba.config import load

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs")
    p.add_argument("--skip-extras", action="store_true", help="train and evaluate only")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    harness.configure_runtime()

    runs = {}
    for kind in ("benign", "boba", "fsba"):
        run_dir, rec = harness.run_train(load(CONFIGS / f"reference_{kind}.yaml"), args.out)
        runs[kind] = run_dir
        print(f"{kind:7s} train {rec.timings['train_s']:6.0f}s  {run_dir}")
        for mode, r in rec.reports.items():
            print(f"        {mode:13s} AUC-B {r['auc_b']:.4f}  AUC-A {r['auc_a']:.4f}  Pr-B {r['pr_b']:.4f}  Pr-A {r['pr_a']:.4f}")
    if args.skip_extras:
        return

    cfg = load(CONFIGS / "reference_fsba.yaml")
    _, diag = harness.run_diagnose(cfg, runs["fsba"] / "checkpoint.npz", args.out, reference=runs["benign"] / "checkpoint.npz")
    ratio = diag.extra["reference"]["pair_distance_ratio"]
    print(f"pair distance fsba/benign: {ratio:.1f}x")
    _, defend = harness.run_defend(cfg, runs["fsba"] / "checkpoint.npz", args.out)
    for row in defend.extra["table"]:
        print(f"defense {row['defense']:22s} AUC-B {row['auc_b']:.4f}  one-shot AUC-A {row['one_shot:auc_a']:.4f}")


if __name__ == "__main__":
    main()
