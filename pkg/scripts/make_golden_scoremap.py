"""Regenerate the golden score-map fixture used by the tracker tests.

Run only when the model definition changes on purpose; the test compares a
freshly initialised seed-3 model against this file to 1e-6.
"""

import argparse
from pathlib import Path

import numpy as np
import torch

from fsba.tracker import TrackerConfig, TrackerModel, forward

GOLDEN_CFG = TrackerConfig(template_size=63, search_size=127)


def golden_inputs(seed: int = 3) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    z = rng.random((GOLDEN_CFG.template_size,) * 2 + (3,)).astype(np.float32)
    x = rng.random((GOLDEN_CFG.search_size,) * 2 + (3,)).astype(np.float32)
    return z, x


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "data" / "golden_scoremap_seed3.npz"))
    args = p.parse_args()
    torch.set_num_threads(1)
    z, x = golden_inputs()
    model = TrackerModel(GOLDEN_CFG, seed=3).double()
    s = forward(model, z, x).response
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    np.savez(args.out, z=z, x=x, response=s)
    print(f"wrote {args.out} ({s.shape}, range {s.min():.4f}..{s.max():.4f})")


if __name__ == "__main__":
    main()
