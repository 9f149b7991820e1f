"""Regenerate the shipped trigger bitmaps from their procedural definitions."""

import argparse
from pathlib import Path

import numpy as np

from fsba.trigger import BUILTIN_PATTERNS, TriggerPattern, generate_builtin

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "fsba" / "data" / "triggers"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for name in BUILTIN_PATTERNS:
        trig = generate_builtin(name)
        path = args.out / f"{name}.png"
        trig.save(path)
        back = TriggerPattern.from_file(path, name=name)
        assert np.array_equal(back.image, trig.image) and np.array_equal(back.mask, trig.mask), name
        print(path)


if __name__ == "__main__":
    main()
