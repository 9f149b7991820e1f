"""Command-line entry point: ``fsba {train,eval,sweep,defend,diagnose,synth}``.

Failures exit nonzero and print one JSON object on stderr:
``{"error": <type>, "message": <text>, "problems": [...]}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as config_mod
from . import harness
from .errors import ConfigurationError, FSBAError, TrainingError

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsba", description="Backdoor attacks on siamese trackers: experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", required=True, help="experiment YAML")
        sp.add_argument("--output-dir", default=None, help=f"run root (else ${harness.ENV_OUTPUT_DIR}, else config)")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        return sp

    t = common(sub.add_parser("train", help="train a benign/boba/fsba model and evaluate it"))
    t.add_argument("--no-eval", action="store_true", help="skip evaluation after training")
    common(sub.add_parser("eval", help="metric table and curves under the configured attack modes"), checkpoint=True)
    s = common(sub.add_parser("sweep", help="one result row per parameter value"))
    s.add_argument("--param", required=True, choices=harness.SWEEP_PARAMETERS)
    s.add_argument("--values", nargs="*", default=[], help="values to sweep (at least one)")
    common(sub.add_parser("defend", help="apply each configured defense, then evaluate"), checkpoint=True)
    d = common(sub.add_parser("diagnose", help="feature separation, embedding export, branch loss gap"), checkpoint=True)
    d.add_argument("--reference", default=None, help="checkpoint to compare against (e.g. the benign model)")
    y = sub.add_parser("synth", help="write the synthetic benchmark as OTB-style folders")
    y.add_argument("--config", required=True)
    y.add_argument("--out", required=True)
    return p


def _fail(exc: BaseException, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, config_mod.ConfigErrors):
        payload["message"] = "invalid config"
        payload["problems"] = exc.problems
    if isinstance(exc, TrainingError):
        payload.update(epoch=exc.epoch, step=exc.step)
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        harness.configure_runtime()
        cfg = config_mod.load(args.config)
        if args.command == "synth":
            print(harness.run_synth(cfg, args.out))
            return 0
        if args.command == "train":
            run_dir, rec = harness.run_train(cfg, args.output_dir, do_eval=not args.no_eval)
        elif args.command == "eval":
            run_dir, rec = harness.run_eval(cfg, args.checkpoint, args.output_dir)
        elif args.command == "sweep":
            run_dir, rec = harness.run_sweep(cfg, args.param, args.values, args.output_dir)
        elif args.command == "defend":
            run_dir, rec = harness.run_defend(cfg, args.checkpoint, args.output_dir)
        else:
            run_dir, rec = harness.run_diagnose(cfg, args.checkpoint, args.output_dir, args.reference)
    except ConfigurationError as exc:
        return _fail(exc, EXIT_CONFIG)
    except (FSBAError, OSError) as exc:
        return _fail(exc, EXIT_RUNTIME)
    print(json.dumps({"run_dir": str(run_dir), "status": rec.status, "checkpoint_hash": rec.checkpoint_hash}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
