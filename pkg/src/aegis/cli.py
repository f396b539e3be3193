"""Command-line entry point: ``aegis <subcommand> --config run.yaml --set key=value``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import dump_config, load_config
from .cushion import CushionOp


def _pipeline(cfg):
    from .pipeline import Pipeline
    return Pipeline(cfg)


def cmd_train_classifier(cfg, args):
    pipe = _pipeline(cfg)
    for name in ("classifier", "substitute"):
        m = getattr(pipe, name)
        print(f"{name}: test accuracy {m.metadata.get('test_accuracy', float('nan')):.4f} "
              f"checksum {pipe.checksum[:12] if name == 'classifier' else ''}")
    return 0


def cmd_stress_test(cfg, args):
    from .stresstest import run_stress_suite
    pipe = _pipeline(cfg)
    cushions = [CushionOp.parse(c) for c in cfg.stress_cushions]
    report = run_stress_suite(pipe.classifier, pipe.test, cfg.stress.epsilon, cushions, cfg.stress)
    out = cfg.out_dir()
    report.write_csv(out / "stress.csv")
    print(report.render())
    return 0


def cmd_attack(cfg, args):
    from .harness import Detector, Evaluator
    ev = Evaluator(cfg, _pipeline(cfg))
    cushion = CushionOp.parse(args.cushion) if args.cushion else None
    shields = ev.pipe.shields(None, cushion) if args.method.split(":")[0] in ("WB", "WB_D") else None
    det = Detector("attack", "none", cushion, shields=shields)
    spec, x, (res, seconds) = ev.adversarial(args.method, det)
    path = cfg.out_dir() / "attacks" / f"{args.method.replace(':', '_')}.pt"
    res.save(path)
    print(f"{args.method}: success {res.success_rate:.3f} on {len(x)} samples in {seconds:.1f}s -> {path}")
    return 0


def cmd_train_shield(cfg, args):
    pipe = _pipeline(cfg)
    taps = [int(t) for t in args.taps.split(",")] if args.taps else None
    cushion = CushionOp.parse(args.cushion) if args.cushion else None
    s = pipe.shields(taps, cushion)
    print(f"shield taps={list(s.taps)} cushion={cushion.name if cushion else 'none'} tau={s.tau:.4f}")
    return 0


def cmd_fit_baselines(cfg, args):
    pipe = _pipeline(cfg)
    cushion = CushionOp.parse(args.cushion) if args.cushion else None
    for kind in args.kinds.split(","):
        pipe.baseline(kind, cushion)
        print(f"fitted {kind}")
    return 0


def cmd_evaluate(cfg, args):
    from .harness import run_experiment
    report = run_experiment(cfg)
    print(report.markdown())
    if report.failed:
        print(f"{len(report.failed)} failed cell(s): {', '.join(report.failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_report(cfg, args):
    from .harness import load_report
    report = load_report(args.dir or cfg.out_dir())
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.markdown())
    return 1 if report.failed else 0


COMMANDS = {
    "train-classifier": cmd_train_classifier,
    "stress-test": cmd_stress_test,
    "attack": cmd_attack,
    "train-shield": cmd_train_shield,
    "fit-baselines": cmd_fit_baselines,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aegis", description="Cushion + Shield adversarial defense experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML experiment config")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. eval.n_eval=100 (repeatable)")
        if name == "attack":
            s.add_argument("--method", required=True, help="e.g. PGD, CW_LINF:steps=20, HFC, WB")
            s.add_argument("--cushion", help="e.g. JPEG-80")
        if name == "train-shield":
            s.add_argument("--taps", help="comma-separated tap indices (default: all)")
            s.add_argument("--cushion")
        if name == "fit-baselines":
            s.add_argument("--kinds", default="KD,LID,MAHA,DNN")
            s.add_argument("--cushion")
        if name == "report":
            s.add_argument("--dir", help="run directory holding report.json")
            s.add_argument("--json", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    cfg = load_config(args.config, args.set)
    if args.command != "report":
        dump_config(cfg, cfg.out_dir() / f"resolved_config.{args.command}.yaml")
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
