"""``ccr`` command line: datagen, train, baseline, eval, ablate, plot."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import BaselineConfig, TrainConfig, Variant, load_config

logger = logging.getLogger("ccrseq")


def _configs(path: Optional[str], seed: Optional[int] = None) -> tuple[TrainConfig, BaselineConfig]:
    cfg, base = load_config(path) if path else (TrainConfig(), BaselineConfig())
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg, base


def cmd_datagen(args) -> int:
    from . import datagen

    argv = ["--out", args.out, "--labeled", str(args.labeled), "--unlabeled", str(args.unlabeled),
            "--test", str(args.test), "--seed", str(args.seed), "--perturb-strength", args.perturb_strength,
            "--labeled-domain", args.labeled_domain]
    return datagen.main(argv)


def cmd_train(args) -> int:
    from .trainer import run_training

    cfg, _ = _configs(args.config, args.seed)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    res = run_training(cfg, args.corpus, Variant(args.variant), args.out)
    if res.metrics is not None:
        print(res.metrics.to_text().split("\nsamples.")[0])
    return 0


def cmd_baseline(args) -> int:
    from .baselines import run_baseline

    cfg, base = _configs(args.config, args.seed)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    res = run_baseline(args.method, cfg, args.corpus, base, args.out)
    if res.metrics is not None:
        print(f"avg\t{res.metrics.avg:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate

    rec = evaluate(args.checkpoint, args.manifests)
    text = rec.to_text()
    if args.out:
        rec.write(args.out)
    for line in text.splitlines():
        if not line.startswith("samples."):
            print(line)
    return 0


def cmd_ablate(args) -> int:
    from .report import report_from_runs, run_ablation_suite

    cfg, base = _configs(args.config)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out = Path(args.out)
    if args.report_only:
        report = report_from_runs(args.suite, cfg, seeds, out / "runs", base)
    else:
        corpora = {"cross": args.corpus, "in": args.in_domain_corpus}
        report, _ = run_ablation_suite(args.suite, cfg, corpora, seeds, out / "runs", base)
    report.write(out / "reports")
    print(report.to_text(), end="")
    return 0 if report.complete else 1


def cmd_plot(args) -> int:
    from .report import plot_traces

    files = plot_traces(args.traces, args.out, args.labels)
    for name, path in files.items():
        print(f"{name}\t{path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccr", description="Semi-supervised sequence recognition toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate a synthetic corpus")
    d.add_argument("--out", required=True)
    d.add_argument("--labeled", type=int, default=20000)
    d.add_argument("--unlabeled", type=int, default=20000)
    d.add_argument("--test", type=int, default=2000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--perturb-strength", default="default", choices=["off", "default", "strong"])
    d.add_argument("--labeled-domain", default="CLEAN", choices=["CLEAN", "PERTURBED"])
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config")
    t.add_argument("--corpus", required=True)
    t.add_argument("--variant", default="FULL", choices=[v.value for v in Variant])
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("baseline", help="run a reference semi-supervised method")
    b.add_argument("--method", required=True, choices=["pl", "ns", "scr"])
    b.add_argument("--config")
    b.add_argument("--corpus", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--steps", type=int)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("eval", help="word accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifests", nargs="+", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation suite and write its tables")
    a.add_argument("--suite", required=True, choices=["UNITS", "CCR_VS_SCR", "DISTANCES", "SSL_METHODS",
                                                      "DOMAIN_SETTINGS"])
    a.add_argument("--config")
    a.add_argument("--corpus")
    a.add_argument("--in-domain-corpus")
    a.add_argument("--seeds", default="0")
    a.add_argument("--out", required=True)
    a.add_argument("--steps", type=int)
    a.add_argument("--report-only", action="store_true", help="rebuild tables from existing runs")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="plot accuracy and unique-fraction traces")
    pl.add_argument("--traces", nargs="+", required=True)
    pl.add_argument("--labels", nargs="*")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"ccr {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
