"""Run the ablation suites and store their light artifacts under results/<name>/.

Heavy files (checkpoints, generated images) stay in --work. Re-running the
script reuses finished runs, so it can be stopped and resumed.

    python3 scripts/run_experiments.py --name reduced --steps 1500 --seeds 0,1,2
"""

import argparse
import dataclasses
import json
import logging
import shutil
from pathlib import Path

from ccrseq.config import BaselineConfig, TrainConfig, dump_config, load_config
from ccrseq.datagen import Domain, GenerationConfig, build_corpus
from ccrseq.report import SUITES, RowSpec, plot_traces, report_from_runs, run_ablation_suite, run_key

ORDER = ["DOMAIN_SETTINGS", "CCR_VS_SCR", "DISTANCES", "UNITS", "SSL_METHODS"]
LIGHT = ("metrics.tsv", "run.json", "trace.jsonl", "config.ini", "pseudo.json")
REPO = Path(__file__).resolve().parent.parent

log = logging.getLogger("experiments")


def corpus(path: Path, gen: GenerationConfig) -> Path:
    if (path / "train_labeled.tsv").exists():
        log.info("reusing corpus %s", path)
    else:
        log.info("generating corpus %s", path)
        path.mkdir(parents=True, exist_ok=True)
        build_corpus(gen, path)
    return path


def sync(runs: Path, dest: Path):
    for run in runs.iterdir():
        if not (run / "metrics.tsv").exists():
            continue
        out = dest / run.name
        out.mkdir(parents=True, exist_ok=True)
        for name in LIGHT:
            if (run / name).exists():
                shutil.copy2(run / name, out / name)


def figures(base, seeds, baseline, runs: Path, out: Path):
    rows = [RowSpec("Sup", variant="SUPERVISED_ONLY"), RowSpec("SCR", variant="SCR_STRESS"),
            RowSpec("Ours", variant="FULL")]
    for seed in seeds:
        traces = [runs / run_key(r, r.config(base, seed), baseline) / "trace.jsonl" for r in rows]
        if all(t.exists() for t in traces):
            plot_traces(traces, out / f"cross_seed{seed}", [r.label for r in rows])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--name", required=True)
    ap.add_argument("--work", default="/tmp/ccr-experiments")
    ap.add_argument("--labeled", type=int, default=20_000)
    ap.add_argument("--unlabeled", type=int, default=20_000)
    ap.add_argument("--test", type=int, default=2_000)
    ap.add_argument("--steps", type=int, default=10_000)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--config", help="ini overrides applied to the base config")
    ap.add_argument("--suites", default=",".join(ORDER))
    ap.add_argument("--sync-only", action="store_true", help="copy finished runs and rebuild tables, train nothing")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    seeds = [int(s) for s in args.seeds.split(",")]
    work, results = Path(args.work), REPO / "results" / args.name
    results.mkdir(parents=True, exist_ok=True)
    base, baseline = load_config(args.config) if args.config else (TrainConfig(), BaselineConfig())
    base = dataclasses.replace(base, steps=args.steps)
    (results / "base.ini").write_text(dump_config(base, baseline))

    sizes = dict(labeled=args.labeled, unlabeled=args.unlabeled, test_clean=args.test, test_perturbed=args.test)
    corpora = {
        "cross": corpus(work / "corpus_cross", GenerationConfig(**sizes, seed=0)),
        "in": corpus(work / "corpus_in", GenerationConfig(**sizes, seed=1, labeled_domain=Domain.PERTURBED)),
    }
    protocol = {
        "corpora": {
            "cross": {"labeled": args.labeled, "unlabeled": args.unlabeled, "test": args.test,
                      "labeled_domain": "CLEAN", "seed": 0},
            "in": {"labeled": args.labeled, "unlabeled": args.unlabeled, "test": args.test,
                   "labeled_domain": "PERTURBED", "seed": 1},
        },
        "steps": args.steps,
        "seeds": seeds,
    }
    (results / "protocol.json").write_text(json.dumps(protocol, indent=2) + "\n")

    runs = work / "runs"
    for suite in args.suites.split(","):
        if not args.sync_only:
            run_ablation_suite(suite, base, corpora, seeds, runs, baseline)
        sync(runs, results / "runs")
        report_from_runs(suite, base, seeds, results / "runs", baseline).write(results / "reports")
    for suite in SUITES:
        rep = report_from_runs(suite, base, seeds, results / "runs", baseline)
        print(rep.to_text(), end="\n")
    figures(base, seeds, baseline, results / "runs", results / "figures")


if __name__ == "__main__":
    main()
