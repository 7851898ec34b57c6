"""Ablation orchestration, table assembly and trace plots.

A suite is a list of rows; each row is one training recipe run once per seed.
Runs live in content-addressed directories under a runs root, so a row shared
by several suites (the full method, say) is trained once and reused. Tables
are assembled from the metric files alone.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from .config import BaselineConfig, TrainConfig, Variant, apply_variant
from .evaluation import MetricsRecord
from .losses import Distance

logger = logging.getLogger(__name__)

REPORT_MAGIC = "#ccr-seq-report v1"
SPLITS = ("test_clean", "test_perturbed")
SETTINGS = ("cross", "in")


@dataclass(frozen=True)
class RowSpec:
    label: str
    method: str = "train"  # train | pl | ns
    variant: str = "FULL"
    overrides: tuple = ()  # ((dotted field, value), ...) applied after the variant
    setting: str = "cross"  # which corpus: cross-domain or in-domain

    def config(self, base: TrainConfig, seed: int) -> TrainConfig:
        cfg = apply_variant(dataclasses.replace(base, seed=seed, loss=dataclasses.replace(base.loss)), self.variant)
        for key, value in self.overrides:
            if key.startswith("loss."):
                setattr(cfg.loss, key[5:], value)
            else:
                setattr(cfg, key, value)
        return cfg


SUITES: dict[str, list[RowSpec]] = {
    "UNITS": [
        RowSpec("CCR", variant="CCR_BARE"),
        RowSpec("CCR+Proj", variant="PROJ"),
        RowSpec("CCR+Proj+WD", variant="PROJ_WD"),
        RowSpec("CCR+Proj+WD+EMA", variant="PROJ_WD_EMA"),
        RowSpec("CCR+Proj+WD+EMA+DA", variant="FULL"),
    ],
    "CCR_VS_SCR": [
        RowSpec("SCR", variant="SCR"),
        RowSpec("CCR", variant="FULL"),
    ],
    "DISTANCES": [
        RowSpec("MSE", overrides=(("loss.dist", Distance.MSE),)),
        RowSpec("CE", overrides=(("loss.dist", Distance.CE),)),
        RowSpec("KL", variant="FULL"),
    ],
    "SSL_METHODS": [
        RowSpec("Pseudo Label", method="pl", variant="SUPERVISED_ONLY"),
        RowSpec("Noisy Student", method="ns", variant="SUPERVISED_ONLY"),
        RowSpec("Ours", variant="FULL"),
    ],
    "DOMAIN_SETTINGS": [
        RowSpec("in-domain Sup", variant="SUPERVISED_ONLY", setting="in"),
        RowSpec("in-domain SCR", variant="SCR_STRESS", setting="in"),
        RowSpec("in-domain Ours", variant="FULL", setting="in"),
        RowSpec("cross-domain Sup", variant="SUPERVISED_ONLY"),
        RowSpec("cross-domain SCR", variant="SCR_STRESS"),
        RowSpec("cross-domain Ours", variant="FULL"),
    ],
}


def run_key(row: RowSpec, cfg: TrainConfig, baseline: BaselineConfig) -> str:
    extra = f"-b{baseline.beta_u}-i{baseline.ns_iterations}-r{baseline.pl_refresh_every}" if row.method != "train" else ""
    return f"{row.setting}-{row.method}-{cfg.variant}-s{cfg.seed}-{cfg.digest()}{extra}"


@dataclass
class RunOutcome:
    row: RowSpec
    seed: int
    run_dir: Path
    metrics: Optional[MetricsRecord] = None
    error: Optional[str] = None


def execute_row(row: RowSpec, cfg: TrainConfig, corpus, run_dir: Path, baseline: BaselineConfig,
                teacher_checkpoint=None) -> None:
    from .baselines import run_noisy_student, run_pseudo_label
    from .trainer import run_training

    if row.method == "pl":
        run_pseudo_label(cfg, corpus, baseline, run_dir)
    elif row.method == "ns":
        run_noisy_student(cfg, corpus, baseline, run_dir, teacher_checkpoint=teacher_checkpoint)
    else:
        run_training(cfg, corpus, cfg.variant, run_dir)


Executor = Callable[[RowSpec, TrainConfig, Path, Path, BaselineConfig], None]


def run_ablation_suite(suite: str, base: TrainConfig, corpora: dict, seeds: Sequence[int], runs_root,
                       baseline: Optional[BaselineConfig] = None,
                       executor: Optional[Executor] = None) -> tuple["Report", list[RunOutcome]]:
    """Run (or reuse) every row x seed of a suite and assemble its table.

    ``corpora`` maps a setting (``"cross"`` / ``"in"``) to a corpus directory.
    A failing run is recorded and the remaining runs still execute.
    """
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    if not seeds:
        raise ValueError("at least one seed is required")
    baseline = baseline or BaselineConfig()
    root = Path(runs_root)
    outcomes = []
    for row in SUITES[suite]:
        for seed in seeds:
            cfg = row.config(base, seed)
            run_dir = root / run_key(row, cfg, baseline)
            outcome = RunOutcome(row, seed, run_dir)
            metrics_path = run_dir / "metrics.tsv"
            try:
                if not metrics_path.exists():
                    if row.setting not in corpora or corpora[row.setting] is None:
                        raise FileNotFoundError(f"no corpus given for setting {row.setting!r}")
                    logger.info("running %s seed %d -> %s", row.label, seed, run_dir)
                    if executor is not None:
                        executor(row, cfg, Path(corpora[row.setting]), run_dir, baseline)
                    else:
                        teacher = None
                        if row.method == "ns":
                            teacher = _cached_supervised(base, seed, row.setting, root, baseline)
                        execute_row(row, cfg, corpora[row.setting], run_dir, baseline, teacher)
                outcome.metrics = MetricsRecord.read(metrics_path)
            except Exception as exc:  # noqa: BLE001 - a failed run becomes an annotated row
                outcome.error = f"{type(exc).__name__}: {exc}"
                logger.error("%s seed %d failed:\n%s", row.label, seed, traceback.format_exc())
            outcomes.append(outcome)
    return assemble_report(suite, outcomes, seeds), outcomes


def _cached_supervised(base: TrainConfig, seed: int, setting: str, root: Path, baseline: BaselineConfig):
    """Checkpoint of the matching supervised-only run, if it already exists (Noisy Student's first teacher)."""
    row = RowSpec("Sup", variant="SUPERVISED_ONLY", setting=setting)
    ckpt = root / run_key(row, row.config(base, seed), baseline) / "final.ckpt"
    return ckpt if ckpt.exists() else None


# ---------------------------------------------------------------------------
# tables


@dataclass
class ReportRow:
    label: str
    setting: str
    seeds: list[int]
    values: dict[str, list[float]]  # metric -> per-seed values, aligned with seeds
    failures: list[str] = field(default_factory=list)
    extras: dict[str, list[float]] = field(default_factory=dict)

    def mean(self, metric: str) -> float:
        v = self.values.get(metric, [])
        return sum(v) / len(v) if v else math.nan

    def range(self, metric: str) -> tuple[float, float]:
        v = self.values.get(metric, [])
        return (min(v), max(v)) if v else (math.nan, math.nan)


@dataclass
class Report:
    suite: str
    seeds: list[int]
    rows: list[ReportRow]

    @property
    def complete(self) -> bool:
        return all(not r.failures and len(r.seeds) == len(self.seeds) for r in self.rows)

    def row(self, label: str) -> ReportRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    @property
    def metrics(self) -> list[str]:
        return [f"{s}_acc" for s in SPLITS] + ["avg"]

    def to_tsv(self) -> str:
        multi = len(self.seeds) > 1
        cols = ["row", "setting", "n_seeds"]
        for m in self.metrics:
            cols += [m] + ([f"{m}_min", f"{m}_max"] if multi else [])
        cols += ["per_seed_avg", "collapsed_seeds", "status"]
        lines = [f"{REPORT_MAGIC} suite={self.suite} seeds={','.join(map(str, self.seeds))}", "\t".join(cols)]
        for r in self.rows:
            cells = [r.label, r.setting, str(len(r.seeds))]
            for m in self.metrics:
                cells.append(_num(r.mean(m)))
                if multi:
                    lo, hi = r.range(m)
                    cells += [_num(lo), _num(hi)]
            cells.append(",".join(f"{s}:{_num(v)}" for s, v in zip(r.seeds, r.values.get("avg", []))))
            collapsed = [s for s, c in zip(r.seeds, r.extras.get("collapsed_at", [])) if c >= 0]
            cells.append(",".join(map(str, collapsed)) or "-")
            cells.append("ok" if not r.failures else "FAILED " + " | ".join(r.failures))
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """Human-readable table: one row per method, accuracies in percent."""
        multi = len(self.seeds) > 1
        header = ["Method", "Clean", "Perturbed", "Avg"]
        body = []
        for r in self.rows:
            cells = [r.label]
            for m in self.metrics:
                if not r.values.get(m):
                    cells.append("n/a")
                    continue
                text = f"{100 * r.mean(m):.1f}"
                if multi:
                    lo, hi = r.range(m)
                    text += f" [{100 * lo:.1f}, {100 * hi:.1f}]"
                cells.append(text)
            if r.failures:
                cells[0] += " (FAILED)"
            body.append(cells)
        widths = [max(len(c[i]) for c in [header] + body) for i in range(len(header))]
        fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
        rule = "-" * len(fmt(header))
        out = [f"{self.suite} (seeds {', '.join(map(str, self.seeds))})", rule, fmt(header), rule]
        out += [fmt(c) for c in body] + [rule]
        for r in self.rows:
            for f in r.failures:
                out.append(f"! {r.label}: {f}")
        return "\n".join(out) + "\n"

    def write(self, directory) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tsv, txt = d / f"{self.suite.lower()}.tsv", d / f"{self.suite.lower()}.txt"
        tsv.write_text(self.to_tsv(), encoding="utf-8")
        txt.write_text(self.to_text(), encoding="utf-8")
        return tsv, txt


def _num(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def assemble_report(suite: str, outcomes: Iterable[RunOutcome], seeds: Sequence[int]) -> Report:
    """Pure function of the run outcomes (i.e. of the metric files); never trains."""
    rows: dict[str, ReportRow] = {}
    for spec in SUITES[suite]:
        rows[spec.label] = ReportRow(spec.label, spec.setting, [], {})
    for o in outcomes:
        r = rows[o.row.label]
        if o.error is not None or o.metrics is None:
            r.failures.append(f"seed {o.seed}: {o.error or 'no metrics'}")
            continue
        r.seeds.append(o.seed)
        m = o.metrics
        for s in SPLITS:
            if s in m.correct:
                r.values.setdefault(f"{s}_acc", []).append(m.accuracy(s))
        r.values.setdefault("avg", []).append(m.avg)
        for k, v in m.extras.items():
            r.extras.setdefault(k, []).append(v)
    return Report(suite, list(seeds), list(rows.values()))


def report_from_runs(suite: str, base: TrainConfig, seeds: Sequence[int], runs_root,
                     baseline: Optional[BaselineConfig] = None) -> Report:
    """Rebuild a suite table from existing run directories only."""
    baseline = baseline or BaselineConfig()
    outcomes = []
    for row in SUITES[suite]:
        for seed in seeds:
            run_dir = Path(runs_root) / run_key(row, row.config(base, seed), baseline)
            o = RunOutcome(row, seed, run_dir)
            try:
                o.metrics = MetricsRecord.read(run_dir / "metrics.tsv")
            except (OSError, ValueError) as exc:
                o.error = f"{type(exc).__name__}: {exc}"
            outcomes.append(o)
    return assemble_report(suite, outcomes, seeds)


# ---------------------------------------------------------------------------
# plots


def read_trace(path) -> list[dict]:
    """Trace records; malformed lines are skipped with a warning."""
    records = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict) or "step" not in rec:
                raise ValueError("record without a step")
            records.append(rec)
        except ValueError as exc:
            logger.warning("%s:%d: skipping malformed trace line (%s)", path, n, exc)
    return records


def trace_label(path) -> str:
    run = Path(path).parent / "run.json"
    if run.exists():
        try:
            meta = json.loads(run.read_text(encoding="utf-8"))
            return f"{meta.get('variant', '?')} seed {meta.get('seed', '?')}"
        except ValueError:
            pass
    return Path(path).parent.name or Path(path).stem


PLOT_SERIES = {
    "accuracy": ("test_clean_acc", "test_perturbed_acc"),
    "unique_fraction": ("unique_fraction",),
}


def plot_traces(traces: Sequence, out_dir, labels: Optional[Sequence[str]] = None) -> dict[str, Path]:
    """Accuracy and unique-fraction curves over steps, plus a TSV sidecar of the plotted points."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not traces:
        raise ValueError("at least one trace file is required")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = list(labels) if labels else [trace_label(t) for t in traces]
    data = [(lbl, read_trace(t)) for lbl, t in zip(labels, traces)]

    sidecar = ["series\tmetric\tstep\tvalue"]
    files = {}
    for fig_name, metrics in PLOT_SERIES.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        for lbl, recs in data:
            for metric in metrics:
                pts = [(r["step"], r[metric]) for r in recs if r.get(metric) is not None]
                if not pts:
                    continue
                xs, ys = zip(*pts)
                name = lbl if len(metrics) == 1 else f"{lbl} {metric.replace('_acc', '')}"
                ax.plot(xs, ys, marker=".", label=name)
                sidecar += [f"{lbl}\t{metric}\t{x}\t{y!r}" for x, y in pts]
        if fig_name == "unique_fraction":
            ax.axhline(0.10, color="grey", linestyle=":", linewidth=1)
        ax.set_xlabel("step")
        ax.set_ylabel(fig_name.replace("_", " "))
        ax.set_ylim(-0.02, 1.02)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=7)
        fig.tight_layout()
        files[fig_name] = out / f"{fig_name}.png"
        fig.savefig(files[fig_name], dpi=100)
        plt.close(fig)
    files["data"] = out / "plot_data.tsv"
    files["data"].write_text("\n".join(sidecar) + "\n", encoding="utf-8")
    return files
