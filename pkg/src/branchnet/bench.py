"""Multi-seed experiment harness: pipeline runs, aggregation, paired
significance tests against external baseline scores, and report files."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import serialize
from .branchmap import Architecture, build_architecture, extract_branches, sparsity_stats
from .data import Dataset, DataError, SplitIndices, load_csv, make_blobs, split
from .extratrees import DecisionTree, EnsembleConfig, fit_ensemble
from .network import BranchNetModel, predict
from .stats import accuracy, f1_macro, wilcoxon_exact
from .training import TrainConfig, TrainRecord, train

log = logging.getLogger(__name__)

MODEL_NAME = "BranchNet"
DEFAULT_ALPHA = 0.01


class BaselineError(DataError):
    """Baseline score file does not pair with the runs."""


def derive_seeds(master_seed: int) -> dict[str, int]:
    """Split, tree and training seeds derived from one per-run master seed."""
    states = np.random.SeedSequence(int(master_seed)).generate_state(3, dtype=np.uint32)
    return {"split": int(states[0]), "trees": int(states[1]), "train": int(states[2])}


def evaluate(model: BranchNetModel, ds: Dataset, idx) -> dict:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty index set")
    model.eval()
    pred, _ = predict(model, ds.features[idx])
    y = ds.labels[idx]
    return {"accuracy": accuracy(y, pred), "f1_macro": f1_macro(y, pred, ds.n_classes)}


@dataclass
class PipelineResult:
    trees: list[DecisionTree]
    ensemble_config: EnsembleConfig
    arch: Architecture
    model: BranchNetModel
    record: TrainRecord
    splits: SplitIndices
    w1_init: np.ndarray


def run_pipeline(ds: Dataset, seed: int, train_cfg: TrainConfig | None = None,
                 ensemble_overrides: dict | None = None, affine_trainable: bool = True,
                 splits: SplitIndices | None = None) -> PipelineResult:
    """split -> ensemble -> architecture -> model -> train, all from one seed."""
    seeds = derive_seeds(seed)
    splits = splits if splits is not None else split(ds, seeds["split"])
    overrides = dict(ensemble_overrides or {})
    counting = overrides.pop("frequency_counting", "branch")
    trees, ecfg = fit_ensemble(ds, splits.train, seeds["trees"], **overrides)
    arch = build_architecture(extract_branches(trees), ds.n_features, ds.n_classes, counting)
    model = BranchNetModel.from_architecture(arch, affine_trainable=affine_trainable)
    model.meta = {"dataset": ds.name, "master_seed": int(seed), "derived_seeds": seeds,
                  "class_names": ds.class_names, "feature_names": ds.feature_names}
    base = train_cfg or TrainConfig()
    tcfg = TrainConfig.from_dict({**base.to_dict(), "seed": seeds["train"]})
    w1_init = model.w1.copy()
    model, record = train(model, ds, splits, tcfg)
    return PipelineResult(trees, ecfg, arch, model, record, splits, w1_init)


@dataclass
class RunResult:
    dataset: str
    seed: int
    accuracy: float
    f1_macro: float
    n_hidden: int
    w1_sparsity: float
    w2_sparsity: float
    best_epoch: int
    stopped_epoch: int
    best_val_loss: float
    w1_init_min: float
    w1_init_max: float
    w1_trained_min: float
    w1_trained_max: float
    n_features: int = 0
    n_samples: int = 0
    n_classes: int = 0


@dataclass
class DatasetSpec:
    name: str
    path: str | None = None
    label_column: str | int = "label"
    blobs: dict | None = None

    def load(self) -> Dataset:
        if self.blobs is not None:
            ds = make_blobs(**self.blobs)
            return Dataset(ds.features, ds.labels, ds.n_classes, ds.feature_names, ds.class_names, self.name)
        if self.path is None:
            raise DataError(f"dataset {self.name!r} needs a path or a blobs spec")
        return load_csv(self.path, self.label_column, name=self.name)


@dataclass
class BenchConfig:
    datasets: list[DatasetSpec]
    seeds: list[int]
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: dict = field(default_factory=dict)
    affine_trainable: bool = True
    baseline: str | None = None
    baseline_name: str = "baseline"
    alpha: float = DEFAULT_ALPHA
    workers: int = 1
    heatmaps: bool = True

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "BenchConfig":
        d = dict(d)
        specs = []
        for s in d.pop("datasets"):
            s = dict(s)
            if s.get("path") and not os.path.isabs(s["path"]):
                s["path"] = os.path.join(base_dir, s["path"])
            s.setdefault("name", os.path.splitext(os.path.basename(s.get("path") or "blobs"))[0])
            specs.append(DatasetSpec(**s))
        if "seeds" in d:
            seeds = [int(s) for s in d.pop("seeds")]
        else:
            first = int(d.pop("first_seed", 0))
            seeds = list(range(first, first + int(d.pop("n_seeds", 10))))
        d.pop("n_seeds", None)
        d.pop("first_seed", None)
        tcfg = TrainConfig.from_dict(d.pop("train", {}))
        baseline = d.pop("baseline", None)
        if baseline and not os.path.isabs(baseline):
            baseline = os.path.join(base_dir, baseline)
        return cls(datasets=specs, seeds=seeds, train=tcfg, baseline=baseline, **d)

    @classmethod
    def from_json(cls, path) -> "BenchConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), os.path.dirname(os.path.abspath(path)))


def _run_job(args):
    ds, seed, cfg = args
    res = run_pipeline(ds, seed, cfg.train, cfg.ensemble, cfg.affine_trainable)
    metrics = evaluate(res.model, ds, res.splits.test)
    st = sparsity_stats(res.arch)
    w1 = res.model.w1
    run = RunResult(
        dataset=ds.name, seed=int(seed),
        accuracy=metrics["accuracy"], f1_macro=metrics["f1_macro"],
        n_hidden=st["H"], w1_sparsity=st["w1_sparsity"], w2_sparsity=st["w2_sparsity"],
        best_epoch=res.record.best_epoch, stopped_epoch=res.record.stopped_epoch,
        best_val_loss=res.record.best_val_loss,
        w1_init_min=float(res.w1_init.min()), w1_init_max=float(res.w1_init.max()),
        w1_trained_min=float(w1.min()), w1_trained_max=float(w1.max()),
        n_features=ds.n_features, n_samples=ds.n_samples, n_classes=ds.n_classes,
    )
    return run, res.w1_init, np.array(w1, dtype=np.float64)


def worker_count(requested: int) -> int:
    env = os.environ.get("BRANCHNET_WORKERS")
    n = max(1, int(requested))
    if env:
        n = min(n, max(1, int(env)))
    return n


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class Comparison:
    dataset: str
    metric: str
    name_a: str
    name_b: str
    seeds: list[int]
    scores_a: list[float]
    scores_b: list[float]
    mean_a: float
    std_a: float
    mean_b: float
    std_b: float
    p_value: float
    p_exact: str
    winner: str
    degenerate: bool = False


def compare_scores(dataset: str, seeds, scores_a, scores_b, name_a=MODEL_NAME, name_b="baseline",
                   alpha=DEFAULT_ALPHA, metric="accuracy") -> Comparison:
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise BaselineError(f"{dataset}: unpaired score lists ({a.size} vs {b.size})")
    res = wilcoxon_exact(a - b)
    if res.p_value < alpha and res.w_plus != res.w_minus:
        winner = name_a if res.w_plus > res.w_minus else name_b
    else:
        winner = "Tie"
    ma, sa = _mean_std(a)
    mb, sb = _mean_std(b)
    return Comparison(dataset, metric, name_a, name_b, [int(s) for s in seeds], a.tolist(), b.tolist(),
                      ma, sa, mb, sb, res.p_value, str(res.p_exact), winner, res.degenerate)


def read_scores(path) -> dict[tuple[str, int], dict[str, float]]:
    """Score CSV with columns dataset, seed, accuracy, f1."""
    if not os.path.isfile(path):
        raise DataError(f"no such score file: {path}")
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"dataset", "seed", "accuracy"} - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for i, row in enumerate(reader, start=2):
            try:
                key = (row["dataset"].strip(), int(row["seed"]))
                vals = {"accuracy": float(row["accuracy"])}
                f1 = row.get("f1", row.get("f1_macro"))
                if f1 not in (None, ""):
                    vals["f1"] = float(f1)
            except ValueError as exc:
                raise DataError(f"{path}: line {i}: {exc}") from None
            if key in out:
                raise DataError(f"{path}: duplicate entry for {key}")
            out[key] = vals
    return out


def compare_files(path_a, path_b, alpha=DEFAULT_ALPHA, metric="accuracy",
                  name_a=None, name_b=None) -> list[Comparison]:
    a, b = read_scores(path_a), read_scores(path_b)
    name_a = name_a or os.path.splitext(os.path.basename(path_a))[0]
    name_b = name_b or os.path.splitext(os.path.basename(path_b))[0]
    if set(a) != set(b):
        raise BaselineError(f"seed pairing mismatch: {sorted(set(a) ^ set(b))[:5]}")
    out = []
    for ds in sorted({k[0] for k in a}):
        seeds = sorted(s for d, s in a if d == ds)
        out.append(compare_scores(ds, seeds, [a[(ds, s)][metric] for s in seeds],
                                  [b[(ds, s)][metric] for s in seeds], name_a, name_b, alpha, metric))
    return out


@dataclass
class ExperimentReport:
    runs: list[RunResult]
    aggregates: list[dict]
    architecture: list[dict]
    comparisons: list[Comparison]
    heatmaps: list[dict]
    config: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "runs": [asdict(r) for r in self.runs],
            "aggregates": self.aggregates,
            "architecture": self.architecture,
            "comparisons": [asdict(c) for c in self.comparisons],
            "heatmaps": self.heatmaps,
        }


def _aggregate(runs: list[RunResult]) -> tuple[list[dict], list[dict]]:
    aggregates, arch_rows = [], []
    for name in sorted({r.dataset for r in runs}):
        rs = [r for r in runs if r.dataset == name]
        am, asd = _mean_std([r.accuracy for r in rs])
        fm, fsd = _mean_std([r.f1_macro for r in rs])
        aggregates.append({"dataset": name, "model": MODEL_NAME, "n_seeds": len(rs),
                           "accuracy_mean": am, "accuracy_std": asd, "f1_mean": fm, "f1_std": fsd})
        arch_rows.append({
            "dataset": name, "n_features": rs[0].n_features, "n_samples": rs[0].n_samples,
            "n_classes": rs[0].n_classes,
            "hidden_min": min(r.n_hidden for r in rs), "hidden_max": max(r.n_hidden for r in rs),
            "w1_sparsity_min": 100 * min(r.w1_sparsity for r in rs),
            "w1_sparsity_max": 100 * max(r.w1_sparsity for r in rs),
            "w2_sparsity_min": 100 * min(r.w2_sparsity for r in rs),
            "w2_sparsity_max": 100 * max(r.w2_sparsity for r in rs),
            "w1_init_range": [min(r.w1_init_min for r in rs), max(r.w1_init_max for r in rs)],
            "w1_trained_range": [min(r.w1_trained_min for r in rs), max(r.w1_trained_max for r in rs)],
        })
    return aggregates, arch_rows


def _comparisons(runs, cfg: BenchConfig) -> list[Comparison]:
    if not cfg.baseline:
        return []
    base = read_scores(cfg.baseline)
    out = []
    for name in sorted({r.dataset for r in runs}):
        rs = sorted((r for r in runs if r.dataset == name), key=lambda r: r.seed)
        seeds = [r.seed for r in rs]
        have = sorted(s for d, s in base if d == name)
        if have != seeds:
            raise BaselineError(f"{name}: baseline seeds {have} do not pair with run seeds {seeds}")
        out.append(compare_scores(name, seeds, [r.accuracy for r in rs], [base[(name, s)]["accuracy"] for s in seeds],
                                  MODEL_NAME, cfg.baseline_name, cfg.alpha, "accuracy"))
        if all("f1" in base[(name, s)] for s in seeds):
            out.append(compare_scores(name, seeds, [r.f1_macro for r in rs], [base[(name, s)]["f1"] for s in seeds],
                                      MODEL_NAME, cfg.baseline_name, cfg.alpha, "f1"))
    return out


def run_benchmark(cfg: BenchConfig, out_dir: str | None = None) -> ExperimentReport:
    datasets = [spec.load() for spec in cfg.datasets]
    if cfg.baseline:
        read_scores(cfg.baseline)  # fail early on unreadable files
    jobs = [(ds, seed, cfg) for ds in datasets for seed in cfg.seeds]
    n_workers = worker_count(cfg.workers)
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            outputs = list(pool.map(_run_job, jobs))
    else:
        outputs = [_run_job(j) for j in jobs]
    outputs.sort(key=lambda o: (o[0].dataset, o[0].seed))
    runs = [o[0] for o in outputs]

    aggregates, arch_rows = _aggregate(runs)
    comparisons = _comparisons(runs, cfg)
    heat = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if cfg.heatmaps:
            hdir = os.path.join(out_dir, "heatmaps")
            os.makedirs(hdir, exist_ok=True)
            for run, w_init, w_trained in outputs:
                for tag, w in (("init", w_init), ("trained", w_trained)):
                    stem = f"{run.dataset}_seed{run.seed}_w1_{tag}"
                    info = serialize.write_heatmap(os.path.join(hdir, stem), w)
                    heat.append({"dataset": run.dataset, "seed": run.seed, "stage": tag, "file": stem, **info})
    config_echo = {
        "datasets": [asdict(s) for s in cfg.datasets],
        "seeds": cfg.seeds, "train": cfg.train.to_dict(), "ensemble": cfg.ensemble,
        "affine_trainable": cfg.affine_trainable, "baseline": os.path.basename(cfg.baseline) if cfg.baseline else None,
        "baseline_name": cfg.baseline_name, "alpha": cfg.alpha,
    }
    for d in config_echo["datasets"]:
        if d["path"]:
            d["path"] = os.path.basename(d["path"])
    report = ExperimentReport(runs, aggregates, arch_rows, comparisons, heat, config_echo)
    if out_dir is not None:
        write_report(report, out_dir, cfg)
    return report


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x, digits=3):
    return f"{x:.{digits}f}"


def format_comparisons(comparisons: list[Comparison], alpha: float) -> str:
    lines = [f"{'Dataset':<22} {'Model':<12} {'mean':>7} {'std':>7} {'p-val':>7}  Winner",
             "-" * 66]
    for c in comparisons:
        star = "*" if c.p_value < alpha else " "
        lines.append(f"{c.dataset:<22} {c.name_a:<12} {_fmt(c.mean_a):>7} {_fmt(c.std_a):>7} "
                     f"{_fmt(c.p_value):>6}{star}  {c.winner}")
        lines.append(f"{'':<22} {c.name_b:<12} {_fmt(c.mean_b):>7} {_fmt(c.std_b):>7}")
    lines.append(f"(* significant at {alpha})")
    return "\n".join(lines) + "\n"


def write_report(report: ExperimentReport, out_dir: str, cfg: BenchConfig) -> None:
    run_fields = list(RunResult.__dataclass_fields__)
    _write_csv(os.path.join(out_dir, "runs.csv"), run_fields,
               [[repr(v) if isinstance(v, float) else v for v in asdict(r).values()] for r in report.runs])

    # performance table: one row per dataset x model
    acc_cmp = {c.dataset: c for c in report.comparisons if c.metric == "accuracy"}
    f1_cmp = {c.dataset: c for c in report.comparisons if c.metric == "f1"}
    rows, text = [], [f"{'Dataset':<22} {'Model':<12} {'acc mean':>8} {'acc std':>8} {'f1 mean':>8} "
                      f"{'f1 std':>8} {'p-val':>7}  Winner", "-" * 86]
    for agg in report.aggregates:
        name = agg["dataset"]
        c, cf = acc_cmp.get(name), f1_cmp.get(name)
        p = c.p_value if c else None
        rows.append([name, MODEL_NAME, repr(agg["accuracy_mean"]), repr(agg["accuracy_std"]),
                     repr(agg["f1_mean"]), repr(agg["f1_std"]),
                     repr(p) if c else "", repr(cf.p_value) if cf else "", c.winner if c else ""])
        text.append(f"{name:<22} {MODEL_NAME:<12} {_fmt(agg['accuracy_mean']):>8} {_fmt(agg['accuracy_std']):>8} "
                    f"{_fmt(agg['f1_mean']):>8} {_fmt(agg['f1_std']):>8} "
                    f"{(_fmt(p) + ('*' if p < cfg.alpha else ' ')) if c else '':>7}  {c.winner if c else ''}")
        if c:
            fm, fs = (cf.mean_b, cf.std_b) if cf else (float("nan"), float("nan"))
            rows.append([name, c.name_b, repr(c.mean_b), repr(c.std_b), repr(fm) if cf else "",
                         repr(fs) if cf else "", "", "", ""])
            text.append(f"{'':<22} {c.name_b:<12} {_fmt(c.mean_b):>8} {_fmt(c.std_b):>8} "
                        f"{_fmt(fm) if cf else '':>8} {_fmt(fs) if cf else '':>8}")
    if report.comparisons:
        text.append(f"(* significant at {cfg.alpha}; p-values from exact Wilcoxon signed-rank over seeds)")
    _write_csv(os.path.join(out_dir, "performance.csv"),
               ["dataset", "model", "accuracy_mean", "accuracy_std", "f1_mean", "f1_std",
                "p_value_accuracy", "p_value_f1", "winner"], rows)
    with open(os.path.join(out_dir, "performance.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(text) + "\n")
    if report.comparisons:
        _write_csv(os.path.join(out_dir, "comparisons.csv"),
                   ["dataset", "metric", "model_a", "model_b", "mean_a", "std_a", "mean_b", "std_b",
                    "p_value", "p_exact", "winner"],
                   [[c.dataset, c.metric, c.name_a, c.name_b, repr(c.mean_a), repr(c.std_a), repr(c.mean_b),
                     repr(c.std_b), repr(c.p_value), c.p_exact, c.winner] for c in report.comparisons])

    arch_header = ["dataset", "n_features", "n_samples", "n_classes", "hidden_min", "hidden_max",
                   "w1_sparsity_min", "w1_sparsity_max", "w2_sparsity_min", "w2_sparsity_max",
                   "w1_init_min", "w1_init_max", "w1_trained_min", "w1_trained_max"]
    arch_rows, arch_text = [], [
        f"{'Dataset':<22} {'feats':>6} {'samples':>8} {'H min':>7} {'H max':>7} {'W1 sp min':>10} {'W1 sp max':>10} "
        f"{'W2 sp min':>10} {'W2 sp max':>10}  W1 init -> trained", "-" * 130]
    for a in report.architecture:
        arch_rows.append([a["dataset"], a["n_features"], a["n_samples"], a["n_classes"], a["hidden_min"],
                          a["hidden_max"], *(repr(a[k]) for k in arch_header[6:10]),
                          repr(a["w1_init_range"][0]), repr(a["w1_init_range"][1]),
                          repr(a["w1_trained_range"][0]), repr(a["w1_trained_range"][1])])
        arch_text.append(
            f"{a['dataset']:<22} {a['n_features']:>6} {a['n_samples']:>8} {a['hidden_min']:>7} {a['hidden_max']:>7} "
            f"{a['w1_sparsity_min']:>10.1f} {a['w1_sparsity_max']:>10.1f} {a['w2_sparsity_min']:>10.1f} "
            f"{a['w2_sparsity_max']:>10.1f}  [{a['w1_init_range'][0]:.3f}, {a['w1_init_range'][1]:.3f}] -> "
            f"[{a['w1_trained_range'][0]:.3f}, {a['w1_trained_range'][1]:.3f}]")
    _write_csv(os.path.join(out_dir, "architecture.csv"), arch_header, arch_rows)
    with open(os.path.join(out_dir, "architecture.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(arch_text) + "\n")
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
