"""Command line entry point: ``branchnet {train,evaluate,explain,bench,compare}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import bench, serialize
from .branchmap import Architecture, sparsity_stats
from .data import DataError, SplitIndices, load_csv
from .extratrees import ensemble_to_json
from .interpret import explain_instance, feature_coverage
from .network import BranchNetModel
from .training import TrainConfig, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_train_config(path):
    if not path:
        return TrainConfig(), {}, True
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "train" in doc or "ensemble" in doc:
        return (TrainConfig.from_dict(doc.get("train", {})), doc.get("ensemble", {}),
                doc.get("affine_trainable", True))
    return TrainConfig.from_dict(doc), {}, True


def cmd_train(args) -> int:
    ds = load_csv(args.data, args.label)
    tcfg, ens, affine = _load_train_config(args.config)
    if args.max_epochs:
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), "max_epochs": args.max_epochs})
    res = bench.run_pipeline(ds, args.seed, tcfg, ens, affine)
    out = args.out
    os.makedirs(out, exist_ok=True)
    res.model.save(os.path.join(out, "model"))
    res.arch.save(os.path.join(out, "architecture"))
    res.splits.save(os.path.join(out, "split.json"))
    with open(os.path.join(out, "ensemble.json"), "w", encoding="utf-8") as fh:
        fh.write(ensemble_to_json(res.trees, res.ensemble_config))
    res.record.save(os.path.join(out, "record.json"), os.path.join(out, "record.csv"))
    serialize.write_heatmap(os.path.join(out, "w1_init"), res.w1_init)
    serialize.write_heatmap(os.path.join(out, "w1_trained"), res.model.w1)
    metrics = bench.evaluate(res.model, ds, res.splits.test)
    summary = {"dataset": ds.name, "seed": args.seed, **metrics, **sparsity_stats(res.arch),
               **res.record.summary()}
    with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def _load_run(model_dir):
    model_path = os.path.join(model_dir, "model")
    if not os.path.isdir(model_path):
        model_path = model_dir
    model = BranchNetModel.load(model_path)
    arch_path = os.path.join(model_dir, "architecture")
    arch = Architecture.load(arch_path) if os.path.isdir(arch_path) else None
    return model, arch


def cmd_evaluate(args) -> int:
    model, _ = _load_run(args.model)
    ds = load_csv(args.data, args.label, class_names=model.meta.get("class_names"))
    if ds.n_features != model.d:
        raise DataError(f"dataset has {ds.n_features} features, model expects {model.d}")
    if args.split_file:
        idx = getattr(SplitIndices.load(args.split_file), args.subset)
    else:
        idx = np.arange(ds.n_samples)
    print(json.dumps(bench.evaluate(model, ds, idx), indent=1))
    return EXIT_OK


def cmd_explain(args) -> int:
    model, arch = _load_run(args.model)
    if arch is None:
        raise UsageError("explain needs the architecture directory written by `train`")
    names = model.meta.get("feature_names")
    if args.values:
        x = np.array([float(v) for v in args.values.split(",")])
    else:
        if args.data is None or args.row is None:
            raise UsageError("give --values or --data with --row")
        ds = load_csv(args.data, args.label, class_names=model.meta.get("class_names"))
        if not 0 <= args.row < ds.n_samples:
            raise UsageError(f"row {args.row} out of range")
        x = ds.features[args.row]
        names = ds.feature_names
    if x.size != arch.d:
        raise DataError(f"instance has {x.size} values, model expects {arch.d}")
    exp = explain_instance(model, arch, x, names, model.meta.get("class_names"))
    if args.json:
        print(exp.to_json())
    else:
        print(exp.to_text())
        if args.coverage:
            cov = feature_coverage(arch)
            names = names or [f"x{j}" for j in range(arch.d)]
            for f in cov.ranking():
                print(f"  {names[f]:<20} feeds {cov.counts[f]:>6} neurons ({100 * cov.proportions[f]:.1f}%)")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = bench.BenchConfig.from_json(args.config)
    if args.seeds:
        first = args.seed if args.seed is not None else (cfg.seeds[0] if cfg.seeds else 0)
        cfg.seeds = list(range(first, first + args.seeds))
    elif args.seed is not None:
        cfg.seeds = [args.seed]
    if args.baseline:
        cfg.baseline = args.baseline
    if args.alpha is not None:
        cfg.alpha = args.alpha
    report = bench.run_benchmark(cfg, args.out)
    with open(os.path.join(args.out, "performance.txt"), encoding="utf-8") as fh:
        print(fh.read(), end="")
    with open(os.path.join(args.out, "architecture.txt"), encoding="utf-8") as fh:
        print(fh.read(), end="")
    return EXIT_OK if report.runs else EXIT_DATA


def cmd_compare(args) -> int:
    alpha = bench.DEFAULT_ALPHA if args.alpha is None else args.alpha
    comps = bench.compare_files(args.a, args.b, alpha, args.metric)
    print(bench.format_comparisons(comps, alpha), end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "comparisons.json"), "w", encoding="utf-8") as fh:
            json.dump([c.__dict__ for c in comps], fh, indent=1)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="branchnet", description="Tree-ensemble-derived sparse neural classifiers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="fit ensemble, build and train a model on one split")
    t.add_argument("--data", required=True)
    t.add_argument("--label", default="label")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config")
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="accuracy and macro F1 of a trained model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--label", default="label")
    e.add_argument("--split-file")
    e.add_argument("--subset", choices=("train", "test", "val"), default="test")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("explain", help="trace the most activated branch per tree for one instance")
    x.add_argument("--model", required=True)
    x.add_argument("--data")
    x.add_argument("--label", default="label")
    x.add_argument("--row", type=int)
    x.add_argument("--values")
    x.add_argument("--json", action="store_true")
    x.add_argument("--coverage", action="store_true")
    x.set_defaults(func=cmd_explain)

    b = sub.add_parser("bench", help="multi-seed benchmark from a config file")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--baseline")
    b.add_argument("--alpha", type=float)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("compare", help="exact Wilcoxon comparison of two score files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--alpha", type=float)
    c.add_argument("--metric", choices=("accuracy", "f1"), default="accuracy")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"branchnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"branchnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"branchnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"branchnet: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
