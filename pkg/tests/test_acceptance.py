"""Acceptance criteria, one test per criterion.

Run ``pytest tests/test_acceptance.py`` to get a PASS/FAIL/SKIP line per
criterion in the terminal summary.
"""

import filecmp
import json
import math
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from branchnet import cli
from branchnet.bench import evaluate, run_pipeline
from branchnet.branchmap import LEFT, build_architecture, extract_branches, sparsity_stats
from branchnet.data import Dataset, load_csv, make_blobs
from branchnet.extratrees import fit_ensemble, max_leaves_formula, n_trees_formula
from branchnet.network import BranchNetModel, backward, forward
from branchnet.training import Adam, TrainConfig, combined_loss, cosine_lr, train_step
from branchnet.stats import wilcoxon_exact

from oracles import central_difference, count_parent_of_leaf_nodes, random_small_model, relative_error, wilcoxon_bruteforce

acceptance = pytest.mark.acceptance

# (name, classes, features, trees, max leaves), worked out by hand:
# trees = C + round(log2 d), leaves = 2 ** (round(log2 d) + 4)
SIZES = [
    ("mfeat-fourier", 10, 76, 16, 1024),
    ("cmc", 3, 9, 6, 128),
    ("mfeat-factors", 10, 216, 18, 4096),
    ("pendigits", 10, 16, 14, 256),
    ("mfeat-karhunen", 10, 64, 16, 1024),
    ("optdigits", 10, 64, 16, 1024),
    ("mfeat-zernike", 10, 47, 16, 1024),
    ("mfeat-morpho", 10, 6, 13, 128),
    ("pol", 2, 26, 7, 512),
    ("house_16H", 2, 16, 6, 256),
    ("california", 2, 8, 5, 128),
    ("jannis", 2, 54, 8, 1024),
    ("MiniBooNE", 2, 50, 8, 1024),
    ("covertype", 2, 10, 5, 128),
    ("eye_movements", 2, 20, 6, 256),
    ("MagicTelescope", 2, 10, 5, 128),
    ("wine", 2, 11, 5, 128),
    ("Higgs", 2, 24, 7, 512),
    ("electricity", 2, 7, 5, 128),
    ("bank-marketing", 2, 7, 5, 128),
    ("kdd_ipums_la_97-s", 2, 20, 6, 256),
    ("credit", 2, 10, 5, 128),
]


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


@acceptance("AC1 ensemble size formulas")
def test_ac1_formulas():
    with Timer() as t:
        got = [(name, n_trees_formula(C, d), max_leaves_formula(d)) for name, C, d, _, _ in SIZES]
        assert max_leaves_formula(1) == 16
    assert got == [(name, trees, leaves) for name, _, _, trees, leaves in SIZES]
    assert t.seconds < 1


@acceptance("AC2 gradients match finite differences")
def test_ac2_gradients():
    rng = np.random.default_rng(2)
    worst = 0.0
    with Timer() as t:
        for i in range(24):
            d, H, C = int(rng.integers(3, 9)), int(rng.integers(4, 17)), int(rng.integers(2, 5))
            model = random_small_model(rng, d, H, C, affine_trainable=bool(i % 2))
            X, y = rng.normal(size=(8, d)), rng.integers(0, C, 8)
            trace = forward(model, X, update_running=False)
            grads = backward(model, trace, combined_loss(trace.probs, y)[1])
            assert set(grads) == set(model.parameters())

            def f():
                return combined_loss(forward(model, X, update_running=False).probs, y)[0]

            for name, p in model.parameters().items():
                num = central_difference(f, p, h=1e-4)
                if name == "w1":
                    num = num * model.mask_m1
                worst = max(worst, relative_error(grads[name], num).max())
    assert worst < 1e-4
    assert t.seconds < 30


@acceptance("AC3 W2 frozen and W1 mask kept over 1000 steps")
def test_ac3_freeze_and_mask():
    rng = np.random.default_rng(3)
    ds = make_blobs(300, 6, 3, 1.5, seed=3)
    trees, _ = fit_ensemble(ds, np.arange(300), seed=3)
    arch = build_architecture(extract_branches(trees), 6, 3)
    model = BranchNetModel.from_architecture(arch)
    w2_before = model.w2.tobytes()
    cfg = TrainConfig()
    opt = Adam(model, cfg)
    with Timer() as t:
        for step in range(1000):
            X = rng.normal(size=(32, 6)) * 3
            y = rng.integers(0, 3, 32)
            train_step(model, opt, X, y, cosine_lr(step / 10, cfg), cfg)
    assert model.w2.tobytes() == w2_before
    assert model.w2.tobytes() == np.ascontiguousarray(arch.w2).tobytes()
    assert np.all(model.w1[model.mask_m1 == 0] == 0)
    assert np.any(model.w1 != arch.w1_init)
    assert t.seconds < 60


def _random_dataset(rng):
    n, d, C = int(rng.integers(30, 100)), int(rng.integers(1, 7)), int(rng.integers(2, 5))
    y = np.arange(n) % C
    rng.shuffle(y)
    X = np.round(rng.normal(size=(n, d)) + y[:, None] * rng.uniform(0, 1), 2)
    return Dataset(X, y, C, [f"f{j}" for j in range(d)], [str(c) for c in range(C)])


@acceptance("AC4 branch count matches independent traversal")
def test_ac4_branch_count():
    rng = np.random.default_rng(4)
    checked = 0
    with Timer() as t:
        for i in range(100):
            ds = _random_dataset(rng)
            trees, cfg = fit_ensemble(ds, np.arange(ds.n_samples), seed=i)
            if all(tr.n_leaves == 1 for tr in trees):
                continue
            H = len(extract_branches(trees))
            assert H == sum(count_parent_of_leaf_nodes(tr) for tr in trees)
            assert H <= cfg.n_trees * (cfg.max_leaves - 1)
            checked += 1
    assert checked >= 95
    assert t.seconds < 10


@acceptance("AC5 W2 columns are replayed class proportions")
def test_ac5_w2_content():
    rng = np.random.default_rng(5)
    with Timer() as t:
        for i in range(30):
            ds = _random_dataset(rng)
            train_idx = np.sort(rng.choice(ds.n_samples, size=ds.n_samples * 7 // 10, replace=False))
            trees, _ = fit_ensemble(ds, train_idx, seed=i, max_leaves=16)
            if all(tr.n_leaves == 1 for tr in trees):
                continue
            arch = build_architecture(extract_branches(trees), ds.n_features, ds.n_classes)
            Xt, yt = ds.features[train_idx], ds.labels[train_idx]
            scaled = arch.w2 * math.sqrt(ds.n_features)
            assert np.all(scaled >= 0)
            assert np.abs(scaled.sum(axis=0) - 1).max() <= 1e-12
            for h, b in enumerate(arch.branches):
                keep = np.ones(len(yt), dtype=bool)
                for c in b.path_conditions:
                    keep &= (Xt[:, c.feature] <= c.threshold) if c.direction == LEFT else (Xt[:, c.feature] > c.threshold)
                counts = np.bincount(yt[keep], minlength=ds.n_classes)
                assert np.abs(scaled[:, h] - counts / counts.sum()).max() <= 1e-12
    assert t.seconds < 10


HALF = np.array([[0.5, 0.5]])


@acceptance("AC6a loss at p_t=0.5 equals the stated literal 0.416399")
def test_ac6_literal_value():
    loss, _ = combined_loss(HALF, [0])
    assert abs(loss - 0.416399) <= 1e-6


@acceptance("AC6b loss at p_t=0.5 equals 0.6 ln2 + 0.4*0.5*0.5^2.5 ln2")
def test_ac6_stated_derivation():
    loss, _ = combined_loss(HALF, [0])
    expected = 0.6 * math.log(2) + 0.4 * 0.5 * 0.5 ** 2.5 * math.log(2)
    assert abs(loss - expected) <= 1e-6


@acceptance("AC6c loss at p_t=1 is exactly zero")
def test_ac6_certain():
    loss, _ = combined_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1])
    assert loss == 0.0


@acceptance("AC7 exact Wilcoxon values and brute-force agreement")
def test_ac7_wilcoxon():
    with Timer() as t:
        pos = wilcoxon_exact(np.arange(1, 11) / 100)
        assert pos.p_exact == Fraction(1953125, 10**9)
        assert f"{pos.p_value:.3f}" == "0.002"
        d = np.arange(1, 11) / 100
        d[0] *= -1
        one = wilcoxon_exact(d)
        assert one.p_exact == Fraction(4, 1024)
        assert abs(one.p_value - 0.0039) < 1e-4 and f"{one.p_value:.3f}" == "0.004"
        rng = np.random.default_rng(7)
        for n in range(1, 13):
            for _ in range(8):
                v = rng.integers(-5, 6, n).tolist()
                assert wilcoxon_exact(v).p_exact == wilcoxon_bruteforce(v)
    assert t.seconds < 10


@acceptance("AC8 cosine schedule points")
def test_ac8_schedule():
    cfg = TrainConfig()
    got = [cosine_lr(t, cfg) for t in (0, 90, 180)]
    assert all(abs(a - b) <= 1e-12 for a, b in zip(got, (0.01, 0.005, 0.01)))


@acceptance("AC9 end-to-end blobs accuracy")
def test_ac9_end_to_end():
    ds = make_blobs(1500, 10, 3, 2.0, seed=2024)
    with Timer() as t:
        res = run_pipeline(ds, seed=0)
        metrics = evaluate(res.model, ds, res.splits.test)
    majority = np.bincount(ds.labels[res.splits.test]).max() / res.splits.test.size
    print(f"accuracy {metrics['accuracy']:.4f}, majority {majority:.4f}, H {res.arch.H}, "
          f"epochs {res.record.stopped_epoch}, {t.seconds:.1f}s")
    assert metrics["accuracy"] >= 0.90
    assert metrics["accuracy"] > majority
    assert t.seconds < 120


@acceptance("AC10 bench reports are byte-identical across invocations")
def test_ac10_determinism(tmp_path):
    cfg = tmp_path / "bench.json"
    cfg.write_text(json.dumps({
        "datasets": [
            {"name": "three", "blobs": {"n_samples": 150, "n_features": 4, "n_classes": 3, "spread": 1.5, "seed": 1}},
            {"name": "two", "blobs": {"n_samples": 120, "n_features": 5, "n_classes": 2, "spread": 2.0, "seed": 2}},
        ],
        "seeds": [0, 1, 2],
        "train": {"max_epochs": 150},
    }))
    for run in ("a", "b"):
        assert cli.main(["bench", "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.left_only and not cmp.right_only
    names = sorted(os.listdir(tmp_path / "a"))
    for sub in ("", "heatmaps"):
        for name in sorted(os.listdir(tmp_path / "a" / sub)):
            pa = tmp_path / "a" / sub / name
            if pa.is_file():
                assert pa.read_bytes() == (tmp_path / "b" / sub / name).read_bytes(), name
    assert "report.json" in names


@acceptance("AC11 optdigits soft check (needs BRANCHNET_OPTDIGITS_CSV)")
def test_ac11_optdigits_soft():
    path = os.environ.get("BRANCHNET_OPTDIGITS_CSV")
    if not path:
        pytest.skip("set BRANCHNET_OPTDIGITS_CSV to a local optdigits CSV to run this check")
    ds = load_csv(path, os.environ.get("BRANCHNET_OPTDIGITS_LABEL", "class"))
    from branchnet.data import split
    from branchnet.bench import derive_seeds

    splits = split(ds, derive_seeds(0)["split"])
    trees, _ = fit_ensemble(ds, splits.train, derive_seeds(0)["trees"])
    st = sparsity_stats(build_architecture(extract_branches(trees), ds.n_features, ds.n_classes))
    notes = []
    if not 0.80 <= st["w1_sparsity"] <= 0.87:
        notes.append(f"W1 sparsity {st['w1_sparsity']:.3f} outside 0.80-0.87")
    if not 1000 <= st["H"] < 100000:
        notes.append(f"H = {st['H']} not in the thousands")
    # reported, never failed
    print(f"optdigits: H {st['H']}, W1 sparsity {100 * st['w1_sparsity']:.1f}%, "
          f"W2 sparsity {100 * st['w2_sparsity']:.1f}%" + (f"; deviations: {'; '.join(notes)}" if notes else ""))
