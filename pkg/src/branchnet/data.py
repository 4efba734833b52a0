"""Tabular classification datasets: CSV loading, stratified splits, synthetic blobs."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

TRAIN_FRACTION = (7, 10)
TEST_FRACTION = (2, 10)


class DataError(ValueError):
    """Raised for unreadable, malformed or invariant-violating data."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    feature_names: list[str]
    class_names: list[str]
    name: str = "dataset"

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] < 1:
            raise DataError(f"features must be a 2-D matrix with >= 1 column, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError(f"labels shape {y.shape} does not match {X.shape[0]} samples")
        if not np.all(np.isfinite(X)):
            r, c = np.argwhere(~np.isfinite(X))[0]
            raise DataError(f"non-finite feature value at row {r}, column {c}")
        if self.n_classes < 1 or X.shape[0] < self.n_classes:
            raise DataError("need n_samples >= n_classes >= 1")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError("labels out of range [0, n_classes)")
        missing = np.flatnonzero(np.bincount(y, minlength=self.n_classes) == 0)
        if missing.size:
            raise DataError(f"classes without samples: {missing.tolist()}")
        if len(self.feature_names) != X.shape[1]:
            raise DataError("feature_names length does not match n_features")
        if len(self.class_names) != self.n_classes:
            raise DataError("class_names length does not match n_classes")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", list(self.feature_names))
        object.__setattr__(self, "class_names", list(self.class_names))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self, idx=None) -> np.ndarray:
        y = self.labels if idx is None else self.labels[np.asarray(idx, dtype=np.int64)]
        return np.bincount(y, minlength=self.n_classes)


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    test: np.ndarray
    val: np.ndarray
    seed: int = 0

    def __post_init__(self):
        for name in ("train", "test", "val"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.test), len(self.val)

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "train": self.train.tolist(),
            "test": self.test.tolist(),
            "val": self.val.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitIndices":
        return cls(train=d["train"], test=d["test"], val=d["val"], seed=int(d["seed"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "SplitIndices":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def load_csv(path, label_column: str | int, class_names: Sequence[str] | None = None,
             name: str | None = None) -> Dataset:
    """Load a numeric CSV with a header row.

    The label column may hold arbitrary strings; they are encoded densely in
    order of first appearance unless ``class_names`` fixes the encoding
    (used when scoring a file against an already trained model).
    """
    if not os.path.isfile(path):
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if isinstance(label_column, int) or (isinstance(label_column, str) and label_column.lstrip("-").isdigit()
                                             and label_column not in header):
            li = int(label_column)
            if not -len(header) <= li < len(header):
                raise DataError(f"{path}: label column index {li} out of range")
            li %= len(header)
        else:
            if label_column not in header:
                raise DataError(f"{path}: label column {label_column!r} absent")
            li = header.index(label_column)

        feat_cols = [j for j in range(len(header)) if j != li]
        if not feat_cols:
            raise DataError(f"{path}: no feature columns")
        rows, raw_labels = [], []
        for r, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
            vals = []
            for j in feat_cols:
                cell = row[j].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: unparsable cell at row {r}, column {header[j]!r}: {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: non-finite cell at row {r}, column {header[j]!r}: {cell!r}")
                vals.append(v)
            rows.append(vals)
            raw_labels.append(row[li].strip())

    if class_names is None:
        mapping: dict[str, int] = {}
        for lab in raw_labels:
            mapping.setdefault(lab, len(mapping))
        if len(mapping) < 2:
            raise DataError(f"{path}: need at least 2 classes, found {len(mapping)}")
        class_names = list(mapping)
    else:
        class_names = list(class_names)
        mapping = {c: i for i, c in enumerate(class_names)}
        unknown = sorted(set(raw_labels) - set(mapping))
        if unknown:
            raise DataError(f"{path}: labels not in the known classes: {unknown[:5]}")

    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(feat_cols))
    y = np.array([mapping[lab] for lab in raw_labels], dtype=np.int64)
    return Dataset(
        features=X,
        labels=y,
        n_classes=len(class_names),
        feature_names=[header[j] for j in feat_cols],
        class_names=class_names,
        name=name or os.path.splitext(os.path.basename(path))[0],
    )


def save_csv(ds: Dataset, path, label_column: str = "label") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(ds.feature_names) + [label_column])
        for x, lab in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [ds.class_names[lab]])


def split_sizes(n: int) -> tuple[int, int, int]:
    """Train/test/val sizes with half-up rounding done in integer arithmetic."""
    n_train = (TRAIN_FRACTION[0] * 2 * n + TRAIN_FRACTION[1]) // (2 * TRAIN_FRACTION[1])
    n_test = (TEST_FRACTION[0] * 2 * n + TEST_FRACTION[1]) // (2 * TEST_FRACTION[1])
    return n_train, n_test, n - n_train - n_test


def _allocate(class_sizes: np.ndarray, totals: tuple[int, ...]) -> np.ndarray:
    """Integer [classes x splits] table with row sums class_sizes and column sums
    totals, every cell the floor or floor+1 of its exact proportional share.

    After flooring, the leftovers form a 0/1 matrix with known row and column
    sums; Ryser's greedy fill (largest outstanding column need first, ties to
    the larger fractional share) constructs it whenever one exists, and the
    exact shares guarantee existence.
    """
    n = int(class_sizes.sum())
    n_cls, k = len(class_sizes), len(totals)
    base = np.zeros((n_cls, k), dtype=np.int64)
    frac = np.zeros((n_cls, k), dtype=np.int64)
    for c, nc in enumerate(class_sizes):
        for j, t in enumerate(totals):
            base[c, j], frac[c, j] = divmod(int(nc) * int(t), n)
    need = np.array(totals, dtype=np.int64) - base.sum(axis=0)
    extra = np.asarray(class_sizes, dtype=np.int64) - base.sum(axis=1)
    for c in sorted(range(n_cls), key=lambda c: (-extra[c], c)):
        cols = sorted(range(k), key=lambda j: (-need[j], -frac[c, j], j))[: extra[c]]
        for j in cols:
            if need[j] <= 0:
                raise AssertionError("stratified allocation failed")
            base[c, j] += 1
            need[j] -= 1
    return base


def split(ds: Dataset, seed: int, stratify: bool = True) -> SplitIndices:
    """Stratified 70/20/10 train/test/validation split, re-drawn per seed."""
    n = ds.n_samples
    sizes = split_sizes(n)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    if not stratify:
        perm = rng.permutation(n)
        a, b = sizes[0], sizes[0] + sizes[1]
        return SplitIndices(np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:]), seed=int(seed))

    counts = ds.class_counts()
    small = np.flatnonzero(counts < 3)
    if small.size:
        raise DataError(f"classes with fewer than 3 samples cannot be split: "
                        f"{[ds.class_names[c] for c in small]}")
    table = _allocate(counts, sizes)
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in range(ds.n_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == c))
        cuts = np.cumsum(table[c])
        for j, chunk in enumerate(np.split(members, cuts[:-1])):
            parts[j].append(chunk)
    train, test, val = (np.sort(np.concatenate(p)) for p in parts)
    return SplitIndices(train, test, val, seed=int(seed))


def make_blobs(n_samples: int, n_features: int, n_classes: int, spread: float = 1.0,
               seed: int = 0, box: float = 5.0) -> Dataset:
    """Isotropic Gaussian clusters around distinct random centers."""
    if n_classes < 1 or n_features < 1 or n_samples < n_classes:
        raise DataError("invalid sizes for make_blobs")
    if not spread > 0:
        raise DataError("spread must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    min_gap = box / max(n_classes, 2)
    centers = rng.uniform(-box, box, size=(n_classes, n_features))
    for _ in range(1000):
        gaps = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() >= min_gap:
            break
        bad = np.unravel_index(np.argmin(gaps), gaps.shape)[0]
        centers[bad] = rng.uniform(-box, box, size=n_features)
    else:
        raise DataError("could not place distinct cluster centers")
    labels = np.arange(n_samples) % n_classes
    labels = labels[rng.permutation(n_samples)]
    X = centers[labels] + spread * rng.standard_normal((n_samples, n_features))
    return Dataset(
        features=X,
        labels=labels,
        n_classes=n_classes,
        feature_names=[f"x{j}" for j in range(n_features)],
        class_names=[f"c{c}" for c in range(n_classes)],
        name=f"blobs{n_samples}x{n_features}c{n_classes}",
    )
