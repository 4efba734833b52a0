"""Extremely randomized decision trees grown best-first under a leaf cap.

Each tree is stored as a flat arena of nodes; node ids are assigned in
creation order, so the root is node 0 and children always have larger ids
than their parent.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .data import Dataset

TREES_FORMAT = "branchnet-trees/1"

LEAF = "leaf"
INTERNAL = "internal"


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def n_trees_formula(n_classes: int, n_features: int) -> int:
    if n_classes < 2 or n_features < 1:
        raise ValueError("need n_classes >= 2 and n_features >= 1")
    return n_classes + round_half_away(math.log2(n_features))


def max_leaves_formula(n_features: int) -> int:
    if n_features < 1:
        raise ValueError("need n_features >= 1")
    return 2 ** (round_half_away(math.log2(n_features)) + 4)


def default_split_candidates(n_features: int) -> int:
    return math.isqrt(n_features - 1) + 1 if n_features > 1 else 1


@dataclass(frozen=True)
class EnsembleConfig:
    n_trees: int
    max_leaves: int
    n_split_candidates: int
    min_samples_leaf: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.n_split_candidates < 1:
            raise ValueError("n_split_candidates must be >= 1")

    @classmethod
    def for_data(cls, n_classes: int, n_features: int, seed: int = 0, **overrides) -> "EnsembleConfig":
        params = dict(
            n_trees=n_trees_formula(n_classes, n_features),
            max_leaves=max_leaves_formula(n_features),
            n_split_candidates=default_split_candidates(n_features),
            min_samples_leaf=1,
            seed=int(seed),
        )
        params.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**params)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TreeNode:
    node_id: int
    kind: str
    class_counts: np.ndarray
    depth: int
    feature: int = -1
    threshold: float = float("nan")
    left: int = -1
    right: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.kind == LEAF

    def to_dict(self) -> dict:
        internal = self.kind == INTERNAL
        return {
            "id": self.node_id,
            "kind": self.kind,
            "feature": int(self.feature) if internal else None,
            "threshold": float(self.threshold) if internal else None,
            "left": int(self.left) if internal else None,
            "right": int(self.right) if internal else None,
            "class_counts": [int(c) for c in self.class_counts],
            "depth": self.depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        internal = d["kind"] == INTERNAL
        return cls(
            node_id=int(d["id"]),
            kind=d["kind"],
            class_counts=np.asarray(d["class_counts"], dtype=np.int64),
            depth=int(d["depth"]),
            feature=int(d["feature"]) if internal else -1,
            threshold=float(d["threshold"]) if internal else float("nan"),
            left=int(d["left"]) if internal else -1,
            right=int(d["right"]) if internal else -1,
        )


@dataclass
class DecisionTree:
    nodes: list[TreeNode]
    root_id: int = 0

    @property
    def n_leaves(self) -> int:
        return sum(1 for nd in self.nodes if nd.is_leaf)

    @property
    def n_classes(self) -> int:
        return len(self.nodes[self.root_id].class_counts)

    def leaf_of(self, x: np.ndarray) -> int:
        nid = self.root_id
        nodes = self.nodes
        while nodes[nid].kind == INTERNAL:
            nd = nodes[nid]
            nid = nd.left if x[nd.feature] <= nd.threshold else nd.right
        return nid

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf id for every row of X."""
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(X.shape[0], dtype=np.int64)
        stack = [(self.root_id, np.arange(X.shape[0]))]
        while stack:
            nid, rows = stack.pop()
            nd = self.nodes[nid]
            if nd.kind == LEAF:
                out[rows] = nid
                continue
            go_left = X[rows, nd.feature] <= nd.threshold
            stack.append((nd.left, rows[go_left]))
            stack.append((nd.right, rows[~go_left]))
        return out

    def to_dict(self) -> list[dict]:
        return [nd.to_dict() for nd in self.nodes]

    @classmethod
    def from_dict(cls, nodes: list[dict]) -> "DecisionTree":
        parsed = [TreeNode.from_dict(d) for d in nodes]
        for i, nd in enumerate(parsed):
            if nd.node_id != i:
                raise ValueError("node ids must be dense and in arena order")
        return cls(parsed, 0)


def _gini_weighted(counts: np.ndarray, n: np.ndarray) -> np.ndarray:
    # n * gini = n - sum(c^2) / n
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, n - (counts.astype(np.float64) ** 2).sum(axis=-1) / np.maximum(n, 1), 0.0)


def _exact_decrease_positive(parent: np.ndarray, left: np.ndarray, right: np.ndarray) -> bool:
    # sign of  sum_l c^2/nl + sum_r c^2/nr - sum c^2/n  in integer arithmetic
    n, nl, nr = int(parent.sum()), int(left.sum()), int(right.sum())
    sl = sum(int(c) ** 2 for c in left)
    sr = sum(int(c) ** 2 for c in right)
    sp = sum(int(c) ** 2 for c in parent)
    return sl * nr * n + sr * nl * n - sp * nl * nr > 0


class _SplitFinder:
    """Draws the random candidate splits for one node and keeps the best."""

    def __init__(self, X, y, n_classes, cfg: EnsembleConfig, rng, n_root):
        self.X, self.y, self.C = X, y, n_classes
        self.cfg, self.rng, self.n_root = cfg, rng, n_root

    def best_split(self, rows: np.ndarray, counts: np.ndarray):
        """Return (priority, feature, threshold, left_rows, right_rows) or None."""
        n = rows.size
        if n < 2 * self.cfg.min_samples_leaf or np.count_nonzero(counts) <= 1:
            return None
        Xn = self.X[rows]
        lo, hi = Xn.min(axis=0), Xn.max(axis=0)
        varying = np.flatnonzero(hi > lo)
        if varying.size == 0:
            return None
        k = min(self.cfg.n_split_candidates, varying.size)
        feats = self.rng.choice(varying, size=k, replace=False)
        thresholds = np.empty(k)
        for i, f in enumerate(feats):
            t = self.rng.uniform(lo[f], hi[f])
            while not lo[f] < t < hi[f]:
                t = self.rng.uniform(lo[f], hi[f])
            thresholds[i] = t

        go_left = Xn[:, feats] <= thresholds  # [n, k]
        yn = self.y[rows]
        onehot = np.zeros((n, self.C), dtype=np.int64)
        onehot[np.arange(n), yn] = 1
        left_counts = go_left.T.astype(np.int64) @ onehot  # [k, C]
        right_counts = counts[None, :] - left_counts
        nl = left_counts.sum(axis=1)
        nr = n - nl
        msl = self.cfg.min_samples_leaf
        valid = (nl >= msl) & (nr >= msl)
        if not valid.any():
            return None
        decrease = _gini_weighted(counts, np.array(n)) - _gini_weighted(left_counts, nl) - _gini_weighted(right_counts, nr)
        decrease = np.where(valid, decrease, -np.inf)
        best = int(np.argmax(decrease))
        if not _exact_decrease_positive(counts, left_counts[best], right_counts[best]):
            return None
        mask = go_left[:, best]
        priority = decrease[best] / self.n_root
        return priority, int(feats[best]), float(thresholds[best]), rows[mask], rows[~mask]


def fit_tree(X, y, cfg: EnsembleConfig, rng: np.random.Generator, n_classes: int | None = None) -> DecisionTree:
    """Grow one extremely randomized tree best-first until the leaf cap is hit
    or no leaf can be split further."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("fit_tree needs a non-empty 2-D feature matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("fit_tree needs finite features")
    C = int(n_classes if n_classes is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= C:
        raise ValueError("labels out of range")

    finder = _SplitFinder(X, y, C, cfg, rng, X.shape[0])
    nodes: list[TreeNode] = []
    heap: list = []
    pending: dict[int, tuple] = {}

    def add_leaf(rows, depth):
        counts = np.bincount(y[rows], minlength=C).astype(np.int64)
        nid = len(nodes)
        nodes.append(TreeNode(nid, LEAF, counts, depth))
        split = finder.best_split(rows, counts)
        if split is not None:
            pending[nid] = split
            heapq.heappush(heap, (-split[0], nid))
        return nid

    add_leaf(np.arange(X.shape[0]), 0)
    n_leaves = 1
    while heap and n_leaves < cfg.max_leaves:
        _, nid = heapq.heappop(heap)
        _, feat, thr, lrows, rrows = pending.pop(nid)
        nd = nodes[nid]
        left = add_leaf(lrows, nd.depth + 1)
        right = add_leaf(rrows, nd.depth + 1)
        nd.kind, nd.feature, nd.threshold, nd.left, nd.right = INTERNAL, feat, thr, left, right
        n_leaves += 1
    return DecisionTree(nodes, 0)


def tree_streams(seed: int, n_trees: int) -> list[np.random.Generator]:
    """Independent generator per tree index, derived from the ensemble seed."""
    return [np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(i,))) for i in range(n_trees)]


def fit_ensemble(ds: Dataset, train_idx, seed: int, **overrides) -> tuple[list[DecisionTree], EnsembleConfig]:
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("empty training index set")
    cfg = EnsembleConfig.for_data(ds.n_classes, ds.n_features, seed=seed, **overrides)
    X, y = ds.features[train_idx], ds.labels[train_idx]
    trees = [fit_tree(X, y, cfg, rng, ds.n_classes) for rng in tree_streams(cfg.seed, cfg.n_trees)]
    return trees, cfg


def predict_tree(tree: DecisionTree, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    counts = tree.nodes[tree.leaf_of(x)].class_counts
    return counts / counts.sum()


def predict_ensemble(trees: Sequence[DecisionTree], X) -> np.ndarray:
    """Average of per-tree leaf class distributions; [n, C]."""
    X = np.asarray(X, dtype=np.float64)
    total = None
    for tree in trees:
        leaf = tree.apply(X)
        counts = np.stack([nd.class_counts for nd in tree.nodes]).astype(np.float64)
        probs = counts[leaf] / counts[leaf].sum(axis=1, keepdims=True)
        total = probs if total is None else total + probs
    return total / len(trees)


def ensemble_to_json(trees: Sequence[DecisionTree], cfg: EnsembleConfig | None = None) -> str:
    doc = {
        "format": TREES_FORMAT,
        "config": cfg.to_dict() if cfg is not None else None,
        "trees": [t.to_dict() for t in trees],
    }
    return json.dumps(doc, separators=(",", ":"))


def ensemble_from_json(text: str) -> tuple[list[DecisionTree], EnsembleConfig | None]:
    doc = json.loads(text)
    if doc.get("format") != TREES_FORMAT:
        raise ValueError(f"unsupported ensemble format {doc.get('format')!r}")
    cfg = EnsembleConfig(**doc["config"]) if doc.get("config") else None
    return [DecisionTree.from_dict(t) for t in doc["trees"]], cfg
