"""Map a tree ensemble onto the sparse BranchNet architecture.

A branch is the root path ending at an internal node with at least one leaf
child. Every branch becomes one hidden unit: its input connections are the
features on the path (mask M1), its initial input weights reflect how often
each feature is used across the ensemble, and its frozen output weights hold
the class proportions observed at the terminal node.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import serialize
from .extratrees import DecisionTree, INTERNAL

ARCH_FORMAT = "branchnet-arch/1"

LEFT = "left"
RIGHT = "right"

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Condition:
    feature: int
    threshold: float
    # None marks the terminal split, whose two sides end the branch
    direction: str | None

    def holds(self, x) -> bool | None:
        if self.direction is None:
            return None
        goes_left = bool(x[self.feature] <= self.threshold)
        return goes_left if self.direction == LEFT else not goes_left

    def to_dict(self) -> dict:
        return {"feature": self.feature, "threshold": self.threshold, "direction": self.direction}


@dataclass(frozen=True)
class Branch:
    tree_index: int
    node_id: int
    conditions: tuple[Condition, ...]
    class_counts: np.ndarray
    leaf_sides: tuple[str, ...] = ()

    @property
    def feature_set(self) -> frozenset[int]:
        return frozenset(c.feature for c in self.conditions)

    @property
    def path_conditions(self) -> tuple[Condition, ...]:
        """Conditions an instance must satisfy to reach the terminal node."""
        return self.conditions[:-1]

    @property
    def terminal(self) -> Condition:
        return self.conditions[-1]

    @property
    def class_proportions(self) -> np.ndarray:
        return self.class_counts / self.class_counts.sum()

    def to_dict(self) -> dict:
        return {
            "tree": self.tree_index,
            "node": self.node_id,
            "conditions": [c.to_dict() for c in self.conditions],
            "class_counts": [int(c) for c in self.class_counts],
            "leaf_sides": list(self.leaf_sides),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Branch":
        return cls(
            tree_index=int(d["tree"]),
            node_id=int(d["node"]),
            conditions=tuple(Condition(int(c["feature"]), float(c["threshold"]), c["direction"])
                             for c in d["conditions"]),
            class_counts=np.asarray(d["class_counts"], dtype=np.int64),
            leaf_sides=tuple(d.get("leaf_sides", ())),
        )


def extract_branches(ensemble: Sequence[DecisionTree]) -> list[Branch]:
    """One branch per parent-of-leaf node, ordered by (tree, node_id)."""
    branches: list[Branch] = []
    for t, tree in enumerate(ensemble):
        nodes = tree.nodes
        root = nodes[tree.root_id]
        if root.kind != INTERNAL:
            log.warning("tree %d is a single leaf and contributes no branches", t)
            continue
        found = []
        stack = [(tree.root_id, ())]
        seen = set()
        while stack:
            nid, path = stack.pop()
            if nid in seen:
                raise ValueError(f"tree {t}: node {nid} reached twice (not a tree)")
            seen.add(nid)
            nd = nodes[nid]
            if nd.kind != INTERNAL:
                continue
            if not (0 <= nd.left < len(nodes) and 0 <= nd.right < len(nodes)):
                raise ValueError(f"tree {t}: node {nid} has dangling children")
            sides = tuple(side for side, child in ((LEFT, nd.left), (RIGHT, nd.right))
                          if nodes[child].kind != INTERNAL)
            if sides:
                conds = path + (Condition(nd.feature, nd.threshold, None),)
                found.append(Branch(t, nid, conds, np.asarray(nd.class_counts, dtype=np.int64), sides))
            stack.append((nd.left, path + (Condition(nd.feature, nd.threshold, LEFT),)))
            stack.append((nd.right, path + (Condition(nd.feature, nd.threshold, RIGHT),)))
        found.sort(key=lambda b: b.node_id)
        branches.extend(found)
    if not branches:
        raise ValueError("every tree is a single leaf; no branches to build from")
    return branches


def feature_frequency(branches: Sequence[Branch], d: int, counting: str = "branch") -> np.ndarray:
    """How often each feature is used across all branches.

    ``counting="branch"`` counts branches whose feature set contains the
    feature; ``"condition"`` counts every condition on every path.
    """
    freq = np.zeros(d, dtype=np.int64)
    for b in branches:
        if counting == "branch":
            freq[list(b.feature_set)] += 1
        elif counting == "condition":
            for c in b.conditions:
                freq[c.feature] += 1
        else:
            raise ValueError(f"unknown counting mode {counting!r}")
    return freq


@dataclass
class Architecture:
    mask_m1: np.ndarray
    w1_init: np.ndarray
    w2: np.ndarray
    branches: list[Branch]
    d: int
    C: int
    tree_boundaries: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def H(self) -> int:
        return self.mask_m1.shape[0]

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.d)

    def header(self) -> dict:
        return {
            "format": ARCH_FORMAT,
            "d": self.d,
            "H": self.H,
            "C": self.C,
            "sparsity": sparsity_stats(self),
            "tree_boundaries": [list(tb) for tb in self.tree_boundaries],
            "branches": [b.to_dict() for b in self.branches],
        }

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        header = self.header()
        header["matrices"] = {
            "mask_m1": serialize.write_matrix(os.path.join(directory, "mask_m1.bin"), self.mask_m1),
            "w1_init": serialize.write_matrix(os.path.join(directory, "w1_init.bin"), self.w1_init),
            "w2": serialize.write_matrix(os.path.join(directory, "w2.bin"), self.w2),
        }
        with open(os.path.join(directory, "architecture.json"), "w", encoding="utf-8") as fh:
            json.dump(header, fh, indent=1)

    @classmethod
    def load(cls, directory) -> "Architecture":
        with open(os.path.join(directory, "architecture.json"), encoding="utf-8") as fh:
            header = json.load(fh)
        if header.get("format") != ARCH_FORMAT:
            raise ValueError(f"unsupported architecture format {header.get('format')!r}")
        m = {k: serialize.read_matrix(os.path.join(directory, v["file"]), v) for k, v in header["matrices"].items()}
        return cls(
            mask_m1=m["mask_m1"],
            w1_init=m["w1_init"],
            w2=m["w2"],
            branches=[Branch.from_dict(b) for b in header["branches"]],
            d=header["d"],
            C=header["C"],
            tree_boundaries=[tuple(tb) for tb in header["tree_boundaries"]],
        )


def build_architecture(branches: Sequence[Branch], d: int, C: int, counting: str = "branch") -> Architecture:
    if not branches:
        raise ValueError("empty branch list")
    H = len(branches)
    scale = 1.0 / np.sqrt(d)
    mask = np.zeros((H, d), dtype=np.float64)
    w2 = np.zeros((C, H), dtype=np.float64)
    for h, b in enumerate(branches):
        feats = sorted(b.feature_set)
        if feats and (feats[0] < 0 or feats[-1] >= d):
            raise ValueError(f"branch {h} uses a feature outside [0, {d})")
        if len(b.class_counts) != C:
            raise ValueError(f"branch {h} has {len(b.class_counts)} class counts, expected {C}")
        total = b.class_counts.sum()
        if total <= 0:
            raise ValueError(f"branch {h} has zero class-count total")
        mask[h, feats] = 1.0
        w2[:, h] = (b.class_counts / total) * scale

    freq = feature_frequency(branches, d, counting).astype(np.float64)
    w1 = mask * (freq / freq.max())[None, :] * scale

    boundaries = []
    start = 0
    for h in range(1, H + 1):
        if h == H or branches[h].tree_index != branches[start].tree_index:
            boundaries.append((branches[start].tree_index, start, h))
            start = h
    return Architecture(mask, w1, w2, list(branches), d, C, boundaries)


def sparsity_stats(arch: Architecture) -> dict:
    return {
        "w1_sparsity": float(np.mean(arch.mask_m1 == 0)),
        "w2_sparsity": float(np.mean(arch.w2 == 0)),
        "H": arch.H,
        "d": arch.d,
        "C": arch.C,
    }
