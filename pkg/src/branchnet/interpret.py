"""Rule tracing for single predictions and per-feature coverage scores.

Per tree, the hidden unit with the highest post-sigmoid activation (eval
mode, so the value depends on the instance alone) is taken as that tree's
active branch, and its path conditions are replayed against the raw input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .branchmap import Architecture, LEFT, RIGHT
from .network import BranchNetModel, EVAL, forward

CHECK, CROSS = "✓", "✗"


@dataclass
class ConditionCheck:
    feature: int
    feature_name: str
    threshold: float
    direction: str | None
    value: float
    satisfied: bool | None
    # terminal split only: the side the instance takes and whether it is a leaf
    side_taken: str | None = None
    side_is_leaf: bool | None = None


@dataclass
class TreeExplanation:
    tree_index: int
    hidden_unit: int
    activation: float
    node_id: int
    conditions: list[ConditionCheck]
    rule_satisfied: bool
    class_mix: list[float]


@dataclass
class Explanation:
    predicted_class: int
    predicted_name: str
    probabilities: list[float]
    trees: list[TreeExplanation]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, ensure_ascii=False)

    def to_text(self) -> str:
        lines = []
        for te in self.trees:
            parts = []
            for c in te.conditions:
                if c.direction is None:
                    op = "<=" if c.side_taken == LEFT else ">"
                    leaf = "leaf" if c.side_is_leaf else "subtree"
                    parts.append(f"[split {c.feature_name} ≤|> {c.threshold:.4g}: "
                                 f"{c.feature_name}={c.value:.4g} {op} {c.threshold:.4g} → {leaf}]")
                else:
                    op = "≤" if c.direction == LEFT else ">"
                    parts.append(f"{c.feature_name} {op} {c.threshold:.4g} {CHECK if c.satisfied else CROSS}")
            verdict = "rule fulfilled" if te.rule_satisfied else "rule not fulfilled"
            mix = ", ".join(f"{p:.2f}" for p in te.class_mix)
            lines.append(f"tree {te.tree_index}, neuron {te.hidden_unit} (activation {te.activation:.4f}): "
                         f"{' AND '.join(parts)} → {verdict}; branch class mix [{mix}]")
        lines.append(f"predicted class: {self.predicted_name} ({self.predicted_class})")
        return "\n".join(lines)


def hidden_activations(model: BranchNetModel, X) -> np.ndarray:
    """Post-sigmoid activations from an eval-mode forward pass, [n, H]."""
    prev = model.mode
    model.mode = EVAL
    try:
        return forward(model, np.atleast_2d(X)).s
    finally:
        model.mode = prev


def explain_instance(model: BranchNetModel, arch: Architecture, x,
                     feature_names=None, class_names=None) -> Explanation:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != arch.d or model.d != arch.d or model.H != arch.H:
        raise ValueError("instance, model and architecture dimensions disagree")
    feature_names = feature_names or [f"x{j}" for j in range(arch.d)]
    class_names = class_names or [str(c) for c in range(arch.C)]

    prev = model.mode
    model.mode = EVAL
    try:
        trace = forward(model, x[None, :])
    finally:
        model.mode = prev
    act = trace.s[0]
    probs = trace.probs[0]

    trees = []
    for tree_index, start, stop in arch.tree_boundaries:
        h = start + int(np.argmax(act[start:stop]))
        branch = arch.branches[h]
        checks = []
        for c in branch.conditions:
            v = float(x[c.feature])
            if c.direction is None:
                side = LEFT if v <= c.threshold else RIGHT
                checks.append(ConditionCheck(c.feature, feature_names[c.feature], c.threshold, None, v, None,
                                             side, side in branch.leaf_sides))
            else:
                checks.append(ConditionCheck(c.feature, feature_names[c.feature], c.threshold, c.direction, v,
                                             bool(c.holds(x))))
        satisfied = all(ch.satisfied for ch in checks if ch.direction is not None)
        trees.append(TreeExplanation(tree_index, h, float(act[h]), branch.node_id, checks, satisfied,
                                     [float(p) for p in branch.class_proportions]))
    pred = int(np.argmax(probs))
    return Explanation(pred, class_names[pred], [float(p) for p in probs], trees)


@dataclass
class FeatureCoverage:
    counts: np.ndarray
    proportions: np.ndarray

    def ranking(self) -> list[int]:
        return sorted(range(len(self.counts)), key=lambda f: (-self.counts[f], f))


def feature_coverage(arch: Architecture) -> FeatureCoverage:
    counts = arch.mask_m1.sum(axis=0).astype(np.int64)
    return FeatureCoverage(counts, counts / arch.H)
