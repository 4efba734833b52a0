"""Sparse neural classifiers compiled from extremely randomized tree ensembles."""

from .data import Dataset, SplitIndices, DataError, load_csv, make_blobs, split
from .extratrees import (
    DecisionTree,
    EnsembleConfig,
    TreeNode,
    fit_ensemble,
    fit_tree,
    max_leaves_formula,
    n_trees_formula,
    predict_tree,
)
from .branchmap import Architecture, Branch, build_architecture, extract_branches, sparsity_stats
from .network import BranchNetModel, ForwardTrace, backward, forward, predict
from .training import TrainConfig, TrainRecord, adam_step, combined_loss, cosine_lr, train
from .interpret import explain_instance, feature_coverage
from .stats import f1_macro, wilcoxon_exact
from .bench import BenchConfig, evaluate, run_benchmark, run_pipeline

__version__ = "0.1.0"
