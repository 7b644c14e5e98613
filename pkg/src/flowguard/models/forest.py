"""Bagged Gini CART forest with sqrt(d) feature subsampling per split."""

import math
from dataclasses import dataclass

import numpy as np

from .base import ProbModel, check_training_preconditions
from .trees import TreeEnsemble, build_classification_tree


@dataclass(frozen=True)
class ForestConfig:
    num_trees: int = 40
    max_depth: int = 10
    min_leaf: int = 2
    feature_subsample: int | None = None  # default sqrt(d), rounded up
    seed: int = 0


class ForestModel(ProbModel):
    def __init__(self, trees, num_classes, num_features):
        self.trees = trees
        self.num_classes = num_classes
        self.num_features = num_features
        self._ensemble = TreeEnsemble(trees)

    def predict_proba_batch(self, X):
        X = self._check_arity(np.atleast_2d(X))
        # exact arithmetic mean of the member-tree class distributions
        return self._ensemble.eval(X).mean(axis=0)

    def predict_proba(self, x):
        return self.predict_proba_batch(np.atleast_2d(x))[0]


def train_forest(train, config=ForestConfig()):
    """num_trees CART trees on bootstrap resamples; deterministic per seed
    (tree t draws from its own seed stream [seed, t])."""
    check_training_preconditions(train)
    X, y = train.X, train.y
    n, d = X.shape
    subsample = config.feature_subsample or max(1, math.ceil(math.sqrt(d)))
    trees = []
    for t in range(config.num_trees):
        rng = np.random.default_rng([config.seed, t])
        boot = rng.integers(0, n, size=n)
        trees.append(build_classification_tree(
            X[boot], y[boot], train.num_classes,
            config.max_depth, config.min_leaf, subsample, rng))
    return ForestModel(trees, train.num_classes, d)
