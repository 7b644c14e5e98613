"""Stagewise gradient-boosted regression trees with logistic loss.

Binary problems are boosted natively from a prior log-odds base score;
multiclass runs one-vs-rest with the per-class sigmoid scores normalized
into a probability vector.  Fills both the shadow-model and victim roles.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import DivergedTraining
from .base import ProbModel, check_training_preconditions
from .trees import TreeEnsemble, build_regression_tree

_MIN_LEAF = 2


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class GbtConfig:
    rounds: int = 50
    max_depth: int = 3
    shrinkage: float = 0.2
    seed: int = 0  # accepted for API uniformity; fitting is deterministic


class GbtModel(ProbModel):
    def __init__(self, base_scores, trees_per_class, shrinkage,
                 num_classes, num_features):
        self.base_scores = np.asarray(base_scores, dtype=np.float64)
        self.trees_per_class = trees_per_class  # list (per class) of TreeNodes lists
        self.shrinkage = shrinkage
        self.num_classes = num_classes
        self.num_features = num_features
        self._ensembles = [TreeEnsemble(ts) if ts else None
                           for ts in trees_per_class]

    def scores_batch(self, X):
        """Raw additive scores, one column per boosted class model."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.tile(self.base_scores, (X.shape[0], 1))
        for c, ens in enumerate(self._ensembles):
            if ens is not None:
                out[:, c] += self.shrinkage * ens.eval(X)[:, :, 0].sum(axis=0)
        return out

    def predict_proba_batch(self, X):
        X = self._check_arity(np.atleast_2d(X))
        scores = self.scores_batch(X)
        if self.num_classes == 2:
            p1 = _sigmoid(scores[:, 1])
            return np.stack([1.0 - p1, p1], axis=1)
        raw = _sigmoid(scores)
        totals = raw.sum(axis=1, keepdims=True)
        uniform = np.full_like(raw, 1.0 / self.num_classes)
        return np.where(totals > 0.0, raw / np.where(totals == 0, 1, totals), uniform)

    def predict_proba(self, x):
        return self.predict_proba_batch(np.atleast_2d(x))[0]


def _prior_log_odds(y, num_classes):
    counts = np.bincount(y, minlength=num_classes).astype(np.float64)
    p = np.clip(counts / counts.sum(), 1e-12, 1.0 - 1e-12)
    return np.log(p / (1.0 - p))


def train_gbt(train, config=GbtConfig()):
    """Fit ``rounds`` regression trees per boosted class on logistic-loss
    gradients; leaf values are Newton steps scaled by ``shrinkage``."""
    check_training_preconditions(train, require_distinct_labels=True)
    X, y = train.X, train.y
    k = train.num_classes
    base = _prior_log_odds(y, k)

    # binary boosts only the class-1 score; multiclass boosts each class
    boosted = [1] if k == 2 else list(range(k))
    trees_per_class = [[] for _ in range(k)]
    scores = {c: np.full(X.shape[0], base[c]) for c in boosted}
    for _ in range(config.rounds):
        for c in boosted:
            target = (y == c).astype(np.float64)
            p = _sigmoid(scores[c])
            grad = target - p          # negative logistic-loss gradient
            hess = p * (1.0 - p)
            tree = build_regression_tree(X, grad, hess,
                                         config.max_depth, _MIN_LEAF)
            step = TreeEnsemble([tree]).eval(X)[0, :, 0]
            scores[c] = scores[c] + config.shrinkage * step
            if not np.all(np.isfinite(scores[c])):
                raise DivergedTraining("boosted scores became non-finite")
            trees_per_class[c].append(tree)

    return GbtModel(base, trees_per_class, config.shrinkage, k, X.shape[1])
