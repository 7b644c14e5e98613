"""The black-box query contract every classifier exposes.

An attacker (and the evaluation harness) only ever sees predict_proba:
a feature vector in, a probability vector over classes out.  Trained models
are immutable and safe for concurrent queries.
"""

import abc

import numpy as np

from ..errors import ArityMismatch


class ProbModel(abc.ABC):
    num_classes: int
    num_features: int

    @abc.abstractmethod
    def predict_proba(self, x):
        """Probability vector over classes for one scaled feature vector."""

    def predict_proba_batch(self, X):
        """Row-wise predict_proba; subclasses override with a vectorized path."""
        X = np.asarray(X, dtype=np.float64)
        return np.stack([self.predict_proba(x) for x in X])

    def predict_batch(self, X):
        return np.argmax(self.predict_proba_batch(X), axis=1)

    def _check_arity(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.num_features:
            raise ArityMismatch(
                f"input arity {x.shape[-1]} != model arity {self.num_features}")
        return x


def check_training_preconditions(dataset, require_distinct_labels=False):
    """Shared trainer preconditions: scaled inputs, at least 2 classes.

    ``require_distinct_labels`` additionally demands that both (or more)
    classes actually occur in the records, which boosting needs to fit a
    finite base score; bagging tolerates constant labels (pure leaves).
    """
    if dataset.num_records == 0:
        raise ValueError("training dataset is empty")
    if dataset.num_classes < 2:
        raise ValueError("training requires a dataset with at least 2 classes")
    if require_distinct_labels and np.unique(dataset.y).size < 2:
        raise ValueError("training requires at least 2 distinct labels present")
    if dataset.X.size and (dataset.X.min() < -1e-9 or dataset.X.max() > 1.0 + 1e-9):
        raise ValueError("training inputs must be scaled into [0, 1]")
