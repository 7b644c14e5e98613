import numpy as np
import pytest

from flowguard.dataset import Column, Dataset, FeatureSchema


@pytest.fixture
def two_feature_schema():
    return FeatureSchema([
        Column("a", mutable=True),
        Column("b", mutable=True),
    ])


def make_dataset(X, y, label_map=None, mutable=True):
    X = np.asarray(X, dtype=float)
    schema = FeatureSchema([Column(f"f{i}", mutable=mutable)
                            for i in range(X.shape[1])])
    if label_map is None:
        label_map = [f"c{i}" for i in range(int(np.max(y)) + 1)]
    return Dataset(schema, X, np.asarray(y, dtype=int), label_map)


def flatten_params(weights, biases):
    return np.concatenate([w.ravel() for w in weights]
                          + [b.ravel() for b in biases])


def numeric_gradient(loss_fn, params, h=1e-6):
    """Central finite differences over a flat parameter vector."""
    grad = np.zeros_like(params)
    for i in range(params.size):
        up = params.copy(); up[i] += h
        dn = params.copy(); dn[i] -= h
        grad[i] = (loss_fn(up) - loss_fn(dn)) / (2 * h)
    return grad
