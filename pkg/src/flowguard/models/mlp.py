"""Feedforward classifier trained with momentum SGD on cross-entropy.

tanh hidden layers (smooth everywhere, which keeps finite-difference
gradient checks honest), softmax output, float64 throughout so identical
seeds give bitwise-identical parameters.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import DivergedTraining
from .base import ProbModel, check_training_preconditions


@dataclass(frozen=True)
class MlpConfig:
    hidden_widths: tuple = (32,)
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    seed: int = 0


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class MlpModel(ProbModel):
    def __init__(self, weights, biases):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if w.shape[1] != b.shape[0]:
                raise ValueError("bias width does not match weight matrix")
        self.num_features = self.weights[0].shape[0]
        self.num_classes = self.weights[-1].shape[1]

    def forward(self, X):
        """Returns (activations per layer, output probabilities)."""
        acts = [np.asarray(X, dtype=np.float64)]
        h = acts[0]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
            acts.append(h)
        probs = _softmax(h @ self.weights[-1] + self.biases[-1])
        return acts, probs

    def predict_proba_batch(self, X):
        X = self._check_arity(np.atleast_2d(X))
        return self.forward(X)[1]

    def predict_proba(self, x):
        return self.predict_proba_batch(np.atleast_2d(x))[0]


def cross_entropy_and_grads(model, X, y):
    """Mean cross-entropy plus backprop gradients (per weight/bias list).

    Exposed so gradient-check tests can compare against finite differences.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    acts, probs = model.forward(X)
    loss = -np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-300)))

    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads_w, grads_b = [], []
    for layer in range(len(model.weights) - 1, -1, -1):
        grads_w.append(acts[layer].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if layer > 0:
            delta = (delta @ model.weights[layer].T) * (1.0 - acts[layer] ** 2)
    return loss, grads_w[::-1], grads_b[::-1]


def _init_params(widths, rng):
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def train_mlp(train, config=MlpConfig()):
    """Mini-batch momentum SGD on cross-entropy; deterministic per seed."""
    check_training_preconditions(train)
    X, y = train.X, train.y
    widths = [train.num_features, *config.hidden_widths, train.num_classes]
    rng = np.random.default_rng(config.seed)
    weights, biases = _init_params(widths, rng)
    model = MlpModel(weights, biases)
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]

    n = X.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, gw, gb = cross_entropy_and_grads(model, X[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergedTraining("cross-entropy loss became non-finite")
            for i in range(len(model.weights)):
                vel_w[i] = config.momentum * vel_w[i] - config.learning_rate * gw[i]
                vel_b[i] = config.momentum * vel_b[i] - config.learning_rate * gb[i]
                model.weights[i] += vel_w[i]
                model.biases[i] += vel_b[i]
    for w in model.weights:
        if not np.all(np.isfinite(w)):
            raise DivergedTraining("non-finite weights after training")
    return model
