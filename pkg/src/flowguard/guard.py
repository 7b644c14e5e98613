"""Autoencoder anomaly guard.

A six-weight-layer hourglass network (d -> 64 -> 32 -> latent -> 32 -> 64
-> d, ReLU hidden, sigmoid output) trained only on clean traffic.  Inputs it
cannot reconstruct within calibrated per-feature and aggregate limits are
flagged anomalous; reconstruction also serves as purification before
classification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    ArityMismatch,
    DivergedTraining,
    EmptyDataset,
    MixedLabels,
)

ENCODER_WIDTHS = (64, 32)

PER_FEATURE_FLOOR = 1e-4
AGGREGATE_FLOOR = 1e-8

GUARD_FORMAT = "flowguard-guard"
GUARD_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GuardTrainConfig:
    latent_dim: int | None = None  # default min(8, d - 1)
    epochs: int = 300
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0


def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class AutoencoderGuard:
    """Trained reconstruction network; immutable, thread-safe queries."""

    def __init__(self, weights, biases):
        if len(weights) != 6:
            raise ValueError("guard must have exactly 6 weight layers")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.num_features = self.weights[0].shape[0]
        self.latent_dim = self.weights[2].shape[1]
        if self.weights[-1].shape[1] != self.num_features:
            raise ValueError("decoder output width must equal input width")

    def forward(self, X):
        """All layer activations; last entry is the sigmoid reconstruction."""
        acts = [np.asarray(X, dtype=np.float64)]
        h = acts[0]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = _relu(h @ w + b)
            acts.append(h)
        acts.append(_sigmoid(h @ self.weights[-1] + self.biases[-1]))
        return acts

    def reconstruct_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.num_features:
            raise ArityMismatch(
                f"input arity {X.shape[1]} != guard arity {self.num_features}")
        return self.forward(X)[-1]

    def reconstruct(self, x):
        return self.reconstruct_batch(np.atleast_2d(x))[0]


@dataclass
class Thresholds:
    per_feature: np.ndarray
    aggregate_mse: float
    calibration_percentile: float

    def __post_init__(self):
        self.per_feature = np.asarray(self.per_feature, dtype=np.float64)
        if np.any(self.per_feature <= 0) or self.aggregate_mse <= 0:
            raise ValueError("threshold limits must be positive")

    def to_dict(self):
        return {
            "per_feature": self.per_feature.tolist(),
            "aggregate_mse": self.aggregate_mse,
            "calibration_percentile": self.calibration_percentile,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["per_feature"]), d["aggregate_mse"],
                   d["calibration_percentile"])


@dataclass
class DetectionVerdict:
    anomalous: bool
    violated_features: list
    per_feature_deviation: np.ndarray
    mse: float
    reconstruction: np.ndarray

    def to_json_dict(self):
        return {
            "anomalous": self.anomalous,
            "violated_features": self.violated_features,
            "per_feature_deviation": self.per_feature_deviation.tolist(),
            "mse": self.mse,
            "reconstruction": self.reconstruction.tolist(),
        }


def _require_benign(dataset):
    if dataset.num_records == 0:
        raise EmptyDataset("guard needs a non-empty benign dataset")
    present = np.unique(dataset.y)
    if present.size > 1:
        labels = [dataset.label_map[i] for i in present]
        raise MixedLabels(
            f"guard training data must carry a single benign label, got {labels}; "
            "relabel clean traffic explicitly before training the guard")


def mse_and_grads(guard, X):
    """Mean squared reconstruction error and its backprop gradients."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    acts = guard.forward(X)
    out = acts[-1]
    loss = float(np.mean((out - X) ** 2))

    delta = (2.0 / (n * d)) * (out - X) * out * (1.0 - out)
    grads_w, grads_b = [], []
    for layer in range(5, -1, -1):
        grads_w.append(acts[layer].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if layer > 0:
            delta = (delta @ guard.weights[layer].T) * (acts[layer] > 0)
    return loss, grads_w[::-1], grads_b[::-1]


def train_autoencoder(benign, config=GuardTrainConfig()):
    """Mini-batch momentum SGD on reconstruction MSE over benign traffic.

    The dataset must carry one label only: passing a mixed classification
    dataset is almost always a bug (the guard would learn to reconstruct the
    very anomalies it should flag), so it raises MixedLabels.
    """
    _require_benign(benign)
    d = benign.num_features
    if d < 2:
        raise ValueError("guard needs at least 2 features")
    latent = config.latent_dim if config.latent_dim is not None else min(8, d - 1)
    if latent < 1:
        raise ValueError("latent_dim must be >= 1")

    widths = [d, *ENCODER_WIDTHS, latent, *ENCODER_WIDTHS[::-1], d]
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    guard = AutoencoderGuard(weights, biases)
    vel_w = [np.zeros_like(w) for w in guard.weights]
    vel_b = [np.zeros_like(b) for b in guard.biases]

    X = benign.X
    n = X.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, gw, gb = mse_and_grads(guard, X[idx])
            if not np.isfinite(loss):
                raise DivergedTraining("reconstruction loss became non-finite")
            for i in range(6):
                vel_w[i] = config.momentum * vel_w[i] - config.learning_rate * gw[i]
                vel_b[i] = config.momentum * vel_b[i] - config.learning_rate * gb[i]
                guard.weights[i] += vel_w[i]
                guard.biases[i] += vel_b[i]
    return guard


def calibrate_thresholds(guard, benign_holdout, percentile=99.5):
    """Reference deviation limits from a benign holdout.

    per_feature[i] is the given percentile of |x_i - x̂_i| over the holdout
    (floored at 1e-4); aggregate_mse is the same percentile of per-sample
    MSE (floored at 1e-8).  Percentiles resolve to the next actual holdout
    value (no interpolation below it), so a deviation equal to an observed
    benign one never trips the limit.
    """
    _require_benign(benign_holdout)
    if not 0.0 < percentile <= 100.0:
        raise ValueError("percentile must be in (0, 100]")
    X = benign_holdout.X
    recon = guard.reconstruct_batch(X)
    dev = np.abs(X - recon)
    per_feature = np.maximum(
        np.percentile(dev, percentile, axis=0, method="higher"),
        PER_FEATURE_FLOOR)
    mse = np.mean(dev ** 2, axis=1)
    aggregate = max(float(np.percentile(mse, percentile, method="higher")),
                    AGGREGATE_FLOOR)
    return Thresholds(per_feature, aggregate, percentile)


def detect(guard, thresholds, x):
    """Anomaly verdict for one scaled vector: anomalous when any feature
    deviation exceeds its reference limit or the sample MSE exceeds the
    aggregate limit."""
    x = np.asarray(x, dtype=np.float64)
    recon = guard.reconstruct(x)
    dev = np.abs(x - recon)
    violated = np.flatnonzero(dev > thresholds.per_feature)
    mse = float(np.mean(dev ** 2))
    return DetectionVerdict(
        anomalous=bool(violated.size > 0 or mse > thresholds.aggregate_mse),
        violated_features=violated.tolist(),
        per_feature_deviation=dev,
        mse=mse,
        reconstruction=recon,
    )


def detect_batch(guard, thresholds, X):
    return [detect(guard, thresholds, x) for x in np.atleast_2d(X)]


def purify_batch(guard, xs):
    """Reconstructions to feed the downstream classifier in guarded mode."""
    xs = list(xs)
    if not xs:
        return []
    recon = guard.reconstruct_batch(np.array(xs))
    return [recon[i] for i in range(recon.shape[0])]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def guard_to_dict(guard, thresholds=None, calibration_meta=None):
    return {
        "format": GUARD_FORMAT,
        "format_version": GUARD_FORMAT_VERSION,
        "latent_dim": guard.latent_dim,
        "num_features": guard.num_features,
        "weights": [w.tolist() for w in guard.weights],
        "biases": [b.tolist() for b in guard.biases],
        "thresholds": thresholds.to_dict() if thresholds else None,
        "calibration": calibration_meta,
    }


def guard_from_dict(doc):
    if doc.get("format") != GUARD_FORMAT:
        raise ValueError("not a flowguard guard document")
    if doc.get("format_version") != GUARD_FORMAT_VERSION:
        raise ValueError(f"unsupported guard format version {doc.get('format_version')}")
    guard = AutoencoderGuard([np.array(w) for w in doc["weights"]],
                             [np.array(b) for b in doc["biases"]])
    thresholds = (Thresholds.from_dict(doc["thresholds"])
                  if doc.get("thresholds") else None)
    return guard, thresholds


def save_guard(guard, path, thresholds=None, calibration_meta=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(guard_to_dict(guard, thresholds, calibration_meta), fh)
        fh.write("\n")


def load_guard(path):
    with open(path, "r", encoding="utf-8") as fh:
        return guard_from_dict(json.load(fh))
