"""Versioned JSON serialization for trained models.

Lets the CLI train and attack in separate invocations; arrays are stored
flattened with enough structure to rebuild bit-identical predictors.
"""

import json

import numpy as np

from .forest import ForestModel
from .gbt import GbtModel
from .mlp import MlpModel
from .trees import TreeNodes

FORMAT = "flowguard-model"
FORMAT_VERSION = 1


def model_to_dict(model):
    if isinstance(model, MlpModel):
        payload = {
            "weights": [w.tolist() for w in model.weights],
            "biases": [b.tolist() for b in model.biases],
        }
        kind = "mlp"
    elif isinstance(model, ForestModel):
        payload = {
            "trees": [t.to_dict() for t in model.trees],
            "num_classes": model.num_classes,
            "num_features": model.num_features,
        }
        kind = "forest"
    elif isinstance(model, GbtModel):
        payload = {
            "base_scores": model.base_scores.tolist(),
            "trees_per_class": [[t.to_dict() for t in ts]
                                for ts in model.trees_per_class],
            "shrinkage": model.shrinkage,
            "num_classes": model.num_classes,
            "num_features": model.num_features,
        }
        kind = "gbt"
    else:
        raise TypeError(f"cannot serialize model of type {type(model).__name__}")
    return {"format": FORMAT, "format_version": FORMAT_VERSION,
            "kind": kind, "payload": payload}


def model_from_dict(doc):
    if doc.get("format") != FORMAT:
        raise ValueError("not a flowguard model document")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('format_version')}")
    kind, payload = doc["kind"], doc["payload"]
    if kind == "mlp":
        return MlpModel(
            [np.array(w) for w in payload["weights"]],
            [np.array(b) for b in payload["biases"]],
        )
    if kind == "forest":
        trees = [TreeNodes.from_dict(t) for t in payload["trees"]]
        return ForestModel(trees, payload["num_classes"], payload["num_features"])
    if kind == "gbt":
        trees = [[TreeNodes.from_dict(t) for t in ts]
                 for ts in payload["trees_per_class"]]
        return GbtModel(np.array(payload["base_scores"]), trees,
                        payload["shrinkage"], payload["num_classes"],
                        payload["num_features"])
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
