from .base import ProbModel
from .mlp import MlpConfig, MlpModel, train_mlp
from .forest import ForestConfig, ForestModel, train_forest
from .gbt import GbtConfig, GbtModel, train_gbt
from .metrics import MetricsReport, evaluate
from .io import load_model, model_from_dict, model_to_dict, save_model

__all__ = [
    "ProbModel",
    "MlpConfig", "MlpModel", "train_mlp",
    "ForestConfig", "ForestModel", "train_forest",
    "GbtConfig", "GbtModel", "train_gbt",
    "MetricsReport", "evaluate",
    "save_model", "load_model", "model_to_dict", "model_from_dict",
]
