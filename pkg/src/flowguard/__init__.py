"""Train network-flow classifiers, evade them with a zeroth-order black-box
attack, and defend them with an autoencoder anomaly guard."""

__version__ = "0.1.0"

from . import dataset, guard, models, zoo
from .dataset import (
    Column,
    Dataset,
    FeatureSchema,
    FlowRecord,
    Scaler,
    SynthConfig,
    drop_identity_features,
    fit_scaler,
    load_csv,
    scale_dataset,
    split,
    synth_flows,
)
from .guard import (
    AutoencoderGuard,
    DetectionVerdict,
    GuardTrainConfig,
    Thresholds,
    calibrate_thresholds,
    detect,
    purify_batch,
    train_autoencoder,
)
from .models import (
    ForestConfig,
    GbtConfig,
    MetricsReport,
    MlpConfig,
    ProbModel,
    evaluate,
    train_forest,
    train_gbt,
    train_mlp,
)
from .zoo import (
    AttackConstraints,
    AttackResult,
    ZooConfig,
    attack,
    attack_one,
    margin_loss,
)
