"""In-repo classifiers: a small CNN with exact input gradients and a
byte-feature boosted-stump surrogate."""

from .common import LabeledSample, accuracy, model_input, pad_crop, split_corpus
from .cnn import (
    FitReport,
    TinyCnnParams,
    TrainConfig,
    TrainingError,
    grad_input,
    init_params,
    load_checkpoint,
    predict,
    predict_proba,
    save_checkpoint,
    train_cnn,
)
from .stumps import (
    SurrogateParams,
    UnknownClassError,
    load_surrogate,
    save_surrogate,
    train_surrogate,
)

__all__ = [
    "LabeledSample",
    "accuracy",
    "model_input",
    "pad_crop",
    "split_corpus",
    "FitReport",
    "TinyCnnParams",
    "TrainConfig",
    "TrainingError",
    "grad_input",
    "init_params",
    "load_checkpoint",
    "predict",
    "predict_proba",
    "save_checkpoint",
    "train_cnn",
    "SurrogateParams",
    "UnknownClassError",
    "load_surrogate",
    "save_surrogate",
    "train_surrogate",
]
