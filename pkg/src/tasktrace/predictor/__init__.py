from tasktrace.predictor.lstm import (
    DimensionMismatch,
    DivergedLoss,
    EmptyTrainingSet,
    Hyperparams,
    LstmModel,
    fine_tune,
    train_lstm,
    write_training_log,
)
from tasktrace.predictor.ngram import NgramModel, train_ngram


def predict(model, context):
    """Next-key distribution for one context, from either model type."""
    return model.predict(context)


__all__ = [
    "DimensionMismatch",
    "DivergedLoss",
    "EmptyTrainingSet",
    "Hyperparams",
    "LstmModel",
    "NgramModel",
    "fine_tune",
    "predict",
    "train_lstm",
    "train_ngram",
    "write_training_log",
]
