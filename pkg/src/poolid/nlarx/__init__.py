"""Recurrent-trained MLP NLARX models."""
from .model import (MlpParams, NlarxConfig, NlarxModel, grad_bptt, loss, loss_and_grad,
                    predict_one_step, rollout, rollout_batch)

__all__ = ["MlpParams", "NlarxConfig", "NlarxModel", "grad_bptt", "loss", "loss_and_grad",
           "predict_one_step", "rollout", "rollout_batch"]
from .train import AdamState, TrainingDivergedError, TrainResult, fit, train, train_model

__all__ += ["AdamState", "TrainingDivergedError", "TrainResult", "fit", "train", "train_model"]
