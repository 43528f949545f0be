from .folds import FoldAssignment, stratified_folds
from .loops import FinetuneResult, TrainConfig, TrainLog, init_classifier, run_finetuning, run_pretraining
from .losses import mlm_loss, positive_weights, weighted_bce_loss
from .optim import AdamWState, adamw_step, lr_schedule

__all__ = [
    "AdamWState",
    "FinetuneResult",
    "FoldAssignment",
    "TrainConfig",
    "TrainLog",
    "adamw_step",
    "init_classifier",
    "lr_schedule",
    "mlm_loss",
    "positive_weights",
    "run_finetuning",
    "run_pretraining",
    "stratified_folds",
    "weighted_bce_loss",
]
