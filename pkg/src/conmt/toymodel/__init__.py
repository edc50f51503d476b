"""Desk-scale continuous-output seq2seq: tasks, model and training."""

from .model import Batch, ToySeq2Seq, greedy_batch, loss_and_grads, loss_only
from .tasks import EOS, TaskData, ToyTask, gen_task
from .training import (
    TrainConfig,
    collapse_experiment,
    evaluate,
    frequency_experiment,
    train,
    train_step,
)

__all__ = [
    "EOS",
    "Batch",
    "TaskData",
    "ToySeq2Seq",
    "ToyTask",
    "TrainConfig",
    "collapse_experiment",
    "evaluate",
    "frequency_experiment",
    "gen_task",
    "greedy_batch",
    "loss_and_grads",
    "loss_only",
    "train",
    "train_step",
]
