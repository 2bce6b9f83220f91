"""Desk-scale machine unlearning lab: CaMU, baselines and evaluation."""

from .data import Dataset, JointDataset, SplitSpec, batches, load_idx, prepare_joint, split, synth_blobs
from .eval import MetricsReport, RelearnCurve, Splits, accuracy, evaluate, mia_success_rate, relearn_curve
from .nn import Model, build_model, clone_model, forward_with_representation
from .unlearn import TrainConfig, UnlearnConfig, UnlearnResult, camu, finetune, neg_grad, retrain, train

__version__ = "0.1.0"
