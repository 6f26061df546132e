"""Self-composing neural operators with a learnable multigrid backbone.

Also ships finite-difference Darcy and Helmholtz solvers for generating
training data, a small reverse-mode autodiff engine, and a CLI.
"""

__version__ = "0.1.0"

from .autodiff import Variable, backward, conv2d, conv2d_transpose, grad_check, no_grad
from .dataset_io import Dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .estimator import SelfComposingRegressor
from .multigrid import AdaConv, VCycleBackbone
from .operator import ConvBlockBackbone, SelfComposingOp, build_model
from .oracle import generate_dataset, solve_darcy, solve_helmholtz
from .training import TrainConfig, train_and_unroll, train_stage

__all__ = [
    "AdaConv", "ConvBlockBackbone", "Dataset", "SelfComposingOp", "SelfComposingRegressor", "TrainConfig",
    "VCycleBackbone", "Variable", "backward", "build_model", "conv2d", "conv2d_transpose", "generate_dataset",
    "grad_check", "load_checkpoint", "load_dataset", "no_grad", "save_checkpoint", "save_dataset",
    "solve_darcy", "solve_helmholtz", "train_and_unroll", "train_stage",
]
