"""Gradient audit of a full self-composing model against finite differences."""

from __future__ import annotations

import numpy as np

from .autodiff import GradCheckReport, Variable, grad_check, mse
from .multigrid import VCycleBackbone
from .operator import ConvBlockBackbone, SelfComposingOp


def audit_model(backbone: str = "mgv", grid: int = 16, depth: int = 2, channels: int = 4, levels: int = 2,
                seed: int = 0) -> SelfComposingOp:
    """A small model whose parameters (biases included) are all nonzero."""
    if backbone == "mgv":
        bb = VCycleBackbone(channels=channels, levels=levels, seed=seed)
    elif backbone == "conv":
        bb = ConvBlockBackbone(channels=channels, seed=seed)
    else:
        raise ValueError(f"unknown backbone {backbone!r}")
    model = SelfComposingOp(bb, depth=depth, seed=seed)
    rng = np.random.default_rng([seed, 99])
    for p in model.parameters():
        p.value += rng.normal(0.0, 0.1, size=p.shape)
    return model


def gradient_audit(backbone: str = "mgv", grid: int = 16, depth: int = 2, channels: int = 4, levels: int = 2,
                   seed: int = 0, tol: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Check every parameter gradient of ``mse(model(k, f), target)`` by central differences."""
    model = audit_model(backbone, grid, depth, channels, levels, seed)
    rng = np.random.default_rng([seed, 100])
    k = rng.normal(size=(1, grid, grid))
    f = rng.normal(size=(1, grid, grid))
    target = Variable(rng.normal(size=(1, grid, grid)))
    return grad_check(lambda: mse(model.forward(k, f), target), model.parameters(), tol=tol, step=step)
