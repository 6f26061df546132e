"""Losses, Adam, fixed-depth training and the Train-and-Unroll schedule."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Variable, backward, map_unary, mse, no_grad, reduce_sum, take
from .dataset_io import Dataset, save_checkpoint, write_metric_log
from .metrics import DegenerateTargetError, grad_sq_norm, per_sample_metrics

log = logging.getLogger(__name__)

LOSSES = ("mse", "rel_l2", "rel_l2_plus_h1")


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _per_sample_sq(x: Variable) -> Variable:
    return reduce_sum(map_unary("square", x), axis=(-3, -2, -1))


def _relative(err_sq: Variable, ref_sq: np.ndarray) -> Variable:
    # mean_b sqrt(err_sq_b / ref_sq_b)
    scaled = err_sq * Variable(1.0 / ref_sq)
    ratios = map_unary("sqrt", scaled)
    return map_unary("scale", reduce_sum(ratios), c=1.0 / ref_sq.size)


def _grad_sq(x: Variable, h: float) -> Variable:
    dx = take(x, (Ellipsis, slice(None), slice(1, None))) - take(x, (Ellipsis, slice(None), slice(None, -1)))
    dy = take(x, (Ellipsis, slice(1, None), slice(None))) - take(x, (Ellipsis, slice(None, -1), slice(None)))
    return map_unary("scale", _per_sample_sq(dx) + _per_sample_sq(dy), c=1.0 / h**2)


def compute_loss(kind: str, pred: Variable, target, h: float = 1.0) -> Variable:
    """Differentiable training loss.

    ``rel_l2`` is the sample mean of ``|pred - target| / |target|`` over all
    channels; ``rel_l2_plus_h1`` adds the same ratio for forward-difference
    gradients (the H1 seminorm).
    """
    target = np.asarray(getattr(target, "values", target), dtype=np.float64)
    pred = pred if isinstance(pred, Variable) else Variable(getattr(pred, "values", pred))
    batched = target.ndim == 4
    if kind == "mse":
        return mse(pred, Variable(target))
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}")
    t = target if batched else target[None]
    p = pred if batched else take(pred, (None,))
    ref = (t * t).sum(axis=(-3, -2, -1))
    if np.any(ref == 0):
        raise DegenerateTargetError("relative loss with a zero target")
    diff = p - Variable(t)
    loss = _relative(_per_sample_sq(diff), ref)
    if kind == "rel_l2_plus_h1":
        ref_g = grad_sq_norm(t, h)
        if np.any(ref_g == 0):
            raise DegenerateTargetError("relative H1 loss with a constant target")
        loss = loss + _relative(_grad_sq(diff, h), ref_g)
    return loss


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    stage_index: int = 0
    history: list[dict] = field(default_factory=list)


def adam_step(params: dict[str, Variable], state: TrainState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update using the gradients held by ``params``."""
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    loss: str = "rel_l2"
    lr: float = 1e-3
    lr_min_ratio: float = 0.0
    stage_lr_decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 50
    patience: int | None = 10
    schedule: list[int] = field(default_factory=lambda: [1])
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        s = list(self.schedule)
        if not s or s[0] < 1 or any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError(f"schedule must be strictly increasing and start >= 1, got {s}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.stage_lr_decay <= 1:
            raise ValueError("stage_lr_decay must lie in (0, 1]")

    def peak_lr(self, stage_index: int) -> float:
        """Start-of-stage learning rate; each stage's cosine decays from here."""
        return self.lr * self.stage_lr_decay**stage_index


def snapshot(model) -> dict[str, np.ndarray]:
    return {k: p.value.copy() for k, p in model.named_parameters().items()}


def restore(model, params: dict[str, np.ndarray]) -> None:
    for k, p in model.named_parameters().items():
        p.value[...] = params[k]


def dataset_loss(model, data: Dataset, kind: str, batch_size: int = 32) -> float:
    """Sample-weighted loss over a whole dataset without building a graph."""
    total = 0.0
    with no_grad():
        for s in range(0, len(data), batch_size):
            sl = slice(s, s + batch_size)
            out = model.forward(data.k[sl], data.f[sl])
            n = out.shape[0]
            total += n * float(compute_loss(kind, out, data.u[sl], data.spacing).value)
    return total / len(data)


def _val_metrics(model, val: Dataset | None) -> tuple[float, float]:
    if val is None or len(val) == 0:
        return float("nan"), float("nan")
    m = per_sample_metrics(model.predict(val.k, val.f), val.u, val.spacing)
    return float(m["rel_l2"].mean()), float(m["rel_h1"].mean())


@dataclass
class StageResult:
    depth: int
    params: dict[str, np.ndarray]
    initial_params: dict[str, np.ndarray]
    history: list[dict]
    initial_loss: float
    final_loss: float
    val_rel_l2: float
    val_rel_h1: float
    epochs_run: int
    checkpoint: Path | None = None

    def restore(self, model) -> None:
        restore(model, self.params)
        model.depth = self.depth


def train_stage(model, train: Dataset, config: TrainConfig, depth: int, state: TrainState | None = None,
                val: Dataset | None = None, clock: float | None = None) -> StageResult:
    """Train at a fixed composition depth.

    Epoch 0 of the returned history is the loss at the stage's starting
    parameters (omitted when ``config.epochs`` is 0); each later row is
    evaluated after that epoch's updates.
    Training stops after ``config.epochs`` or once the monitored loss has
    not improved for ``config.patience`` epochs.
    """
    state = TrainState() if state is None else state
    clock = time.perf_counter() if clock is None else clock
    model.depth = depth
    params = model.named_parameters()
    start = snapshot(model)
    h = train.spacing
    n = len(train)
    n_batches = math.ceil(n / config.batch_size) if n else 0
    total_steps = max(1, config.epochs * n_batches)
    peak = config.peak_lr(state.stage_index)

    def row(epoch, loss):
        vl2, vh1 = _val_metrics(model, val)
        r = {"stage_depth": depth, "epoch": epoch, "step": state.step, "train_loss": loss,
             "val_rel_l2": vl2, "val_rel_h1": vh1, "wall_seconds": time.perf_counter() - clock}
        history.append(r)
        return r

    history: list[dict] = []
    initial = dataset_loss(model, train, config.loss) if n else float("nan")
    if config.epochs > 0:
        row(0, initial)
    best = math.inf
    best_epoch = 0
    epochs_run = 0
    stage_step = 0
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, state.stage_index, epoch])
        order = rng.permutation(n)
        for b in range(n_batches):
            idx = np.sort(order[b * config.batch_size : (b + 1) * config.batch_size])
            model.zero_grad()
            pred = model.forward(train.k[idx], train.f[idx])
            loss = compute_loss(config.loss, pred, train.u[idx], h)
            if not np.isfinite(loss.value):
                raise NonFiniteError(f"non-finite loss at step {state.step} (depth {depth}, epoch {epoch})")
            backward(loss)
            frac = stage_step / total_steps
            lr_min = peak * config.lr_min_ratio
            lr = lr_min + 0.5 * (peak - lr_min) * (1.0 + math.cos(math.pi * frac))
            adam_step(params, state, lr, config.beta1, config.beta2, config.eps)
            stage_step += 1
        epochs_run = epoch
        r = row(epoch, dataset_loss(model, train, config.loss))
        log.info("depth %d epoch %d loss %.4e val_rel_l2 %.4e", depth, epoch, r["train_loss"], r["val_rel_l2"])
        monitored = r["val_rel_l2"] if val is not None and len(val) else r["train_loss"]
        if monitored < best:
            best, best_epoch = monitored, epoch
        elif config.patience is not None and epoch - best_epoch >= config.patience:
            break
    model.zero_grad()
    state.history.extend(history)
    if history:
        final_loss, vl2, vh1 = history[-1]["train_loss"], history[-1]["val_rel_l2"], history[-1]["val_rel_h1"]
    else:
        final_loss, (vl2, vh1) = initial, _val_metrics(model, val)
    return StageResult(depth, snapshot(model), start, history, initial, final_loss, vl2, vh1, epochs_run)


def train_and_unroll(model, data: Dataset, config: TrainConfig, out_dir=None, val: Dataset | None = None,
                     state: TrainState | None = None) -> list[StageResult]:
    """Train stage by stage along ``config.schedule``, warm-starting each stage.

    Because the backbone is shared across compositions, a deeper stage has
    exactly the parameters of the previous one, which it starts from
    unchanged. With ``val`` absent, ``config.val_fraction`` of ``data`` is
    held out. One checkpoint per stage is written when ``out_dir`` is set.
    """
    if val is None and config.val_fraction > 0:
        train, val = data.split(config.val_fraction, config.seed)
    else:
        train = data
    state = TrainState() if state is None else state
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    clock = time.perf_counter()
    results = []
    for i, depth in enumerate(config.schedule):
        state.stage_index = i
        res = train_stage(model, train, config, depth, state, val, clock)
        if out is not None:
            res.checkpoint = out / f"stage{i + 1}_depth{depth}.nods"
            save_checkpoint(res.checkpoint, model, state)
        results.append(res)
    if out is not None:
        write_metric_log(out / "metrics.csv", state.history)
    return results


def train_direct(model, data: Dataset, config: TrainConfig, depth: int, **kwargs) -> list[StageResult]:
    """Fixed-depth training from the current parameters (a one-stage schedule)."""
    cfg = TrainConfig(**{**config.__dict__, "schedule": [depth]})
    return train_and_unroll(model, data, cfg, **kwargs)
