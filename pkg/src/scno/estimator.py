"""scikit-learn style wrapper around :class:`SelfComposingOp` training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset_io import Dataset
from .metrics import per_sample_metrics
from .multigrid import VCycleBackbone, default_levels
from .operator import ConvBlockBackbone, SelfComposingOp
from .training import TrainConfig, train_and_unroll


def _as_fields(a, name: str) -> np.ndarray:
    a = check_array(a, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if a.ndim == 3:
        a = a[:, None]
    if a.ndim != 4:
        raise ValueError(f"{name} must be [N, C, H, W] or [N, H, W], got shape {a.shape}")
    if a.shape[-1] != a.shape[-2]:
        raise ValueError(f"{name} must live on a square grid, got {a.shape[-2:]}")
    return a


class SelfComposingRegressor(RegressorMixin, BaseEstimator):
    """Field-to-field regressor: ``X = [k, f]`` channels in, solution ``u`` out.

    ``X`` stacks the coefficient channels (the first ``k_channels``) and the
    source channels along axis 1; with exactly ``k_channels`` channels the
    source is taken as zero. Training follows Train-and-Unroll over
    ``schedule`` (default ``1..depth``), or a single fixed-depth stage when
    ``strategy="direct"``.
    """

    def __init__(self, backbone: str = "mgv", channels: int = 8, levels: int | None = None, depth: int = 5,
                 schedule=None, strategy: str = "unroll", k_channels: int = 1, loss: str = "rel_l2",
                 lr: float = 1e-3, epochs: int = 20, batch_size: int = 16, patience: int | None = None,
                 normalize: bool = True, seed: int = 0):
        self.backbone = backbone
        self.channels = channels
        self.levels = levels
        self.depth = depth
        self.schedule = schedule
        self.strategy = strategy
        self.k_channels = k_channels
        self.loss = loss
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.normalize = normalize
        self.seed = seed

    def _split(self, X: np.ndarray):
        if X.shape[1] < self.k_channels:
            raise ValueError(f"X has {X.shape[1]} channels, fewer than k_channels={self.k_channels}")
        k = X[:, : self.k_channels]
        f = X[:, self.k_channels :]
        if f.shape[1] == 0:
            f = np.zeros_like(k)
        return k, f

    def _build(self, grid: int, f_channels: int, out_channels: int) -> SelfComposingOp:
        if self.backbone == "mgv":
            levels = default_levels(grid) if self.levels is None else self.levels
            bb = VCycleBackbone(channels=self.channels, levels=levels, seed=self.seed)
        elif self.backbone == "conv":
            bb = ConvBlockBackbone(channels=self.channels, seed=self.seed)
        else:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        return SelfComposingOp(bb, k_channels=self.k_channels, f_channels=f_channels,
                               out_channels=out_channels, seed=self.seed)

    def _schedule(self) -> list[int]:
        if self.strategy == "direct":
            return [self.depth]
        if self.strategy != "unroll":
            raise ValueError(f"unknown strategy {self.strategy!r}")
        return list(range(1, self.depth + 1)) if self.schedule is None else list(self.schedule)

    def fit(self, X, y, X_val=None, y_val=None):
        X = _as_fields(X, "X")
        y = _as_fields(y, "y")
        if X.shape[0] != y.shape[0] or X.shape[-2:] != y.shape[-2:]:
            raise ValueError(f"X {X.shape} and y {y.shape} disagree in samples or grid")
        k, f = self._split(X)
        n = X.shape[-1]
        train = Dataset(k, f, y, {"problem": "custom", "grid": n})
        val = None
        if X_val is not None:
            kv, fv = self._split(_as_fields(X_val, "X_val"))
            val = Dataset(kv, fv, _as_fields(y_val, "y_val"), {"problem": "custom", "grid": n})
        model = self._build(n, f.shape[1], y.shape[1])
        if self.normalize:
            model.fit_normalization(k, f, y)
        config = TrainConfig(loss=self.loss, lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                             patience=self.patience, schedule=self._schedule(), seed=self.seed, val_fraction=0.0)
        self.stages_ = train_and_unroll(model, train, config, val=val)
        self.model_ = model
        self.n_features_in_ = X.shape[1]
        self.grid_ = n
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _as_fields(X, "X")
        if X.shape[1] != self.n_features_in_ or X.shape[-1] != self.grid_:
            raise ValueError(f"X has shape {X.shape[1:]}, fitted on {self.n_features_in_} channels "
                             f"at grid {self.grid_}")
        k, f = self._split(X)
        return self.model_.predict(k, f)

    def score(self, X, y, sample_weight=None) -> float:
        """Negative mean relative L2 error, so that larger is better."""
        y = _as_fields(y, "y")
        rel = per_sample_metrics(self.predict(X), y, 1.0 / (y.shape[-1] - 1))["rel_l2"]
        return -float(np.average(rel, weights=sample_weight))
