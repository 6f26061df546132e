"""Error metrics and the depth-scan table."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


class DegenerateTargetError(ValueError):
    """The reference field has zero norm, so relative errors are undefined."""


def _batched(a) -> np.ndarray:
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    return a[None] if a.ndim == 3 else a


def grad_sq_norm(x: np.ndarray, h: float) -> np.ndarray:
    """Per-sample squared norm of forward-difference gradients, scaled by ``1/h``."""
    dx = (x[..., :, 1:] - x[..., :, :-1]) / h
    dy = (x[..., 1:, :] - x[..., :-1, :]) / h
    return (dx * dx).sum(axis=(-3, -2, -1)) + (dy * dy).sum(axis=(-3, -2, -1))


def _sq_norm(x: np.ndarray) -> np.ndarray:
    return (x * x).sum(axis=(-3, -2, -1))


@dataclass
class MetricsRow:
    model_id: str
    depth: int
    rel_l2: float
    rel_h1: float
    rrmse: float
    max_error: float
    wall_seconds: float = 0.0
    n_samples: int = 0


def per_sample_metrics(pred, target, h: float) -> dict[str, np.ndarray]:
    """Metric arrays of length ``N`` for ``[N, C, H, W]`` (or single ``[C, H, W]``) inputs.

    ``rel_h1`` compares full discrete H1 norms (values plus gradients);
    ``max_error`` is the unnormalized pointwise maximum, taken on the
    complex modulus for two-channel fields.
    """
    p, t = _batched(pred), _batched(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    e = p - t
    t_l2 = _sq_norm(t)
    if np.any(t_l2 == 0):
        raise DegenerateTargetError("target with zero norm")
    rel_l2 = np.sqrt(_sq_norm(e) / t_l2)
    rel_h1 = np.sqrt((_sq_norm(e) + grad_sq_norm(e, h)) / (t_l2 + grad_sq_norm(t, h)))
    if p.shape[1] == 2:
        pointwise = np.sqrt(e[:, 0] ** 2 + e[:, 1] ** 2)
    else:
        pointwise = np.abs(e).max(axis=1)
    return {"rel_l2": rel_l2, "rel_h1": rel_h1, "rrmse": rel_l2.copy(), "max_error": pointwise.max(axis=(-2, -1))}


def compute_metrics(pred, target, h: float, model_id: str = "", depth: int = 0) -> MetricsRow:
    """Sample-averaged metrics as a :class:`MetricsRow`."""
    m = per_sample_metrics(pred, target, h)
    return MetricsRow(model_id, depth, float(m["rel_l2"].mean()), float(m["rel_h1"].mean()),
                      float(m["rrmse"].mean()), float(m["max_error"].mean()), n_samples=len(m["rel_l2"]))


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    fields = list(MetricsRow.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


DEPTH_SCAN_HEADER = ["depth", "final_train_loss", "val_rel_l2", "val_rel_h1"]


def depth_scan(stages, val_data=None, model=None) -> list[dict]:
    """One row per trained stage: depth, final training loss and validation errors.

    ``stages`` is the output of :func:`scno.training.train_and_unroll`. When
    ``val_data`` and ``model`` are given, each stage's parameters are loaded
    into ``model`` at that depth and re-evaluated.
    """
    if not stages:
        raise ValueError("depth scan needs at least one stage")
    rows = []
    for st in stages:
        row = {"depth": st.depth, "final_train_loss": st.final_loss,
               "val_rel_l2": st.val_rel_l2, "val_rel_h1": st.val_rel_h1}
        if val_data is not None and model is not None and len(val_data):
            st.restore(model)
            pred = model.predict(val_data.k, val_data.f)
            m = per_sample_metrics(pred, val_data.u, val_data.spacing)
            row["val_rel_l2"] = float(m["rel_l2"].mean())
            row["val_rel_h1"] = float(m["rel_h1"].mean())
        rows.append(row)
    return rows


def depth_monotone(rows: list[dict], slack: float = 1.05, key: str = "final_train_loss") -> bool:
    """``err(l) <= slack * err(l - 1)`` along the scan."""
    vals = [r[key] for r in rows]
    return all(b <= slack * a for a, b in zip(vals, vals[1:]))


def write_depth_scan(path, rows: list[dict]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DEPTH_SCAN_HEADER, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
