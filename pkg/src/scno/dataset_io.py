"""The ``.nods`` container plus datasets, checkpoints and metric logs built on it.

Binary layout (all integers little-endian)::

    b"NODS" | version u32 | meta_len u32 | meta (UTF-8) | count u32
    per entry: name_len u16 | name (UTF-8) | ndim u8 | dims u32 * ndim
               | dtype u8 (0 = float64) | row-major payload
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"NODS"
VERSION = 1
DTYPE_F64 = 0
CHECKPOINT_FORMAT = 1

METRIC_LOG_HEADER = ["stage_depth", "epoch", "step", "train_loss", "val_rel_l2", "val_rel_h1", "wall_seconds"]


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class DuplicateNameError(ContainerError):
    pass


class ArchitectureMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# raw container
# ---------------------------------------------------------------------------


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_container(arrays: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]], metadata: str = "") -> bytes:
    items = list(arrays.items()) if isinstance(arrays, Mapping) else list(arrays)
    seen = set()
    meta = metadata.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(items))]
    for name, arr in items:
        if name in seen:
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype != np.float64:
            raise ContainerError(f"entry {name!r}: only float64 arrays are supported, got {arr.dtype}")
        if not np.all(np.isfinite(arr)):
            raise ContainerError(f"entry {name!r} contains non-finite values")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", DTYPE_F64))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_container(buf: bytes) -> tuple[dict[str, np.ndarray], str]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(f"file truncated: needed {n} bytes at offset {pos}, have {len(buf) - pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    take(4)
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, this reader supports {VERSION}")
    (meta_len,) = struct.unpack("<I", take(4))
    metadata = take(meta_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        if name in arrays:
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (dtype,) = struct.unpack("<B", take(1))
        if dtype != DTYPE_F64:
            raise ContainerError(f"entry {name!r}: unknown dtype code {dtype}")
        count_el = int(np.prod(dims, dtype=np.int64))
        payload = take(8 * count_el)
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after last entry")
    return arrays, metadata


def write_container(path, arrays, metadata: str = "") -> None:
    _atomic_write(path, encode_container(arrays, metadata))


def read_container(path) -> tuple[dict[str, np.ndarray], str]:
    return decode_container(Path(path).read_bytes())


def format_metadata(meta: Mapping[str, object]) -> str:
    """``key: <json value>`` lines, in insertion order."""
    lines = []
    for key, value in meta.items():
        if ":" in key or "\n" in key:
            raise ValueError(f"invalid metadata key {key!r}")
        lines.append(f"{key}: {json.dumps(value, sort_keys=True)}")
    return "\n".join(lines)


def parse_metadata(text: str) -> dict[str, object]:
    meta: dict[str, object] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(":")
        meta[key.strip()] = json.loads(value)
    return meta


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    inputs: dict[str, np.ndarray]
    target: np.ndarray


@dataclass
class Dataset:
    """Stacked ``(k, f, u)`` arrays, each ``[N, C, H, W]``, plus metadata."""

    k: np.ndarray
    f: np.ndarray
    u: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = {self.k.shape[0], self.f.shape[0], self.u.shape[0]}
        if len(n) != 1:
            raise ValueError("k, f and u must hold the same number of samples")
        shapes = {self.k.shape[2:], self.f.shape[2:], self.u.shape[2:]}
        if len(shapes) != 1:
            raise ValueError("k, f and u must share one grid")
        grid = self.metadata.get("grid")
        if grid is not None and tuple(self.k.shape[2:]) != (grid, grid):
            raise ValueError(f"metadata grid {grid} does not match sample shape {self.k.shape[2:]}")

    def __len__(self) -> int:
        return self.k.shape[0]

    @property
    def problem(self) -> str:
        return self.metadata.get("problem", "unknown")

    @property
    def grid(self) -> int:
        return self.k.shape[-1]

    @property
    def spacing(self) -> float:
        return 1.0 / (self.grid - 1)

    @property
    def samples(self) -> list[Sample]:
        return [Sample({"k": self.k[i], "f": self.f[i]}, self.u[i]) for i in range(len(self))]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.k[index], self.f[index], self.u[index], dict(self.metadata))

    def split(self, val_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Deterministic shuffled split into (train, validation)."""
        n = len(self)
        n_val = int(round(val_fraction * n))
        order = np.random.default_rng(seed).permutation(n)
        return self.subset(np.sort(order[n_val:])), self.subset(np.sort(order[:n_val]))


def save_dataset(path, ds: Dataset) -> None:
    write_container(path, {"k": ds.k, "f": ds.f, "u": ds.u}, format_metadata({"kind": "dataset", **ds.metadata}))


def load_dataset(path) -> Dataset:
    arrays, text = read_container(path)
    meta = parse_metadata(text)
    if meta.pop("kind", None) != "dataset":
        raise ContainerError(f"{path} does not hold a dataset")
    missing = {"k", "f", "u"} - set(arrays)
    if missing:
        raise ContainerError(f"dataset file missing entries {sorted(missing)}")
    return Dataset(arrays["k"], arrays["f"], arrays["u"], meta)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, train_state=None) -> None:
    """Write model parameters, architecture config and optional optimizer state."""
    entries = [(f"param/{name}", p.value) for name, p in model.named_parameters().items()]
    meta = {"kind": "checkpoint", "format_version": CHECKPOINT_FORMAT, "config": model.get_config()}
    if train_state is not None:
        for name in sorted(train_state.m):
            entries.append((f"adam.m/{name}", train_state.m[name]))
            entries.append((f"adam.v/{name}", train_state.v[name]))
        meta["train_state"] = {"step": train_state.step, "stage_index": train_state.stage_index}
    write_container(path, entries, format_metadata(meta))


def _read_checkpoint(path):
    arrays, text = read_container(path)
    meta = parse_metadata(text)
    if meta.get("kind") != "checkpoint":
        raise ContainerError(f"{path} does not hold a checkpoint")
    if meta.get("format_version") != CHECKPOINT_FORMAT:
        raise VersionMismatchError(f"checkpoint format {meta.get('format_version')}, expected {CHECKPOINT_FORMAT}")
    return arrays, meta


def load_parameters(model, arrays: Mapping[str, np.ndarray]) -> None:
    """Copy ``param/<name>`` arrays into ``model`` after a name/shape audit."""
    params = model.named_parameters()
    stored = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise ArchitectureMismatchError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise ArchitectureMismatchError(
                f"shape mismatch for parameter {name!r}: checkpoint {stored[name].shape}, model {p.shape}"
            )
    for name, p in params.items():
        p.value[...] = stored[name]


def load_checkpoint(path, model=None):
    """Return ``(model, train_state)``.

    Without ``model`` a fresh one is built from the stored config. With a
    model, parameters are loaded into it (its depth may differ, since the
    parameter set does not depend on depth) along with the stored input
    and output normalization.
    """
    from .operator import build_model
    from .training import TrainState

    arrays, meta = _read_checkpoint(path)
    if model is None:
        model = build_model(meta["config"])
    load_parameters(model, arrays)
    if "normalization" in meta["config"]:
        model.normalization = dict(meta["config"]["normalization"])
    state = None
    if "train_state" in meta:
        m = {k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")}
        v = {k[len("adam.v/"):]: v for k, v in arrays.items() if k.startswith("adam.v/")}
        ts = meta["train_state"]
        state = TrainState(m=m, v=v, step=ts["step"], stage_index=ts["stage_index"])
    return model, state


def checkpoint_config(path) -> dict:
    return _read_checkpoint(path)[1]["config"]


# ---------------------------------------------------------------------------
# metric logs
# ---------------------------------------------------------------------------


def write_metric_log(path, rows: Iterable[Mapping[str, object]]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_LOG_HEADER, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_metric_log(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
