"""Reverse-mode automatic differentiation over dense float64 arrays.

Fields are channels-first: ``[C, H, W]`` for a single sample, or
``[B, C, H, W]`` for a minibatch. Every op accepts either layout; the
batch axis is carried through untouched. The graph is recorded eagerly
during a forward pass and lives as long as the root ``Variable`` is
referenced.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonDeterministicError(RuntimeError):
    """Raised by :func:`grad_check` when re-evaluation changes the value."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def as_array(data, check_finite: bool = True) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if check_finite and not np.all(np.isfinite(arr)):
        raise ValueError("array contains NaN or Inf")
    return arr


class Variable:
    """A dense array node in the computation graph.

    Leaves are created by the user; interior nodes are produced by the ops
    in this module and remember their parents plus a closure mapping the
    output gradient to parent gradients.
    """

    __slots__ = ("value", "requires_grad", "name", "_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = as_array(value)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._grad: np.ndarray | None = None
        self._parents: tuple[Variable, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, value: np.ndarray, parents, backward) -> "Variable":
        out = cls.__new__(cls)
        out.value = value
        out.name = None
        out._grad = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = np.asarray(g, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return zip_binary("add", self, _lift(other, self))

    def __radd__(self, other):
        return zip_binary("add", _lift(other, self), self)

    def __sub__(self, other):
        return zip_binary("sub", self, _lift(other, self))

    def __rsub__(self, other):
        return zip_binary("sub", _lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return map_unary("scale", self, c=float(other))
        return zip_binary("mul", self, _lift(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return map_unary("neg", self)

    def __getitem__(self, index):
        return take(self, index)

    def backward(self) -> None:
        backward(self)


def _lift(other, like: Variable) -> Variable:
    if isinstance(other, Variable):
        return other
    return Variable(np.broadcast_to(as_array(other), like.shape))


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu_value(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def map_unary(kind: str, x: Variable, c: float | None = None) -> Variable:
    """Apply a pointwise map.

    ``kind`` is one of ``gelu`` (exact ``x * Phi(x)``), ``relu``, ``neg``,
    ``scale`` (multiply by ``c``), ``square`` or ``sqrt``.
    """
    v = x.value
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(v * _SQRT_HALF))
        out = v * cdf
        deriv = lambda: cdf + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    elif kind == "relu":
        out = np.maximum(v, 0.0)
        # derivative at the kink taken as 0
        deriv = lambda: (v > 0.0).astype(np.float64)
    elif kind == "neg":
        out = -v
        deriv = None
        return Variable._from_op(out, (x,), lambda g: (-g,))
    elif kind == "scale":
        if c is None:
            raise ValueError("scale requires a constant c")
        out = c * v
        return Variable._from_op(out, (x,), lambda g: (c * g,))
    elif kind == "square":
        out = v * v
        deriv = lambda: 2.0 * v
    elif kind == "sqrt":
        if np.any(v < 0):
            raise ValueError("sqrt of negative value")
        out = np.sqrt(v)
        deriv = lambda: 0.5 / out
    else:
        raise ValueError(f"unknown unary kind {kind!r}")
    return Variable._from_op(out, (x,), lambda g: (g * deriv(),))


def gelu(x: Variable) -> Variable:
    return map_unary("gelu", x)


def relu(x: Variable) -> Variable:
    return map_unary("relu", x)


def _channel_view(vec: np.ndarray, target_ndim: int) -> np.ndarray:
    # [C] -> [C, 1, 1] so it broadcasts over the trailing spatial axes
    return vec.reshape((vec.shape[0],) + (1,) * 2) if target_ndim >= 3 else vec


def _is_channel_vector(b: np.ndarray, a: np.ndarray) -> bool:
    return b.ndim == 1 and a.ndim >= 3 and a.shape[-3] == b.shape[0]


def _reduce_to_channel(g: np.ndarray) -> np.ndarray:
    axes = tuple(i for i in range(g.ndim) if i != g.ndim - 3)
    return g.sum(axis=axes)


def zip_binary(kind: str, a: Variable, b: Variable) -> Variable:
    """Elementwise ``add``, ``sub`` or ``mul``.

    Shapes must match exactly, except that one operand may be a ``[C]``
    vector broadcast per channel against a ``[..., C, H, W]`` field.
    """
    av, bv = a.value, b.value
    a_vec = b_vec = False
    if av.shape != bv.shape:
        if _is_channel_vector(bv, av):
            b_vec = True
            bv = _channel_view(bv, av.ndim)
        elif _is_channel_vector(av, bv):
            a_vec = True
            av = _channel_view(av, bv.ndim)
        else:
            raise DimensionError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")

    def fit_a(g):
        return _reduce_to_channel(g) if a_vec else g

    def fit_b(g):
        return _reduce_to_channel(g) if b_vec else g

    if kind == "add":
        out = av + bv
        bw = lambda g: (fit_a(g), fit_b(g))
    elif kind == "sub":
        out = av - bv
        bw = lambda g: (fit_a(g), fit_b(-g))
    elif kind == "mul":
        out = av * bv
        bw = lambda g: (fit_a(g * bv), fit_b(g * av))
    else:
        raise ValueError(f"unknown binary kind {kind!r}")
    return Variable._from_op(out, (a, b), bw)


def add(a: Variable, b: Variable) -> Variable:
    return zip_binary("add", a, b)


def sub(a: Variable, b: Variable) -> Variable:
    return zip_binary("sub", a, b)


def mul(a: Variable, b: Variable) -> Variable:
    return zip_binary("mul", a, b)


def take(x: Variable, index) -> Variable:
    """Basic (slice) indexing with a scatter-back gradient."""
    out = x.value[index]
    if isinstance(out, np.ndarray):
        out = out.copy()
    else:
        out = np.asarray(out)

    def bw(g):
        gx = np.zeros_like(x.value)
        gx[index] += g
        return (gx,)

    return Variable._from_op(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------


def reduce_sum(x: Variable, axis: int | tuple[int, ...] | None = None) -> Variable:
    if x.value.size == 0:
        raise ValueError("reduce_sum of an empty array")
    out = np.asarray(x.value.sum(axis=axis))
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return Variable._from_op(out, (x,), bw)


def mse(a: Variable, b: Variable) -> Variable:
    """Mean over all entries of ``(a - b)**2``."""
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    n = a.value.size
    if n == 0:
        raise ValueError("mse of empty arrays")
    diff = a.value - b.value
    out = np.asarray(np.mean(diff * diff))

    def bw(g):
        ga = (2.0 / n) * float(g) * diff
        return (ga, -ga)

    return Variable._from_op(out, (a, b), bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _as4d(v: np.ndarray) -> tuple[np.ndarray, bool]:
    if v.ndim == 3:
        return v[None], True
    if v.ndim == 4:
        return v, False
    raise DimensionError(f"expected [C,H,W] or [B,C,H,W], got shape {v.shape}")


def _check_geometry(stride: int, padding: int) -> None:
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride!r}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding!r}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded ``[B,C,Hp,Wp]`` -> columns ``[B, C*kh*kw, ho*wo]``."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    b, c = xp.shape[:2]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add adjoint of :func:`_im2col`."""
    b, c = padded_shape[:2]
    out = np.zeros(padded_shape)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += cols[:, :, i, j]
    return out


def _conv_forward(x4: np.ndarray, k: np.ndarray, stride: int, padding: int):
    b, c, h, w = x4.shape
    o, _, kh, kw = k.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("kernel larger than padded input")
    xp = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x4
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.matmul(k.reshape(o, -1), cols).reshape(b, o, ho, wo)
    return out, ho, wo


def _conv_input_grad(g4: np.ndarray, k: np.ndarray, stride: int, padding: int, in_hw) -> np.ndarray:
    """Adjoint of the convolution map w.r.t. its input."""
    b, o, ho, wo = g4.shape
    _, c, kh, kw = k.shape
    h, w = in_hw
    hp, wp = h + 2 * padding, w + 2 * padding
    cols = np.matmul(k.reshape(o, -1).T, g4.reshape(b, o, ho * wo))
    need_h = (ho - 1) * stride + kh
    need_w = (wo - 1) * stride + kw
    buf = _col2im(cols, (b, c, max(hp, need_h), max(wp, need_w)), kh, kw, stride, ho, wo)
    return buf[:, :, padding : padding + h, padding : padding + w]


def _conv_kernel_grad(g4: np.ndarray, x4: np.ndarray, kshape, stride: int, padding: int) -> np.ndarray:
    b, o, ho, wo = g4.shape
    kh, kw = kshape[2:]
    xp = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x4
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    gk = np.einsum("bop,bqp->oq", g4.reshape(b, o, -1), cols, optimize=True)
    return gk.reshape(kshape)


def conv2d(x: Variable, kernel: Variable, stride: int = 1, padding: int = 0, bias: Variable | None = None) -> Variable:
    """2-D cross-correlation with zero padding.

    ``kernel`` has shape ``[C_out, C_in, kH, kW]`` with odd ``kH, kW``.
    ``bias`` is an optional ``[C_out]`` vector added per output channel.
    """
    _check_geometry(stride, padding)
    k = kernel.value
    if k.ndim != 4:
        raise DimensionError(f"kernel must be 4-D, got shape {k.shape}")
    if k.shape[2] % 2 == 0 or k.shape[3] % 2 == 0:
        raise DimensionError(f"kernel spatial size must be odd, got {k.shape[2:]}")
    x4, squeeze = _as4d(x.value)
    if x4.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: input has {x4.shape[1]} channels, kernel expects {k.shape[1]}")
    if bias is not None and bias.shape != (k.shape[0],):
        raise DimensionError(f"bias must have shape ({k.shape[0]},), got {bias.shape}")
    out, ho, wo = _conv_forward(x4, k, stride, padding)
    if bias is not None:
        out = out + bias.value[None, :, None, None]
    in_hw = x4.shape[2:]

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = _conv_input_grad(g4, k, stride, padding, in_hw)
        gk = _conv_kernel_grad(g4, x4, k.shape, stride, padding)
        grads = [gx[0] if squeeze else gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Variable._from_op(out[0] if squeeze else out, parents, bw)


def conv2d_transpose(
    x: Variable, kernel: Variable, stride: int = 1, padding: int = 0, output_padding: int = 0
) -> Variable:
    """Transposed convolution, the exact adjoint of :func:`conv2d`.

    ``kernel`` has shape ``[C_in, C_out, kH, kW]``. Output size is
    ``(H - 1) * stride - 2 * padding + kH + output_padding``; the extra
    ``output_padding`` rows/columns select among the input sizes that
    ``conv2d`` maps onto ``H``.
    """
    _check_geometry(stride, padding)
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise ValueError("output_padding must be smaller than stride")
    k = kernel.value
    if k.ndim != 4:
        raise DimensionError(f"kernel must be 4-D, got shape {k.shape}")
    x4, squeeze = _as4d(x.value)
    if x4.shape[1] != k.shape[0]:
        raise DimensionError(f"conv2d_transpose: input has {x4.shape[1]} channels, kernel expects {k.shape[0]}")
    _, _, h, w = x4.shape
    kh, kw = k.shape[2:]
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    if ho < 1 or wo < 1:
        raise DimensionError("transposed convolution output would be empty")
    out = _conv_input_grad(x4, k, stride, padding, (ho, wo))

    def bw(g):
        g4 = g[None] if squeeze else g
        gx, _, _ = _conv_forward(g4, k, stride, padding)
        gk = _conv_kernel_grad(x4, g4, k.shape, stride, padding)
        return (gx[0] if squeeze else gx, gk)

    return Variable._from_op(out[0] if squeeze else out, (x, kernel), bw)


def avg_pool2(x: Variable) -> Variable:
    """2x2 average pooling with stride 2 (even spatial sizes only)."""
    x4, squeeze = _as4d(x.value)
    b, c, h, w = x4.shape
    if h % 2 or w % 2 or h < 2 or w < 2:
        raise DimensionError(f"avg_pool2 needs even spatial sizes, got {(h, w)}")
    out = x4.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = np.repeat(np.repeat(g4, 2, axis=2), 2, axis=3) * 0.25
        return (gx[0] if squeeze else gx,)

    return Variable._from_op(out[0] if squeeze else out, (x,), bw)


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------


def _topo_order(root: Variable) -> list[Variable]:
    order: list[Variable] = []
    seen: set[int] = set()
    stack: list[tuple[Variable, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Variable) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for tracked leaves.

    Gradients add onto whatever the leaves already hold, so calling this
    twice without :meth:`Variable.zero_grad` doubles them.
    """
    if root.value.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node._grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error of analytic vs central-difference gradients."""

    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    excluded: dict[str, list[tuple[int, ...]]] = field(default_factory=dict)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return all(err < self.tol for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    f: Callable[[], Variable],
    params: Iterable[Variable],
    tol: float = 1e-4,
    step: float = 1e-5,
    kink_tol: float = 1e-2,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` against central differences.

    Relative error per entry is ``|ga - gfd| / max(1, |ga|, |gfd|)``.
    Entries where the one-sided slopes disagree by more than ``kink_tol``
    sit on a kink (e.g. relu at 0) and are excluded from the comparison.
    """
    params = list(params)
    names = [p.name or f"param{i}" for i, p in enumerate(params)]
    if len(set(names)) != len(names):
        raise ValueError("parameter names must be unique")

    base = float(f().value)
    if float(f().value) != base:
        raise NonDeterministicError("f changed value between two identical evaluations")

    for p in params:
        p.zero_grad()
    root = f()
    backward(root)
    analytic = [p.grad.copy() for p in params]

    report = GradCheckReport(tol=tol)
    with no_grad():
        for name, p, ga in zip(names, params, analytic):
            worst = 0.0
            skipped = []
            flat = p.value.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + step
                fp = float(f().value)
                flat[idx] = orig - step
                fm = float(f().value)
                flat[idx] = orig
                d_plus = (fp - base) / step
                d_minus = (base - fm) / step
                if abs(d_plus - d_minus) > kink_tol * max(1.0, abs(d_plus), abs(d_minus)):
                    skipped.append(np.unravel_index(idx, p.shape))
                    continue
                gfd = (fp - fm) / (2.0 * step)
                gan = ga.reshape(-1)[idx]
                err = abs(gan - gfd) / max(1.0, abs(gan), abs(gfd))
                worst = max(worst, err)
                report.n_checked += 1
            report.max_rel_error[name] = worst
            if skipped:
                report.excluded[name] = skipped
    for p in params:
        p.zero_grad()
    return report
