"""Self-composing neural operators ``P o (G o)^n o L`` and a plain conv backbone."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError, Variable, conv2d, gelu, map_unary, no_grad, relu
from .fields import COMPLEX, REAL, GridField

ACTIVATIONS = {"gelu": gelu, "relu": relu}

IDENTITY_NORMALIZATION = {"k_shift": 0.0, "k_scale": 1.0, "f_shift": 0.0, "f_scale": 1.0, "u_scale": 1.0}


def parameter(rng: np.random.Generator | None, shape, name: str, std: float = 0.0) -> Variable:
    value = np.zeros(shape) if rng is None or std == 0.0 else rng.normal(0.0, std, size=shape)
    return Variable(value, requires_grad=True, name=name)


def conv_weight(rng, c_out: int, c_in: int, size: int, name: str, gain: float = 1.0) -> Variable:
    return parameter(rng, (c_out, c_in, size, size), name, gain / np.sqrt(c_in * size * size))


@dataclass
class LatentState:
    """Iterate plus the lifted data it is carried alongside.

    ``cache`` holds per-forward quantities derived from ``k_feat`` (such as
    coarse-grid copies) so that all compositions share them.
    """

    u_latent: Variable
    k_feat: Variable
    f_feat: Variable
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        shapes = {self.u_latent.shape, self.k_feat.shape, self.f_feat.shape}
        if len(shapes) != 1:
            raise DimensionError(f"latent state components disagree in shape: {shapes}")

    def with_u(self, u: Variable) -> "LatentState":
        return LatentState(u, self.k_feat, self.f_feat, self.cache)


class ConvBlockBackbone:
    """Residual convolutional block: ``u <- u + Block(u + k_feat + f_feat)``.

    ``Block`` stacks ``layers`` 3x3 convolutions with biases, with the
    activation between consecutive layers; the last layer is linear so the
    update can take either sign.
    """

    kind = "conv"

    def __init__(self, channels: int = 24, layers: int = 2, kernel_size: int = 3, activation: str = "gelu",
                 init_gain: float = 0.5, seed: int = 0, zero_init: bool = False):
        if layers < 1:
            raise ValueError("the conv block needs at least one layer")
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.channels = channels
        self.layers = layers
        self.kernel_size = kernel_size
        self.activation = activation
        self.init_gain = init_gain
        self.seed = seed
        rng = None if zero_init else np.random.default_rng([seed, 1])
        self.weights = [
            conv_weight(rng, channels, channels, kernel_size, f"backbone.conv{i}.weight", init_gain) for i in range(layers)
        ]
        self.biases = [parameter(None, (channels,), f"backbone.conv{i}.bias") for i in range(layers)]

    def named_parameters(self) -> dict[str, Variable]:
        out = {}
        for w, b in zip(self.weights, self.biases):
            out[w.name] = w
            out[b.name] = b
        return out

    def get_config(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "layers": self.layers,
                "kernel_size": self.kernel_size, "activation": self.activation,
                "init_gain": self.init_gain, "seed": self.seed}

    def apply(self, state: LatentState) -> LatentState:
        act = ACTIVATIONS[self.activation]
        pad = self.kernel_size // 2
        z = state.u_latent + state.k_feat + state.f_feat
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = conv2d(z, w, stride=1, padding=pad, bias=b)
            if i < self.layers - 1:
                z = act(z)
        return state.with_u(state.u_latent + z)


def conv_block_backbone(config: dict) -> ConvBlockBackbone:
    cfg = {k: v for k, v in config.items() if k != "kind"}
    return ConvBlockBackbone(**cfg)


class SelfComposingOp:
    """``O(k, f) = P o (G o)^n o L (k, f)`` with one shared backbone ``G``.

    The lifting ``L`` maps ``k`` and ``f`` through separate 1x1 convolutions
    and starts the iterate at zero; the projection ``P`` is a 1x1
    convolution to ``out_channels``. Neither has an activation.

    ``normalization`` holds fixed (non-trained) affine input scalings and an
    output scale; they are part of the config, not of the parameter set.
    """

    def __init__(self, backbone, channels: int | None = None, k_channels: int = 1, f_channels: int = 1,
                 out_channels: int = 1, depth: int = 1, seed: int = 0, normalization: dict | None = None,
                 zero_init: bool = False):
        channels = backbone.channels if channels is None else channels
        if channels != backbone.channels:
            raise ValueError(f"backbone has {backbone.channels} channels, operator {channels}")
        if depth < 1:
            raise ValueError("depth must be a positive integer")
        self.backbone = backbone
        self.channels = channels
        self.k_channels = k_channels
        self.f_channels = f_channels
        self.out_channels = out_channels
        self.depth = depth
        self.seed = seed
        self.normalization = {**IDENTITY_NORMALIZATION, **(normalization or {})}
        rng = None if zero_init else np.random.default_rng([seed, 0])
        self.lift_k = conv_weight(rng, channels, k_channels, 1, "lift.k.weight")
        self.lift_k_bias = parameter(None, (channels,), "lift.k.bias")
        self.lift_f = conv_weight(rng, channels, f_channels, 1, "lift.f.weight")
        self.lift_f_bias = parameter(None, (channels,), "lift.f.bias")
        self.proj = conv_weight(rng, out_channels, channels, 1, "proj.weight")
        self.proj_bias = parameter(None, (out_channels,), "proj.bias")

    # -- parameters -------------------------------------------------------

    def named_parameters(self) -> dict[str, Variable]:
        own = [self.lift_k, self.lift_k_bias, self.lift_f, self.lift_f_bias, self.proj, self.proj_bias]
        out = {p.name: p for p in own}
        out.update(self.backbone.named_parameters())
        return out

    def parameters(self) -> list[Variable]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def get_config(self) -> dict:
        return {"backbone": self.backbone.get_config(), "channels": self.channels,
                "k_channels": self.k_channels, "f_channels": self.f_channels,
                "out_channels": self.out_channels, "depth": self.depth, "seed": self.seed,
                "normalization": dict(self.normalization)}

    def fit_normalization(self, k: np.ndarray, f: np.ndarray, u: np.ndarray) -> None:
        """Standardize inputs and scale outputs by the target RMS of a training set.

        A constant input is divided by its magnitude rather than centred, so
        that it stays nonzero.
        """

        def shift_scale(a):
            mean, std = float(np.mean(a)), float(np.std(a))
            if std > 1e-12 * max(1.0, abs(mean)):
                return mean, std
            return 0.0, abs(mean) if mean != 0 else 1.0

        rms = float(np.sqrt(np.mean(np.square(u))))
        (ks, kk), (fs, fk) = shift_scale(k), shift_scale(f)
        self.normalization = {"k_shift": ks, "k_scale": kk, "f_shift": fs, "f_scale": fk,
                              "u_scale": rms if rms > 0 else 1.0}

    def copy_parameters_from(self, other: "SelfComposingOp") -> None:
        mine = self.named_parameters()
        theirs = other.named_parameters()
        if set(mine) != set(theirs):
            raise ValueError("parameter sets differ")
        for name, p in mine.items():
            p.value[...] = theirs[name].value

    # -- the three stages ---------------------------------------------------

    def apply_lifting(self, k, f=None) -> LatentState:
        k = _as_variable(k)
        if k.shape[-3] != self.k_channels:
            raise DimensionError(f"k has {k.shape[-3]} channels, expected {self.k_channels}")
        if f is None:
            f = Variable(np.zeros(k.shape[:-3] + (self.f_channels,) + k.shape[-2:]))
        f = _as_variable(f)
        if f.shape[-2:] != k.shape[-2:] or f.shape[:-3] != k.shape[:-3]:
            raise DimensionError(f"grid mismatch between k {k.shape} and f {f.shape}")
        nz = self.normalization
        if nz["k_shift"] != 0.0 or nz["k_scale"] != 1.0:
            k = map_unary("scale", k - nz["k_shift"], c=1.0 / nz["k_scale"])
        if nz["f_shift"] != 0.0 or nz["f_scale"] != 1.0:
            f = map_unary("scale", f - nz["f_shift"], c=1.0 / nz["f_scale"])
        k_feat = conv2d(k, self.lift_k, bias=self.lift_k_bias)
        f_feat = conv2d(f, self.lift_f, bias=self.lift_f_bias)
        u0 = Variable(np.zeros(k_feat.shape))
        return LatentState(u0, k_feat, f_feat)

    def compose(self, state: LatentState, n: int | None = None) -> LatentState:
        n = self.depth if n is None else n
        if n < 1:
            raise ValueError("composition count must be >= 1")
        for _ in range(n):
            state = self.backbone.apply(state)
        return state

    def project(self, state: LatentState) -> Variable:
        out = conv2d(state.u_latent, self.proj, bias=self.proj_bias)
        scale = self.normalization["u_scale"]
        return out if scale == 1.0 else map_unary("scale", out, c=scale)

    def forward(self, k, f=None, depth: int | None = None) -> Variable:
        return self.project(self.compose(self.apply_lifting(k, f), depth))

    __call__ = forward

    def forward_fields(self, k: GridField, f: GridField | None = None) -> GridField:
        """Inference on physical fields, returning a :class:`GridField`."""
        with no_grad():
            out = self.forward(k.values, None if f is None else f.values).value
        return GridField(out, k.spacing, COMPLEX if self.out_channels == 2 else REAL)

    def predict(self, k: np.ndarray, f: np.ndarray | None = None, batch_size: int = 32) -> np.ndarray:
        """Batched inference on ``[N, C, H, W]`` arrays."""
        outs = []
        with no_grad():
            for s in range(0, k.shape[0], batch_size):
                fb = None if f is None else f[s : s + batch_size]
                outs.append(self.forward(k[s : s + batch_size], fb).value)
        if not outs:
            return np.zeros((0, self.out_channels) + k.shape[2:])
        return np.concatenate(outs)


def _as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def param_count(op: SelfComposingOp) -> int:
    return op.param_count()


def compose(op: SelfComposingOp, state: LatentState, n: int) -> LatentState:
    return op.compose(state, n)


def build_backbone(config: dict):
    from .multigrid import VCycleBackbone

    kind = config.get("kind")
    if kind == "conv":
        return conv_block_backbone(config)
    if kind == "mgv":
        return VCycleBackbone.from_config(config)
    raise ValueError(f"unknown backbone kind {kind!r}")


def build_model(config: dict) -> SelfComposingOp:
    """Rebuild an operator from :meth:`SelfComposingOp.get_config` output."""
    cfg = dict(config)
    backbone = build_backbone(cfg.pop("backbone"))
    return SelfComposingOp(backbone, **cfg)
