"""Learnable multigrid V-cycle backbone built from adaptive convolutions."""

from __future__ import annotations

import numpy as np

from .autodiff import DimensionError, Variable, avg_pool2, conv2d, conv2d_transpose, gelu
from .operator import LatentState, conv_weight, parameter


class AdaConv:
    """``MLP(Filter_k * k) * (Filter_x * x)``, elementwise.

    ``Filter_x`` carries no bias, so the map is exactly linear in ``x``. The
    MLP is two pointwise layers with a GELU between them and only ever
    sees the ``k`` branch.

    ``centre`` adds ``centre * I`` to the centre tap of ``Filter_x`` and
    ``gate_bias`` offsets the MLP output, so the map can start close to a
    scaled identity.
    """

    def __init__(self, channels: int, name: str, rng=None, gain: float = 1.0, x_gain: float = 1.0,
                 centre: float = 0.0, gate_gain: float | None = None, gate_bias: float = 0.0):
        c = channels
        self.channels = c
        self.filter_k = conv_weight(rng, c, c, 3, f"{name}.filter_k.weight", gain)
        self.filter_k_bias = parameter(None, (c,), f"{name}.filter_k.bias")
        self.filter_x = conv_weight(rng, c, c, 3, f"{name}.filter_x.weight", x_gain)
        self.mlp_w1 = conv_weight(rng, c, c, 1, f"{name}.mlp1.weight", gain)
        self.mlp_b1 = parameter(None, (c,), f"{name}.mlp1.bias")
        self.mlp_w2 = conv_weight(rng, c, c, 1, f"{name}.mlp2.weight", gain if gate_gain is None else gate_gain)
        self.mlp_b2 = parameter(None, (c,), f"{name}.mlp2.bias")
        if rng is not None:
            self.filter_x.value[:, :, 1, 1] += centre * np.eye(c)
            self.mlp_b2.value[:] = gate_bias

    def named_parameters(self) -> dict[str, Variable]:
        ps = [self.filter_k, self.filter_k_bias, self.filter_x, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]
        return {p.name: p for p in ps}

    def gate(self, k_feat: Variable) -> Variable:
        z = conv2d(k_feat, self.filter_k, padding=1, bias=self.filter_k_bias)
        z = gelu(conv2d(z, self.mlp_w1, bias=self.mlp_b1))
        return conv2d(z, self.mlp_w2, bias=self.mlp_b2)

    def apply_gated(self, gate: Variable, x: Variable) -> Variable:
        return gate * conv2d(x, self.filter_x, padding=1)

    def __call__(self, k_feat: Variable, x: Variable) -> Variable:
        if k_feat.shape != x.shape:
            raise DimensionError(f"AdaConv: k {k_feat.shape} and x {x.shape} differ")
        return self.apply_gated(self.gate(k_feat), x)


def ada_conv(params: AdaConv, k_feat: Variable, x: Variable) -> Variable:
    return params(k_feat, x)


class VCycleBackbone:
    """One learnable V-cycle per application, as a residual update on ``u``.

    Level 0 is the finest grid; each coarser level halves the grid. Each
    level owns distinct operator (``A``) and smoother (``S``) AdaConvs;
    each pair of neighbouring levels shares a stride-2 restriction ``R`` and
    a stride-2 transposed-convolution prolongation ``P``, both bias-free.

    ``init="jacobi"`` starts every level near a damped Jacobi sweep: unit
    gates, ``A`` close to the identity and ``S`` close to ``omega * I``,
    with ``perturbation`` setting the size of the random part.
    ``init="random"`` draws every filter at ``init_gain``.
    """

    kind = "mgv"

    def __init__(self, channels: int = 24, levels: int = 3, nu_pre: int = 1, nu_post: int = 1, m_coarse: int = 3,
                 k_restriction: str = "avgpool", init: str = "jacobi", init_gain: float = 1.0,
                 smoother_gain: float = 0.1, omega: float = 0.5, perturbation: float = 0.2, seed: int = 0,
                 zero_init: bool = False):
        if levels < 1:
            raise ValueError("need at least one grid level")
        if k_restriction not in ("avgpool", "conv"):
            raise ValueError(f"unknown k restriction {k_restriction!r}")
        if init not in ("jacobi", "random"):
            raise ValueError(f"unknown init {init!r}")
        self.channels = channels
        self.levels = levels
        self.nu_pre = nu_pre
        self.nu_post = nu_post
        self.m_coarse = m_coarse
        self.k_restriction = k_restriction
        self.init = init
        self.init_gain = init_gain
        self.smoother_gain = smoother_gain
        self.omega = omega
        self.perturbation = perturbation
        self.seed = seed
        rng = None if zero_init else np.random.default_rng([seed, 2])
        c = channels
        if init == "jacobi":
            a_kw = {"x_gain": perturbation, "centre": 1.0, "gate_gain": perturbation, "gate_bias": 1.0}
            s_kw = {"x_gain": perturbation, "centre": omega, "gate_gain": perturbation, "gate_bias": 1.0}
        else:
            a_kw, s_kw = {}, {"x_gain": smoother_gain}
        self.A = [AdaConv(c, f"backbone.level{l}.A", rng, init_gain, **a_kw) for l in range(levels)]
        self.S = [AdaConv(c, f"backbone.level{l}.S", rng, init_gain, **s_kw) for l in range(levels)]
        self.R = [conv_weight(rng, c, c, 3, f"backbone.level{l}.restrict.weight", 2.0 * init_gain)
                  for l in range(levels - 1)]
        self.P = [conv_weight(rng, c, c, 3, f"backbone.level{l}.prolong.weight", init_gain)
                  for l in range(levels - 1)]
        self.Rk = []
        if k_restriction == "conv":
            self.Rk = [conv_weight(rng, c, c, 3, f"backbone.level{l}.restrict_k.weight", 2.0 * init_gain)
                       for l in range(levels - 1)]

    @classmethod
    def from_config(cls, config: dict) -> "VCycleBackbone":
        return cls(**{k: v for k, v in config.items() if k != "kind"})

    def get_config(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "levels": self.levels, "nu_pre": self.nu_pre,
                "nu_post": self.nu_post, "m_coarse": self.m_coarse, "k_restriction": self.k_restriction,
                "init": self.init, "init_gain": self.init_gain, "smoother_gain": self.smoother_gain,
                "omega": self.omega, "perturbation": self.perturbation, "seed": self.seed}

    def named_parameters(self) -> dict[str, Variable]:
        out = {}
        for l in range(self.levels):
            out.update(self.A[l].named_parameters())
            out.update(self.S[l].named_parameters())
            if l < self.levels - 1:
                out[self.R[l].name] = self.R[l]
                out[self.P[l].name] = self.P[l]
                if self.Rk:
                    out[self.Rk[l].name] = self.Rk[l]
        return out

    # -- per-forward cache ----------------------------------------------------

    def restrict_k(self, k_feat: Variable, level: int) -> Variable:
        """Carry ``k`` features from ``level`` to ``level + 1``."""
        h, w = k_feat.shape[-2:]
        if h < 8 or w < 8:
            raise DimensionError(f"grid {h}x{w} too small to coarsen")
        if self.k_restriction == "avgpool":
            return avg_pool2(k_feat)
        return conv2d(k_feat, self.Rk[level], stride=2, padding=1)

    def prepare(self, k_feat: Variable) -> dict:
        """Per-level ``k`` features and the AdaConv gates derived from them."""
        ks = [k_feat]
        for l in range(self.levels - 1):
            ks.append(self.restrict_k(ks[-1], l))
        return {
            "k": ks,
            "gate_A": [self.A[l].gate(ks[l]) for l in range(self.levels)],
            "gate_S": [self.S[l].gate(ks[l]) for l in range(self.levels)],
        }

    def _context(self, state: LatentState) -> dict:
        key = ("mgv", id(self))
        ctx = state.cache.get(key)
        if ctx is None or ctx["k"][0] is not state.k_feat:
            ctx = self.prepare(state.k_feat)
            state.cache[key] = ctx
        return ctx

    # -- the cycle ------------------------------------------------------------

    def pde_apply(self, ctx: dict, level: int, u: Variable) -> Variable:
        return self.A[level].apply_gated(ctx["gate_A"][level], u)

    def smooth(self, ctx: dict, level: int, r: Variable) -> Variable:
        return self.S[level].apply_gated(ctx["gate_S"][level], r)

    def _residual(self, ctx, level, u, f):
        return f if u is None else f - self.pde_apply(ctx, level, u)

    def _smoothing_step(self, ctx, level, u, f):
        correction = self.smooth(ctx, level, self._residual(ctx, level, u, f))
        return correction if u is None else u + correction

    def v_cycle(self, ctx: dict, level: int, u: Variable | None, f: Variable) -> Variable:
        """One V-cycle on ``A(k, u) = f`` at ``level``; ``u=None`` means a zero guess.

        The residual handed to the coarse grid is the one computed before
        pre-smoothing. With no coarser level the cycle reduces to
        ``nu_pre + nu_post`` smoothing steps.
        """
        if not 0 <= level < self.levels:
            raise IndexError(f"level {level} outside 0..{self.levels - 1}")
        r0 = self._residual(ctx, level, u, f)
        for i in range(self.nu_pre):
            r = r0 if i == 0 else self._residual(ctx, level, u, f)
            s = self.smooth(ctx, level, r)
            u = s if u is None else u + s
        if level < self.levels - 1:
            r_coarse = conv2d(r0, self.R[level], stride=2, padding=1)
            e = self.coarse_solve(ctx, level + 1, r_coarse)
            fine = f.shape[-1]
            extra = fine - (2 * e.shape[-1] - 1)
            e_fine = conv2d_transpose(e, self.P[level], stride=2, padding=1, output_padding=extra)
            u = e_fine if u is None else u + e_fine
        for _ in range(self.nu_post):
            u = self._smoothing_step(ctx, level, u, f)
        if u is None:
            u = Variable(np.zeros(f.shape))
        return u

    def coarse_solve(self, ctx: dict, level: int, rhs: Variable) -> Variable:
        """Approximate error correction on ``level`` from a zero initial guess."""
        if level == self.levels - 1:
            e = None
            for _ in range(self.m_coarse):
                e = self._smoothing_step(ctx, level, e, rhs)
            return Variable(np.zeros(rhs.shape)) if e is None else e
        return self.v_cycle(ctx, level, None, rhs)

    def apply(self, state: LatentState) -> LatentState:
        n = state.u_latent.shape[-1]
        if n // 2 ** (self.levels - 1) < 4:
            raise DimensionError(f"grid {n} too small for {self.levels} levels")
        ctx = self._context(state)
        return state.with_u(self.v_cycle(ctx, 0, state.u_latent, state.f_feat))


def default_levels(grid: int, coarsest: int = 8) -> int:
    """Number of levels that halves ``grid`` down to ``coarsest`` (at least 1)."""
    levels = 1
    while grid % 2 == 0 and grid // 2 >= coarsest:
        grid //= 2
        levels += 1
    return levels
