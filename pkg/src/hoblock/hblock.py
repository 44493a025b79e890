"""Higher-order blocks: depthwise convolutions whose per-position weights are generated from the input.

Dynamic weights are stored offset-major in the channel axis: channel ``q * C + c``
holds the weight for kernel offset ``q`` (canonical grid order) and feature
channel ``c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Function, Var
from .nn import Activation, Conv, ConvSpec, CostRow, Module, add, conv3d, relu, selu, tanh
from .tensor import ConfigurationError, OffsetGrid, ShapeError, pad_same

KERNEL_MENU = ("3x1x1", "1x3x3", "3x3x3", "3x5x5")

# context field -> generator layer kernels
CONTEXT_FACTORIZATION = {
    "3x3x3": ("1x3x3", "3x1x1", "1x1x1"),
    "3x5x5": ("1x3x3", "3x3x3", "1x1x1"),
    "5x5x5": ("1x3x3", "3x3x3", "3x1x1"),
    "5x7x7": ("1x3x3", "3x3x3", "3x3x3"),
    "7x7x7": ("3x3x3", "3x3x3", "3x3x3"),
}
CONTEXT_MENU = tuple(CONTEXT_FACTORIZATION)
GENERATORS = ("convnet", "single-conv")
ACTIVATIONS = ("softmax", "relu", "tanh")


class DynamicDepthwise(Function):
    """``y[n, c, p] = sum_q w[n, q*C + c, p] * x[n, c, p + q]`` with zero padding."""

    @staticmethod
    def forward(ctx, x, w, *, extents):
        N, C, T, H, W = x.shape
        grid = OffsetGrid(extents)
        K = len(grid)
        if w.shape != (N, K * C, T, H, W):
            raise ShapeError(f"dynamic weights {w.shape} do not match input {x.shape} and |R|={K}")
        xp = pad_same(x, extents)
        y = np.zeros_like(x)
        k = 0
        for a in range(grid.shape[0]):
            for b in range(grid.shape[1]):
                for d in range(grid.shape[2]):
                    y += w[:, k * C : (k + 1) * C] * xp[:, :, a : a + T, b : b + H, d : d + W]
                    k += 1
        ctx.save(xp, w)
        ctx.meta = (x.shape, grid)
        return y

    @staticmethod
    def backward(ctx, g):
        xp, w = ctx.saved
        (N, C, T, H, W), grid = ctx.meta
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp)
        k = 0
        for a in range(grid.shape[0]):
            for b in range(grid.shape[1]):
                for d in range(grid.shape[2]):
                    gw[:, k * C : (k + 1) * C] = g * xp[:, :, a : a + T, b : b + H, d : d + W]
                    gxp[:, :, a : a + T, b : b + H, d : d + W] += g * w[:, k * C : (k + 1) * C]
                    k += 1
        kt, kh, kw = grid.extents
        gx = np.ascontiguousarray(gxp[:, :, kt : kt + T, kh : kh + H, kw : kw + W])
        return gx, gw


class SoftmaxOffsets(Function):
    """Softmax over the offset axis of offset-major logits, per (batch, channel, position)."""

    @staticmethod
    def forward(ctx, z, *, num_offsets):
        N, KC, T, H, W = z.shape
        if KC % num_offsets:
            raise ShapeError(f"{KC} channels not divisible by |R|={num_offsets}")
        z6 = z.reshape(N, num_offsets, KC // num_offsets, T, H, W)
        e = np.exp(z6 - z6.max(axis=1, keepdims=True))
        s = e / e.sum(axis=1, keepdims=True)
        ctx.save(s)
        return s.reshape(z.shape)

    @staticmethod
    def backward(ctx, g):
        (s,) = ctx.saved
        g6 = g.reshape(s.shape)
        return ((s * (g6 - (g6 * s).sum(axis=1, keepdims=True))).reshape(g.shape),)


def dynamic_depthwise_apply(x: Var, w: Var, kernel: OffsetGrid) -> Var:
    return DynamicDepthwise.apply(x, w, extents=kernel.extents)


def softmax_over_offsets(w: Var, num_offsets: int) -> Var:
    return SoftmaxOffsets.apply(w, num_offsets=num_offsets)


def _grid(g) -> OffsetGrid:
    return g if isinstance(g, OffsetGrid) else OffsetGrid.from_shape(g)


@dataclass(frozen=True)
class HBlockConfig:
    channels: int
    kernel: OffsetGrid = field(default_factory=lambda: OffsetGrid.from_shape("3x3x3"))
    context: OffsetGrid = field(default_factory=lambda: OffsetGrid.from_shape("5x5x5"))
    generator: str = "convnet"
    activation: str = "softmax"
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _grid(self.kernel))
        object.__setattr__(self, "context", _grid(self.context))
        if str(self.kernel) not in KERNEL_MENU:
            raise ConfigurationError(f"kernel {self.kernel} not in {KERNEL_MENU}")
        if str(self.context) not in CONTEXT_MENU:
            raise ConfigurationError(f"context field {self.context} not in {CONTEXT_MENU}")
        if not self.context.covers(self.kernel):
            raise ConfigurationError(f"context field {self.context} does not cover kernel {self.kernel}")
        if self.generator not in GENERATORS:
            raise ConfigurationError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    def with_channels(self, channels: int) -> "HBlockConfig":
        return HBlockConfig(channels, self.kernel, self.context, self.generator, self.activation, self.residual)


@dataclass(frozen=True)
class GeneratorPlan:
    """Three P3D convolutions realizing a context field.

    Channels go ``C -> C -> (C // |R|) * |R| -> C * |R|``; the last layer is a
    group convolution with ``|R|`` groups, so group ``q`` emits the weights of
    offset ``q``.
    """

    layers: tuple[ConvSpec, ConvSpec, ConvSpec]

    @classmethod
    def build(cls, channels: int, kernel: OffsetGrid, context: OffsetGrid) -> "GeneratorPlan":
        K = len(kernel)
        if channels // K == 0:
            raise ConfigurationError(
                f"convnet generator needs channels >= |R| (C // |R| must be positive): C={channels}, |R|={K}"
            )
        mid = channels // K * K
        shapes = CONTEXT_FACTORIZATION[str(context)]
        grids = [OffsetGrid.from_shape(s) for s in shapes]
        return cls(
            (
                ConvSpec(channels, channels, grids[0], bias=True),
                ConvSpec(channels, mid, grids[1], bias=True),
                ConvSpec(mid, channels * K, grids[2], groups=K),
            )
        )

    @property
    def context(self) -> tuple[int, int, int]:
        ext = [sum(l.grid.extents[i] for l in self.layers) for i in range(3)]
        return tuple(2 * e + 1 for e in ext)

    @property
    def kernel_volumes(self) -> tuple[int, ...]:
        return tuple(len(l.grid) for l in self.layers)

    @property
    def num_params(self) -> int:
        return sum(l.num_params for l in self.layers)


def singleconv_param_count(channels: int, kernel: OffsetGrid, context: OffsetGrid) -> int:
    return channels * channels * len(kernel) * len(context)


def convnet_param_count(channels: int, kernel: OffsetGrid, context: OffsetGrid) -> int:
    K = len(kernel)
    mid = channels // K * K
    v1, v2, v3 = (len(OffsetGrid.from_shape(s)) for s in CONTEXT_FACTORIZATION[str(context)])
    return channels * channels * v1 + channels + channels * mid * v2 + mid + channels * mid * v3


class SingleConvGenerator(Module):
    """Logits ``w_{p,q} = sum_{t in R'} Theta_t^q x_{p+t}``: one conv with C*|R| outputs over the context grid."""

    def __init__(self, channels, kernel, context, rng=None, dtype=np.float64, init="zero"):
        super().__init__()
        self.spec = ConvSpec(channels, channels * len(kernel), context)
        self.conv = self.add_child("conv", Conv(self.spec, rng, init=init, dtype=dtype))

    def forward(self, x):
        return self.conv(x)

    def probe_layers(self):
        return [self.spec]

    def trace(self, shape, rows, prefix):
        return self.conv.trace(shape, rows, prefix + "conv")


class ConvNetGenerator(Module):
    def __init__(self, plan: GeneratorPlan, rng=None, dtype=np.float64, init="default"):
        super().__init__()
        self.plan = plan
        inits = ("uniform", "uniform", "zero") if init == "default" else (init,) * 3
        self.convs = [
            self.add_child(f"layer{i + 1}", Conv(spec, rng, init=inits[i], dtype=dtype))
            for i, spec in enumerate(plan.layers)
        ]
        self.act = Activation("selu")

    def forward(self, x):
        h = self.act(self.convs[0](x))
        h = self.act(self.convs[1](h))
        return self.convs[2](h)

    def probe_layers(self):
        return list(self.plan.layers)

    def trace(self, shape, rows, prefix):
        for i, conv in enumerate(self.convs):
            shape = conv.trace(shape, rows, f"{prefix}layer{i + 1}")
            if i < 2:
                shape = self.act.trace(shape, rows, f"{prefix}selu{i + 1}")
        return shape


def generate_weights_singleconv(x: Var, theta: Var) -> Var:
    """Pre-activation logits from a single conv weight of shape ``(C*|R|, C, *context)``."""
    return conv3d(x, theta)


def generate_weights_convnet(x: Var, plan: GeneratorPlan, params) -> Var:
    """Pre-activation logits from ``params = [w1, b1, w2, b2, w3]`` following ``plan``."""
    w1, b1, w2, b2, w3 = params
    l1, l2, l3 = plan.layers
    h = selu(conv3d(x, w1, b1))
    h = selu(conv3d(h, w2, b2))
    return conv3d(h, w3, groups=l3.groups)


def apply_activation(logits: Var, kind: str, num_offsets: int) -> Var:
    if kind == "softmax":
        return softmax_over_offsets(logits, num_offsets)
    if kind == "relu":
        return relu(logits)
    if kind == "tanh":
        return tanh(logits)
    raise ConfigurationError(f"unknown activation {kind!r}")


class HBlock(Module):
    """``y = f(x; g(x; Theta))`` with optional residual add of the input."""

    def __init__(self, cfg: HBlockConfig, rng=None, dtype=np.float64, init="default"):
        super().__init__()
        self.cfg = cfg
        if cfg.generator == "convnet":
            plan = GeneratorPlan.build(cfg.channels, cfg.kernel, cfg.context)
            self.generator = ConvNetGenerator(plan, rng, dtype, init=init)
        else:
            self.generator = SingleConvGenerator(
                cfg.channels, cfg.kernel, cfg.context, rng, dtype, init="zero" if init == "default" else init
            )
        self.add_child("generator", self.generator)

    def weights(self, x: Var) -> Var:
        return apply_activation(self.generator(x), self.cfg.activation, len(self.cfg.kernel))

    def forward(self, x):
        y = dynamic_depthwise_apply(x, self.weights(x), self.cfg.kernel)
        return add(y, x) if self.cfg.residual else y

    def trace(self, shape, rows, prefix):
        wshape = self.generator.trace(tuple(shape), rows, prefix + "generator.")
        rows.append(CostRow(prefix + "weights", self.cfg.activation, wshape, 0, 0, int(np.prod(wshape))))
        n_out = int(np.prod(shape))
        rows.append(CostRow(prefix + "apply", f"dynamic{self.cfg.kernel}", tuple(shape), 0, n_out * len(self.cfg.kernel)))
        if self.cfg.residual:
            rows.append(CostRow(prefix + "residual", "add", tuple(shape), 0, 0, n_out))
        return tuple(shape)


class StaticDepthwise(Module):
    """First-order counterpart of :class:`HBlock`: a learned depthwise conv over the same kernel grid."""

    def __init__(self, channels: int, kernel: OffsetGrid, residual=True, rng=None, dtype=np.float64, init="uniform"):
        super().__init__()
        self.kernel = kernel
        self.residual = residual
        self.spec = ConvSpec(channels, channels, kernel, groups=channels)
        if init == "box":
            w = np.full(self.spec.weight_shape, 1.0 / len(kernel), dtype=dtype)
            self.conv = self.add_child("conv", Conv(self.spec, rng, init="zero", dtype=dtype))
            self.conv.weight.value = w
        else:
            self.conv = self.add_child("conv", Conv(self.spec, rng, init=init, dtype=dtype))

    def forward(self, x):
        y = self.conv(x)
        return add(y, x) if self.residual else y

    def trace(self, shape, rows, prefix):
        out = self.conv.trace(shape, rows, prefix + "conv")
        if self.residual:
            rows.append(CostRow(prefix + "residual", "add", tuple(out), 0, 0, int(np.prod(out))))
        return out
