"""Width/resolution-scaled ResNet-50 I3D backbone and H-block insertion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Var
from .hblock import HBlock, HBlockConfig, StaticDepthwise
from .nn import (
    Activation,
    BatchNorm,
    Conv,
    ConvSpec,
    CostRow,
    MaxPool,
    Module,
    add,
    global_avg_pool,
    linear,
    relu,
)
from .tensor import ConfigurationError, OffsetGrid, out_size

STAGES = ("res2", "res3", "res4", "res5")
# full-width bottleneck (mid) channels and spatial stride of the first block per stage
_STAGE_MID = {"res2": 64, "res3": 128, "res4": 256, "res5": 512}
_STAGE_STRIDE = {"res2": 1, "res3": 2, "res4": 2, "res5": 1}
EXPANSION = 4

PRESETS = {
    "none": (),
    "1-block": (("res3", 2),),
    "3-block": (("res3", 2), ("res4", 2), ("res4", 4)),
    "5-block": (("res3", 1), ("res3", 3), ("res4", 1), ("res4", 3), ("res4", 5)),
}


@dataclass(frozen=True)
class BackboneSpec:
    width_scale: int = 8
    blocks: tuple[int, int, int, int] = (3, 4, 6, 3)
    input_shape: tuple[int, int, int] = (8, 32, 32)
    num_classes: int = 2
    in_channels: int = 1
    norm: str = "batch"

    def channels(self, full: int) -> int:
        c = full // self.width_scale
        if c < 1:
            raise ConfigurationError(f"width_scale {self.width_scale} leaves no channels for width {full}")
        return c

    @property
    def stem_channels(self) -> int:
        return self.channels(64)

    def stage_channels(self, stage: str) -> tuple[int, int]:
        mid = self.channels(_STAGE_MID[stage])
        return mid, mid * EXPANSION


@dataclass(frozen=True)
class InsertionPlan:
    """Sites ``(stage, index)`` with 1-based block indices, sharing one H-block configuration."""

    sites: tuple[tuple[str, int], ...] = ()
    hblock: HBlockConfig | None = None

    def __post_init__(self):
        sites = tuple((str(s), int(i)) for s, i in self.sites)
        if len(set(sites)) != len(sites):
            raise ConfigurationError(f"duplicate insertion sites in {sites}")
        for stage, _ in sites:
            if stage not in STAGES:
                raise ConfigurationError(f"unknown stage {stage!r}; expected one of {STAGES}")
        if sites and self.hblock is None:
            raise ConfigurationError("insertion sites given without an H-block configuration")
        object.__setattr__(self, "sites", sites)

    @classmethod
    def preset(cls, name: str, hblock: HBlockConfig | None = None) -> "InsertionPlan":
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}; expected one of {tuple(PRESETS)}")
        return cls(PRESETS[name], hblock)


class Bottleneck(Module):
    """[3x1x1, mid] -> [1x3x3, mid] -> [1x1x1, 4*mid] with a projection shortcut when shapes change."""

    def __init__(self, cin, mid, cout, spatial_stride, norm, rng, dtype, meta=False):
        super().__init__()
        init = "meta" if meta else "he"
        s = (1, spatial_stride, spatial_stride)
        self.conv1 = self.add_child("conv1", Conv(ConvSpec(cin, mid, OffsetGrid((1, 0, 0))), rng, init, dtype))
        self.bn1 = self.add_child("bn1", BatchNorm(mid, norm, dtype=dtype, meta=meta))
        self.conv2 = self.add_child("conv2", Conv(ConvSpec(mid, mid, OffsetGrid((0, 1, 1)), stride=s), rng, init, dtype))
        self.bn2 = self.add_child("bn2", BatchNorm(mid, norm, dtype=dtype, meta=meta))
        self.conv3 = self.add_child("conv3", Conv(ConvSpec(mid, cout, OffsetGrid((0, 0, 0))), rng, init, dtype))
        self.bn3 = self.add_child("bn3", BatchNorm(cout, norm, zero_scale=True, dtype=dtype, meta=meta))
        self.shortcut = None
        if cin != cout or spatial_stride != 1:
            self.shortcut = self.add_child(
                "shortcut", Conv(ConvSpec(cin, cout, OffsetGrid((0, 0, 0)), stride=s), rng, init, dtype)
            )
            self.bn_sc = self.add_child("bn_sc", BatchNorm(cout, norm, dtype=dtype, meta=meta))
        self.act = Activation("relu")

    def forward(self, x):
        h = relu(self.bn1(self.conv1(x)))
        h = relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        sc = x if self.shortcut is None else self.bn_sc(self.shortcut(x))
        return relu(add(h, sc))

    def trace(self, shape, rows, prefix):
        h = shape
        for i in (1, 2, 3):
            h = getattr(self, f"conv{i}").trace(h, rows, f"{prefix}conv{i}")
            h = getattr(self, f"bn{i}").trace(h, rows, f"{prefix}bn{i}")
            if i < 3:
                h = self.act.trace(h, rows, f"{prefix}relu{i}")
        if self.shortcut is not None:
            sc = self.shortcut.trace(shape, rows, prefix + "shortcut")
            self.bn_sc.trace(sc, rows, prefix + "bn_sc")
        rows.append(CostRow(prefix + "residual", "add", h, 0, 0, int(np.prod(h))))
        return self.act.trace(h, rows, prefix + "relu_out")


class Model(Module):
    """Backbone with an ordered list of (name, module) layers; H-blocks sit after named bottlenecks."""

    def __init__(self, spec: BackboneSpec, layers: list, plan: InsertionPlan | None = None, dtype=np.float64, meta=False):
        super().__init__()
        self.spec = spec
        self.plan = plan or InsertionPlan()
        self.dtype = np.dtype(dtype)
        self.meta = meta
        self.layers = layers
        for name, mod in layers:
            self.add_child(name, mod)
        self.fc = self._children.get("fc")
        for name, p in self.named_parameters():
            p.name = name

    @property
    def stage_names(self) -> list[str]:
        return [n for n, _ in self.layers if n != "fc"]

    def forward(self, x: Var, taps: dict | None = None) -> Var:
        for name, mod in self.layers:
            if name == "fc":
                x = global_avg_pool(x)
                if taps is not None:
                    taps["pool"] = x
            x = mod(x)
            if taps is not None:
                taps[name] = x
        return x

    def stage_outputs(self, x: Var) -> dict:
        taps: dict = {}
        self.forward(x, taps)
        return {stage: taps[stage] for stage in self.stage_names}

    def trace(self, shape, rows=None, prefix=""):
        rows = [] if rows is None else rows
        for name, mod in self.layers:
            if name == "fc":
                n, c = shape[:2]
                rows.append(CostRow("gap", "global_avg_pool", (n, c, 1, 1, 1), 0, 0, int(np.prod(shape))))
                shape = (n, c, 1, 1, 1)
            shape = mod.trace(shape, rows, name + ".")
        return shape

    def stage_shapes(self, batch: int = 1) -> dict:
        """Output shape after each stage (including the H-blocks inserted into it)."""
        shape = (batch, self.spec.in_channels) + tuple(self.spec.input_shape)
        out = {}
        for name, mod in self.layers:
            if name == "fc":
                break
            shape = mod.trace(shape, [], name + ".")
            out[name] = shape
        return out

    def hblocks(self) -> list:
        found = []
        for name, mod in self.layers:
            if isinstance(mod, Stage):
                found.extend((f"{name}.h{i}", m) for i, m in mod.extras.items())
        return found


class Stage(Module):
    """Bottlenecks ``1..n`` with optional H-blocks ``h<i>`` placed after bottleneck ``i``."""

    def __init__(self, blocks, extras: dict | None = None):
        super().__init__()
        self.blocks = list(blocks)
        self.extras = dict(extras or {})
        self.sequence = []
        for i, b in enumerate(self.blocks, start=1):
            self.sequence.append((str(i), self.add_child(str(i), b)))
            if i in self.extras:
                self.sequence.append((f"h{i}", self.add_child(f"h{i}", self.extras[i])))

    def forward(self, x):
        for _, b in self.sequence:
            x = b(x)
        return x

    def trace(self, shape, rows, prefix):
        for name, b in self.sequence:
            shape = b.trace(shape, rows, f"{prefix}{name}.")
        return shape


class Stem(Module):
    def __init__(self, spec: BackboneSpec, rng, dtype, meta):
        super().__init__()
        c = spec.stem_channels
        self.conv = self.add_child(
            "conv", Conv(ConvSpec(spec.in_channels, c, OffsetGrid((2, 3, 3)), stride=(1, 2, 2)), rng, "meta" if meta else "he", dtype)
        )
        self.bn = self.add_child("bn", BatchNorm(c, spec.norm, dtype=dtype, meta=meta))
        self.act = Activation("relu")

    def forward(self, x):
        return relu(self.bn(self.conv(x)))

    def trace(self, shape, rows, prefix):
        shape = self.conv.trace(shape, rows, prefix + "conv")
        shape = self.bn.trace(shape, rows, prefix + "bn")
        return self.act.trace(shape, rows, prefix + "relu")


class Head(Module):
    def __init__(self, cin, classes, rng, dtype, meta):
        super().__init__()
        self.spec = ConvSpec(cin, classes, OffsetGrid((0, 0, 0)), bias=True)
        self.conv = self.add_child("linear", Conv(self.spec, rng, "meta" if meta else "zero", dtype))
        if not meta:
            self.conv.weight.value = (rng.standard_normal(self.spec.weight_shape) * 0.01).astype(dtype)

    def forward(self, x):
        return linear(x, self.conv.weight, self.conv.bias)

    def trace(self, shape, rows, prefix):
        return self.conv.trace(shape, rows, prefix + "linear")


def _check_ladder(spec: BackboneSpec):
    T, H, W = spec.input_shape
    t, h, w = T, out_size(H, 2), out_size(W, 2)  # conv1
    h, w = out_size(h, 2), out_size(w, 2)  # pool1
    t = out_size(t, 2)  # pool2
    h, w = out_size(out_size(h, 2), 2), out_size(out_size(w, 2), 2)  # res3, res4
    if T < 2 or H < 16 or W < 16 or (T % 2) or (H % 16) or (W % 16):
        raise ConfigurationError(
            f"input {spec.input_shape} too small or not divisible for the stride ladder "
            "(need T even >= 2, H and W multiples of 16)"
        )
    return t, h, w


def build_backbone(spec: BackboneSpec, seed: int = 0, dtype=np.float64, meta: bool = False) -> Model:
    """Baseline model; ``meta=True`` allocates shape-only parameters (for shape and cost analysis)."""
    _check_ladder(spec)
    if len(spec.blocks) != 4 or min(spec.blocks) < 1:
        raise ConfigurationError(f"blocks must be four positive counts, got {spec.blocks}")
    rng = np.random.default_rng(seed)
    layers = [("conv1", Stem(spec, rng, dtype, meta)), ("pool1", MaxPool((1, 3, 3), (1, 2, 2)))]
    cin = spec.stem_channels
    for stage, n_blocks in zip(STAGES, spec.blocks):
        mid, cout = spec.stage_channels(stage)
        blocks = []
        for i in range(n_blocks):
            stride = _STAGE_STRIDE[stage] if i == 0 else 1
            blocks.append(Bottleneck(cin, mid, cout, stride, spec.norm, rng, dtype, meta))
            cin = cout
        layers.append((stage, Stage(blocks)))
        if stage == "res2":
            layers.append(("pool2", MaxPool((3, 1, 1), (2, 1, 1))))
    layers.append(("fc", Head(cin, spec.num_classes, rng, dtype, meta)))
    return Model(spec, layers, dtype=dtype, meta=meta)


def insert_hblocks(model: Model, plan: InsertionPlan, seed: int = 1, static: bool = False) -> Model:
    """New model sharing the backbone modules of ``model`` with an H-block after each planned bottleneck.

    With ``static=True`` each H-block is replaced by a learned depthwise conv over
    the same kernel grid (the first-order control).
    """
    spec = model.spec
    stages = dict(model.layers)
    for stage, idx in plan.sites:
        n = len(stages[stage].blocks)
        if not 1 <= idx <= n:
            raise ConfigurationError(f"site {stage}-{idx} out of range (stage has {n} blocks)")
    rng = np.random.default_rng(seed)
    dtype, meta = model.dtype, model.meta
    layers = []
    for name, mod in model.layers:
        sites = sorted(i for s, i in plan.sites if s == name)
        if not isinstance(mod, Stage) or not sites:
            layers.append((name, mod))
            continue
        extras = dict(mod.extras)
        channels = spec.stage_channels(name)[1]
        cfg = plan.hblock.with_channels(channels)
        for i in sites:
            if static:
                extras[i] = StaticDepthwise(channels, cfg.kernel, cfg.residual, rng, dtype, init="meta" if meta else "box")
            else:
                extras[i] = HBlock(cfg, rng, dtype, init="meta" if meta else "default")
        layers.append((name, Stage(mod.blocks, extras)))
    out = Model(spec, layers, plan, dtype, meta)
    out.train(model.training)
    return out


def build_model(spec: BackboneSpec, plan: InsertionPlan | None = None, seed: int = 0, static=False, dtype=np.float64, meta=False) -> Model:
    base = build_backbone(spec, seed, dtype, meta)
    if plan is None or not plan.sites:
        return base
    return insert_hblocks(base, plan, seed + 1, static=static)
