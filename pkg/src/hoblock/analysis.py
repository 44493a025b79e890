"""Parameter/FLOP accounting, receptive-field probing and feature-map export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import ContractError, Tape, Var, backward, no_tape
from .nn import ConvSpec, CostRow, conv3d, mul, sum_all

CONVENTIONS = {"MAC=1": 1, "MAC=2": 2}


@dataclass
class CostReport:
    rows: list[CostRow]
    convention: str = "MAC=1"

    @property
    def factor(self) -> int:
        return CONVENTIONS[self.convention]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def total_flops(self, convention: str | None = None) -> int:
        f = CONVENTIONS[convention or self.convention]
        return sum(r.flops(f) for r in self.rows)

    def table(self) -> str:
        head = f"{'layer':<40} {'op':<18} {'output':<26} {'params':>12} {'FLOPs':>16}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.name:<40} {r.op:<18} {'x'.join(map(str, r.out_shape)):<26} {r.params:>12,d} {r.flops(self.factor):>16,d}"
            )
        lines.append("-" * len(head))
        lines.append(f"{'total':<40} {'':<18} {'':<26} {self.total_params:>12,d} {self.total_flops():>16,d}")
        for conv in CONVENTIONS:
            lines.append(f"total FLOPs ({conv}): {self.total_flops(conv):,d}")
        return "\n".join(lines)

    def to_tsv(self, path) -> None:
        lines = ["name\top\toutput_shape\tparams\tmacs\telementwise\tflops"]
        for r in self.rows:
            lines.append(
                f"{r.name}\t{r.op}\t{'x'.join(map(str, r.out_shape))}\t{r.params}\t{r.macs}\t{r.elementwise}\t{r.flops(self.factor)}"
            )
        lines.append(f"total\t\t\t{self.total_params}\t{self.total_macs}\t\t{self.total_flops()}")
        Path(path).write_text("\n".join(lines) + "\n")


def count_costs(model, input_shape: Sequence[int], convention: str = "MAC=1") -> CostReport:
    """Per-layer costs for a forward pass on ``input_shape`` ``(n, c, t, h, w)``.

    Convolutions cost ``out_elems * (in_channels / groups) * |grid|`` MACs, the
    dynamic depthwise apply ``out_elems * |R|`` MACs; pools, activations,
    normalizations and residual adds cost one FLOP per element.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {tuple(CONVENTIONS)}")
    rows: list[CostRow] = []
    model.trace(tuple(input_shape), rows, "")
    return CostReport(rows, convention)


def conv_cost(spec: ConvSpec, input_shape, convention="MAC=1") -> CostRow:
    out = spec.out_shape(tuple(input_shape))
    return CostRow("conv", f"conv{spec.grid}", out, spec.num_params, spec.macs(tuple(input_shape)))


def linear_stack(specs: Sequence[ConvSpec], dtype=np.float64) -> Callable[[Var], Var]:
    """All-ones-weight composition of ``specs`` with identity activations (no cancellation possible)."""
    for s in specs:
        if s.stride != (1, 1, 1):
            raise ContractError("receptive-field probing supports stride-1 layers only")
    weights = [Var(np.ones(s.weight_shape, dtype=dtype)) for s in specs]

    def run(x):
        for s, w in zip(specs, weights):
            x = conv3d(x, w, groups=s.groups)
        return x

    return run


def probe_receptive_field(subnet, in_channels: int | None = None, volume: Sequence[int] | None = None, seed: int = 0):
    """Per-axis extent ``(t, h, w)`` of the input region influencing the centre output.

    ``subnet`` is a sequence of :class:`ConvSpec` (probed as an all-ones linear
    stack), an object exposing ``probe_layers()``, or any callable ``Var -> Var``
    (probed at a random positive input; ``in_channels`` and ``volume`` required).
    The centre output's gradient is propagated back and the bounding box of its
    nonzero support is measured.  A support touching the volume border may be
    clipped and raises :class:`ContractError`.
    """
    if hasattr(subnet, "probe_layers"):
        subnet = subnet.probe_layers()
    if isinstance(subnet, (list, tuple)):
        specs = list(subnet)
        in_channels = specs[0].in_channels
        fn = linear_stack(specs)
        if volume is None:
            ext = [sum(s.grid.extents[i] for s in specs) for i in range(3)]
            volume = tuple(2 * e + 3 for e in ext)
        x = np.zeros((1, in_channels) + tuple(volume))
    else:
        fn = subnet
        if in_channels is None or volume is None:
            raise ContractError("callable probes need in_channels and volume")
        x = np.random.default_rng(seed).uniform(0.5, 1.5, (1, in_channels) + tuple(volume))
    volume = tuple(volume)
    centre = tuple(v // 2 for v in volume)
    xv = Var(x, requires_grad=True)
    with Tape() as tape:
        y = fn(xv)
        if y.shape[2:] != volume:
            raise ContractError("probed subnet must preserve the spatiotemporal volume")
        mask = np.zeros(y.shape)
        mask[(slice(None), slice(None)) + centre] = 1.0
        loss = sum_all(mul(y, Var(mask)))
    backward(tape, loss)
    support = np.abs(xv.grad).sum(axis=(0, 1)) > 0
    extents = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        nz = np.flatnonzero(support.any(axis=other))
        if nz.size == 0:
            extents.append(0)
            continue
        lo, hi = nz[0], nz[-1]
        if lo == 0 or hi == volume[axis] - 1:
            raise ContractError(f"support reaches the volume border on axis {axis}; probe a larger interior volume")
        extents.append(int(hi - lo + 1))
    return tuple(extents)


def _write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def feature_frames(activation: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Channel-averaged |activation| per frame, min-max scaled to 0..255, nearest-neighbour resized."""
    a = np.abs(np.asarray(activation)[0]).mean(axis=0)  # (T, H, W)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        scaled = np.full(a.shape, 128, dtype=np.uint8)
    else:
        scaled = np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)
    H, W = out_hw
    rows = np.arange(H) * a.shape[1] // H
    cols = np.arange(W) * a.shape[2] // W
    return scaled[:, rows][:, :, cols]


def dump_feature_maps(model, clip: np.ndarray, stage: str, out_dir) -> list[Path]:
    """Write ``<stage>_frameNN.pgm`` for every frame of ``stage``'s output on a single clip."""
    if stage not in model.stage_names:
        raise ValueError(f"unknown stage {stage!r}; expected one of {model.stage_names}")
    clip = np.asarray(clip, dtype=model.dtype)
    if clip.ndim == 4:
        clip = clip[None]
    model.eval()
    with no_tape():
        act = model.stage_outputs(Var(clip))[stage].value
    frames = feature_frames(act, clip.shape[3:])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, img in enumerate(frames):
        p = out_dir / f"{stage}_frame{t:02d}.pgm"
        _write_pgm(p, img)
        paths.append(p)
    return paths


def probe_hblock(cfg, seed: int = 0) -> dict:
    """Measured supports for one H-block configuration.

    ``generator``: the logits' dependence on the input (all-ones linear probe of
    the generator convs), which equals the context field.  ``block``: the full
    non-linear block at random generator weights, bounded by context + kernel.
    The channel count is raised to ``|R|`` when needed by the convnet generator.
    """
    from .hblock import HBlock

    channels = max(cfg.channels, len(cfg.kernel))
    cfg = cfg.with_channels(channels)
    block = HBlock(cfg, np.random.default_rng(seed), init="uniform")
    gen = probe_receptive_field(block.generator)
    volume = tuple(2 * (c + k) + 3 for c, k in zip(cfg.context.extents, cfg.kernel.extents))
    full = probe_receptive_field(block, in_channels=channels, volume=volume, seed=seed)
    return {"generator": gen, "block": full, "context": cfg.context.shape, "kernel": cfg.kernel.shape}
