"""Synthetic push/pull videos whose label is (motion direction) XOR (hand side), plus a texture control.

Every XOR clip is rendered from one canonical layout, where the hand is to the right
of the object and moves right. A horizontal mirror flips both booleans, and time
reversal flips only the direction. The unordered set of frames is therefore
independent of the direction, so no single frame reveals the two-class label.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import ConfigurationError, FormatError, read_hot1, write_hot1

HAND_INTENSITY = 1.0
OBJECT_INTENSITY = 0.5
LABEL_RULES = ("two-class", "four-class")


@dataclass(frozen=True)
class XorTaskConfig:
    clip_shape: tuple[int, int, int] = (8, 32, 32)
    object_size: int = 6
    hand_size: int = 4
    speed: int = 1
    noise: float = 0.05
    seed: int = 0
    train_samples: int = 512
    test_samples: int = 512
    label_rule: str = "two-class"
    gap: int = 1

    def __post_init__(self):
        object.__setattr__(self, "clip_shape", tuple(int(s) for s in self.clip_shape))
        if self.label_rule not in LABEL_RULES:
            raise ConfigurationError(f"label_rule must be one of {LABEL_RULES}, got {self.label_rule!r}")
        T, H, W = self.clip_shape
        travel = (T - 1) * self.speed
        if self.object_size + self.gap + travel + self.hand_size > W:
            raise ConfigurationError(
                f"infeasible geometry: object {self.object_size} + gap {self.gap} + travel {travel} "
                f"+ hand {self.hand_size} exceeds width {W}"
            )
        if max(self.object_size, self.hand_size) > H:
            raise ConfigurationError(f"object/hand taller than frame height {H}")
        k = self.num_classes
        for n in (self.train_samples, self.test_samples):
            if n % k:
                raise ConfigurationError(f"sample counts must be multiples of {k} for exact class balance, got {n}")

    @property
    def num_classes(self) -> int:
        return 2 if self.label_rule == "two-class" else 4


@dataclass
class LabeledClip:
    clip: np.ndarray
    label: int
    a: bool
    b: bool


def xor_label(a: bool, b: bool, rule: str = "two-class") -> int:
    """two-class: push = A XOR B.  four-class: ``2 * (A XOR B) + A``."""
    push = int(a) ^ int(b)
    return push if rule == "two-class" else 2 * push + int(a)


def _balanced_flags(n: int, rng) -> list[tuple[bool, bool]]:
    # cycle keeps every even prefix label-balanced before shuffling
    cycle = [(False, False), (True, False), (True, True), (False, True)]
    flags = [cycle[i % 4] for i in range(n)]
    order = rng.permutation(n)
    return [flags[i] for i in order]


def render_xor_clip(cfg: XorTaskConfig, a: bool, b: bool, rng) -> np.ndarray:
    T, H, W = cfg.clip_shape
    travel = (T - 1) * cfg.speed
    span = cfg.object_size + cfg.gap + travel + cfg.hand_size
    ox = int(rng.integers(0, W - span + 1))
    hx0 = int(rng.integers(ox + cfg.object_size + cfg.gap, W - travel - cfg.hand_size + 1))
    oy = int(rng.integers(0, H - cfg.object_size + 1))
    hy = int(rng.integers(0, H - cfg.hand_size + 1))
    clip = np.zeros((T, H, W))
    for t in range(T):
        clip[t, oy : oy + cfg.object_size, ox : ox + cfg.object_size] = OBJECT_INTENSITY
        hx = hx0 + cfg.speed * t
        clip[t, hy : hy + cfg.hand_size, hx : hx + cfg.hand_size] = HAND_INTENSITY
    # canonical layout has a = b = True
    if not b:
        clip = clip[:, :, ::-1]
    if a != b:
        clip = clip[::-1]
    clip = clip + cfg.noise * rng.standard_normal(clip.shape)
    return np.ascontiguousarray(clip, dtype=np.float32)


def generate_clips(cfg: XorTaskConfig, split: str = "train") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """In-memory split: clips ``(n, 1, T, H, W)`` float32, labels ``(n,)``, flags ``(n, 2)``."""
    n = cfg.train_samples if split == "train" else cfg.test_samples
    rng = np.random.default_rng([cfg.seed, 0 if split == "train" else 1])
    flags = _balanced_flags(n, rng)
    clips = np.stack([render_xor_clip(cfg, a, b, rng) for a, b in flags])[:, None]
    labels = np.array([xor_label(a, b, cfg.label_rule) for a, b in flags], dtype=np.int64)
    return clips, labels, np.array(flags, dtype=bool)


def generate_texture_clips(cfg: XorTaskConfig, split: str = "train"):
    """Motion-free control: a static striped patch, horizontal (0) or vertical (1) stripes."""
    n = cfg.train_samples if split == "train" else cfg.test_samples
    rng = np.random.default_rng([cfg.seed, 2 if split == "train" else 3])
    T, H, W = cfg.clip_shape
    size = max(cfg.object_size, 8)
    labels = np.array([i % 2 for i in range(n)], dtype=np.int64)[rng.permutation(n)]
    clips = np.zeros((n, 1, T, H, W), dtype=np.float32)
    for i, lab in enumerate(labels):
        y0 = int(rng.integers(0, H - size + 1))
        x0 = int(rng.integers(0, W - size + 1))
        phase = int(rng.integers(0, 2))
        r = np.arange(size)
        stripes = ((r + phase) % 2).astype(np.float32)
        patch = np.tile(stripes[:, None], (1, size)) if lab == 0 else np.tile(stripes[None, :], (size, 1))
        frame = np.zeros((H, W), dtype=np.float32)
        frame[y0 : y0 + size, x0 : x0 + size] = patch
        clips[i, 0] = frame[None] + cfg.noise * rng.standard_normal((T, H, W))
    flags = np.zeros((n, 2), dtype=bool)
    return clips, labels, flags


def shuffle_frames(clips: np.ndarray, seed: int) -> np.ndarray:
    """Independently permute the frame order of every clip."""
    rng = np.random.default_rng(seed)
    out = np.empty_like(clips)
    for i in range(clips.shape[0]):
        out[i] = clips[i][:, rng.permutation(clips.shape[2])]
    return out


def generate_dataset(cfg: XorTaskConfig, out_dir) -> Path:
    """Write ``train/`` and ``test/`` splits, each with ``clips/``, ``labels.tsv`` and ``meta.json``."""
    out_dir = Path(out_dir)
    for split in ("train", "test"):
        clips, labels, flags = generate_clips(cfg, split)
        write_split(out_dir / split, clips, labels, flags, cfg)
    return out_dir


def write_split(directory, clips, labels, flags, cfg: XorTaskConfig | None = None):
    directory = Path(directory)
    (directory / "clips").mkdir(parents=True, exist_ok=True)
    lines = ["index\tlabel\tA\tB"]
    for i, (clip, lab, (a, b)) in enumerate(zip(clips, labels, flags)):
        write_hot1(directory / "clips" / f"{i:06d}.hot1", clip[None])
        lines.append(f"{i}\t{int(lab)}\t{int(a)}\t{int(b)}")
    (directory / "labels.tsv").write_text("\n".join(lines) + "\n")
    if cfg is not None:
        (directory / "meta.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=2) + "\n")


@dataclass
class Dataset:
    clips: np.ndarray
    labels: np.ndarray
    flags: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        rows = (path / "labels.tsv").read_text().strip().splitlines()[1:]
        clips, labels, flags = [], [], []
        for row in rows:
            idx, lab, a, b = row.split("\t")
            clip = read_hot1(path / "clips" / f"{int(idx):06d}.hot1")
            if clip.shape[:2] != (1, 1):
                raise FormatError(f"{path / 'clips' / f'{int(idx):06d}.hot1'}: expected one single-channel clip, got {clip.shape}")
            clips.append(clip[0])
            labels.append(int(lab))
            flags.append((a == "1", b == "1"))
        return cls(np.stack(clips), np.array(labels, dtype=np.int64), np.array(flags, dtype=bool))

    def normalized(self) -> np.ndarray:
        return normalize_clips(self.clips)

    def batches(self, batch_size: int, seed: int | None = 0, dtype=np.float64) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Per-clip standardized batches; ``seed=None`` keeps file order."""
        x = normalize_clips(self.clips).astype(dtype)
        order = np.arange(len(self)) if seed is None else np.random.default_rng(seed).permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield x[idx], self.labels[idx]


def normalize_clips(clips: np.ndarray) -> np.ndarray:
    """Per-clip zero mean / unit variance, computed in f64."""
    clips = np.asarray(clips, dtype=np.float64)
    axes = tuple(range(1, clips.ndim))
    mean = clips.mean(axis=axes, keepdims=True)
    std = clips.std(axis=axes, keepdims=True)
    return (clips - mean) / np.where(std > 0, std, 1.0)


def load_dataset(path, batch_size: int = 16, seed: int | None = 0, dtype=np.float64):
    return Dataset.load(path).batches(batch_size, seed, dtype)
