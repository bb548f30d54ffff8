"""Synthetic moving-blob action dataset and the preprocessing that turns it into model inputs.

Each class moves a bright 5x5 square in one fixed direction over a noisy
background. The square's centre is also written out as a one-joint skeleton
(confidence 1), so the RGB clip and the skeleton describe the same motion by
construction. With ``appearance=True`` the square is tinted with a per-class
colour, which gives the RGB stream a cue the skeleton does not have.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, ParseError
from .model import ClipBatchData
from .pose import ClipSampling, SkeletonSequence, prepare_clip

DIRECTIONS = {
    "up": (0.0, -1.0), "down": (0.0, 1.0), "left": (-1.0, 0.0), "right": (1.0, 0.0),
    "up-left": (-0.7071, -0.7071), "up-right": (0.7071, -0.7071),
    "down-left": (-0.7071, 0.7071), "down-right": (0.7071, 0.7071),
}
CLASS_NAMES = tuple(DIRECTIONS)

# tints for the appearance-cue variant, one per class
PALETTE = np.array([[1.0, 0.15, 0.15], [0.15, 1.0, 0.15], [0.15, 0.3, 1.0], [1.0, 1.0, 0.15],
                    [1.0, 0.15, 1.0], [0.15, 1.0, 1.0], [1.0, 0.6, 0.15], [0.6, 0.3, 1.0]])

BLOB = 5


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    clips_per_class: int = 100
    frames_total: int = 96
    image_size: int = 64
    noise: float = 0.08
    speed: tuple[float, float] = (0.30, 0.45)
    appearance: bool = False
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(DIRECTIONS):
            raise ConfigurationError(f"num_classes must be in [2, {len(DIRECTIONS)}], got {self.num_classes}")
        if self.clips_per_class < 1 or self.frames_total < 2:
            raise ConfigurationError("need clips_per_class >= 1 and frames_total >= 2")
        travel = self.speed[1] * (self.frames_total - 1)
        if self.image_size < travel + 2 * BLOB:
            raise ConfigurationError(f"image_size {self.image_size} too small for {travel:.1f} px of travel")
        if not 0 < self.speed[0] <= self.speed[1]:
            raise ConfigurationError(f"bad speed range {self.speed}")
        if not 0 <= self.test_fraction < 1:
            raise ConfigurationError("test_fraction must lie in [0, 1)")

    @property
    def num_clips(self) -> int:
        return self.num_classes * self.clips_per_class

    def label_of(self, index: int) -> int:
        return index % self.num_classes

    def is_test(self, index: int) -> bool:
        """The last ``test_fraction`` of each class's clips form the held-out split."""
        n_test = int(round(self.clips_per_class * self.test_fraction))
        return index // self.num_classes >= self.clips_per_class - n_test

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speed"] = list(self.speed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "speed" in d:
            d["speed"] = tuple(d["speed"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ParseError(f"bad synthetic spec: {exc}") from None


@dataclass
class SyntheticClip:
    skeleton: SkeletonSequence
    rgb: np.ndarray  # [3, F, H, W] in [0, 1]
    label: int


def trajectory(spec: SyntheticSpec, rng: np.random.Generator, label: int) -> np.ndarray:
    """Blob centre per frame, ``[F, 2]`` in continuous pixel coordinates."""
    direction = np.array(DIRECTIONS[CLASS_NAMES[label]])
    speed = rng.uniform(*spec.speed)
    steps = np.arange(spec.frames_total)[:, None] * speed * direction
    lo = BLOB - steps.min(axis=0)
    hi = spec.image_size - BLOB - steps.max(axis=0)
    start = rng.uniform(lo, hi)
    return start + steps


def make_clip(spec: SyntheticSpec, index: int) -> SyntheticClip:
    rng = np.random.default_rng([spec.seed, index])
    label = spec.label_of(index)
    path = trajectory(spec, rng, label)
    size, half = spec.image_size, BLOB // 2
    rgb = np.clip(0.2 + spec.noise * rng.standard_normal((3, spec.frames_total, size, size)), 0, 1)
    colour = PALETTE[label] if spec.appearance else np.ones(3)
    frames = []
    for t, (x, y) in enumerate(path):
        col, row = int(np.floor(x)), int(np.floor(y))
        rgb[:, t, row - half:row + half + 1, col - half:col + half + 1] = colour[:, None, None]
        frames.append([np.array([[x, y, 1.0]])])
    skel = SkeletonSequence(f"synth-{index:05d}", (size, size), frames, "single")
    return SyntheticClip(skel, rgb.astype(np.float32), label)


def iter_synthetic(spec: SyntheticSpec, split: str = "all") -> Iterator[SyntheticClip]:
    if split not in ("all", "train", "test"):
        raise ConfigurationError(f"unknown split {split!r}")
    for i in range(spec.num_clips):
        if split == "all" or (split == "test") == spec.is_test(i):
            yield make_clip(spec, i)


def gen_synthetic(spec: SyntheticSpec, split: str = "all") -> list[SyntheticClip]:
    """Materialise the whole dataset (or one split). Deterministic in ``spec.seed``."""
    return list(iter_synthetic(spec, split))


def tiny_sampling(pose_frames: int = 8, rgb_frames: int = 4, pose_size: int = 16,
                  rgb_size: int = 64) -> ClipSampling:
    """Sampling that matches the tiny backbone configs; the box is at least 36 px on each side."""
    return ClipSampling(pose_frames, rgb_frames, (pose_size, pose_size), (rgb_size, rgb_size),
                        min_extent=36.0)


def prepare_dataset(clips, sampling: ClipSampling, dtype=np.float32) -> ClipBatchData:
    """Crop, sample and render every clip into stacked model inputs."""
    poses, rgbs, labels = [], [], []
    for clip in clips:
        heat, rgb, _ = prepare_clip(clip.skeleton, clip.rgb, sampling)
        poses.append(heat.astype(dtype))
        rgbs.append(rgb.astype(dtype))
        labels.append(clip.label)
    if not labels:
        raise ConfigurationError("no clips to prepare")
    return ClipBatchData(np.stack(poses), np.stack(rgbs), np.array(labels, dtype=np.int64))


def write_synthetic_dir(spec: SyntheticSpec, directory, sampling: ClipSampling | None = None) -> Path:
    """Record a dataset as its generator description; ``load_dataset_dir`` regenerates it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"generator": spec.to_dict()}
    if sampling is not None:
        doc["sampling"] = sampling_to_dict(sampling)
    path = directory / "synthetic.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def sampling_to_dict(s: ClipSampling) -> dict:
    d = asdict(s)
    d["pose_size"], d["rgb_size"] = list(s.pose_size), list(s.rgb_size)
    return d


def sampling_from_dict(d: dict) -> ClipSampling:
    d = dict(d)
    for key in ("pose_size", "rgb_size"):
        if key in d:
            d[key] = tuple(d[key])
    try:
        return ClipSampling(**d)
    except TypeError as exc:
        raise ParseError(f"bad sampling description: {exc}") from None


def read_synthetic_dir(directory) -> tuple[SyntheticSpec, ClipSampling]:
    path = Path(directory) / "synthetic.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ParseError(f"{path} not found") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if "generator" not in doc:
        raise ParseError(f"{path}: missing 'generator'")
    spec = SyntheticSpec.from_dict(doc["generator"])
    sampling = sampling_from_dict(doc["sampling"]) if "sampling" in doc else tiny_sampling()
    return spec, sampling
