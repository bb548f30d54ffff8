"""Skeleton ingestion, person-centric cropping, frame sampling and heatmap rendering.

Coordinates are continuous pixel coordinates: an image of width W spans
``[0, W]`` and pixel column ``j`` has its centre at ``j + 0.5``. The same
convention is used for heatmaps and for RGB resampling so that both
modalities stay aligned after cropping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, EmptySkeletonError, ParseError

KEYPOINT_FORMATS = {"coco17": 17, "single": 1}

DEFAULT_SIGMA = 0.6
DEFAULT_PAD_RATIO = 0.10


class Joint(tuple):
    """(x, y, confidence) triplet."""

    __slots__ = ()

    def __new__(cls, x: float, y: float, c: float):
        return super().__new__(cls, (float(x), float(y), float(c)))

    x = property(lambda self: self[0])
    y = property(lambda self: self[1])
    c = property(lambda self: self[2])


@dataclass
class SkeletonSequence:
    """Per-frame lists of persons; each person is a ``[K, 3]`` array of (x, y, c)."""

    clip_id: str
    img_shape: tuple[int, int]
    frames: list[list[np.ndarray]]
    keypoint_format: str = "coco17"

    @property
    def num_keypoints(self) -> int:
        return KEYPOINT_FORMATS[self.keypoint_format]

    def __len__(self) -> int:
        return len(self.frames)

    def select(self, indices: Sequence[int]) -> "SkeletonSequence":
        return SkeletonSequence(self.clip_id, self.img_shape,
                                [self.frames[i] for i in indices], self.keypoint_format)

    def joints(self) -> np.ndarray:
        """All joints of all persons and frames stacked into ``[P, 3]``."""
        people = [p for f in self.frames for p in f]
        if not people:
            return np.zeros((0, 3))
        return np.concatenate(people, axis=0)


@dataclass
class CropBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def validate(self) -> "CropBox":
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DimensionError(f"degenerate crop box {self}")
        return self

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class HeatmapVolume:
    data: np.ndarray  # [K, T, H, W]
    sigma: float = DEFAULT_SIGMA

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


# -- JSON ----------------------------------------------------------------------

def parse_skeleton(document: str | bytes | dict[str, Any]) -> SkeletonSequence:
    """Build a sequence from the skeleton JSON document (text or already decoded)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed skeleton JSON: {exc}") from None
    if not isinstance(document, dict):
        raise ParseError("skeleton document must be a JSON object")
    try:
        clip_id = str(document["clip_id"])
        h, w = (int(v) for v in document["img_shape"])
        fmt = document.get("keypoint_format", "coco17")
        raw_frames = document["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"skeleton document missing or malformed field: {exc}") from None
    if fmt not in KEYPOINT_FORMATS:
        raise ParseError(f"unknown keypoint_format {fmt!r}")
    if not isinstance(raw_frames, list) or not raw_frames:
        raise ParseError("skeleton document needs a non-empty 'frames' list")
    k = KEYPOINT_FORMATS[fmt]
    frames: list[list[np.ndarray]] = []
    for fi, frame in enumerate(raw_frames):
        persons = frame.get("persons") if isinstance(frame, dict) else None
        if not isinstance(persons, list):
            raise ParseError(f"frame {fi}: expected an object with a 'persons' list")
        parsed = []
        for pi, person in enumerate(persons):
            try:
                arr = np.asarray(person, dtype=np.float64)
            except (TypeError, ValueError):
                raise ParseError(f"frame {fi}, person {pi}: joints are not numeric triplets") from None
            if arr.ndim != 2 or arr.shape[1] != 3:
                raise ParseError(f"frame {fi}, person {pi}: joints must be [x, y, c] triplets")
            if arr.shape[0] != k:
                raise ParseError(f"frame {fi}, person {pi}: expected {k} joints, got {arr.shape[0]}")
            if not np.all(np.isfinite(arr)):
                raise ParseError(f"frame {fi}, person {pi}: non-finite coordinate")
            if np.any(arr[:, 2] < 0) or np.any(arr[:, 2] > 1):
                raise ParseError(f"frame {fi}, person {pi}: confidence outside [0, 1]")
            parsed.append(arr)
        frames.append(parsed)
    return SkeletonSequence(clip_id, (h, w), frames, fmt)


def skeleton_to_dict(seq: SkeletonSequence) -> dict[str, Any]:
    return {"clip_id": seq.clip_id, "img_shape": list(seq.img_shape),
            "keypoint_format": seq.keypoint_format,
            "frames": [{"persons": [p.tolist() for p in f]} for f in seq.frames]}


def serialize_skeleton(seq: SkeletonSequence) -> str:
    return json.dumps(skeleton_to_dict(seq))


# -- temporal sampling -------------------------------------------------------------

def uniform_sample(total_frames: int, n: int) -> list[int]:
    """``floor(i * total / n)`` for i in 0..n-1; short clips repeat frames."""
    if total_frames < 1 or n < 1:
        raise ConfigurationError(f"need total_frames >= 1 and n >= 1, got {total_frames}, {n}")
    return [i * total_frames // n for i in range(n)]


def subselect_rgb(pose_indices: Sequence[int], m: int) -> list[int]:
    """Every (N/M)-th entry of the pose frame list, starting at the first."""
    n = len(pose_indices)
    if m < 1 or n % m:
        raise ConfigurationError(f"pose frame count {n} is not divisible by RGB frame count {m}")
    return list(pose_indices[:: n // m])


# -- spatial alignment -------------------------------------------------------------

def min_bbox(seq: SkeletonSequence, pad_ratio: float = DEFAULT_PAD_RATIO,
             min_extent: float = 0.0) -> CropBox:
    """Tightest box around every joint with c > 0, padded per side and clamped to the image.

    ``pad_ratio`` is relative to the box extent on each axis. An axis whose
    padded extent is below ``min_extent`` is grown symmetrically to it.
    """
    pts = seq.joints()
    pts = pts[pts[:, 2] > 0] if len(pts) else pts
    if len(pts) == 0:
        raise EmptySkeletonError(f"clip {seq.clip_id!r} has no joint with positive confidence")
    x0, y0 = pts[:, 0].min(), pts[:, 1].min()
    x1, y1 = pts[:, 0].max(), pts[:, 1].max()
    dx, dy = (x1 - x0) * pad_ratio, (y1 - y0) * pad_ratio
    x0, x1, y0, y1 = x0 - dx, x1 + dx, y0 - dy, y1 + dy
    if x1 - x0 < min_extent:
        cx = (x0 + x1) / 2
        x0, x1 = cx - min_extent / 2, cx + min_extent / 2
    if y1 - y0 < min_extent:
        cy = (y0 + y1) / 2
        y0, y1 = cy - min_extent / 2, cy + min_extent / 2
    h, w = seq.img_shape
    box = CropBox(float(max(x0, 0.0)), float(max(y0, 0.0)), float(min(x1, w)), float(min(y1, h)))
    return box.validate()


def crop_points(xy: np.ndarray, box: CropBox, target: tuple[int, int]) -> np.ndarray:
    """Map image coordinates into a ``target=(H, W)`` crop of ``box``."""
    box.validate()
    h, w = target
    out = np.array(xy, dtype=np.float64, copy=True)
    out[..., 0] = (out[..., 0] - box.x_min) * w / box.width
    out[..., 1] = (out[..., 1] - box.y_min) * h / box.height
    return out


def uncrop_points(xy: np.ndarray, box: CropBox, target: tuple[int, int]) -> np.ndarray:
    box.validate()
    h, w = target
    out = np.array(xy, dtype=np.float64, copy=True)
    out[..., 0] = out[..., 0] * box.width / w + box.x_min
    out[..., 1] = out[..., 1] * box.height / h + box.y_min
    return out


def crop_transform(seq: SkeletonSequence, box: CropBox, target: tuple[int, int]) -> SkeletonSequence:
    """Express every joint in the coordinates of the resized crop; confidences are kept."""
    box.validate()
    frames = []
    for frame in seq.frames:
        new = []
        for person in frame:
            p = person.copy()
            p[:, :2] = crop_points(person[:, :2], box, target)
            new.append(p)
        frames.append(new)
    return SkeletonSequence(seq.clip_id, (int(target[0]), int(target[1])), frames, seq.keypoint_format)


def _interp_matrix(n_out: int, n_in: int, lo: float, extent: float) -> np.ndarray:
    """Rows of bilinear weights sampling ``n_in`` source pixels at ``n_out`` crop pixel centres."""
    centres = lo + (np.arange(n_out) + 0.5) * extent / n_out - 0.5
    centres = np.clip(centres, 0.0, n_in - 1.0)
    left = np.floor(centres).astype(int)
    right = np.minimum(left + 1, n_in - 1)
    frac = centres - left
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), left] += 1 - frac
    m[np.arange(n_out), right] += frac
    return m


def crop_resize_frames(frames: np.ndarray, box: CropBox, target: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample ``[C, F, H_img, W_img]`` frames onto the crop grid of ``box``.

    Uses the same coordinate map as :func:`crop_points`, so a joint and the
    pixel it sits on land at the same place in the output.
    """
    box.validate()
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise DimensionError(f"frames must be [C, F, H, W], got shape {frames.shape}")
    h, w = target
    ry = _interp_matrix(h, frames.shape[2], box.y_min, box.height)
    rx = _interp_matrix(w, frames.shape[3], box.x_min, box.width)
    out = np.einsum("oh,cfhw,pw->cfop", ry, frames.astype(np.float64), rx, optimize=True)
    return out.astype(frames.dtype if frames.dtype.kind == "f" else np.float32)


# -- heatmaps -----------------------------------------------------------------------

def render_heatmap_volume(seq: SkeletonSequence, sigma: float = DEFAULT_SIGMA,
                          size: tuple[int, int] | None = None) -> HeatmapVolume:
    """Gaussian pseudo-heatmaps, one channel per keypoint and one slice per frame.

    Each joint contributes ``c * exp(-d^2 / (2 sigma^2))`` evaluated at pixel
    centres; several persons on the same channel combine by per-pixel max.
    ``seq`` must already be in map coordinates (see :func:`crop_transform`).
    """
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    h, w = seq.img_shape if size is None else size
    k = seq.num_keypoints
    vol = np.zeros((k, len(seq.frames), h, w))
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    denom = 2.0 * sigma * sigma
    for t, frame in enumerate(seq.frames):
        for person in frame:
            for j in range(k):
                x, y, c = person[j]
                if c <= 0:
                    continue
                gx = np.exp(-((xs - x) ** 2) / denom)
                gy = np.exp(-((ys - y) ** 2) / denom)
                np.maximum(vol[j, t], c * np.outer(gy, gx), out=vol[j, t])
    return HeatmapVolume(vol, sigma)


# -- end-to-end clip preparation --------------------------------------------------------

@dataclass
class ClipSampling:
    """How one raw clip becomes a (heatmap volume, RGB clip) model input pair."""

    pose_frames: int = 48
    rgb_frames: int = 16
    pose_size: tuple[int, int] = (56, 56)
    rgb_size: tuple[int, int] = (224, 224)
    sigma: float = DEFAULT_SIGMA
    pad_ratio: float = DEFAULT_PAD_RATIO
    min_extent: float = 0.0


def prepare_clip(seq: SkeletonSequence, rgb: np.ndarray | None, sampling: ClipSampling = ClipSampling()):
    """Crop, sample and render. Returns ``(heatmaps [K,N,h,w], rgb [C,M,H,W] or None, box)``."""
    total = len(seq)
    if rgb is not None and rgb.shape[1] != total:
        raise DimensionError(f"RGB clip has {rgb.shape[1]} frames, skeleton has {total}")
    idx = uniform_sample(total, sampling.pose_frames)
    rgb_idx = subselect_rgb(idx, sampling.rgb_frames)
    box = min_bbox(seq, sampling.pad_ratio, sampling.min_extent)
    local = crop_transform(seq.select(idx), box, sampling.pose_size)
    heat = render_heatmap_volume(local, sampling.sigma).data
    clip = None
    if rgb is not None:
        clip = crop_resize_frames(rgb[:, rgb_idx], box, sampling.rgb_size)
    return heat, clip, box
