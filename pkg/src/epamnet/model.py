"""Two-stream network, joint loss, score fusion and the staged training procedure."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import functional as F
from .attention import AttentionMaps, build_attention, modulate, time_strided_sample
from .backbones import (BackboneConfig, X3DNetwork, config_to_text, load_backbone_config,
                        parse_kv, resolve_config_path, tiny_pose_config, tiny_rgb_config)
from .errors import ConfigurationError, ContractError, DimensionError
from .nn import CostRow, Module
from .tensor import Tensor, as_tensor, backward

log = logging.getLogger(__name__)


@dataclass
class FusionWeights:
    skeleton: float = 1.0
    rgb: float = 1.0

    def __post_init__(self):
        if self.skeleton < 0 or self.rgb < 0 or self.skeleton + self.rgb == 0:
            raise ConfigurationError(f"fusion weights must be non-negative and not both zero: {self}")


@dataclass
class ModelConfig:
    rgb: BackboneConfig
    pose: BackboneConfig
    sta_variant: str = "nesting"
    sta_kernel: int = 3
    sta_hidden: int | None = None
    fusion: FusionWeights = field(default_factory=FusionWeights)

    def __post_init__(self):
        if self.rgb.kind != "rgb" or self.pose.kind != "pose":
            raise ConfigurationError("ModelConfig needs an rgb and a pose backbone config")
        if self.rgb.num_classes != self.pose.num_classes:
            raise ConfigurationError(f"stream class counts differ: rgb {self.rgb.num_classes}, "
                                     f"pose {self.pose.num_classes}")
        if self.sta_variant not in ("nesting", "alternative"):
            raise ConfigurationError(f"unknown sta.variant {self.sta_variant!r}")

    @property
    def num_classes(self) -> int:
        return self.rgb.num_classes


@dataclass
class ModelOutput:
    logits_skeleton: Tensor
    logits_rgb: Tensor
    attention: AttentionMaps
    fused_probs: np.ndarray


def _softmax_np(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def fuse_scores(logits_skeleton, logits_rgb, weights: FusionWeights = FusionWeights()) -> np.ndarray:
    """Weighted mean of the two streams' softmax probabilities."""
    ls = logits_skeleton.data if isinstance(logits_skeleton, Tensor) else np.asarray(logits_skeleton)
    lr = logits_rgb.data if isinstance(logits_rgb, Tensor) else np.asarray(logits_rgb)
    if ls.shape != lr.shape:
        raise DimensionError(f"stream logits differ in shape: {ls.shape} vs {lr.shape}")
    ps, pr = _softmax_np(ls), _softmax_np(lr)
    if weights.rgb == 0:
        return ps
    if weights.skeleton == 0:
        return pr
    return (weights.skeleton * ps + weights.rgb * pr) / (weights.skeleton + weights.rgb)


def predict(probs: np.ndarray) -> np.ndarray:
    """Arg-max class; ``np.argmax`` already breaks ties toward the lowest index."""
    return np.argmax(probs, axis=-1)


class EPAMNet(Module):
    """Pose stream guides the RGB stream through spatial-temporal attention on conv5 features."""

    def __init__(self, config: ModelConfig, rng=0):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.config = config
        self.rgb = X3DNetwork(config.rgb, rng)
        self.pose = X3DNetwork(config.pose, rng)
        rgb_feat = _feature_shape(self.rgb)
        pose_feat = _feature_shape(self.pose)
        if rgb_feat[2:] != pose_feat[2:]:
            raise DimensionError(f"junction pose/rgb: final spatial sizes differ, pose {pose_feat[2:]} "
                                 f"vs rgb {rgb_feat[2:]}")
        if pose_feat[1] % rgb_feat[1]:
            raise ConfigurationError(f"junction pose/rgb: pose frames {pose_feat[1]} not a multiple of "
                                     f"rgb frames {rgb_feat[1]}")
        self.rgb_frames = rgb_feat[1]
        self.attention = build_attention(config.sta_variant, pose_feat[0], self.rgb_frames,
                                         config.sta_hidden, config.sta_kernel, rng)
        self.stream_ready = {"rgb": False, "pose": False}

    def forward(self, pose_volume, rgb_clip, attention_override=None) -> ModelOutput:
        """Run both streams.

        ``attention_override=(spatial, temporal)`` replaces the computed maps,
        which is how the identity-modulation checks inject all-ones maps.
        """
        pose_volume, rgb_clip = _input_tensor(pose_volume), _input_tensor(rgb_clip)
        if (pose_volume.ndim == 5) != (rgb_clip.ndim == 5):
            raise DimensionError("junction inputs: pose and rgb must both be batched or both single clips")
        if pose_volume.ndim == 5 and pose_volume.shape[0] != rgb_clip.shape[0]:
            raise DimensionError(f"junction inputs: batch sizes differ ({pose_volume.shape[0]} vs "
                                 f"{rgb_clip.shape[0]})")
        f_s = self.pose.features(pose_volume)
        logits_skeleton = self.pose.classify(f_s)
        aligned = time_strided_sample(f_s, self.rgb_frames)
        if attention_override is None:
            maps = self.attention(aligned)
        else:
            spatial, temporal = (as_tensor(a) for a in attention_override)
            maps = AttentionMaps(spatial, temporal, temporal)
        f_r = self.rgb.features(rgb_clip)
        modulated, maps.joint = modulate(f_r, maps.spatial, maps.temporal)
        logits_rgb = self.rgb.classify(modulated)
        fused = fuse_scores(logits_skeleton, logits_rgb, self.config.fusion)
        return ModelOutput(logits_skeleton, logits_rgb, maps, fused)

    def internal_shapes(self, pose_volume, rgb_clip) -> dict[str, tuple[int, ...]]:
        pose_volume, rgb_clip = _input_tensor(pose_volume), _input_tensor(rgb_clip)
        f_s = self.pose.features(pose_volume)
        aligned = time_strided_sample(f_s, self.rgb_frames)
        maps = self.attention(aligned)
        f_r = self.rgb.features(rgb_clip)
        return {"f_s": f_s.shape, "aligned": aligned.shape, "spatial": maps.spatial.shape,
                "temporal": maps.temporal.shape, "f_r": f_r.shape}

    def trace(self, shape=None, rows=None, prefix=""):
        rows = [] if rows is None else rows
        pose_rows: list[CostRow] = []
        feat = self.pose.backbone.trace(self.config.pose.input_shape, pose_rows)
        self.pose.head.trace(feat, pose_rows)
        rows += [CostRow("pose." + r.name, r.kind, r.out_shape, r.params, r.macs) for r in pose_rows]
        att_rows: list[CostRow] = []
        self.attention.trace((feat[0], self.rgb_frames, *feat[2:]), att_rows)
        rows += att_rows
        rgb_rows: list[CostRow] = []
        out = self.rgb.trace(None, rgb_rows)
        rows += [CostRow("rgb." + r.name, r.kind, r.out_shape, r.params, r.macs) for r in rgb_rows]
        return out


def _input_tensor(x) -> Tensor:
    """Accept a Tensor, an ndarray or a HeatmapVolume (anything with an ndarray ``.data``)."""
    if isinstance(x, Tensor):
        return x
    return as_tensor(x.data if isinstance(getattr(x, "data", None), np.ndarray) else x)


def _feature_shape(net: X3DNetwork) -> tuple[int, ...]:
    return net.backbone.trace(net.config.input_shape, [])


# -- losses ----------------------------------------------------------------------

def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= num_classes):
        raise ContractError(f"labels must be integers in [0, {num_classes}), got {labels.tolist()}")
    return labels.astype(np.int64)


def joint_loss(output: ModelOutput, labels) -> Tensor:
    """Cross-entropy of the skeleton stream plus cross-entropy of the RGB stream (batch mean)."""
    k = output.logits_rgb.shape[-1]
    labels = _check_labels(labels, k)
    return F.cross_entropy(output.logits_skeleton, labels) + F.cross_entropy(output.logits_rgb, labels)


loss = joint_loss


# -- optimisation -------------------------------------------------------------------

def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_momentum_step(params: Sequence, grads: Sequence, velocity: Sequence, lr: float,
                      momentum: float = 0.9):
    """``v <- momentum * v + g``; ``p <- p - lr * v``. Arrays are updated in place and returned."""
    if not len(params) == len(grads) == len(velocity):
        raise DimensionError("params, grads and velocity lists differ in length")
    out_p, out_v = [], []
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        pa = p.data if isinstance(p, Tensor) else p
        if pa.shape != np.shape(g) or pa.shape != np.shape(v):
            raise DimensionError(f"entry {i}: param {pa.shape}, grad {np.shape(g)}, velocity {np.shape(v)}")
        v *= momentum
        v += g
        pa -= lr * v
        out_p.append(p)
        out_v.append(v)
    return out_p, out_v


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        if not 0 <= momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_momentum_step(self.params, grads, self.velocity, lr, self.momentum)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- training ----------------------------------------------------------------------

PHASES = ("rgb_pretrain", "pose_pretrain", "joint_finetune")
PHASE_DEFAULTS = {
    "rgb_pretrain": dict(batch_size=16, base_lr=0.0125, epochs=240),
    "pose_pretrain": dict(batch_size=64, base_lr=0.1, epochs=240),
    "joint_finetune": dict(batch_size=16, base_lr=0.001, epochs=20),
}


@dataclass
class TrainConfig:
    phase: str
    batch_size: int
    base_lr: float
    epochs: int
    momentum: float = 0.9
    seed: int = 0
    freeze: tuple[str, ...] = ()

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigurationError(f"unknown phase {self.phase!r}")
        if not self.base_lr >= 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("base_lr must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        bad = set(self.freeze) - {"rgb", "pose", "attention"}
        if bad:
            raise ConfigurationError(f"unknown freeze targets {sorted(bad)}")

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> "TrainConfig":
        if phase not in PHASE_DEFAULTS:
            raise ConfigurationError(f"unknown phase {phase!r}")
        return cls(phase=phase, **{**PHASE_DEFAULTS[phase], **overrides})


@dataclass
class ClipBatchData:
    """Preprocessed model inputs: heatmap volumes, RGB clips and labels."""

    poses: np.ndarray   # [N, K, T_N, h, w]
    rgbs: np.ndarray    # [N, 3, T_M, H, W]
    labels: np.ndarray  # [N]

    def __post_init__(self):
        if not len(self.poses) == len(self.rgbs) == len(self.labels):
            raise DimensionError("poses, rgbs and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ClipBatchData":
        return ClipBatchData(self.poses[idx], self.rgbs[idx], self.labels[idx])


def _phase_params(model: EPAMNet, cfg: TrainConfig) -> list[Tensor]:
    if cfg.phase == "rgb_pretrain":
        return model.rgb.parameters()
    if cfg.phase == "pose_pretrain":
        return model.pose.parameters()
    parts = {"rgb": model.rgb, "pose": model.pose, "attention": model.attention}
    return [p for name, m in parts.items() if name not in cfg.freeze for p in m.parameters()]


def train_phase(model: EPAMNet, data: ClipBatchData, config: TrainConfig) -> list[dict]:
    """Run one training phase in place; returns the per-epoch history."""
    if config.phase == "joint_finetune" and not all(model.stream_ready.values()):
        missing = [k for k, v in model.stream_ready.items() if not v]
        raise ConfigurationError(f"joint fine-tuning needs pretrained weights for: {', '.join(missing)}")
    if len(data) == 0:
        raise ContractError("empty training set")
    params = _phase_params(model, config)
    opt = SGD(params, config.momentum)
    rng = np.random.default_rng(config.seed)
    model.train()
    history = []
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.base_lr)
        order = rng.permutation(len(data))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = data.subset(idx)
            opt.zero_grad()
            step_loss, preds = _step_loss(model, batch, config.phase)
            backward(step_loss)
            opt.step(lr)
            total_loss += step_loss.item() * len(idx)
            correct += int((preds == batch.labels).sum())
        record = {"epoch": epoch, "lr": lr, "loss": total_loss / len(data), "top1": correct / len(data)}
        history.append(record)
        log.info("%s epoch %d lr %.5f loss %.4f top1 %.3f", config.phase, epoch, lr,
                 record["loss"], record["top1"])
    if config.phase == "rgb_pretrain":
        model.stream_ready["rgb"] = True
    elif config.phase == "pose_pretrain":
        model.stream_ready["pose"] = True
    return history


def _step_loss(model: EPAMNet, batch: ClipBatchData, phase: str):
    labels = _check_labels(batch.labels, model.config.num_classes)
    if phase == "rgb_pretrain":
        logits = model.rgb(Tensor(batch.rgbs))
        return F.cross_entropy(logits, labels), predict(logits.data)
    if phase == "pose_pretrain":
        logits = model.pose(Tensor(batch.poses))
        return F.cross_entropy(logits, labels), predict(logits.data)
    out = model(Tensor(batch.poses), Tensor(batch.rgbs))
    return joint_loss(out, labels), predict(out.fused_probs)


# -- model config files --------------------------------------------------------------

MODEL_KEYS = ("rgb_config", "pose_config", "classes", "sta.variant", "sta.k", "sta.h",
              "fusion.w_skeleton", "fusion.w_rgb")


def load_model_config(path) -> ModelConfig:
    path = resolve_config_path(path)
    d = parse_kv(path.read_text())
    unknown = set(d) - set(MODEL_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
    try:
        rgb = load_backbone_config(_sibling(path, d["rgb_config"]))
        pose = load_backbone_config(_sibling(path, d["pose_config"]))
    except KeyError as exc:
        raise ConfigurationError(f"model config missing {exc.args[0]!r}") from None
    if "classes" in d:
        k = int(d["classes"])
        rgb, pose = rgb.replace(num_classes=k), pose.replace(num_classes=k)
    try:
        return ModelConfig(rgb, pose, sta_variant=d.get("sta.variant", "nesting"),
                           sta_kernel=int(d.get("sta.k", 3)),
                           sta_hidden=int(d["sta.h"]) if "sta.h" in d else None,
                           fusion=FusionWeights(float(d.get("fusion.w_skeleton", 1.0)),
                                                float(d.get("fusion.w_rgb", 1.0))))
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(str(exc)) from None


def _sibling(base: Path, ref: str) -> Path:
    p = Path(ref)
    if not p.is_absolute() and (base.parent / p).exists():
        return base.parent / p
    return resolve_config_path(p)


def write_model_config(cfg: ModelConfig, directory) -> Path:
    """Write model.cfg plus the two backbone configs it references."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "rgb.cfg").write_text(config_to_text(cfg.rgb))
    (directory / "pose.cfg").write_text(config_to_text(cfg.pose))
    lines = ["rgb_config=rgb.cfg", "pose_config=pose.cfg", f"sta.variant={cfg.sta_variant}",
             f"sta.k={cfg.sta_kernel}"]
    if cfg.sta_hidden is not None:
        lines.append(f"sta.h={cfg.sta_hidden}")
    lines += [f"fusion.w_skeleton={cfg.fusion.skeleton!r}", f"fusion.w_rgb={cfg.fusion.rgb!r}"]
    path = directory / "model.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


def tiny_model_config(num_classes: int = 4, variant: str = "nesting", **kw) -> ModelConfig:
    return ModelConfig(tiny_rgb_config(num_classes), tiny_pose_config(num_classes), sta_variant=variant, **kw)
