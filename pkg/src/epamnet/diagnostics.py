"""End-to-end gradient check of the desk-scale two-stream model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbones import tiny_pose_config, tiny_rgb_config
from .model import EPAMNet, ModelConfig, joint_loss
from .oracles import GradCheckReport, finite_diff_check
from .tensor import Tensor, precision

FAMILIES = ("stem", "pointwise", "depthwise", "se", "batchnorm", "attention_conv", "attention_fc", "head")


def layer_family(name: str) -> str:
    """Coarse layer family of a parameter name, used to show every family was sampled."""
    parts = name.split(".")
    if parts[0] == "attention":
        return "attention_fc" if parts[1].startswith("fc") else "attention_conv"
    if ".head." in name:
        return "head"
    if ".se." in name:
        return "se"
    if ".stem." in name:
        return "batchnorm" if ".bn." in name else "stem"
    if parts[-1] in ("scale", "shift"):
        return "batchnorm"
    if ".conv_b." in name:
        return "depthwise"
    return "pointwise"


def randomize_parameters(model: EPAMNet, rng: np.random.Generator) -> None:
    """Move every parameter and batch-norm statistic off its structured init."""
    for name, p in model.named_parameters():
        if p.data.ndim >= 2:
            fan_in = int(np.prod(p.shape[1:]))
            p.data[...] = rng.uniform(-1, 1, p.shape) * np.sqrt(3.0 / fan_in)
        elif name.endswith("scale"):
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        else:
            p.data[...] = rng.uniform(-0.3, 0.3, p.shape)
    for name, buf in model.named_buffers():
        if name.endswith("running_var"):
            buf[...] = rng.uniform(0.5, 1.5, buf.shape)
        else:
            buf[...] = rng.uniform(-0.3, 0.3, buf.shape)


def gradcheck_config(num_classes: int = 4, variant: str = "nesting") -> ModelConfig:
    """The tiny model shrunk spatially (RGB 16^2 with a stride-1 stem, pose 8^2, 2/4 frames).

    Every layer family is kept at the same width; only the number of
    activations per channel drops, which keeps ReLU kinks out of most ``±h``
    probes.
    """
    rgb = tiny_rgb_config(num_classes, frames=2, size=16, stem_stride=1)
    pose = tiny_pose_config(num_classes, frames=4, size=8)
    return ModelConfig(rgb, pose, sta_variant=variant)


@dataclass
class ModelGradCheck:
    report: GradCheckReport
    per_family: dict[str, float]
    seed: int
    h: float

    @property
    def max_rel_error(self) -> float:
        return self.report.max_rel_error

    def as_dict(self) -> dict:
        return {"seed": self.seed, "h": self.h, "max_rel_error": self.report.max_rel_error,
                "worst_parameter": self.report.worst_parameter, "checked": self.report.checked,
                "skipped_kinks": self.report.skipped_kinks, "unchecked": list(self.report.unchecked),
                "per_family": self.per_family}


def gradcheck_model(seed: int = 0, h: float = 1e-4, samples_per_param: int = 2,
                    variant: str = "nesting", batch: int = 2, config: ModelConfig | None = None) -> ModelGradCheck:
    """Central-difference check of the joint loss over every parameter (double precision).

    Parameters are re-drawn at random first so that no gradient is trivially
    zero (zero-initialised scales, saturated gates). Batch-norm runs on its
    (randomised) running statistics: in training mode a following batch-norm
    cancels any per-channel constant, which makes the gradient of every
    residual-branch shift exactly zero and the check measure rounding noise.
    The batch-statistics backward path has its own layer-level check.
    """
    with precision("double"):
        cfg = gradcheck_config(variant=variant) if config is None else config

        def build(s):
            rng = np.random.default_rng(s)
            model = EPAMNet(cfg, rng)
            randomize_parameters(model, rng)
            model.eval()
            pose = Tensor(rng.uniform(0, 1, (batch, *cfg.pose.input_shape)))
            rgb = Tensor(rng.uniform(0, 1, (batch, *cfg.rgb.input_shape)))
            labels = np.arange(batch) % cfg.num_classes
            return (lambda: joint_loss(model(pose, rgb), labels)), list(model.named_parameters())

        report = finite_diff_check(build, seed, h, samples_per_param)
    per_family: dict[str, float] = {}
    for name, err in report.per_parameter.items():
        fam = layer_family(name)
        per_family[fam] = max(per_family.get(fam, 0.0), err)
    return ModelGradCheck(report, per_family, seed, h)
