"""X3D-style backbones for the RGB and pose streams, plus the cost analyser.

Both networks share one block design: a 1x1x1 expansion to the bottleneck
width, a 3x3x3 channel-wise convolution (spatial stride on the first block
of a stage), optional squeeze-excitation, swish, and a 1x1x1 projection that
is added to the shortcut.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import functional as F
from .errors import ConfigurationError, DimensionError
from .functional import ConvSpec
from .nn import BatchNorm3d, Conv3d, CostRow, Linear, Module
from .tensor import Tensor, reshape

MAC_CONVENTION = ("one multiply-accumulate per weight use; conv = C_out*(C_in/groups)*kt*kh*kw*T'*H'*W', "
                  "fc = D_in*D_out; batchnorm, activations, pooling, SE scaling and residual adds excluded; "
                  "per single clip (batch 1)")


@dataclass
class StageSpec:
    depth: int
    channels: int
    bottleneck: int
    stride: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"stage depth must be >= 1, got {self.depth}")
        if self.channels < 1 or self.bottleneck < 1:
            raise ConfigurationError("stage widths must be positive")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stage stride must be 1 or 2, got {self.stride}")


@dataclass
class BackboneConfig:
    """Declarative description of an X3D-style network.

    ``width_multiplier`` scales every convolution and fc width (stem, stage
    and bottleneck widths, conv5, fc1) but never the class count. With
    ``se_style="alternate"`` squeeze-excitation sits in blocks 0, 2, 4, ... of
    each stage; ``"every"`` puts it in all blocks.
    """

    kind: str
    input_shape: tuple[int, int, int, int]
    stem_channels: int
    stem_stride: int
    stages: list[StageSpec]
    conv5_channels: int
    num_classes: int
    fc1_channels: int | None = None
    width_multiplier: float = 1.0
    se_enabled: bool = True
    se_ratio: float = 1 / 16
    se_style: str = "alternate"
    stem_temporal_kernel: int = 3

    def __post_init__(self):
        if self.se_style not in ("alternate", "every"):
            raise ConfigurationError(f"se_style must be 'alternate' or 'every', got {self.se_style!r}")
        if self.kind not in ("rgb", "pose"):
            raise ConfigurationError(f"kind must be 'rgb' or 'pose', got {self.kind!r}")
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be 4 positive extents, got {self.input_shape}")
        if self.stem_stride not in (1, 2):
            raise ConfigurationError(f"stem stride must be 1 or 2, got {self.stem_stride}")
        if self.kind == "rgb" and self.fc1_channels is None:
            raise ConfigurationError("rgb backbone needs fc1_channels")
        if self.num_classes < 1 or self.width_multiplier <= 0:
            raise ConfigurationError("num_classes and width_multiplier must be positive")
        if not self.stages:
            raise ConfigurationError("at least one stage is required")

    def width(self, c: int) -> int:
        return max(1, int(round(c * self.width_multiplier)))

    @property
    def stage_names(self) -> list[str]:
        return [f"res{i + 2}" for i in range(len(self.stages))]

    def replace(self, **changes) -> "BackboneConfig":
        return dataclasses.replace(self, **changes)


def se_width(channels: int, ratio: float = 1 / 16, divisor: int = 8, min_width: int = 8) -> int:
    target = channels * ratio
    width = max(min_width, int(target + divisor / 2) // divisor * divisor)
    if width < 0.9 * target:
        width += divisor
    return width


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class SqueezeExcite(Module):
    def __init__(self, channels: int, hidden: int, rng):
        self.reduce = Conv3d(ConvSpec(channels, hidden), rng, bias=True)
        self.expand = Conv3d(ConvSpec(hidden, channels), rng, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        s = F.pool(x, "avg", "spatiotemporal")
        s = F.sigmoid(self.expand(F.relu(self.reduce(s))))
        return x * s

    def trace(self, shape, rows, prefix):
        pooled = (shape[0], 1, 1, 1)
        h = self.reduce.trace(pooled, rows, prefix + ".reduce")
        self.expand.trace(h, rows, prefix + ".expand")
        return tuple(shape)


class X3DBlock(Module):
    """Bottleneck residual block with a channel-wise middle convolution."""

    def __init__(self, in_channels: int, out_channels: int, bottleneck: int, stride: int,
                 se_enabled: bool, rng, se_ratio: float = 1 / 16):
        if stride not in (1, 2):
            raise ConfigurationError(f"block stride must be 1 or 2, got {stride}")
        if min(in_channels, out_channels, bottleneck) < 1:
            raise ConfigurationError("block widths must be positive")
        rng = _rng(rng)
        self.stride = stride
        self.conv_a = Conv3d(ConvSpec(in_channels, bottleneck), rng)
        self.bn_a = BatchNorm3d(bottleneck)
        self.conv_b = Conv3d(ConvSpec.same(bottleneck, bottleneck, 3, (1, stride, stride),
                                           groups=bottleneck), rng)
        self.bn_b = BatchNorm3d(bottleneck)
        self.se = SqueezeExcite(bottleneck, se_width(bottleneck, se_ratio), rng) if se_enabled else None
        self.conv_c = Conv3d(ConvSpec(bottleneck, out_channels), rng)
        # zero scale makes the residual branch start as a no-op
        self.bn_c = BatchNorm3d(out_channels, zero_scale=True)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv3d(ConvSpec(in_channels, out_channels, 1, (1, stride, stride)), rng)
            self.bn_s = BatchNorm3d(out_channels)
        else:
            self.shortcut = None
            self.bn_s = None

    def branch(self, x: Tensor) -> Tensor:
        h = F.relu(self.bn_a(self.conv_a(x)))
        h = self.bn_b(self.conv_b(h))
        if self.se is not None:
            h = self.se(h)
        h = F.swish(h)
        return self.bn_c(self.conv_c(h))

    def skip(self, x: Tensor) -> Tensor:
        return x if self.shortcut is None else self.bn_s(self.shortcut(x))

    def forward(self, x: Tensor) -> Tensor:
        return self.branch(x) + self.skip(x)

    def trace(self, shape, rows, prefix):
        h = self.conv_a.trace(shape, rows, prefix + ".conv_a")
        self.bn_a.trace(h, rows, prefix + ".bn_a")
        h = self.conv_b.trace(h, rows, prefix + ".conv_b")
        self.bn_b.trace(h, rows, prefix + ".bn_b")
        if self.se is not None:
            self.se.trace(h, rows, prefix + ".se")
        h = self.conv_c.trace(h, rows, prefix + ".conv_c")
        self.bn_c.trace(h, rows, prefix + ".bn_c")
        if self.shortcut is not None:
            s = self.shortcut.trace(shape, rows, prefix + ".shortcut")
            self.bn_s.trace(s, rows, prefix + ".bn_s")
        return h


def build_block(in_channels: int, spec: StageSpec, stride: int, se_enabled: bool, rng=0) -> X3DBlock:
    return X3DBlock(in_channels, spec.channels, spec.bottleneck, stride, se_enabled, rng)


class Stem(Module):
    """Spatial 1x3x3 convolution followed by a channel-wise temporal convolution."""

    def __init__(self, in_channels: int, channels: int, stride: int, temporal_kernel: int, rng):
        self.conv_s = Conv3d(ConvSpec(in_channels, channels, (1, 3, 3), (1, stride, stride), (0, 1, 1)), rng)
        self.conv_t = Conv3d(ConvSpec.same(channels, channels, (temporal_kernel, 1, 1), groups=channels), rng)
        self.bn = BatchNorm3d(channels)

    def forward(self, x):
        return F.relu(self.bn(self.conv_t(self.conv_s(x))))

    def trace(self, shape, rows, prefix):
        h = self.conv_s.trace(shape, rows, prefix + ".conv_s")
        h = self.conv_t.trace(h, rows, prefix + ".conv_t")
        return self.bn.trace(h, rows, prefix + ".bn")


class Stage(Module):
    def __init__(self, blocks: list[X3DBlock]):
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x

    def trace(self, shape, rows, prefix):
        for i, b in enumerate(self.blocks):
            shape = b.trace(shape, rows, f"{prefix}.{i}")
        return shape


class X3DBackbone(Module):
    """Stem, residual stages and the conv5 projection; output is the final feature map."""

    def __init__(self, config: BackboneConfig, rng):
        rng = _rng(rng)
        w = config.width
        self.stem = Stem(config.input_shape[0], w(config.stem_channels), config.stem_stride,
                         config.stem_temporal_kernel, rng)
        stages = []
        c = w(config.stem_channels)
        for spec in config.stages:
            blocks = []
            for i in range(spec.depth):
                use_se = config.se_enabled and (config.se_style == "every" or i % 2 == 0)
                blocks.append(X3DBlock(c, w(spec.channels), w(spec.bottleneck),
                                       spec.stride if i == 0 else 1, use_se, rng, config.se_ratio))
                c = w(spec.channels)
            stages.append(Stage(blocks))
        self.stages = stages
        self.conv5 = Conv3d(ConvSpec(c, w(config.conv5_channels)), rng)
        self.bn5 = BatchNorm3d(w(config.conv5_channels))

    def forward(self, x: Tensor, collect: list | None = None) -> Tensor:
        x = self.stem(x)
        if collect is not None:
            collect.append(x.shape)
        for stage in self.stages:
            x = stage(x)
            if collect is not None:
                collect.append(x.shape)
        x = F.relu(self.bn5(self.conv5(x)))
        if collect is not None:
            collect.append(x.shape)
        return x

    def trace(self, shape, rows, prefix="", stage_out: list | None = None):
        shape = self.stem.trace(shape, rows, "conv1")
        if stage_out is not None:
            stage_out.append(shape)
        for i, stage in enumerate(self.stages):
            shape = stage.trace(shape, rows, f"res{i + 2}")
            if stage_out is not None:
                stage_out.append(shape)
        shape = self.conv5.trace(shape, rows, "conv5")
        shape = self.bn5.trace(shape, rows, "conv5.bn")
        if stage_out is not None:
            stage_out.append(shape)
        return shape


class RGBHead(Module):
    """Global average pool, fc1 + relu, fc2 to class logits."""

    def __init__(self, in_channels: int, hidden: int, num_classes: int, rng):
        self.fc1 = Linear(in_channels, hidden, rng)
        self.fc2 = Linear(hidden, num_classes, rng)

    def forward(self, f: Tensor) -> Tensor:
        pooled = F.pool(f, "avg", "spatiotemporal")
        pooled = reshape(pooled, pooled.shape[:-3])
        return self.fc2(F.relu(self.fc1(pooled)))

    def trace(self, shape, rows, prefix="", stage_out: list | None = None):
        pooled = (shape[0], 1, 1, 1)
        if stage_out is not None:
            stage_out.append(pooled)
        h = self.fc1.trace((shape[0],), rows, "fc1")
        if stage_out is not None:
            stage_out.append((h[0], 1, 1, 1))
        out = self.fc2.trace(h, rows, "fc2")
        if stage_out is not None:
            stage_out.append((out[0], 1, 1, 1))
        return out


class PoseHead(Module):
    """Global average pool and a single fc layer."""

    def __init__(self, in_channels: int, num_classes: int, rng):
        self.fc = Linear(in_channels, num_classes, rng)

    def forward(self, f: Tensor) -> Tensor:
        pooled = F.pool(f, "avg", "spatiotemporal")
        return self.fc(reshape(pooled, pooled.shape[:-3]))

    def trace(self, shape, rows, prefix="", stage_out: list | None = None):
        if stage_out is not None:
            stage_out.append((shape[0], 1, 1, 1))
        out = self.fc.trace((shape[0],), rows, "fc")
        if stage_out is not None:
            stage_out.append((out[0],))
        return out


class X3DNetwork(Module):
    """Backbone plus classification head; ``features`` and ``classify`` are exposed separately."""

    def __init__(self, config: BackboneConfig, rng=0):
        rng = _rng(rng)
        self.config = config
        self.backbone = X3DBackbone(config, rng)
        feat = config.width(config.conv5_channels)
        if config.kind == "rgb":
            self.head = RGBHead(feat, config.width(config.fc1_channels), config.num_classes, rng)
        else:
            self.head = PoseHead(feat, config.num_classes, rng)

    def check_input(self, x: Tensor) -> None:
        sample = x.shape[1:] if x.ndim == 5 else x.shape
        if tuple(sample) != self.config.input_shape:
            axes = ("C", "T", "H", "W")
            bad = [a for a, s, e in zip(axes, sample, self.config.input_shape) if s != e] or ["rank"]
            raise DimensionError(f"{self.config.kind} input: axis {bad[0]} mismatch, expected "
                                 f"{self.config.input_shape}, got {tuple(sample)}")

    def features(self, x: Tensor, collect: list | None = None) -> Tensor:
        self.check_input(x)
        return self.backbone(x, collect)

    def classify(self, f: Tensor) -> Tensor:
        return self.head(f)

    def forward(self, x: Tensor) -> Tensor:
        return self.classify(self.features(x))

    def trace(self, shape=None, rows=None, prefix="", stage_out: list | None = None):
        rows = [] if rows is None else rows
        shape = self.config.input_shape if shape is None else tuple(shape)
        feat = self.backbone.trace(shape, rows, prefix, stage_out)
        return self.head.trace(feat, rows, prefix, stage_out)


def build_rgb_x3d(config: BackboneConfig, rng=0) -> X3DNetwork:
    if config.kind != "rgb":
        raise ConfigurationError("build_rgb_x3d needs an rgb config")
    return X3DNetwork(config, rng)


def build_pose_x3d(config: BackboneConfig, rng=0) -> X3DNetwork:
    if config.kind != "pose":
        raise ConfigurationError("build_pose_x3d needs a pose config")
    return X3DNetwork(config, rng)


# -- default configurations -------------------------------------------------------

def rgb_x3d_config(num_classes: int = 60, wide: bool = False, **overrides) -> BackboneConfig:
    cfg = BackboneConfig(
        kind="rgb", input_shape=(3, 16, 224, 224), stem_channels=24, stem_stride=2,
        stages=[StageSpec(3, 24, 54), StageSpec(5, 48, 108), StageSpec(11, 96, 216),
                StageSpec(7, 192, 432)],
        conv5_channels=432, fc1_channels=2048, num_classes=num_classes,
        width_multiplier=2.0 if wide else 1.0)
    return cfg.replace(**overrides) if overrides else cfg


def pose_x3d_config(num_classes: int = 60, keypoints: int = 17, **overrides) -> BackboneConfig:
    cfg = BackboneConfig(
        kind="pose", input_shape=(keypoints, 48, 56, 56), stem_channels=24, stem_stride=1,
        stages=[StageSpec(5, 24, 54), StageSpec(11, 48, 108), StageSpec(7, 96, 216)],
        conv5_channels=216, num_classes=num_classes, se_enabled=False)
    return cfg.replace(**overrides) if overrides else cfg


def tiny_rgb_config(num_classes: int = 4, width: int = 8, frames: int = 4, size: int = 64,
                    **overrides) -> BackboneConfig:
    b = int(round(width * 2.25))
    cfg = BackboneConfig(
        kind="rgb", input_shape=(3, frames, size, size), stem_channels=width, stem_stride=2,
        stages=[StageSpec(1, width, b), StageSpec(1, 2 * width, 2 * b), StageSpec(1, 4 * width, 4 * b),
                StageSpec(1, 8 * width, 8 * b)],
        conv5_channels=8 * b, fc1_channels=16 * width, num_classes=num_classes)
    return cfg.replace(**overrides) if overrides else cfg


def tiny_pose_config(num_classes: int = 4, keypoints: int = 1, width: int = 8, frames: int = 8,
                     size: int = 16, **overrides) -> BackboneConfig:
    b = int(round(width * 2.25))
    cfg = BackboneConfig(
        kind="pose", input_shape=(keypoints, frames, size, size), stem_channels=width, stem_stride=1,
        stages=[StageSpec(1, width, b), StageSpec(1, 2 * width, 2 * b), StageSpec(1, 4 * width, 4 * b)],
        conv5_channels=4 * b, num_classes=num_classes, se_enabled=False)
    return cfg.replace(**overrides) if overrides else cfg


# -- shapes and cost --------------------------------------------------------------

@dataclass
class CostReport:
    rows: list[CostRow]
    convention: str = MAC_CONVENTION
    total_params: int = field(init=False)
    total_macs: int = field(init=False)

    def __post_init__(self):
        self.total_params = sum(r.params for r in self.rows)
        self.total_macs = sum(r.macs for r in self.rows)

    def as_dict(self) -> dict:
        return {"convention": self.convention, "total_params": self.total_params,
                "total_macs": self.total_macs,
                "rows": [{"name": r.name, "kind": r.kind, "out_shape": list(r.out_shape),
                          "params": r.params, "macs": r.macs} for r in self.rows]}


def cost_report(network: Module, input_shape: Sequence[int] | None = None) -> CostReport:
    rows: list[CostRow] = []
    network.trace(input_shape, rows)
    return CostReport(rows)


def _filters(config: BackboneConfig) -> list[str]:
    w = config.width
    out = [f"1x3^2, {config.stem_temporal_kernel}x1, {w(config.stem_channels)}"]
    for s in config.stages:
        out.append(f"[1x1^2, {w(s.bottleneck)} / 3x3^2, {w(s.bottleneck)} / 1x1^2, {w(s.channels)}] x{s.depth}")
    out.append(f"1x1^2, {w(config.conv5_channels)}")
    return out


def stage_shapes(config: BackboneConfig, network: X3DNetwork | None = None) -> list[dict]:
    """Analytic per-stage output shapes, in the row layout of the architecture tables."""
    net = X3DNetwork(config, 0) if network is None else network
    outs: list[tuple] = []
    net.trace(None, [], "", outs)
    names = ["conv1", *config.stage_names, "conv5"]
    table = [{"stage": "data layer", "filters": "", "shape": list(config.input_shape)}]
    for name, filt, shp in zip(names, _filters(config), outs):
        table.append({"stage": name, "filters": filt, "shape": list(shp)})
    rest = outs[len(names):]
    if config.kind == "rgb":
        last = outs[len(names) - 1]
        head = [("pool5", f"{last[1]}x{last[2]}x{last[3]}", rest[0]),
                ("fc1", f"1x1^2, {config.width(config.fc1_channels)}", rest[1]),
                ("fc2", "1x1^2, #classes", rest[2])]
    else:
        head = [("GAP", "", rest[0]), ("FC", "#classes", rest[1])]
    for name, filt, shp in head:
        table.append({"stage": name, "filters": filt, "shape": list(shp)})
    return table


# -- config files ---------------------------------------------------------------------

def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def _ints(val: str) -> list[int]:
    return [int(v) for v in val.replace(" ", "").split(",") if v]


def _bool(val: str) -> bool:
    low = val.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {val!r}")


BACKBONE_KEYS = ("kind", "input_channels", "frames", "height", "width", "stem_channels", "stem_stride",
                 "stem_temporal_kernel", "depths", "channels", "bottlenecks", "strides",
                 "conv5_channels", "fc1_channels", "classes", "width_multiplier", "se_enabled", "se_ratio",
                 "se_style")


def config_from_dict(d: dict[str, str]) -> BackboneConfig:
    unknown = set(d) - set(BACKBONE_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown backbone config keys: {sorted(unknown)}")
    try:
        kind = d["kind"]
        base = rgb_x3d_config() if kind == "rgb" else pose_x3d_config()
        depths = _ints(d["depths"]) if "depths" in d else [s.depth for s in base.stages]
        channels = _ints(d["channels"]) if "channels" in d else [s.channels for s in base.stages]
        bottlenecks = _ints(d["bottlenecks"]) if "bottlenecks" in d else [s.bottleneck for s in base.stages]
        strides = _ints(d["strides"]) if "strides" in d else [2] * len(depths)
        if not len(depths) == len(channels) == len(bottlenecks) == len(strides):
            raise ConfigurationError("depths, channels, bottlenecks and strides must have equal length")
        shape = (int(d.get("input_channels", base.input_shape[0])), int(d.get("frames", base.input_shape[1])),
                 int(d.get("height", base.input_shape[2])), int(d.get("width", base.input_shape[3])))
        return BackboneConfig(
            kind=kind, input_shape=shape,
            stem_channels=int(d.get("stem_channels", base.stem_channels)),
            stem_stride=int(d.get("stem_stride", base.stem_stride)),
            stem_temporal_kernel=int(d.get("stem_temporal_kernel", base.stem_temporal_kernel)),
            stages=[StageSpec(*v) for v in zip(depths, channels, bottlenecks, strides)],
            conv5_channels=int(d.get("conv5_channels", base.conv5_channels)),
            fc1_channels=int(d["fc1_channels"]) if "fc1_channels" in d else base.fc1_channels,
            num_classes=int(d.get("classes", base.num_classes)),
            width_multiplier=float(d.get("width_multiplier", 1.0)),
            se_enabled=_bool(d["se_enabled"]) if "se_enabled" in d else base.se_enabled,
            se_ratio=float(d.get("se_ratio", base.se_ratio)),
            se_style=d.get("se_style", base.se_style))
    except KeyError as exc:
        raise ConfigurationError(f"missing config key {exc.args[0]!r}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(str(exc)) from None


def config_to_text(cfg: BackboneConfig) -> str:
    lines = [
        f"kind={cfg.kind}",
        f"input_channels={cfg.input_shape[0]}", f"frames={cfg.input_shape[1]}",
        f"height={cfg.input_shape[2]}", f"width={cfg.input_shape[3]}",
        f"stem_channels={cfg.stem_channels}", f"stem_stride={cfg.stem_stride}",
        f"stem_temporal_kernel={cfg.stem_temporal_kernel}",
        "depths=" + ",".join(str(s.depth) for s in cfg.stages),
        "channels=" + ",".join(str(s.channels) for s in cfg.stages),
        "bottlenecks=" + ",".join(str(s.bottleneck) for s in cfg.stages),
        "strides=" + ",".join(str(s.stride) for s in cfg.stages),
        f"conv5_channels={cfg.conv5_channels}",
    ]
    if cfg.fc1_channels is not None:
        lines.append(f"fc1_channels={cfg.fc1_channels}")
    lines += [f"classes={cfg.num_classes}", f"width_multiplier={cfg.width_multiplier:g}",
              f"se_enabled={'true' if cfg.se_enabled else 'false'}", f"se_ratio={cfg.se_ratio!r}",
              f"se_style={cfg.se_style}"]
    return "\n".join(lines) + "\n"


CONFIG_DIR = Path(__file__).parent / "configs"


def resolve_config_path(path) -> Path:
    """Existing paths win; bare names fall back to the bundled configs directory."""
    p = Path(path)
    if p.exists():
        return p
    bundled = CONFIG_DIR / p.name
    if bundled.exists():
        return bundled
    raise ConfigurationError(f"config file not found: {path}")


def load_backbone_config(path) -> BackboneConfig:
    return config_from_dict(parse_kv(resolve_config_path(path).read_text()))
