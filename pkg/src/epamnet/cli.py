"""Command-line entry point: ``epamnet <command> ...``.

Exit status: 0 on success, 1 when a contract/configuration/parse error is
raised, 2 on a usage error (unknown flag, missing argument).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import btf
from .backbones import (MAC_CONVENTION, X3DNetwork, cost_report, load_backbone_config, parse_kv,
                        pose_x3d_config, resolve_config_path, rgb_x3d_config, stage_shapes)
from .checkpoint import load_checkpoint, save_checkpoint
from .diagnostics import FAMILIES, gradcheck_model
from .errors import EpamError, ParseError
from .evaluation import evaluate
from .model import (PHASES, ClipBatchData, EPAMNet, TrainConfig, load_model_config, predict,
                    tiny_model_config, train_phase, write_model_config)
from .pose import ClipSampling, parse_skeleton, prepare_clip, serialize_skeleton
from .synthetic import (SyntheticSpec, iter_synthetic, prepare_dataset, read_synthetic_dir,
                        sampling_from_dict, tiny_sampling, write_synthetic_dir, sampling_to_dict)
from .tensor import Tensor

log = logging.getLogger("epamnet")

# published totals the default configurations are compared against
REFERENCE = {"pose": (543_760, 4.03e9), "rgb": (3.22e6, 4.97e9), "model": (3.76e6, 9.0e9)}
PARAM_TOL, MAC_TOL = 0.05, 0.20


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _is_model_config(path) -> bool:
    return "rgb_config" in parse_kv(resolve_config_path(path).read_text())


# -- heatmap ------------------------------------------------------------------------

def cmd_heatmap(args) -> int:
    seq = parse_skeleton(Path(args.skeleton).read_text())
    sampling = ClipSampling(pose_frames=args.frames, rgb_frames=1, pose_size=(args.size, args.size),
                            sigma=args.sigma, pad_ratio=args.pad_ratio, min_extent=args.min_extent)
    heat, _, box = prepare_clip(seq, None, sampling)
    btf.save(args.out, heat.astype(np.float32))
    _emit({"out": args.out, "shape": list(heat.shape), "crop_box": list(box.as_tuple()),
           "max": float(heat.max())}, None)
    return 0


# -- shapes / cost --------------------------------------------------------------------

def _format_shape(shape) -> str:
    return "x".join(str(s) for s in shape)


def cmd_shapes(args) -> int:
    cfg = load_backbone_config(args.config)
    if args.classes:
        cfg = cfg.replace(num_classes=args.classes)
    table = stage_shapes(cfg)
    if args.json:
        _emit({"kind": cfg.kind, "rows": table}, args.out)
        return 0
    print(f"{'stage':<12} {'filters':<46} output size")
    for row in table:
        print(f"{row['stage']:<12} {row['filters']:<46} {_format_shape(row['shape'])}")
    if args.out:
        Path(args.out).write_text(json.dumps({"kind": cfg.kind, "rows": table}, indent=2) + "\n")
    return 0


def _reference_key(path) -> str | None:
    """Which published total applies: only the unmodified default architectures qualify."""
    if _is_model_config(path):
        cfg = load_model_config(path)
        same = (cfg.rgb.replace(num_classes=120) == rgb_x3d_config(120)
                and cfg.pose.replace(num_classes=60) == pose_x3d_config(60))
        return "model" if same else None
    cfg = load_backbone_config(path)
    if cfg.kind == "rgb" and cfg.replace(num_classes=120) == rgb_x3d_config(120):
        return "rgb"
    if cfg.kind == "pose" and cfg.replace(num_classes=60) == pose_x3d_config(60):
        return "pose"
    return None


def annotate(total_params: int, total_macs: int, key: str | None) -> dict:
    if key is None:
        return {}
    ref_p, ref_m = REFERENCE[key]
    dp, dm = total_params / ref_p - 1, total_macs / ref_m - 1
    return {"reference_params": ref_p, "reference_macs": ref_m,
            "params_deviation": dp, "macs_deviation": dm,
            "params_tolerance": PARAM_TOL, "macs_tolerance": MAC_TOL,
            "params_within_tolerance": abs(dp) <= PARAM_TOL, "macs_within_tolerance": abs(dm) <= MAC_TOL}


def build_for_cost(path, classes: int | None):
    if _is_model_config(path):
        cfg = load_model_config(path)
        if classes:
            cfg.rgb, cfg.pose = cfg.rgb.replace(num_classes=classes), cfg.pose.replace(num_classes=classes)
        return EPAMNet(cfg, 0)
    cfg = load_backbone_config(path)
    if classes:
        cfg = cfg.replace(num_classes=classes)
    return X3DNetwork(cfg, 0)


def cmd_cost(args) -> int:
    net = build_for_cost(args.config, args.classes)
    report = cost_report(net)
    note = annotate(report.total_params, report.total_macs, _reference_key(args.config))
    if args.json:
        _emit({**report.as_dict(), **note}, args.out)
        return 0
    for r in report.rows if args.rows else []:
        print(f"{r.name:<52} {r.kind:<10} {_format_shape(r.out_shape):<16} {r.params:>10,} {r.macs:>16,}")
    line = f"total params {report.total_params:,} ({report.total_params / 1e6:.4f}M)   " \
           f"MACs {report.total_macs:,} ({report.total_macs / 1e9:.3f}G)"
    print(line)
    if note:
        print(f"reference params {note['reference_params']:,.0f} ({note['params_deviation']:+.2%}, "
              f"tolerance ±{PARAM_TOL:.0%}: {'ok' if note['params_within_tolerance'] else 'OUT'})   "
              f"reference MACs {note['reference_macs'] / 1e9:.2f}G ({note['macs_deviation']:+.2%}, "
              f"tolerance ±{MAC_TOL:.0%}: {'ok' if note['macs_within_tolerance'] else 'OUT'})")
    print(f"convention: {MAC_CONVENTION}")
    if args.out:
        Path(args.out).write_text(json.dumps({**report.as_dict(), **note}, indent=2) + "\n")
    return 0


# -- forward ----------------------------------------------------------------------------

def load_model_dir_or_config(config: str, weights: str | None, seed: int) -> EPAMNet:
    path = Path(config)
    if path.is_dir():
        weights = weights or str(path / "weights")
        path = path / "model.cfg"
    model = EPAMNet(load_model_config(path), seed)
    if weights:
        load_checkpoint(model, weights)
        model.stream_ready = {"rgb": True, "pose": True}
    return model.eval()


def cmd_forward(args) -> int:
    model = load_model_dir_or_config(args.config, args.weights, args.seed)
    pose, rgb = btf.load(args.pose), btf.load(args.rgb)
    out = model(Tensor(pose), Tensor(rgb))
    payload = {
        "logits_skeleton": out.logits_skeleton.data.tolist(),
        "logits_rgb": out.logits_rgb.data.tolist(),
        "fused_probs": out.fused_probs.tolist(),
        "prediction": int(predict(out.fused_probs)),
        "attention_temporal": out.attention.temporal.data.tolist(),
        "attention_spatial_shape": list(out.attention.spatial.shape),
    }
    if args.attention_out:
        btf.save(args.attention_out, out.attention.joint.data)
    _emit(payload, args.out)
    return 0


# -- gradcheck --------------------------------------------------------------------------

GRADCHECK_THRESHOLD = 1e-4


def cmd_gradcheck(args) -> int:
    result = gradcheck_model(args.seed, args.h, args.samples, args.variant)
    payload = result.as_dict()
    missing = [f for f in FAMILIES if f not in result.per_family
               and not (f == "attention_fc" and args.variant == "alternative")]
    payload["families_missing"] = missing
    payload["passed"] = result.max_rel_error < GRADCHECK_THRESHOLD and not missing
    if args.json:
        _emit(payload, args.out)
    else:
        for fam, err in sorted(result.per_family.items()):
            print(f"{fam:<16} {err:.3e}")
        print(f"checked {payload['checked']} entries, skipped {payload['skipped_kinks']} on ReLU/max kinks")
        print(f"max relative error {result.max_rel_error:.3e} ({payload['worst_parameter']})")
        if args.out:
            Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    return 0 if payload["passed"] else 1


# -- synthetic data, training, evaluation -----------------------------------------------

def _spec_from_args(args) -> SyntheticSpec:
    return SyntheticSpec(num_classes=args.classes, clips_per_class=args.clips_per_class,
                         appearance=args.appearance, seed=args.seed, noise=args.noise)


def cmd_gen_synth(args) -> int:
    spec = _spec_from_args(args)
    out = Path(args.out)
    write_synthetic_dir(spec, out, tiny_sampling())
    written = 0
    if args.materialize:
        clips_dir = out / "clips"
        clips_dir.mkdir(parents=True, exist_ok=True)
        index = []
        for i, clip in enumerate(iter_synthetic(spec)):
            stem = f"{i:05d}"
            (clips_dir / f"{stem}.json").write_text(serialize_skeleton(clip.skeleton))
            btf.save(clips_dir / f"{stem}.btf", clip.rgb)
            index.append({"skeleton": f"clips/{stem}.json", "rgb": f"clips/{stem}.btf", "label": clip.label,
                          "split": "test" if spec.is_test(i) else "train"})
            written += 1
        doc = {"sampling": sampling_to_dict(tiny_sampling()), "clips": index}
        (out / "index.json").write_text(json.dumps(doc, indent=2) + "\n")
    _emit({"out": str(out), "num_clips": spec.num_clips, "materialized": written}, None)
    return 0


def load_dataset_dir(directory, split: str = "test") -> ClipBatchData:
    """Prepare model inputs from ``synthetic.json`` (regenerated) or ``index.json`` (files on disk)."""
    directory = Path(directory)
    if (directory / "index.json").exists():
        try:
            doc = json.loads((directory / "index.json").read_text())
            entries = doc["clips"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ParseError(f"{directory / 'index.json'}: {exc}") from None
        sampling = sampling_from_dict(doc["sampling"]) if "sampling" in doc else tiny_sampling()
        poses, rgbs, labels = [], [], []
        for e in entries:
            if split != "all" and e.get("split", "test") != split:
                continue
            seq = parse_skeleton((directory / e["skeleton"]).read_text())
            heat, clip, _ = prepare_clip(seq, btf.load(directory / e["rgb"]), sampling)
            poses.append(heat.astype(np.float32))
            rgbs.append(clip.astype(np.float32))
            labels.append(int(e["label"]))
        if not labels:
            raise ParseError(f"{directory}: no clips in split {split!r}")
        return ClipBatchData(np.stack(poses), np.stack(rgbs), np.array(labels))
    spec, sampling = read_synthetic_dir(directory)
    return prepare_dataset(iter_synthetic(spec, split), sampling)


def run_train_synth(spec: SyntheticSpec, out, epochs: int, joint_epochs: int, seed: int,
                    variant: str = "nesting") -> dict:
    """Pretrain both streams, fine-tune jointly and write the model directory."""
    out = Path(out)
    sampling = tiny_sampling()
    train = prepare_dataset(iter_synthetic(spec, "train"), sampling)
    cfg = tiny_model_config(spec.num_classes, variant)
    model = EPAMNet(cfg, seed)
    history = []
    for phase in PHASES:
        n = joint_epochs if phase == "joint_finetune" else epochs
        tc = TrainConfig.for_phase(phase, epochs=n, seed=seed)
        for record in train_phase(model, train, tc):
            history.append({"phase": phase, **record})
    write_model_config(cfg, out)
    checksum = save_checkpoint(model, out / "weights")
    (out / "history.json").write_text(json.dumps(history, indent=2) + "\n")
    write_synthetic_dir(spec, out / "data", sampling)
    return {"out": str(out), "checksum_fnv1a64": checksum, "epochs": len(history),
            "final_train_top1": history[-1]["top1"], "model": model}


def cmd_train_synth(args) -> int:
    spec = _spec_from_args(args)
    joint = args.joint_epochs if args.joint_epochs is not None else max(1, args.epochs // 4)
    start = time.perf_counter()
    summary = run_train_synth(spec, args.out, args.epochs, joint, args.seed, args.variant)
    model = summary.pop("model")
    summary["seconds"] = round(time.perf_counter() - start, 1)
    if args.eval:
        test = prepare_dataset(iter_synthetic(spec, "test"), tiny_sampling())
        summary["eval"] = evaluate(model, test).as_dict()
    _emit(summary, None)
    return 0


def cmd_eval(args) -> int:
    model = load_model_dir_or_config(args.model, None, 0)
    data = load_dataset_dir(args.data, args.split)
    report = evaluate(model, data, args.batch_size)
    _emit(report.as_dict(), args.out)
    return 0


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epamnet", description="Two-stream pose/RGB action recognition toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("heatmap", help="render a skeleton JSON file into a heatmap volume (.btf)")
    s.add_argument("--skeleton", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sigma", type=float, default=0.6)
    s.add_argument("--frames", type=int, default=48)
    s.add_argument("--size", type=int, default=56)
    s.add_argument("--pad-ratio", type=float, default=0.10)
    s.add_argument("--min-extent", type=float, default=0.0,
                   help="grow the crop box to at least this many image pixels per side")
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("shapes", help="per-stage output sizes of a backbone config")
    s.add_argument("--config", required=True)
    s.add_argument("--classes", type=int)
    s.add_argument("--json", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_shapes)

    s = sub.add_parser("cost", help="analytic parameter and multiply-accumulate count")
    s.add_argument("--config", required=True, help="backbone or model config")
    s.add_argument("--classes", type=int)
    s.add_argument("--rows", action="store_true", help="print one line per layer")
    s.add_argument("--json", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_cost)

    s = sub.add_parser("forward", help="run the two-stream model on one clip")
    s.add_argument("--config", required=True, help="model config or trained model directory")
    s.add_argument("--pose", required=True, help="heatmap volume .btf [K,T,H,W]")
    s.add_argument("--rgb", required=True, help="RGB clip .btf [3,T,H,W]")
    s.add_argument("--out", required=True)
    s.add_argument("--weights", help="checkpoint directory")
    s.add_argument("--seed", type=int, default=0, help="init seed when no weights are given")
    s.add_argument("--attention-out", help="also write the joint attention map (.btf)")
    s.set_defaults(func=cmd_forward)

    s = sub.add_parser("gradcheck", help="finite-difference check of the tiny model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-4)
    s.add_argument("--samples", type=int, default=2, help="entries probed per parameter tensor")
    s.add_argument("--variant", choices=("nesting", "alternative"), default="nesting")
    s.add_argument("--json", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    def synth_flags(s):
        s.add_argument("--classes", type=int, default=4)
        s.add_argument("--clips-per-class", type=int, default=100)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--noise", type=float, default=0.08)
        s.add_argument("--appearance", action="store_true", help="tint the blob with a class colour")
        s.add_argument("--out", required=True)

    s = sub.add_parser("gen-synth", help="write a synthetic moving-blob dataset description")
    synth_flags(s)
    s.add_argument("--materialize", action="store_true", help="also write every clip to disk")
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("train-synth", help="train the tiny model on synthetic data")
    synth_flags(s)
    s.add_argument("--epochs", type=int, default=20, help="epochs of each pretraining phase")
    s.add_argument("--joint-epochs", type=int, help="joint fine-tuning epochs (default epochs/4)")
    s.add_argument("--variant", choices=("nesting", "alternative"), default="nesting")
    s.add_argument("--eval", action="store_true", help="evaluate on the held-out split afterwards")
    s.set_defaults(func=cmd_train_synth)

    s = sub.add_parser("eval", help="one-clip top-1 of a trained model directory")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="directory with synthetic.json or index.json")
    s.add_argument("--split", choices=("train", "test", "all"), default="test")
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (EpamError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
