"""The nine acceptance criteria, each at its stated tolerance and time budget.

Every test reports one PASS/FAIL line (also collected in the terminal summary)
and then asserts the verdict.
"""

import json
import time

import numpy as np

from epamnet import EPAMNet, functional as F
from epamnet.cli import main, run_train_synth
from epamnet.diagnostics import FAMILIES, gradcheck_model
from epamnet.evaluation import evaluate
from epamnet.model import cosine_lr, sgd_momentum_step, tiny_model_config
from epamnet.oracles import naive_conv3d
from epamnet.pose import SkeletonSequence, render_heatmap_volume
from epamnet.synthetic import SyntheticSpec, iter_synthetic, prepare_dataset, tiny_sampling
from epamnet.tensor import Tensor, precision

RGB_SIZES = {"data layer": [3, 16, 224, 224], "conv1": [24, 16, 112, 112], "res2": [24, 16, 56, 56],
             "res3": [48, 16, 28, 28], "res4": [96, 16, 14, 14], "res5": [192, 16, 7, 7],
             "conv5": [432, 16, 7, 7], "pool5": [432, 1, 1, 1], "fc1": [2048, 1, 1, 1], "fc2": [120, 1, 1, 1]}
POSE_SIZES = {"data layer": [17, 48, 56, 56], "conv1": [24, 48, 56, 56], "res2": [24, 48, 28, 28],
              "res3": [48, 48, 14, 14], "res4": [96, 48, 7, 7], "conv5": [216, 48, 7, 7],
              "GAP": [216, 1, 1, 1], "FC": [60]}


def _cli_json(capsys, *argv):
    assert main(list(argv)) == 0
    return json.loads(capsys.readouterr().out)


def test_criterion_1_shape_fidelity(capsys, criterion):
    start = time.perf_counter()
    mismatches = []
    for cfg, table in (("default_rgb.cfg", RGB_SIZES), ("default_pose.cfg", POSE_SIZES)):
        rows = {r["stage"]: r["shape"] for r in _cli_json(capsys, "shapes", "--config", cfg, "--json")["rows"]}
        mismatches += [(cfg, k, rows.get(k), v) for k, v in table.items() if rows.get(k) != v]
    seconds = time.perf_counter() - start
    passed = not mismatches and seconds < 5
    criterion(1, "shape fidelity", passed, f"{len(RGB_SIZES) + len(POSE_SIZES)} cells, mismatches {mismatches}",
              seconds)
    assert passed


def test_criterion_2_cost_fidelity(capsys, criterion):
    start = time.perf_counter()
    targets = {"default_pose.cfg": (543_760, 4.03e9), "default_rgb.cfg": (3.22e6, 4.97e9),
               "default_model.cfg": (3.76e6, 9.0e9)}
    details, ok = [], True
    for cfg, (p_ref, m_ref) in targets.items():
        doc = _cli_json(capsys, "cost", "--config", cfg, "--json")
        dp, dm = doc["total_params"] / p_ref - 1, doc["total_macs"] / m_ref - 1
        ok &= abs(dp) <= 0.05 and abs(dm) <= 0.20 and "multiply-accumulate" in doc["convention"]
        details.append(f"{cfg.split('.')[0]} params {doc['total_params']:,} ({dp:+.2%}) MACs "
                       f"{doc['total_macs'] / 1e9:.3f}G ({dm:+.2%})")
    seconds = time.perf_counter() - start
    passed = ok and seconds < 5
    criterion(2, "cost fidelity", passed, "; ".join(details), seconds)
    assert passed


def test_criterion_3_convolution_oracle(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, cases, kinds = 0.0, 240, {"dense": 0, "depthwise": 0}
    with precision("double"):
        for case in range(cases):
            depthwise = case % 2 == 1
            c_in = int(rng.integers(1, 6))
            c_out, groups = (c_in, c_in) if depthwise else (int(rng.integers(1, 6)), 1)
            kinds["depthwise" if depthwise else "dense"] += 1
            kernel = tuple(int(v) for v in rng.integers(1, 4, 3))
            stride = tuple(int(v) for v in rng.integers(1, 3, 3))
            padding = tuple(int(rng.integers(0, k // 2 + 2)) for k in kernel)
            ext = tuple(int(rng.integers(max(1, k - 2 * p), 8)) for k, p in zip(kernel, padding))
            x = rng.normal(size=(c_in, *ext))
            w = rng.normal(size=(c_out, c_in // groups, *kernel))
            b = rng.normal(size=c_out)
            got = F.conv3d(Tensor(x), Tensor(w), Tensor(b), stride, padding, groups).data
            ref = naive_conv3d(x, w, b, stride, padding, groups)
            assert got.shape == ref.shape
            worst = max(worst, float(np.abs(got - ref).max()))
    seconds = time.perf_counter() - start
    passed = worst <= 1e-5 and seconds < 120
    criterion(3, "convolution oracle", passed,
              f"{cases} cases ({kinds['dense']} groups=1, {kinds['depthwise']} groups=C), max abs diff {worst:.2e}",
              seconds)
    assert passed


def test_criterion_4_gradient_correctness(criterion):
    start = time.perf_counter()
    result = gradcheck_model(seed=0, h=1e-4)
    missing = [f for f in FAMILIES if f not in result.per_family]
    seconds = time.perf_counter() - start
    passed = result.max_rel_error < 1e-4 and not missing and not result.report.unchecked and seconds < 300
    criterion(4, "gradient correctness", passed,
              f"max rel error {result.max_rel_error:.2e} over {result.report.checked} entries, "
              f"{len(result.per_family)} families, missing {missing}, "
              f"{result.report.skipped_kinks} kink-straddling probes replaced", seconds)
    assert passed


def test_criterion_5_attention_algebra(criterion):
    start = time.perf_counter()
    checks = {}
    rng = np.random.default_rng(5)
    with precision("double"):
        shapes = {}
        for variant in ("nesting", "alternative"):
            model = EPAMNet(tiny_model_config(4, variant), 1)
            for _, p in model.attention.named_parameters():
                p.data[...] = rng.normal(size=p.shape)
            pose = rng.uniform(size=(3, *model.config.pose.input_shape))
            rgb = rng.uniform(size=(3, *model.config.rgb.input_shape))
            out = model(pose, rgb)
            s, t, joint = out.attention.spatial.data, out.attention.temporal.data, out.attention.joint.data
            checks[f"{variant} maps in (0,1)"] = bool(np.all((s > 0) & (s < 1)) and np.all((t > 0) & (t < 1)))
            product = s * t[:, None, :, None, None]
            ulp = np.spacing(np.abs(product))
            checks[f"{variant} A_ST = A_S*A_T (1 ulp)"] = bool(np.all(np.abs(joint - product) <= ulp))
            ones = (np.ones_like(s), np.ones_like(t))
            injected = model(pose, rgb, attention_override=ones).logits_rgb.data
            plain = model.rgb(Tensor(rgb)).data
            checks[f"{variant} all-ones injection bit-identical"] = bool(np.array_equal(injected, plain))
            shapes[variant] = [out.logits_rgb.shape, out.logits_skeleton.shape, s.shape, t.shape, joint.shape,
                               model.internal_shapes(pose, rgb)]
        checks["variant swap keeps shapes"] = shapes["nesting"] == shapes["alternative"]
    seconds = time.perf_counter() - start
    failed = [k for k, v in checks.items() if not v]
    passed = not failed and seconds < 60
    criterion(5, "attention algebra", passed, f"{len(checks)} checks, failed {failed}", seconds)
    assert passed


def _brute_heatmap(seq, sigma, h, w):
    out = np.zeros((seq.num_keypoints, len(seq.frames), h, w))
    for t, frame in enumerate(seq.frames):
        for person in frame:
            for k, (x, y, c) in enumerate(person):
                if c <= 0:
                    continue
                for r in range(h):
                    for col in range(w):
                        v = c * np.exp(-((col + 0.5 - x) ** 2 + (r + 0.5 - y) ** 2) / (2 * sigma ** 2))
                        out[k, t, r, col] = max(out[k, t, r, col], v)
    return out


def test_criterion_6_heatmap_correctness(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(5):
        frames = [[rng.uniform([-3, -3, 0], [24, 20, 1], size=(17, 3)) for _ in range(2)] for _ in range(2)]
        seq = SkeletonSequence("c", (18, 21), frames, "coco17")
        sigma = float(rng.uniform(0.4, 2.5))
        fast = render_heatmap_volume(seq, sigma).data
        worst = max(worst, float(np.abs(fast - _brute_heatmap(seq, sigma, 18, 21)).max()))
    peak_ok = True
    for c in (1.0, 0.5, 0.13):
        vol = render_heatmap_volume(SkeletonSequence("p", (9, 9), [[np.array([[4.5, 3.5, c]])]], "single"), 0.6).data
        peak_ok &= vol.max() == c and vol[0, 0, 3, 4] == c
    single = render_heatmap_volume(SkeletonSequence("o", (9, 9), [[np.array([[4.5, 4.5, 1.0]])]], "single"), 0.6)
    offset = float(single.data[0, 0, 4, 5])
    offset_err = abs(offset - np.exp(-1 / 0.72))
    seconds = time.perf_counter() - start
    passed = worst <= 1e-6 and peak_ok and offset_err <= 1e-6 and seconds < 60
    criterion(6, "heatmap correctness", passed,
              f"brute-force max diff {worst:.1e}, peak equals confidence {peak_ok}, "
              f"one-pixel offset {offset:.6f} (err {offset_err:.1e})", seconds)
    assert passed


def test_criterion_7_end_to_end_learning(tmp_path, criterion):
    start = time.perf_counter()
    results = {}
    for name, appearance in (("motion", False), ("appearance", True)):
        spec = SyntheticSpec(num_classes=4, clips_per_class=100, appearance=appearance, seed=0)
        summary = run_train_synth(spec, tmp_path / name, epochs=20, joint_epochs=5, seed=0)
        test = prepare_dataset(iter_synthetic(spec, "test"), tiny_sampling())
        report = evaluate(summary["model"], test)
        results[name] = (summary["epochs"], report)
    seconds = time.perf_counter() - start
    motion, appear = results["motion"][1], results["appearance"][1]
    epochs_ok = all(e <= 50 for e, _ in results.values())
    accuracy_ok = motion.top1_fused >= 0.90 and appear.top1_fused >= 0.90
    best_stream = max(appear.top1_rgb, appear.top1_skeleton)
    complementary = appear.top1_fused >= best_stream - 0.02
    passed = epochs_ok and accuracy_ok and complementary and seconds < 900
    detail = "; ".join(f"{k}: fused {r.top1_fused:.3f} rgb {r.top1_rgb:.3f} skeleton {r.top1_skeleton:.3f} "
                       f"on {r.total} held-out clips after {e} epochs" for k, (e, r) in results.items())
    criterion(7, "end-to-end learning", passed, detail, seconds)
    assert passed


def test_criterion_8_schedule_and_optimizer(criterion):
    start = time.perf_counter()
    base = 0.0125
    lr_ok = cosine_lr(0, 240, base) == base and abs(cosine_lr(120, 240, base) - base / 2) <= 1e-12
    theta0 = np.array([0.5, -1.25, 3.0])
    g = np.array([0.2, 0.4, -1.0])
    p, v = theta0.copy(), np.zeros(3)
    for _ in range(2):
        sgd_momentum_step([p], [g], [v], lr=0.1, momentum=0.9)
    sgd_err = float(np.abs(p - (theta0 - 0.29 * g)).max())
    seconds = time.perf_counter() - start
    passed = lr_ok and sgd_err <= 1e-12 and seconds < 1
    criterion(8, "schedule/optimizer", passed, f"cosine checks {lr_ok}, two-step SGD error {sgd_err:.1e}", seconds)
    assert passed


def test_criterion_9_determinism(tmp_path, capsys, criterion):
    start = time.perf_counter()
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        summary = _cli_json(capsys, "train-synth", "--classes", "4", "--clips-per-class", "5", "--epochs", "2",
                            "--joint-epochs", "1", "--seed", "13", "--out", str(out))
        weights = sorted((out / "weights").glob("*.btf"))
        runs.append(((out / "history.json").read_bytes(), summary["checksum_fnv1a64"],
                     json.loads((out / "weights" / "manifest.json").read_text())["checksum_fnv1a64"],
                     [w.read_bytes() for w in weights]))
    (ha, ca, ma, wa), (hb, cb, mb, wb) = runs
    seconds = time.perf_counter() - start
    passed = ha == hb and ca == cb == ma == mb and wa == wb
    criterion(9, "determinism", passed, f"history identical {ha == hb}, checksums {ca} / {cb}, "
              f"{len(wa)} weight blobs identical {wa == wb}", seconds)
    assert passed
