import numpy as np
import pytest

from epamnet.backbones import (MAC_CONVENTION, BackboneConfig, StageSpec, X3DBlock, build_block,
                               build_pose_x3d, build_rgb_x3d, config_from_dict, config_to_text, cost_report,
                               load_backbone_config, parse_kv, pose_x3d_config, rgb_x3d_config, stage_shapes,
                               tiny_pose_config, tiny_rgb_config)
from epamnet.errors import ConfigurationError, DimensionError
from epamnet.tensor import Tensor

RGB_SIZES = {"data layer": [3, 16, 224, 224], "conv1": [24, 16, 112, 112], "res2": [24, 16, 56, 56],
             "res3": [48, 16, 28, 28], "res4": [96, 16, 14, 14], "res5": [192, 16, 7, 7],
             "conv5": [432, 16, 7, 7], "pool5": [432, 1, 1, 1], "fc1": [2048, 1, 1, 1]}
POSE_SIZES = {"data layer": [17, 48, 56, 56], "conv1": [24, 48, 56, 56], "res2": [24, 48, 28, 28],
              "res3": [48, 48, 14, 14], "res4": [96, 48, 7, 7], "conv5": [216, 48, 7, 7],
              "GAP": [216, 1, 1, 1]}


def _shapes(cfg):
    return {row["stage"]: row["shape"] for row in stage_shapes(cfg)}


def test_rgb_stage_shapes_match_reference_sizes():
    got = _shapes(rgb_x3d_config(120))
    for stage, shape in RGB_SIZES.items():
        assert got[stage] == shape, stage
    assert got["fc2"] == [120, 1, 1, 1]


def test_pose_stage_shapes_match_reference_sizes():
    got = _shapes(pose_x3d_config(60))
    for stage, shape in POSE_SIZES.items():
        assert got[stage] == shape, stage
    # spatial alignment precondition of the attention block
    assert got["conv5"][2:] == _shapes(rgb_x3d_config())["conv5"][2:]


def test_first_rgb_block_downsamples():
    block = build_block(24, StageSpec(3, 24, 54), 2, True, rng=0)
    assert block.trace((24, 16, 112, 112), [], "res2.0") == (24, 16, 56, 56)


def test_conv1_macs():
    rows = cost_report(build_rgb_x3d(rgb_x3d_config(120))).rows
    assert next(r for r in rows if r.name == "conv1.conv_s").macs == 24 * 3 * 9 * 16 * 112 * 112 == 130_056_192


@pytest.mark.parametrize("cfg,params,macs", [
    (pose_x3d_config(60), 543_760, 4.03e9),
    (rgb_x3d_config(120), 3_220_000, 4.97e9),
])
def test_costs_within_bands(cfg, params, macs):
    report = cost_report(X3DNetworkFor(cfg))
    assert abs(report.total_params / params - 1) <= 0.05
    assert abs(report.total_macs / macs - 1) <= 0.20
    assert report.total_params == sum(r.params for r in report.rows)
    assert "multiply-accumulate" in report.convention and report.convention == MAC_CONVENTION


def X3DNetworkFor(cfg):
    return build_rgb_x3d(cfg) if cfg.kind == "rgb" else build_pose_x3d(cfg)


@pytest.mark.parametrize("cfg", [pose_x3d_config(60), rgb_x3d_config(120), tiny_rgb_config(), tiny_pose_config()])
def test_cost_params_equal_enumerated_params(cfg):
    net = X3DNetworkFor(cfg)
    assert cost_report(net).total_params == net.num_parameters()


def test_params_independent_of_input_extent():
    net = build_pose_x3d(pose_x3d_config(60))
    a = cost_report(net, (17, 48, 56, 56))
    b = cost_report(net, (17, 24, 112, 112))
    assert a.total_params == b.total_params and a.total_macs != b.total_macs


def test_wide_variant_doubles_widths_not_classes():
    base, wide = rgb_x3d_config(120), rgb_x3d_config(120, wide=True)
    bs, ws = _shapes(base), _shapes(wide)
    for stage in ("conv1", "res2", "res5", "conv5", "fc1"):
        assert ws[stage][0] == 2 * bs[stage][0]
    assert ws["fc2"] == bs["fc2"]
    ratio = build_rgb_x3d(wide).num_parameters() / build_rgb_x3d(base).num_parameters()
    assert 3.5 <= ratio <= 4.5


def test_identity_block_preserves_shape_and_zero_branch_is_shortcut():
    rng = np.random.default_rng(0)
    block = X3DBlock(8, 8, 18, 1, True, rng)
    x = Tensor(rng.normal(size=(2, 8, 2, 6, 6)).astype(np.float32))
    assert block(x).shape == x.shape
    # bn_c starts with zero scale and shift, so the branch contributes exactly nothing
    np.testing.assert_array_equal(block(x).data, x.data)


def test_zero_branch_on_strided_block_gives_shortcut():
    rng = np.random.default_rng(1)
    block = X3DBlock(4, 8, 9, 2, False, rng)
    block.eval()
    for name, p in block.named_parameters():
        if not name.startswith(("shortcut", "bn_s")):
            p.data[...] = 0
    x = Tensor(rng.normal(size=(1, 4, 2, 8, 8)).astype(np.float32))
    np.testing.assert_array_equal(block(x).data, block.skip(x).data)
    assert block(x).shape == (1, 8, 2, 4, 4)


def test_block_rejects_bad_stride():
    with pytest.raises(ConfigurationError):
        X3DBlock(4, 4, 9, 3, False, 0)
    with pytest.raises(ConfigurationError):
        StageSpec(1, 4, 9, stride=3)


def test_tiny_forward_and_stage_shapes_agree_with_trace():
    for cfg in (tiny_rgb_config(5, width=4, size=32), tiny_pose_config(5, keypoints=17)):
        net = X3DNetworkFor(cfg)
        x = Tensor(np.random.default_rng(0).uniform(size=(2, *cfg.input_shape)).astype(np.float32))
        collected = []
        net.features(x, collected)
        traced = [tuple(r["shape"]) for r in stage_shapes(cfg, net)[1:2 + len(cfg.stages) + 1]]
        assert [c[1:] for c in collected] == traced
        assert net(x).shape == (2, 5)


def test_forward_is_deterministic():
    cfg = tiny_pose_config()
    x = Tensor(np.random.default_rng(0).uniform(size=(1, *cfg.input_shape)).astype(np.float32))
    a, b = build_pose_x3d(cfg, rng=3)(x).data, build_pose_x3d(cfg, rng=3)(x).data
    np.testing.assert_array_equal(a, b)


def test_input_shape_mismatch():
    net = build_pose_x3d(tiny_pose_config())
    with pytest.raises(DimensionError, match="axis H"):
        net(Tensor(np.zeros((1, 1, 8, 12, 16), dtype=np.float32)))


def test_config_text_round_trip(tmp_path):
    for cfg in (rgb_x3d_config(120), pose_x3d_config(60), tiny_rgb_config(), rgb_x3d_config(7, wide=True)):
        again = config_from_dict(parse_kv(config_to_text(cfg)))
        assert again == cfg
    path = tmp_path / "p.cfg"
    path.write_text(config_to_text(pose_x3d_config(60)))
    assert load_backbone_config(path) == pose_x3d_config(60)


def test_bundled_configs_are_the_defaults():
    assert load_backbone_config("default_rgb.cfg") == rgb_x3d_config(120)
    assert load_backbone_config("default_pose.cfg") == pose_x3d_config(60)


@pytest.mark.parametrize("text", ["kind=rgb\nnonsense", "kind=video\n", "kind=rgb\ndepths=1,x\n"])
def test_bad_config_text(text):
    with pytest.raises(ConfigurationError):
        config_from_dict(parse_kv(text))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        BackboneConfig("rgb", (3, 4, 8, 8), 4, 2, [StageSpec(1, 4, 9)], 8, 3)  # no fc1
    with pytest.raises(ConfigurationError):
        tiny_pose_config(stages=[])
