import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epamnet import functional as F
from epamnet.errors import ConfigurationError, ContractError, DimensionError
from epamnet.functional import ConvSpec
from epamnet.oracles import finite_diff_check, naive_conv3d, naive_linear
from epamnet.tensor import Tensor, backward, precision


# -- conv3d ---------------------------------------------------------------------

def test_rgb_stem_conv_shape():
    spec = ConvSpec(3, 24, (1, 3, 3), (1, 2, 2), (0, 1, 1))
    assert spec.output_shape((3, 16, 224, 224)) == (24, 16, 112, 112)
    x = Tensor(np.zeros((3, 16, 224, 224), dtype=np.float32))
    w = Tensor(np.zeros(spec.weight_shape, dtype=np.float32))
    assert F.conv3d(x, w, None, spec.stride, spec.padding).shape == (24, 16, 112, 112)


def test_identity_kernel_is_exact(rng):
    x = Tensor(rng.normal(size=(1, 3, 4, 5)).astype(np.float32))
    w = Tensor(np.ones((1, 1, 1, 1, 1), dtype=np.float32))
    np.testing.assert_array_equal(F.conv3d(x, w).data, x.data)


def test_depthwise_matches_naive(double, rng):
    x = rng.normal(size=(4, 6, 9, 9))
    w = rng.normal(size=(4, 1, 3, 3, 3))
    got = F.conv3d(Tensor(x), Tensor(w), None, 1, 1, groups=4).data
    np.testing.assert_allclose(got, naive_conv3d(x, w, None, (1, 1, 1), (1, 1, 1), 4), atol=1e-5, rtol=0)


def test_naive_all_ones_gives_27():
    out = naive_conv3d(np.ones((1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 27.0


def test_naive_identity_kernel():
    x = np.arange(24.0).reshape(2, 3, 2, 2)
    w = np.zeros((2, 2, 1, 1, 1))
    w[0, 0] = w[1, 1] = 1.0
    np.testing.assert_array_equal(naive_conv3d(x, w), x)


@st.composite
def conv_cases(draw):
    groups_kind = draw(st.sampled_from(["dense", "depthwise", "grouped"]))
    c_in = draw(st.integers(1, 4)) * (2 if groups_kind == "grouped" else 1)
    if groups_kind == "dense":
        groups, c_out = 1, draw(st.integers(1, 4))
    elif groups_kind == "depthwise":
        groups, c_out = c_in, c_in
    else:
        groups, c_out = 2, 2 * draw(st.integers(1, 2))
    kernel = tuple(draw(st.integers(1, 3)) for _ in range(3))
    stride = tuple(draw(st.integers(1, 2)) for _ in range(3))
    padding = tuple(draw(st.integers(0, k // 2 + 1)) for k in kernel)
    ext = tuple(draw(st.integers(max(1, k - 2 * p), 6)) for k, p in zip(kernel, padding))
    return c_in, c_out, kernel, stride, padding, groups, ext, draw(st.booleans()), draw(st.integers(0, 2**31))


@settings(max_examples=60, deadline=None)
@given(conv_cases())
def test_conv3d_matches_naive_oracle(case):
    c_in, c_out, kernel, stride, padding, groups, ext, use_bias, seed = case
    rng = np.random.default_rng(seed)
    with precision("double"):
        x = rng.normal(size=(c_in, *ext))
        w = rng.normal(size=(c_out, c_in // groups, *kernel))
        b = rng.normal(size=c_out) if use_bias else None
        got = F.conv3d(Tensor(x), Tensor(w), Tensor(b) if use_bias else None, stride, padding, groups)
        ref = naive_conv3d(x, w, b, stride, padding, groups)
        spec = ConvSpec(c_in, c_out, kernel, stride, padding, groups)
        assert got.shape == spec.output_shape(x.shape) == ref.shape
        np.testing.assert_allclose(got.data, ref, atol=1e-5, rtol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 5), st.integers(1, 3), st.integers(0, 3))
def test_output_extent_formula(n, k, s, p):
    if n + 2 * p < k:
        with pytest.raises(DimensionError, match="axis T"):
            ConvSpec(1, 1, (k, 1, 1), (s, 1, 1), (p, 0, 0)).output_extents((n, 1, 1))
    else:
        got = ConvSpec(1, 1, (k, 1, 1), (s, 1, 1), (p, 0, 0)).output_extents((n, 1, 1))
        assert got[0] == (n + 2 * p - k) // s + 1


def test_conv_errors():
    with pytest.raises(ConfigurationError):
        ConvSpec(6, 4, groups=4)
    x = Tensor(np.zeros((3, 2, 4, 4)))
    with pytest.raises(DimensionError, match="axis C"):
        F.conv3d(x, Tensor(np.zeros((2, 4, 1, 1, 1))))
    with pytest.raises(DimensionError, match="axis H"):
        F.conv3d(x, Tensor(np.zeros((2, 3, 1, 5, 1))))
    with pytest.raises(ConfigurationError):
        F.conv3d(x, Tensor(np.zeros((2, 1, 1, 1, 1))), groups=2)


def test_depthwise_does_not_mix_channels(double, rng):
    x = rng.normal(size=(5, 3, 6, 6))
    w = Tensor(rng.normal(size=(5, 1, 3, 3, 3)))
    base = F.conv3d(Tensor(x), w, None, 1, 1, groups=5).data
    x2 = x.copy()
    x2[2] += rng.normal(size=x2[2].shape)
    moved = F.conv3d(Tensor(x2), w, None, 1, 1, groups=5).data
    for c in range(5):
        if c != 2:
            np.testing.assert_array_equal(moved[c], base[c])
    assert not np.array_equal(moved[2], base[2])


def test_batched_conv_equals_per_sample(double, rng):
    x = rng.normal(size=(3, 2, 3, 5, 5))
    w = Tensor(rng.normal(size=(4, 2, 1, 3, 3)))
    batched = F.conv3d(Tensor(x), w, None, (1, 2, 2), (0, 1, 1)).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], F.conv3d(Tensor(x[i]), w, None, (1, 2, 2), (0, 1, 1)).data)


@pytest.mark.parametrize("groups,c_out", [(1, 3), (2, 4), (4, 4)])
def test_conv_gradients(groups, c_out):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 4, 3, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(c_out, 4 // groups, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=c_out), requires_grad=True)
        probe = Tensor(rng.normal(size=(2, c_out, 3, 3, 3)))
        loss = lambda: (F.conv3d(x, w, b, (1, 2, 2), 1, groups) * probe).sum()
        return loss, [("x", x), ("w", w), ("b", b)]

    with precision("double"):
        report = finite_diff_check(build, 3, samples_per_param=6)
    assert report.max_rel_error < 1e-6


# -- linear ----------------------------------------------------------------------

def test_linear_identity(double):
    x = Tensor(np.array([1.0, -2.0, 3.0]))
    y = F.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x.data)


def test_linear_param_count():
    from epamnet.nn import Linear
    assert Linear(2048, 60, np.random.default_rng(0)).num_parameters() == 122_940


def test_linear_matches_oracle(double, rng):
    x, w, b = rng.normal(size=8), rng.normal(size=(3, 8)), rng.normal(size=3)
    got = F.linear(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, naive_linear(x, w, b), atol=1e-12, rtol=0)


def test_linear_dimension_error():
    with pytest.raises(DimensionError):
        F.linear(Tensor(np.ones(4)), Tensor(np.ones((3, 5))), Tensor(np.ones(3)))


# -- activations -------------------------------------------------------------------

def test_activation_examples():
    assert F.activation(Tensor(np.array([0.0])), "sigmoid").item() == 0.5
    np.testing.assert_allclose(F.activation(Tensor(np.array([-3.2, 3.2])), "relu").data, [0.0, 3.2], rtol=1e-7)
    np.testing.assert_allclose(F.activation(Tensor(np.zeros(4)), "softmax").data, [0.25] * 4)
    with pytest.raises(ConfigurationError):
        F.activation(Tensor(np.zeros(1)), "gelu")


def test_sigmoid_is_stable_for_large_inputs():
    out = F.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_a_distribution(values):
    p = F.softmax(Tensor(np.array(values))).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-6


@pytest.mark.parametrize("kind", ["sigmoid", "swish", "softmax", "relu"])
def test_activation_gradients(kind):
    def build(seed):
        rng = np.random.default_rng(seed)
        # keep relu inputs away from its kink
        x0 = rng.normal(size=(3, 5))
        x0 = np.where(np.abs(x0) < 0.05, 0.5, x0)
        x = Tensor(x0, requires_grad=True)
        probe = Tensor(rng.normal(size=(3, 5)))
        return (lambda: (F.activation(x, kind) * probe).sum()), [("x", x)]

    with precision("double"):
        assert finite_diff_check(build, 0, samples_per_param=15).max_rel_error < 1e-6


def test_cross_entropy_values_and_errors(double):
    logits = Tensor(np.zeros((2, 60)))
    assert abs(F.cross_entropy(logits, [0, 59]).item() - np.log(60)) < 1e-12
    with pytest.raises(ContractError):
        F.cross_entropy(logits, [0, 60])

    def build(seed):
        rng = np.random.default_rng(seed)
        z = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        return (lambda: F.cross_entropy(z, [0, 1, 4, 2])), [("z", z)]

    assert finite_diff_check(build, 1, samples_per_param=20).max_rel_error < 1e-7


# -- pooling --------------------------------------------------------------------------

def test_pool_examples():
    c = Tensor(np.full((2, 3, 4, 4), 1.5))
    np.testing.assert_allclose(F.pool(c, "avg", "spatiotemporal").data, np.full((2, 1, 1, 1), 1.5))
    f = Tensor(np.zeros((432, 16, 7, 7), dtype=np.float32))
    assert F.pool(f, "avg", "spatiotemporal").shape == (432, 1, 1, 1)
    onehot = np.zeros((1, 1, 5, 5))
    onehot[0, 0, 3, 1] = 1.0
    assert F.pool(Tensor(onehot), "max", "spatial").item() == 1.0


def test_pool_window_errors():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(DimensionError, match="larger"):
        F.pool(x, "avg", "spatial", window=5)
    with pytest.raises(DimensionError, match="divide"):
        F.pool(x, "avg", "spatial", window=3)
    assert F.pool(x, "max", "spatial", window=2).shape == (1, 2, 2, 2)


def test_max_pool_tie_goes_to_lowest_index(double):
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    (g,) = backward(F.pool(x, "max", "spatial").sum(), [x])
    np.testing.assert_array_equal(g.reshape(-1), [1, 0, 0, 0])


@pytest.mark.parametrize("kind", ["avg", "max"])
def test_pool_gradients(kind):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.permutation(96).reshape(2, 3, 4, 4).astype(float) / 10, requires_grad=True)
        probe = Tensor(rng.normal(size=(2, 3, 2, 2)))
        return (lambda: (F.pool(x, kind, "spatial", window=2) * probe).sum()), [("x", x)]

    with precision("double"):
        assert finite_diff_check(build, 0, samples_per_param=20).max_rel_error < 1e-7


# -- batchnorm ---------------------------------------------------------------------------

def _bn_params(c, scale=1.0, shift=0.0):
    return (Tensor(np.full(c, scale), requires_grad=True), Tensor(np.full(c, shift), requires_grad=True),
            np.zeros(c), np.ones(c))


def test_batchnorm_eval_identity(double, rng):
    x = rng.normal(size=(2, 3, 2, 2, 2))
    s, b, rm, rv = _bn_params(3)
    out = F.batchnorm(Tensor(x), s, b, rm, rv, training=False).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_train_statistics(double, rng):
    x = rng.normal(3.0, 2.5, size=(4, 3, 2, 5, 5))
    s, b, rm, rv = _bn_params(3)
    out = F.batchnorm(Tensor(x), s, b, rm, rv, training=True).data
    axes = (0, 2, 3, 4)
    assert np.all(np.abs(out.mean(axis=axes)) < 1e-6)
    assert np.all(np.abs(out.var(axis=axes) - 1) < 1e-4)
    m = x.size // 3
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=axes))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=axes) * m / (m - 1))
    s2, b2, rm2, rv2 = _bn_params(3, scale=2.0, shift=3.0)
    out2 = F.batchnorm(Tensor(x), s2, b2, rm2, rv2, training=True).data
    np.testing.assert_allclose(out2.mean(axis=axes), 3.0, atol=1e-6)
    np.testing.assert_allclose(out2.std(axis=axes), 2.0, atol=1e-4)


def test_batchnorm_zero_variance_channel_is_finite(double):
    s, b, rm, rv = _bn_params(2)
    out = F.batchnorm(Tensor(np.ones((2, 2, 1, 2, 2))), s, b, rm, rv, training=True).data
    assert np.all(np.isfinite(out)) and np.all(out == 0)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(training):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 2, 2, 3, 3)), requires_grad=True)
        s = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        probe = Tensor(rng.normal(size=(3, 2, 2, 3, 3)))
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, 2)

        def loss():
            return (F.batchnorm(x, s, b, rm.copy(), rv.copy(), training) * probe).sum()
        return loss, [("x", x), ("scale", s), ("shift", b)]

    with precision("double"):
        assert finite_diff_check(build, 0, samples_per_param=8).max_rel_error < 1e-6


def test_tiny_network_gradients():
    """conv3d -> batchnorm -> relu -> pool -> linear -> softmax cross-entropy."""
    def build(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 2, 2, 4, 4)))
        w = Tensor(rng.normal(size=(3, 2, 1, 3, 3)) * 0.5, requires_grad=True)
        s = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
        b = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
        fw = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        fb = Tensor(rng.normal(size=4), requires_grad=True)
        rm, rv = np.zeros(3), np.ones(3)

        def loss():
            h = F.conv3d(x, w, None, 1, (0, 1, 1))
            h = F.relu(F.batchnorm(h, s, b, rm, rv, True))
            h = F.pool(h, "avg", "spatiotemporal")
            return F.cross_entropy(F.linear(h.reshape(2, 3), fw, fb), [1, 3])
        return loss, [("conv", w), ("scale", s), ("shift", b), ("fc.w", fw), ("fc.b", fb)]

    with precision("double"):
        report = finite_diff_check(build, 5, samples_per_param=4)
    assert report.max_rel_error < 1e-4
    assert not report.unchecked
