import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmri import autodiff as ad

from gradcheck import check_leaf, numeric_grad, rel_err, weighted_sum

seeds = st.integers(0, 2**32 - 1)
fifty = settings(max_examples=50, deadline=None)


def away_from(x, kinks, gap=1e-3):
    """Nudge entries off non-differentiable points so finite differences stay valid."""
    for k in kinks:
        near = np.abs(x - k) < gap
        x = np.where(near, k + np.where(x >= k, gap, -gap) * 2, x)
    return x


# -- examples -------------------------------------------------------------


@pytest.mark.parametrize("x,theta,expected", [(1.5, 1.0, 0.5), (-2.0, 0.5, -1.5), (0.3, 0.5, 0.0)])
def test_soft_threshold_examples(x, theta, expected):
    g = ad.Graph()
    out = ad.soft_threshold(g.leaf(x), g.leaf(theta))
    assert float(out.value) == pytest.approx(expected, abs=1e-15)


def test_soft_threshold_rejects_negative_theta():
    g = ad.Graph()
    with pytest.raises(ValueError, match="theta"):
        ad.soft_threshold(g.leaf([1.0, 2.0]), g.leaf(-0.1))


def test_soft_threshold_kink_subgradient_is_zero():
    g = ad.Graph()
    x, t = g.leaf([0.5, -0.5, 0.7]), g.leaf(0.5)
    root = ad.sum_all(ad.soft_threshold(x, t))
    ad.backward(g, root)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])
    assert float(t.grad) == -1.0


def test_conv_identity_kernel():
    g = ad.Graph()
    x = g.leaf(np.arange(9.0).reshape(1, 3, 3))
    out = ad.conv2d(x, g.leaf(np.ones((1, 1, 1, 1))), g.leaf(np.zeros(1)))
    np.testing.assert_array_equal(out.value, x.value)


def test_conv_zero_padding_counts():
    g = ad.Graph()
    out = ad.conv2d(g.leaf(np.ones((1, 3, 3))), g.leaf(np.ones((1, 1, 3, 3))), g.leaf(np.zeros(1)))
    assert out.value[0, 1, 1] == 9.0
    assert out.value[0, 0, 0] == 4.0
    assert out.value[0, 0, 1] == 6.0


def test_conv_against_direct_loops():
    rng = np.random.default_rng(3)
    x, k, b = rng.standard_normal((2, 5, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    g = ad.Graph()
    out = ad.conv2d(g.leaf(x), g.leaf(k), g.leaf(b)).value
    ref = np.zeros((3, 5, 6))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                acc = b[o]
                for c in range(2):
                    for a in range(3):
                        for bb in range(3):
                            ii, jj = i + a - 1, j + bb - 1
                            if 0 <= ii < 5 and 0 <= jj < 6:
                                acc += k[o, c, a, bb] * x[c, ii, jj]
                ref[o, i, j] = acc
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "xs,ks,bs,word",
    [
        ((2, 4, 4), (3, 1, 3, 3), (3,), "C_in"),
        ((1, 4, 4), (3, 1, 3, 3), (2,), "C_out"),
        ((1, 4, 4), (1, 1, 2, 2), (1,), "odd"),
        ((4, 4), (1, 1, 3, 3), (1,), "C_in x H x W"),
    ],
)
def test_conv_shape_errors_name_dimension(xs, ks, bs, word):
    g = ad.Graph()
    with pytest.raises(ad.ShapeError, match=word):
        ad.conv2d(g.leaf(np.zeros(xs)), g.leaf(np.zeros(ks)), g.leaf(np.zeros(bs)))


def test_conv_kernel_gradient_finite_differences():
    rng = np.random.default_rng(0)
    g = ad.Graph()
    k = g.leaf(rng.standard_normal((3, 2, 3, 3)))
    out = ad.conv2d(g.leaf(rng.standard_normal((2, 8, 8))), k, g.leaf(rng.standard_normal(3)))
    ok, err = check_leaf(g, ad.sum_all(out), k, 1e-6)
    assert ok, err


def test_elementwise_examples():
    g = ad.Graph()
    x = g.leaf(np.random.default_rng(1).standard_normal((3, 3)))
    np.testing.assert_array_equal(ad.add(x, ad.scale(x, -1)).value, 0.0)
    r = ad.relu(g.leaf([-1.0, 2.0, 0.0]))
    np.testing.assert_array_equal(r.value, [0.0, 2.0, 0.0])
    root = ad.sum_all(r)
    ad.backward(g, root)
    np.testing.assert_array_equal(g.nodes[r.inputs[0]].grad, [0.0, 1.0, 0.0])


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul])
def test_binary_shape_mismatch(op):
    g = ad.Graph()
    with pytest.raises(ad.ShapeError):
        op(g.leaf(np.zeros((2, 2))), g.leaf(np.zeros((2, 3))))


def test_mul_gradient_4x4():
    rng = np.random.default_rng(5)
    g = ad.Graph()
    a, b = g.leaf(rng.standard_normal((4, 4))), g.leaf(rng.standard_normal((4, 4)))
    root = weighted_sum(ad.mul(a, b), rng)
    for leaf in (a, b):
        ok, err = check_leaf(g, root, leaf, 1e-6)
        assert ok, err


def test_masked_mse_examples():
    g = ad.Graph()
    a = g.leaf(np.ones((2, 4, 4)))
    assert float(ad.masked_mse(a, a, np.ones((4, 4))).value) == 0.0
    b = g.leaf(np.zeros((2, 4, 4)))
    assert float(ad.masked_mse(a, b, np.ones((4, 4))).value) == 1.0


def test_masked_mse_scalar_loop_oracle():
    rng = np.random.default_rng(11)
    a, b = rng.standard_normal((6, 6)), rng.standard_normal((6, 6))
    m = (rng.random((6, 6)) < 0.4).astype(float)
    g = ad.Graph()
    got = float(ad.masked_mse(g.leaf(a), g.leaf(b), m).value)
    num, cnt = 0.0, 0
    for i in range(6):
        for j in range(6):
            if m[i, j]:
                num += (a[i, j] - b[i, j]) ** 2
                cnt += 1
    assert abs(got - num / cnt) < 1e-12


def test_masked_mse_empty_mask_warns(caplog):
    g = ad.Graph()
    with caplog.at_level("WARNING"):
        out = ad.masked_mse(g.leaf(np.ones((3, 3))), g.leaf(np.zeros((3, 3))), np.zeros((3, 3)))
    assert float(out.value) == 0.0
    assert "empty mask" in caplog.text


def test_backward_sum_gives_ones_and_untouched_leaf_zero():
    g = ad.Graph()
    x = g.leaf(np.arange(6.0).reshape(2, 3))
    other = g.leaf(np.ones(4))
    root = ad.sum_all(x)
    ad.backward(g, root)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(other.grad, np.zeros(4))


def test_backward_rejects_non_scalar_root():
    g = ad.Graph()
    x = g.leaf(np.ones(3))
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.backward(g, ad.relu(x))


def test_grad_shapes_and_topological_ids():
    rng = np.random.default_rng(2)
    g = ad.Graph()
    x = g.leaf(rng.standard_normal((1, 4, 4)))
    y = ad.conv2d(x, g.leaf(rng.standard_normal((2, 1, 3, 3))), g.leaf(np.zeros(2)))
    root = ad.sum_all(ad.relu(y))
    ad.backward(g, root)
    for node in g.nodes:
        assert node.grad.shape == node.value.shape
        assert all(i < node.id for i in node.inputs)


def test_nodes_from_other_graph_rejected():
    g1, g2 = ad.Graph(), ad.Graph()
    with pytest.raises(ValueError, match="different graph"):
        ad.add(g1.leaf(1.0), g2.leaf(1.0))


# -- properties -----------------------------------------------------------


def _unary_case(seed, op):
    rng = np.random.default_rng(seed)
    g = ad.Graph()
    shape = tuple(rng.integers(2, 5, size=2))
    raw = rng.standard_normal(shape)
    if op == "relu":
        x = g.leaf(away_from(raw, [0.0]))
        out = ad.relu(x)
    elif op == "softplus":
        x = g.leaf(raw * 3)
        out = ad.softplus(x)
    elif op == "scale_const":
        x = g.leaf(raw)
        out = ad.scale(x, rng.standard_normal())
    elif op == "sum":
        x = g.leaf(raw)
        out = ad.sum_all(x)
        return g, out, [x]
    return g, weighted_sum(out, rng), [x]


@fifty
@given(seed=seeds, op=st.sampled_from(["relu", "softplus", "scale_const", "sum"]))
def test_unary_gradients(seed, op):
    g, root, leaves = _unary_case(seed, op)
    for leaf in leaves:
        ok, err = check_leaf(g, root, leaf, 1e-5)
        assert ok, (op, err)


@fifty
@given(seed=seeds, op=st.sampled_from(["add", "sub", "mul", "scale_node"]))
def test_binary_gradients(seed, op):
    rng = np.random.default_rng(seed)
    g = ad.Graph()
    shape = tuple(rng.integers(2, 5, size=3))
    a = g.leaf(rng.standard_normal(shape))
    if op == "scale_node":
        b = g.leaf(rng.standard_normal())
        out = ad.scale(a, b)
    else:
        b = g.leaf(rng.standard_normal(shape))
        out = {"add": ad.add, "sub": ad.sub, "mul": ad.mul}[op](a, b)
    root = weighted_sum(out, rng)
    for leaf in (a, b):
        ok, err = check_leaf(g, root, leaf, 1e-5)
        assert ok, (op, err)


@fifty
@given(seed=seeds)
def test_soft_threshold_gradients(seed):
    rng = np.random.default_rng(seed)
    g = ad.Graph()
    theta = abs(rng.standard_normal()) * 0.5 + 0.05
    x = g.leaf(away_from(rng.standard_normal((3, 4, 4)), [theta, -theta]))
    t = g.leaf(theta)
    root = weighted_sum(ad.soft_threshold(x, t), rng)
    for leaf in (x, t):
        ok, err = check_leaf(g, root, leaf, 1e-5)
        assert ok, err


@fifty
@given(seed=seeds)
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed)
    cin, cout = rng.integers(1, 4, size=2)
    k = int(rng.choice([1, 3, 5]))
    h, w = rng.integers(3, 7, size=2)
    g = ad.Graph()
    x = g.leaf(rng.standard_normal((cin, h, w)))
    kern = g.leaf(rng.standard_normal((cout, cin, k, k)))
    b = g.leaf(rng.standard_normal(cout))
    root = weighted_sum(ad.conv2d(x, kern, b), rng)
    for leaf in (x, kern, b):
        ok, err = check_leaf(g, root, leaf, 1e-5)
        assert ok, err


@fifty
@given(seed=seeds)
def test_masked_mse_gradients(seed):
    rng = np.random.default_rng(seed)
    g = ad.Graph()
    a, b = g.leaf(rng.standard_normal((2, 4, 5))), g.leaf(rng.standard_normal((2, 4, 5)))
    m = (rng.random((4, 5)) < 0.5).astype(float)
    m[0, 0] = 1.0
    root = ad.masked_mse(a, b, m)
    for leaf in (a, b):
        ok, err = check_leaf(g, root, leaf, 1e-5)
        assert ok, err


@settings(max_examples=30, deadline=None)
@given(seed=seeds, alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_backward_is_linear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((1, 5, 5))
    k0 = rng.standard_normal((2, 1, 3, 3))

    def grads(a, b):
        g = ad.Graph()
        x, k = g.leaf(x0), g.leaf(k0)
        y = ad.conv2d(x, k, g.leaf(np.zeros(2)))
        f = ad.sum_all(ad.mul(y, y))
        h = ad.sum_all(ad.relu(y))
        root = ad.add(ad.scale(f, a), ad.scale(h, b))
        ad.backward(g, root)
        return x.grad.copy(), k.grad.copy()

    gx, gk = grads(alpha, beta)
    fx, fk = grads(1.0, 0.0)
    hx, hk = grads(0.0, 1.0)
    np.testing.assert_allclose(gx, alpha * fx + beta * hx, rtol=0, atol=1e-10 * (1 + np.abs(gx).max()))
    np.testing.assert_allclose(gk, alpha * fk + beta * hk, rtol=0, atol=1e-10 * (1 + np.abs(gk).max()))


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(9)
        g = ad.Graph()
        x = g.leaf(rng.standard_normal((2, 6, 6)))
        k = g.leaf(rng.standard_normal((3, 2, 3, 3)))
        y = ad.soft_threshold(ad.conv2d(x, k, g.leaf(np.zeros(3))), g.leaf(0.2))
        root = ad.sum_all(ad.mul(y, y))
        ad.backward(g, root)
        return root.value.copy(), x.grad.copy(), k.grad.copy()

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_forward_replay_tracks_leaf_changes():
    g = ad.Graph()
    x = g.leaf(np.array([1.0, -2.0]))
    root = ad.sum_all(ad.mul(x, x))
    x.value[...] = [3.0, 4.0]
    ad.forward(g)
    assert float(root.value) == 25.0
    assert rel_err(numeric_grad(g, root, x), [6.0, 8.0]) < 1e-8
