import math

import numpy as np
import pytest

from ssmri import autodiff as ad
from ssmri.kspace import Mask, apply_A, apply_At, ifft2_centered
from ssmri.model import (
    CONVS,
    ModelParams,
    conv_shapes,
    init_params,
    phase_forward,
    reconstruct,
    symmetry_features,
    xavier_uniform,
)

from gradcheck import directional, numeric_grad, rel_err


def zero_params(K, channels, rho=1.0):
    p = init_params(K, channels, seed=0)
    for ph in p.phases:
        ph.rho = np.array(rho)
        for c in CONVS:
            ph.weights[c] = np.zeros_like(ph.weights[c])
    return p


def identity_params(channels=2):
    p = zero_params(1, channels)
    ph = p.phases[0]
    for c in CONVS:
        w = ph.weights[c]
        for i in range(min(w.shape[0], w.shape[1])):
            w[i, i, 1, 1] = 1.0
    return p


def random_problem(rng, n=8, density=0.4):
    m = Mask((rng.random((n, n)) < density).astype(float), 0, None, 1 / density)
    y = apply_A(rng.standard_normal((2, n, n)), m)
    return y, m


# -- init -----------------------------------------------------------------


def test_init_bounds_and_constants():
    p = init_params(K=3, channels=4, seed=1)
    shapes = conv_shapes(4)
    for ph in p.phases:
        assert float(ph.rho) == 0.5
        assert ph.theta() == pytest.approx(0.01, rel=1e-12)
        for c in CONVS:
            cout, cin, k, _ = shapes[c]
            bound = math.sqrt(6.0 / (cin * k * k + cout * k * k))
            assert ph.weights[c].shape == shapes[c]
            assert np.abs(ph.weights[c]).max() <= bound
            assert not ph.biases[c].any()


def test_init_same_seed_identical():
    a, b = init_params(2, 4, seed=9).as_dict(), init_params(2, 4, seed=9).as_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_xavier_empirical_variance():
    shape = (16, 16, 3, 3)
    w = np.concatenate([xavier_uniform(np.random.default_rng(s), shape).ravel() for s in range(3)])[:10_000]
    target = 2.0 / (16 * 9 + 16 * 9)
    assert abs(w.var() / target - 1) < 0.10


# -- phase ----------------------------------------------------------------


def test_phase_full_mask_zero_convs_gives_zero_filled():
    rng = np.random.default_rng(0)
    full = Mask(np.ones((8, 8)), 0, None, 1)
    y = apply_A(rng.standard_normal((2, 8, 8)), full)
    p = zero_params(1, 4).lift(g := ad.Graph())
    x = phase_forward(g.leaf(np.zeros((2, 8, 8))), g.leaf(y), full, p.phases[0])
    np.testing.assert_allclose(x.value, ifft2_centered(y), atol=1e-12)


def test_phase_huge_threshold_leaves_bias_path():
    rng = np.random.default_rng(1)
    y, m = random_problem(rng)
    p = init_params(1, 4, seed=3)
    ph = p.phases[0]
    ph.theta_raw = np.array(1e3)
    for c in ("G1", "G2", "H"):
        ph.biases[c] = rng.standard_normal(ph.biases[c].shape)
    g = ad.Graph()
    P = p.lift(g)
    x_prev = g.leaf(rng.standard_normal((2, 8, 8)))
    x = phase_forward(x_prev, g.leaf(y), m, P.phases[0])
    r = x_prev.value - 0.5 * apply_At(apply_A(x_prev.value, m) - y, m)
    # G(0) computed on a separate graph from the zero code
    h = ad.Graph()
    Q = p.lift(h)
    z = h.leaf(np.zeros((4, 8, 8)))
    q = Q.phases[0]
    g0 = ad.conv2d(ad.conv2d(ad.relu(ad.conv2d(z, q.weights["G1"], q.biases["G1"])), q.weights["G2"], q.biases["G2"]),
                   q.weights["H"], q.biases["H"])
    np.testing.assert_allclose(x.value, r + g0.value, atol=1e-12)


def test_phase_rho_gradient():
    rng = np.random.default_rng(2)
    y, m = random_problem(rng)
    g = ad.Graph()
    P = init_params(1, 4, seed=4).lift(g)
    x = phase_forward(g.leaf(rng.standard_normal((2, 8, 8))), g.leaf(y), m, P.phases[0])
    root = ad.sum_all(ad.mul(x, x))
    rho = P.phases[0].rho
    ad.backward(g, root)
    assert rel_err(rho.grad, numeric_grad(g, root, rho)) < 1e-5


def test_phase_shape_mismatch():
    g = ad.Graph()
    P = init_params(1, 2, seed=0).lift(g)
    with pytest.raises(ValueError):
        phase_forward(g.leaf(np.zeros((2, 8, 8))), g.leaf(np.zeros((2, 4, 4))), Mask(np.ones((8, 8)), 0, None, 1), P.phases[0])


# -- symmetry features ----------------------------------------------------


def test_symmetry_identity_transforms():
    g = ad.Graph()
    P = identity_params(2).lift(g)
    r = g.leaf(np.random.default_rng(0).random((2, 6, 6)))
    ref, rt = symmetry_features(r, P.phases[0])
    np.testing.assert_array_equal(rt.value, ref.value)
    np.testing.assert_array_equal(ref.value, r.value)


def test_symmetry_zero_kernels():
    g = ad.Graph()
    P = zero_params(1, 3).lift(g)
    ref, rt = symmetry_features(g.leaf(np.ones((2, 6, 6))), P.phases[0])
    assert not ref.value.any() and not rt.value.any()


def test_symmetry_random_params_differ():
    g = ad.Graph()
    P = init_params(1, 4, seed=5).lift(g)
    ref, rt = symmetry_features(g.leaf(np.random.default_rng(1).standard_normal((2, 6, 6))), P.phases[0])
    assert np.linalg.norm(rt.value - ref.value) > 1e-3


# -- reconstruct ----------------------------------------------------------


def test_reconstruct_k0_is_zero_filled():
    rng = np.random.default_rng(3)
    y, m = random_problem(rng)
    x, pp = reconstruct(y, m, ModelParams([], 4))
    np.testing.assert_array_equal(x.value, apply_At(y, m))
    assert pp == []


def test_init_params_rejects_bad_sizes():
    with pytest.raises(ValueError):
        init_params(0, 4)
    with pytest.raises(ValueError):
        init_params(2, 0)


def test_reconstruct_full_mask_zero_convs():
    rng = np.random.default_rng(4)
    full = Mask(np.ones((8, 8)), 0, None, 1)
    y = apply_A(rng.standard_normal((2, 8, 8)), full)
    x, _ = reconstruct(y, full, zero_params(3, 4, rho=1.0))
    np.testing.assert_allclose(x.value, apply_At(y, full), atol=1e-12)


@pytest.mark.parametrize("K", [1, 4])
def test_zero_denoiser_is_landweber(K):
    rng = np.random.default_rng(5)
    y, m = random_problem(rng, n=12)
    p = zero_params(K, 3, rho=0.7)
    for k, ph in enumerate(p.phases):
        ph.rho = np.array(0.3 + 0.1 * k)
    x, _ = reconstruct(y, m, p)
    ref = apply_At(y, m)
    for k in range(K):
        ref = ref - (0.3 + 0.1 * k) * apply_At(apply_A(ref, m) - y, m)
    np.testing.assert_allclose(x.value, ref, atol=1e-10)


@pytest.mark.parametrize("K,C", [(1, 2), (2, 3), (3, 5)])
def test_output_shape(K, C):
    rng = np.random.default_rng(6)
    y, m = random_problem(rng, n=10)
    x, pp = reconstruct(y, m, init_params(K, C, seed=1))
    assert x.shape == (2, 10, 10) and len(pp) == K


def test_reconstruct_deterministic():
    rng = np.random.default_rng(7)
    y, m = random_problem(rng)
    p = init_params(2, 4, seed=2)
    assert np.array_equal(reconstruct(y, m, p)[0].value, reconstruct(y, m, p)[0].value)


def test_reconstruct_gradients_all_params():
    """8x8, K=2: every parameter tensor checked against central differences."""
    rng = np.random.default_rng(8)
    y, m = random_problem(rng)
    g = ad.Graph()
    P = init_params(2, 3, seed=3).lift(g)
    for ph in P.phases:
        ph.theta_raw.value[...] = -3.0  # theta ~ 0.05: keeps some activations in the dead zone
    ad.forward(g)
    x, _ = reconstruct(g.leaf(y), m, P)
    root = ad.sum_all(ad.mul(x, x))
    ad.backward(g, root)
    for name, leaf in P.named():
        analytic = leaf.grad.ravel().copy()
        idx = list(rng.choice(analytic.size, size=min(6, analytic.size), replace=False))
        numeric = numeric_grad(g, root, leaf, index=idx)
        assert rel_err(analytic[idx], numeric) < 1e-4, name
    for _ in range(5):
        a, n = directional(g, root, [leaf for _, leaf in P.named()], rng)
        assert rel_err(a, n) < 1e-4


def test_params_dict_round_trip():
    p = init_params(2, 3, seed=1)
    q = ModelParams.from_dict(p.as_dict(), 2, 3)
    assert all(np.array_equal(p.as_dict()[k], v) for k, v in q.as_dict().items())
