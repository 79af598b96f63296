"""Layer derivative blocks and whole-pipeline evaluation."""

import numpy as np
import pytest

from pipehess.pipeline import (
    DenseSoftplus,
    DenseTanh,
    FusedSquaredLoss,
    MixSoftplus,
    MixSquaredLoss,
    MixTanh,
    Pipeline,
    QuadraticLoss,
    TailPassthrough,
    finite_diff_gradient,
    finite_diff_layer_derivatives,
    random_pipeline,
    random_point,
)


def _assert_derivs_close(analytic, fd, atol):
    for name in ("jac_z", "jac_x", "hess_xx", "hess_zx", "hess_xz", "hess_zz"):
        np.testing.assert_allclose(
            getattr(analytic, name), getattr(fd, name), atol=atol, err_msg=name
        )


LAYER_CASES = [
    DenseTanh(3, 2),
    DenseSoftplus(2, 3),
    FusedSquaredLoss(3, 2),
    MixTanh(3, 4, 2, seed=5),
    MixSoftplus(2, 3, 3, seed=6),
    MixSquaredLoss(3, 4, seed=7),
    TailPassthrough(MixTanh(2, 3, 2, seed=8), 2),
]


@pytest.mark.parametrize("layer", LAYER_CASES, ids=lambda l: type(l).__name__)
def test_layer_derivatives_match_finite_differences(layer):
    """Every analytic block agrees with nested central differences of
    value() alone."""
    rng = np.random.default_rng(42)
    z = rng.uniform(-0.8, 0.8, layer.in_dim)
    x = rng.uniform(-0.8, 0.8, layer.param_dim) / np.sqrt(max(layer.param_dim, 1))
    d = layer.derivatives(z, x)
    fd = finite_diff_layer_derivatives(layer, z, x)
    _assert_derivs_close(d, fd, atol=5e-5)


def test_layer_derivative_shapes():
    layer = MixTanh(3, 5, 2, seed=0)
    d = layer.derivatives(np.zeros(3), np.zeros(5))
    a, n, p = 2, 3, 5
    assert d.jac_z.shape == (a, n)
    assert d.jac_x.shape == (a, p)
    assert d.hess_xx.shape == (a * p, p)
    assert d.hess_zx.shape == (a * p, n)
    assert d.hess_xz.shape == (a * n, p)
    assert d.hess_zz.shape == (a * n, n)


def test_quadratic_loss_exact_blocks():
    """The pure-parameter quadratic has value .5 (x-c)' A_sym (x-c),
    gradient A_sym (x-c), and constant curvature A_sym; every z block
    is zero."""
    a = np.array([[2.0, 1.0], [0.0, 3.0]])
    a_sym = 0.5 * (a + a.T)
    c = np.array([0.5, -0.5])
    layer = QuadraticLoss(3, a, c)
    z = np.array([9.0, 9.0, 9.0])  # must be ignored
    x = np.array([1.0, 1.0])
    val = layer.value(z, x)
    assert val.shape == (1,)
    assert val[0] == pytest.approx(0.5 * (x - c) @ a_sym @ (x - c))
    d = layer.derivatives(z, x)
    np.testing.assert_allclose(d.jac_x, (a_sym @ (x - c))[None, :])
    np.testing.assert_allclose(d.hess_xx, a_sym)
    assert not d.jac_z.any()
    assert not d.hess_zz.any()
    assert not d.hess_zx.any()
    assert not d.hess_xz.any()


def test_tail_passthrough_copies_tail():
    inner = MixTanh(2, 3, 2, seed=1)
    layer = TailPassthrough(inner, 2)
    assert layer.in_dim == 4 and layer.out_dim == 4
    z = np.array([0.1, -0.2, 5.0, 6.0])
    x = np.zeros(3)
    out = layer.value(z, x)
    np.testing.assert_array_equal(out[2:], z[2:])
    np.testing.assert_allclose(out[:2], inner.value(z[:2], x))


def test_pipeline_rejects_dim_mismatch():
    with pytest.raises(ValueError, match="expects input dim"):
        Pipeline([DenseTanh(3, 2), MixSquaredLoss(3, 2, seed=0)])


def test_pipeline_rejects_vector_tail():
    with pytest.raises(ValueError, match="scalar loss"):
        Pipeline([DenseTanh(3, 2)])


def test_forward_flags_non_finite_states():
    pipe = random_pipeline(2, 3, 4, seed=3)
    z0 = np.full(pipe.in_dim, 1e300)
    _, params = random_point(pipe, seed=3)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(ValueError, match="non-finite"):
            pipe.forward(z0, params)


def test_forward_records_states_and_value():
    pipe = random_pipeline(3, 3, 4, seed=4)
    z0, params = random_point(pipe, seed=4)
    pt = pipe.forward(z0, params)
    assert len(pt.derivs) == pipe.depth
    assert len(pt.states) == pipe.depth
    assert pt.loss == pytest.approx(pipe.value(z0, params)[0])


@pytest.mark.parametrize("activation", ["tanh", "softplus"])
def test_gradient_matches_finite_differences(activation):
    for seed in range(4):
        pipe = random_pipeline(3, 3, 4, seed=seed, activation=activation)
        z0, params = random_point(pipe, seed=seed)
        pt = pipe.forward(z0, params)
        g = pipe.gradient(pt)
        fd = finite_diff_gradient(pipe, z0, params)
        np.testing.assert_allclose(g, fd, atol=2e-8)


def test_gradient_of_depth_one_pipeline():
    pipe = Pipeline([MixSquaredLoss(3, 4, seed=9)])
    z0, params = random_point(pipe, seed=9)
    g = pipe.gradient(pipe.forward(z0, params))
    np.testing.assert_allclose(g, finite_diff_gradient(pipe, z0, params), atol=2e-8)


def test_random_point_is_deterministic_and_scaled():
    pipe = random_pipeline(3, 4, 6, seed=1)
    z0a, pa = random_point(pipe, seed=2)
    z0b, pb = random_point(pipe, seed=2)
    np.testing.assert_array_equal(z0a, z0b)
    for xa, xb in zip(pa, pb):
        np.testing.assert_array_equal(xa, xb)
    # uniform(-1,1) / sqrt(fan-in) keeps every draw inside that envelope
    for x in pa:
        assert np.all(np.abs(x) <= 1.0 / np.sqrt(x.size) + 1e-12)
    z0c, _ = random_point(pipe, seed=3)
    assert not np.array_equal(z0a, z0c)


def test_random_pipeline_shape():
    pipe = random_pipeline(4, 3, 5, seed=0)
    assert pipe.depth == 4
    assert pipe.state_dims[-1] == 1
    assert all(p == 5 for p in pipe.param_dims)
    assert pipe.in_dim == pipe.state_dims[0]


def test_split_and_join_params_roundtrip():
    pipe = random_pipeline(3, 2, 4, seed=5)
    _, params = random_point(pipe, seed=5)
    flat = pipe.join_params(params)
    assert flat.shape == (pipe.total_params,)
    back = pipe.split_params(flat)
    for a, b in zip(back, params):
        np.testing.assert_array_equal(a, b)
