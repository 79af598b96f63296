"""Matrix-free Hessian products against independent oracles."""

import numpy as np
import pytest

from pipehess import instrument
from pipehess.hessian import (
    AdjointContraction,
    HessianOperator,
    dense_hessian,
    finite_diff_hessian,
    hvp_pearlmutter,
)
from pipehess.pipeline import (
    MixSquaredLoss,
    MixTanh,
    Pipeline,
    QuadraticLoss,
    random_pipeline,
    random_point,
)


def _operator(depth, width, params, seed, activation="tanh"):
    pipe = random_pipeline(depth, width, params, seed=seed, activation=activation)
    z0, p = random_point(pipe, seed=seed)
    point = pipe.forward(z0, p)
    return HessianOperator.assemble(point), point


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestAdjointContraction:
    def test_matches_kron_structure(self):
        """Block l is I_{q} x b_l' acting on a stacked (a x q) matrix in
        column-major order."""
        rng = np.random.default_rng(0)
        b1, b2 = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 3)
        c = AdjointContraction((b1, b2), (4, 2))
        dense = c.to_dense()
        np.testing.assert_allclose(dense[:4, :8], np.kron(np.eye(4), b1))
        x = rng.uniform(-1, 1, c.shape[1])
        y = rng.uniform(-1, 1, c.shape[0])
        np.testing.assert_allclose(c.matvec(x), dense @ x, atol=1e-14)
        np.testing.assert_allclose(c.matvec_transpose(y), dense.T @ y, atol=1e-14)

    def test_block_apply_contracts_stacked_matrix(self):
        rng = np.random.default_rng(1)
        b = rng.uniform(-1, 1, 3)
        c = AdjointContraction((b,), (5,))
        stacked = rng.uniform(-1, 1, (15, 2))
        out = c.block_apply(0, stacked)
        want = np.einsum("i,iqc->qc", b, stacked.reshape(3, 5, 2, order="F"))
        np.testing.assert_allclose(out, want, atol=1e-14)


class TestHvp:
    def test_matches_dense_composition_and_basis_assembly(self):
        rng = np.random.default_rng(2)
        for seed in range(3):
            h, _ = _operator(3, 3, 4, seed)
            composed = h.dense()
            assembled = dense_hessian(h)
            np.testing.assert_allclose(assembled, composed, atol=1e-11)
            v = rng.uniform(-1, 1, h.n)
            np.testing.assert_allclose(h.hvp(v), composed @ v, atol=1e-11)

    def test_matches_finite_difference_hessian(self):
        for seed, (depth, a, p) in enumerate([(1, 3, 4), (2, 2, 3), (4, 3, 3)]):
            h, point = _operator(depth, a, p, seed + 10)
            np.testing.assert_allclose(
                dense_hessian(h), finite_diff_hessian(point), atol=2e-5
            )

    def test_matches_adjoint_recursion(self):
        """Two implementations that share no code: the structured
        operator chain versus the forward/backward directional
        recursion."""
        rng = np.random.default_rng(3)
        for seed in range(5):
            h, point = _operator(3, 3, 4, seed + 20)
            v = rng.uniform(-1, 1, h.n)
            assert _rel(h.hvp(v), hvp_pearlmutter(point, v)) < 1e-12

    def test_linearity(self):
        rng = np.random.default_rng(4)
        h, _ = _operator(3, 3, 4, 30)
        u = rng.uniform(-1, 1, h.n)
        v = rng.uniform(-1, 1, h.n)
        lhs = h.hvp(2.5 * u - 0.5 * v)
        rhs = 2.5 * h.hvp(u) - 0.5 * h.hvp(v)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_damping_shifts_spectrum(self):
        rng = np.random.default_rng(5)
        h, _ = _operator(2, 3, 4, 31)
        v = rng.uniform(-1, 1, h.n)
        np.testing.assert_allclose(
            h.hvp(v, eps=0.25), h.hvp(v) + 0.25 * v, atol=1e-13
        )

    def test_symmetry_without_symmetrizing(self):
        for seed in range(3):
            h, _ = _operator(3, 3, 4, seed + 40)
            hd = dense_hessian(h)
            assert _rel(hd, hd.T) < 1e-10

    def test_workspace_reuse_and_aliasing(self):
        rng = np.random.default_rng(6)
        h, _ = _operator(3, 3, 4, 50)
        ws = h.make_workspace()
        v1 = rng.uniform(-1, 1, h.n)
        v2 = rng.uniform(-1, 1, h.n)
        fresh1 = h.hvp(v1)
        fresh2 = h.hvp(v2)
        out1 = h.hvp(v1, workspace=ws)
        assert out1 is ws.out  # documented aliasing: the workspace owns it
        first = out1.copy()
        out2 = h.hvp(v2, workspace=ws)
        assert out2 is ws.out
        np.testing.assert_array_equal(first, fresh1)
        np.testing.assert_array_equal(out2, fresh2)

    def test_quadratic_loss_hessian_is_the_matrix(self):
        a = np.array([[3.0, 1.0], [1.0, 2.0]])
        layer = QuadraticLoss(2, a, np.zeros(2))
        pipe = Pipeline([layer])
        z0 = np.zeros(2)
        params = (np.array([0.7, -0.3]),)
        h = HessianOperator.assemble(pipe.forward(z0, params))
        np.testing.assert_allclose(dense_hessian(h), a, atol=1e-14)

    def test_dense_guard(self):
        h, _ = _operator(3, 3, 4, 60)
        with pytest.raises(ValueError, match="dense export"):
            dense_hessian(h, max_dim=h.n - 1)
        with pytest.raises(ValueError, match="dense export"):
            h.dense(max_dim=h.n - 1)


class TestAdjointChainOrientation:
    """The cross-curvature terms run the state adjoint through the
    transposed shift on the outside and the forward shift on the inside.
    On a scalar-state chain (every stage width 1) both orientations
    produce conformable matrices, and finite differences picks the
    implemented one."""

    def _scalar_chain(self, depth=4, p=3, seed=7):
        layers = [MixTanh(1, p, 1, seed=100 + k) for k in range(depth - 1)]
        layers.append(MixSquaredLoss(1, p, seed=200))
        pipe = Pipeline(layers)
        z0, params = random_point(pipe, seed=seed)
        point = pipe.forward(z0, params)
        return HessianOperator.assemble(point), point

    def _alternative_dense(self, h):
        """Same first two terms, but the adjoint chain uses the forward
        shift after the transposed recursion and no shift inside."""
        parts = h.dense_parts()
        m, p_mat, d_x = parts["m"], parts["p"], parts["d_x"]
        c_x, c_z = parts["c_x"], parts["c_z"]
        inner = p_mat @ np.linalg.solve(m, d_x)
        back = np.linalg.solve(m.T, d_x).T  # rows: d_x' m^{-T}
        return (
            c_x @ parts["d_xx"]
            + c_x @ parts["d_zx"] @ inner
            + back @ p_mat @ c_z @ parts["d_xz"]
            + back @ p_mat @ c_z @ parts["d_zz"] @ np.linalg.solve(m, d_x)
        )

    def test_implemented_orientation_matches_finite_differences(self):
        h, point = self._scalar_chain()
        fd = finite_diff_hessian(point)
        assert _rel(dense_hessian(h), fd) < 1e-6

    def test_flipped_orientation_does_not(self):
        h, point = self._scalar_chain()
        fd = finite_diff_hessian(point)
        alt = self._alternative_dense(h)
        assert _rel(alt, fd) > 1e-2
        # the flipped form is not even symmetric
        assert _rel(alt, alt.T) > 1e-2


def test_hvp_flops_scale_linearly_in_depth():
    """Instrumented flop counts over a doubling ladder of depths fit a
    log-log slope within 10% of 1."""
    depths = [8, 16, 32, 64, 128]
    flops = []
    rng = np.random.default_rng(8)
    for depth in depths:
        h, _ = _operator(depth, 4, 4, 70 + depth)
        v = rng.uniform(-1, 1, h.n)
        ws = h.make_workspace()
        with instrument.flop_scope() as fc:
            h.hvp(v, workspace=ws)
        flops.append(fc.flops)
    slope = np.polyfit(np.log2(depths), np.log2(flops), 1)[0]
    assert 0.9 <= slope <= 1.1, (slope, flops)
