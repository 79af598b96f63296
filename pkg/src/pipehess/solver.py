"""Hessian-inverse-vector products by block-tridiagonal factorization.

Solving (H + eps I) x = g never forms H. Instead the product structure
of H is unrolled into a 3x3 grid of sparse couplings over three
per-layer unknown groups (v_l, y_l, u_l): v carries the answer, y the
tangent states it induces, u the curvature adjoints. Interleaving the
three groups by layer turns the grid into a block tridiagonal matrix
with blocks of side p_l + 2 a_l, which a block LDU factorization solves
in one forward/backward sweep -- linear work in depth.

``hivp_solve`` is the direct path; ``cg_solve`` is a matrix-free
conjugate-gradient baseline over the same Hessian-vector product, for
cross-checking and for timing comparisons.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import instrument
from .blockmat import (
    BlockBanded,
    BlockTridiagonal,
    CommutationPermutation,
    pivot_to_tridiagonal,
)
from .hessian import HessianOperator
from .pipeline import EvaluationPoint

__all__ = [
    "PIVOT_CONDITION_WARN",
    "NoConvergence",
    "LiftedSystem",
    "lift",
    "unpivot_extract",
    "SolveReport",
    "hivp_solve",
    "cg_solve",
]

PIVOT_CONDITION_WARN = 1e10


class NoConvergence(RuntimeError):
    """Iterative solve stopped without meeting its tolerance.

    Carries the partial :class:`SolveReport` as ``report``.
    """

    def __init__(self, report: "SolveReport"):
        self.report = report
        super().__init__(
            f"no convergence after {report.iterations} iterations "
            f"(residual {report.residual_norm:.3e}, rhs norm {report.rhs_norm:.3e})"
        )


@dataclass(frozen=True, eq=False)
class LiftedSystem:
    """The unrolled (v, y, u) system over one evaluated Hessian.

    ``grid[u][v]`` holds the banded coupling from unknown group v to
    equation group u, partitioned over layers (None means zero); ``rhs``
    is the group-major right-hand side (g on the v group, zeros
    elsewhere). ``tridiagonal`` is the layer-interleaved gather of the
    grid; block l has side p_l + 2 a_l with the sub-order (v_l, y_l,
    u_l).
    """

    hessian: HessianOperator
    eps: float
    grid: tuple[tuple[BlockBanded | None, ...], ...]
    rhs: np.ndarray
    perm: CommutationPermutation

    @cached_property
    def tridiagonal(self) -> BlockTridiagonal:
        return pivot_to_tridiagonal(self.grid, self.perm)

    @property
    def group_dims(self) -> tuple[tuple[int, ...], ...]:
        return self.perm.group_dims

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return self.perm.interleaved_dims

    def embed_rhs(self, g: np.ndarray) -> np.ndarray:
        """Place a parameter-space right-hand side into the lifted space."""
        pipe = self.hessian.pipeline
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (pipe.total_params,):
            raise ValueError(
                f"rhs has shape {g.shape}, expected ({pipe.total_params},)"
            )
        out = np.zeros(sum(self.layer_dims))
        o_full = 0
        o_g = 0
        for p, d in zip(pipe.param_dims, self.layer_dims):
            out[o_full:o_full + p] = g[o_g:o_g + p]
            o_full += d
            o_g += p
        instrument.alloc_bytes(out.nbytes)
        return out

    def interleaved_rhs(self) -> np.ndarray:
        """The stored right-hand side, reordered to match ``tridiagonal``."""
        return self.perm.apply(self.rhs)

    def extract_primal(self, x: np.ndarray) -> np.ndarray:
        """Pull the v-components (the parameter-space answer) back out."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (sum(self.layer_dims),):
            raise ValueError(
                f"lifted vector has shape {x.shape}, expected ({sum(self.layer_dims)},)"
            )
        return unpivot_extract(x, self.perm)

    def dense_group_matrix(self) -> np.ndarray:
        """Dense lifted matrix in group-major order (testing aid).

        Composed from whole-pipeline operators, independently of the
        per-layer cell assembly in :func:`lift`; conjugating with
        ``perm`` must reproduce ``tridiagonal.to_dense()``.
        """
        h = self.hessian
        parts = h.dense_parts()
        m, p_mat, d_x = parts["m"], parts["p"], parts["d_x"]
        c_x, c_z = parts["c_x"], parts["c_z"]
        n_v = d_x.shape[1]
        n_s = d_x.shape[0]
        top = np.hstack([
            c_x @ parts["d_xx"] + self.eps * np.eye(n_v),
            c_x @ parts["d_zx"] @ p_mat,
            d_x.T,
        ])
        mid = np.hstack([-d_x, m, np.zeros((n_s, n_s))])
        bot = np.hstack([
            -p_mat.T @ c_z @ parts["d_xz"],
            -p_mat.T @ c_z @ parts["d_zz"] @ p_mat,
            m.T,
        ])
        return np.vstack([top, mid, bot])


def lift(h: HessianOperator, eps: float = 0.0, g: np.ndarray | None = None) -> LiftedSystem:
    """Assemble the 3x3 grouped grid and right-hand side for (H + eps I) x = g.

    Each cell is banded over layers with offsets in {-1, 0, +1}, so the
    interleaved gather is block tridiagonal. Damping enters only the
    (v, v) cell. ``g`` defaults to zeros.
    """
    pipe = h.pipeline
    derivs = h.point.derivs
    p_dims = pipe.param_dims
    a_dims = pipe.state_dims
    depth = pipe.depth
    n = pipe.total_params
    eps = float(eps)

    if g is None:
        g = np.zeros(n)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (n,):
        raise ValueError(f"rhs has shape {g.shape}, expected ({n},)")

    def vv(i: int) -> np.ndarray:
        blk = h.c_x.block_apply(i, derivs[i].hess_xx)
        if eps != 0.0:
            blk = blk + eps * np.eye(p_dims[i])
        return blk

    def uy(i: int) -> np.ndarray:
        if i == depth - 1:
            return np.zeros((a_dims[i], a_dims[i]))
        return -h.c_z.block_apply(i + 1, derivs[i + 1].hess_zz)

    def banded(row_dims, col_dims, lanes) -> BlockBanded:
        # a one-layer pipeline has no off-diagonal lanes at all
        return BlockBanded(
            row_dims, col_dims, {o: blks for o, blks in lanes.items() if blks}
        )

    cells = {
        # row v: damped curvature, shifted cross curvature, constraint adjoint
        (0, 0): banded(p_dims, p_dims, {0: [vv(i) for i in range(depth)]}),
        (0, 1): banded(p_dims, a_dims, {
            -1: [h.c_x.block_apply(j + 1, derivs[j + 1].hess_zx)
                 for j in range(depth - 1)],
        }),
        (0, 2): banded(p_dims, a_dims, {
            0: [derivs[i].jac_x.T for i in range(depth)],
        }),
        # row y: tangent-state propagation, y = M^{-1} D_x v
        (1, 0): banded(a_dims, p_dims, {
            0: [-derivs[i].jac_x for i in range(depth)],
        }),
        (1, 1): banded(a_dims, a_dims, {
            0: [np.eye(a) for a in a_dims],
            -1: [-derivs[j + 1].jac_z for j in range(depth - 1)],
        }),
        # row u: curvature adjoints driven by v and y
        (2, 0): banded(a_dims, p_dims, {
            1: [-h.c_z.block_apply(j + 1, derivs[j + 1].hess_xz)
                for j in range(depth - 1)],
        }),
        (2, 1): banded(a_dims, a_dims, {0: [uy(i) for i in range(depth)]}),
        (2, 2): banded(a_dims, a_dims, {
            0: [np.eye(a) for a in a_dims],
            1: [-derivs[j + 1].jac_z.T for j in range(depth - 1)],
        }),
    }
    grid = tuple(
        tuple(cells.get((u, v)) for v in range(3)) for u in range(3)
    )
    rhs = np.concatenate([g, np.zeros(2 * sum(a_dims))])
    perm = CommutationPermutation([p_dims, a_dims, a_dims])
    return LiftedSystem(hessian=h, eps=eps, grid=grid, rhs=rhs, perm=perm)


def unpivot_extract(
    x_prime: np.ndarray,
    perm: CommutationPermutation,
    dims: tuple[int, ...] | None = None,
) -> np.ndarray:
    """Undo the interleaving and return the leading unknown group.

    ``dims`` names the per-layer sizes of that group; it defaults to the
    permutation's first group (the parameter block).
    """
    x_prime = np.asarray(x_prime, dtype=np.float64)
    grouped = perm.apply_inverse(x_prime)
    if dims is None:
        dims = perm.group_dims[0]
    return grouped[:sum(int(d) for d in dims)]


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one linear solve, with its certificate and meters.

    ``residual_norm`` is always recomputed from scratch through the
    matrix-free Hessian product, never taken from solver internals.
    """

    solution: np.ndarray
    method: str
    eps: float
    residual_norm: float
    rhs_norm: float
    converged: bool
    iterations: int | None
    pivot_condition: float | None
    flops: int
    peak_bytes: int
    wall_time: float
    backend: str
    warnings: tuple[str, ...] = ()

    @property
    def relative_residual(self) -> float:
        return self.residual_norm / (1.0 + self.rhs_norm)

    def to_json_dict(self) -> dict:
        """Plain-types view of the report, ready for json.dump."""
        return {
            "solution": [float(v) for v in self.solution],
            "method": self.method,
            "eps": self.eps,
            "residual_norm": self.residual_norm,
            "rhs_norm": self.rhs_norm,
            "relative_residual": self.relative_residual,
            "converged": self.converged,
            "iterations": self.iterations,
            "pivot_condition": self.pivot_condition,
            "flops": int(self.flops),
            "peak_bytes": int(self.peak_bytes),
            "wall_time": self.wall_time,
            "backend": self.backend,
            "warnings": list(self.warnings),
        }


def _as_operator(h) -> HessianOperator:
    if isinstance(h, HessianOperator):
        return h
    if isinstance(h, EvaluationPoint):
        return HessianOperator.assemble(h)
    raise TypeError(
        f"expected a HessianOperator or EvaluationPoint, got {type(h).__name__}"
    )


def hivp_solve(
    h: HessianOperator | EvaluationPoint,
    rhs: np.ndarray,
    eps: float = 0.0,
    pivot_tol: float = 1e-12,
    backend: str | None = None,
    refine: bool = False,
) -> SolveReport:
    """Solve (H + eps I) x = rhs directly through the lifted factorization.

    Accepts either an assembled :class:`HessianOperator` or a raw
    :class:`EvaluationPoint`. Raises
    :class:`pipehess.blockmat.SingularPivotBlock` when a Schur pivot
    degenerates. With ``refine`` one step of residual correction reuses
    the factorization.
    """
    h = _as_operator(h)
    rhs = np.asarray(rhs, dtype=np.float64)
    warnings: list[str] = []
    t0 = time.perf_counter()
    with instrument.flop_scope() as fc, instrument.memory_scope() as mem:
        system = lift(h, eps, rhs)
        fact = system.tridiagonal.factorize(tol=pivot_tol, backend=backend)
        x = system.extract_primal(fact.solve(system.interleaved_rhs()))
        if refine:
            r = rhs - h.hvp(x, eps=eps, backend=backend)
            x = x + system.extract_primal(fact.solve(system.embed_rhs(r)))
        residual = rhs - h.hvp(x, eps=eps, backend=backend)
    wall = time.perf_counter() - t0
    cond = fact.pivot_condition()
    if cond > PIVOT_CONDITION_WARN:
        warnings.append(
            f"pivot blocks span {cond:.2e} in magnitude; solution may be inaccurate"
        )
    from .kernels import get_kernels

    return SolveReport(
        solution=x,
        method="direct",
        eps=float(eps),
        residual_norm=float(np.linalg.norm(residual)),
        rhs_norm=float(np.linalg.norm(rhs)),
        converged=True,
        iterations=None,
        pivot_condition=cond,
        flops=fc.flops,
        peak_bytes=mem.peak,
        wall_time=wall,
        backend=get_kernels(backend).backend,
        warnings=tuple(warnings),
    )


def cg_solve(
    h: HessianOperator | EvaluationPoint,
    rhs: np.ndarray,
    eps: float = 0.0,
    tol: float = 1e-10,
    max_iter: int | None = None,
    backend: str | None = None,
) -> SolveReport:
    """Conjugate gradients on v -> H v + eps v.

    Meaningful only when the shifted Hessian is positive definite.
    Raises :class:`NoConvergence` (carrying the partial report) if the
    relative residual has not reached ``tol`` within ``max_iter``.
    """
    h = _as_operator(h)
    rhs = np.asarray(rhs, dtype=np.float64)
    n = rhs.size
    if max_iter is None:
        max_iter = max(100, 20 * n)
    rhs_norm = float(np.linalg.norm(rhs))
    t0 = time.perf_counter()
    with instrument.flop_scope() as fc, instrument.memory_scope() as mem:
        ws = h.make_workspace()
        x = np.zeros(n)
        r = rhs.copy()
        p = r.copy()
        rs = float(r @ r)
        iters = 0
        converged = rhs_norm == 0.0
        while not converged and iters < max_iter:
            ap = h.hvp(p, eps=eps, backend=backend, workspace=ws)
            denom = float(p @ ap)
            if denom <= 0.0:
                # curvature along p is not positive: CG assumptions broken
                break
            alpha = rs / denom
            x += alpha * p
            r -= alpha * ap
            iters += 1
            rs_new = float(r @ r)
            instrument.add_flops(10 * n)
            if np.sqrt(rs_new) <= tol * max(rhs_norm, 1e-300):
                converged = True
                break
            p = r + (rs_new / rs) * p
            rs = rs_new
        residual = rhs - h.hvp(x, eps=eps, backend=backend, workspace=ws)
        residual_norm = float(np.linalg.norm(residual))
    wall = time.perf_counter() - t0
    from .kernels import get_kernels

    report = SolveReport(
        solution=x,
        method="cg",
        eps=float(eps),
        residual_norm=residual_norm,
        rhs_norm=rhs_norm,
        converged=converged,
        iterations=iters,
        pivot_condition=None,
        flops=fc.flops,
        peak_bytes=mem.peak,
        wall_time=wall,
        backend=get_kernels(backend).backend,
        warnings=(),
    )
    if not converged:
        raise NoConvergence(report)
    return report
