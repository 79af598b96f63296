"""Exact Hessian-vector products for scalar-output layerwise pipelines.

The parameter Hessian of a pipeline loss decomposes into four terms
built from per-layer derivative blocks, the unit lower bidiagonal state
Jacobian M, the parameter Jacobian D_x, the block down-shift P, and
adjoint-row contractions:

    H = C_x D_xx + C_x D_zx P M^{-1} D_x
      + D_x^T M^{-T} P^T C_z D_xz
      + D_x^T M^{-T} P^T C_z D_zz P M^{-1} D_x

where C_x/C_z contract each layer's stacked second derivative against
that layer's adjoint row b_l (applied by reshape, never by forming a
Kronecker product). ``HessianOperator.hvp`` evaluates this matrix-free
with two bidiagonal solves per product; ``hvp_pearlmutter`` computes the
same quantity by an unrelated forward/backward recursion and exists to
referee it, as do the dense exports and the finite-difference Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import instrument
from .blockmat import BlockDiagonal, BlockLowerBidiagonal, ShiftOperator
from .pipeline import EvaluationPoint, Pipeline

__all__ = [
    "DENSE_DIM_LIMIT",
    "AdjointContraction",
    "HessianOperator",
    "HvpWorkspace",
    "adjoint_contract",
    "hvp_pearlmutter",
    "dense_hessian",
    "finite_diff_hessian",
]

DENSE_DIM_LIMIT = 2000


def adjoint_contract(b: np.ndarray, stacked: np.ndarray, inner: int) -> np.ndarray:
    """Apply (I_inner kron b) to a stacked derivative block.

    ``stacked`` has a*inner rows (row i + a*q for output component i,
    slot q) and any number of columns; the result has ``inner`` rows.
    Works on vectors too (treated as a single column).
    """
    b = np.asarray(b)
    a = b.size
    w = np.asarray(stacked)
    squeeze = w.ndim == 1
    cols = 1 if squeeze else w.shape[1]
    if w.shape[0] != a * inner:
        raise ValueError(
            f"stacked block has {w.shape[0]} rows, expected {a}*{inner}"
        )
    cube = w.reshape(a, inner, cols, order="F")
    out = np.einsum("i,iqc->qc", b, cube)
    instrument.add_flops(2 * a * inner * cols)
    return out[:, 0] if squeeze else out


@dataclass(frozen=True)
class AdjointContraction:
    """Block-diagonal contraction against per-layer adjoint rows.

    Block l acts like I_{inner_l} kron b_l (an inner_l x a_l*inner_l
    matrix) but is applied by reshape-and-contract; the Kronecker form
    is materialized only by :meth:`to_dense` for small verification
    runs.
    """

    b_blocks: tuple[np.ndarray, ...]
    inner_dims: tuple[int, ...]

    def __init__(self, b_blocks: Sequence[np.ndarray], inner_dims: Sequence[int]):
        rows = tuple(np.asarray(b, dtype=np.float64).ravel() for b in b_blocks)
        inner = tuple(int(d) for d in inner_dims)
        if len(rows) != len(inner):
            raise ValueError(
                f"{len(rows)} adjoint rows but {len(inner)} inner dims"
            )
        object.__setattr__(self, "b_blocks", rows)
        object.__setattr__(self, "inner_dims", inner)

    @property
    def row_dims(self) -> tuple[int, ...]:
        return self.inner_dims

    @property
    def col_dims(self) -> tuple[int, ...]:
        return tuple(
            b.size * q for b, q in zip(self.b_blocks, self.inner_dims)
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (sum(self.row_dims), sum(self.col_dims))

    def block_apply(self, l: int, stacked: np.ndarray) -> np.ndarray:
        """Contract one layer's stacked block (vector or matrix)."""
        return adjoint_contract(self.b_blocks[l], stacked, self.inner_dims[l])

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.shape[1],):
            raise ValueError(f"x has shape {x.shape}, expected ({self.shape[1]},)")
        out = np.empty(self.shape[0])
        i = j = 0
        for b, q in zip(self.b_blocks, self.inner_dims):
            out[i:i + q] = adjoint_contract(b, x[j:j + b.size * q], q)
            i += q
            j += b.size * q
        return out

    def matvec_transpose(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.shape[0],):
            raise ValueError(f"x has shape {x.shape}, expected ({self.shape[0]},)")
        out = np.empty(self.shape[1])
        i = j = 0
        for b, q in zip(self.b_blocks, self.inner_dims):
            out[j:j + b.size * q] = np.outer(b, x[i:i + q]).reshape(-1, order="F")
            instrument.add_flops(b.size * q)
            i += q
            j += b.size * q
        return out

    def to_dense(self) -> np.ndarray:
        blocks = [
            np.kron(np.eye(q), b.reshape(1, -1))
            for b, q in zip(self.b_blocks, self.inner_dims)
        ]
        return BlockDiagonal(blocks).to_dense()


@dataclass(frozen=True, eq=False)
class HvpWorkspace:
    """Caller-owned scratch for repeated Hessian-vector products.

    Holds the stacked second-derivative products and output segments of
    one hvp evaluation, so a sequence of products with identical shapes
    (a dense export, a CG loop) reallocates nothing. A workspace may be
    shared across calls but not across threads; the returned product
    aliases ``out``.
    """

    wx: np.ndarray
    wz: np.ndarray
    direct: np.ndarray
    r: np.ndarray
    out: np.ndarray
    wx_offsets: tuple[int, ...]
    wz_offsets: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class HessianOperator:
    """The loss Hessian at an evaluated point, held in structured form."""

    point: EvaluationPoint
    b_blocks: tuple[np.ndarray, ...]
    m: BlockLowerBidiagonal
    d_x: BlockDiagonal
    shift: ShiftOperator
    c_x: AdjointContraction
    c_z: AdjointContraction
    d_xx: BlockDiagonal
    d_zx: BlockDiagonal
    d_xz: BlockDiagonal
    d_zz: BlockDiagonal

    @classmethod
    def assemble(cls, point: EvaluationPoint) -> "HessianOperator":
        pipe = point.pipeline
        if pipe.out_dim != 1:
            raise ValueError("Hessian requires a scalar-output pipeline")
        if point.derivs is None:
            raise ValueError("point was evaluated without derivatives")
        derivs = point.derivs
        b_blocks = pipe.backprop_rows(point)
        state_dims = pipe.state_dims
        in_dims = (pipe.in_dim,) + state_dims[:-1]
        return cls(
            point=point,
            b_blocks=b_blocks,
            m=BlockLowerBidiagonal.unit(
                state_dims, [-d.jac_z for d in derivs[1:]]
            ),
            d_x=BlockDiagonal([d.jac_x for d in derivs]),
            shift=ShiftOperator(in_dims=state_dims, out_dims=in_dims),
            c_x=AdjointContraction(b_blocks, pipe.param_dims),
            c_z=AdjointContraction(b_blocks, in_dims),
            d_xx=BlockDiagonal([d.hess_xx for d in derivs]),
            d_zx=BlockDiagonal([d.hess_zx for d in derivs]),
            d_xz=BlockDiagonal([d.hess_xz for d in derivs]),
            d_zz=BlockDiagonal([d.hess_zz for d in derivs]),
        )

    @property
    def pipeline(self) -> Pipeline:
        return self.point.pipeline

    @property
    def n(self) -> int:
        return self.pipeline.total_params

    def make_workspace(self) -> HvpWorkspace:
        pipe = self.pipeline
        a_dims = pipe.state_dims
        p_dims = pipe.param_dims
        in_dims = self.shift.out_dims
        wx_off = np.concatenate(
            ([0], np.cumsum([a * p for a, p in zip(a_dims, p_dims)]))
        )
        wz_off = np.concatenate(
            ([0], np.cumsum([a * q for a, q in zip(a_dims, in_dims)]))
        )
        ws = HvpWorkspace(
            wx=np.zeros(wx_off[-1]),
            wz=np.zeros(wz_off[-1]),
            direct=np.zeros(self.n),
            r=np.zeros(sum(in_dims)),
            out=np.zeros(self.n),
            wx_offsets=tuple(int(o) for o in wx_off),
            wz_offsets=tuple(int(o) for o in wz_off),
        )
        instrument.alloc_bytes(
            ws.wx.nbytes + ws.wz.nbytes + ws.direct.nbytes
            + ws.r.nbytes + ws.out.nbytes
        )
        return ws

    def _split(self, v, dims):
        off = np.concatenate(([0], np.cumsum(dims)))
        return [v[off[k]:off[k + 1]] for k in range(len(dims))]

    def hvp(
        self,
        v: np.ndarray,
        eps: float = 0.0,
        backend: str | None = None,
        workspace: HvpWorkspace | None = None,
    ) -> np.ndarray:
        """One exact (H + eps I) v product.

        When ``workspace`` is passed the result aliases its ``out``
        buffer, valid until the next call with that workspace.
        """
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n,):
            raise ValueError(f"v has shape {v.shape}, expected ({self.n},)")
        pipe = self.pipeline
        derivs = self.point.derivs
        p_dims = pipe.param_dims
        a_dims = pipe.state_dims
        in_dims = self.shift.out_dims
        ws = workspace if workspace is not None else self.make_workspace()

        dz = self.m.solve(self.d_x.matvec(v), backend=backend)
        s = self.shift.apply(dz)

        v_parts = self._split(v, p_dims)
        s_parts = self._split(s, in_dims)
        poff = np.concatenate(([0], np.cumsum(p_dims)))
        soff = np.concatenate(([0], np.cumsum(in_dims)))
        for l, d in enumerate(derivs):
            a, p, npre = a_dims[l], p_dims[l], in_dims[l]
            w_x = ws.wx[ws.wx_offsets[l]:ws.wx_offsets[l + 1]]
            np.dot(d.hess_xx, v_parts[l], out=w_x)
            w_x += d.hess_zx @ s_parts[l]
            instrument.add_flops(
                instrument.gemv_flops(*d.hess_xx.shape)
                + instrument.gemv_flops(*d.hess_zx.shape) + a * p
            )
            ws.direct[poff[l]:poff[l + 1]] = self.c_x.block_apply(l, w_x)
            w_z = ws.wz[ws.wz_offsets[l]:ws.wz_offsets[l + 1]]
            np.dot(d.hess_xz, v_parts[l], out=w_z)
            w_z += d.hess_zz @ s_parts[l]
            instrument.add_flops(
                instrument.gemv_flops(*d.hess_xz.shape)
                + instrument.gemv_flops(*d.hess_zz.shape) + a * npre
            )
            ws.r[soff[l]:soff[l + 1]] = self.c_z.block_apply(l, w_z)

        u = self.m.solve_transpose(
            self.shift.apply_transpose(ws.r), backend=backend
        )
        out = ws.out
        np.copyto(out, ws.direct)
        out += self.d_x.matvec_transpose(u)
        instrument.add_flops(self.n)
        if eps != 0.0:
            out += eps * v
            instrument.add_flops(2 * self.n)
        return out

    def dense_parts(self) -> dict[str, np.ndarray]:
        """Dense versions of every structured factor (testing aid).

        Keys: ``m``, ``p`` (the shift), ``d_x``, the stacked second
        derivatives ``d_xx``/``d_zx``/``d_xz``/``d_zz``, and the
        adjoint contractions ``c_x``/``c_z``.
        """
        return {
            "m": self.m.to_dense(),
            "p": self.shift.to_dense(),
            "d_x": self.d_x.to_dense(),
            "d_xx": self.d_xx.to_dense(),
            "d_zx": self.d_zx.to_dense(),
            "d_xz": self.d_xz.to_dense(),
            "d_zz": self.d_zz.to_dense(),
            "c_x": self.c_x.to_dense(),
            "c_z": self.c_z.to_dense(),
        }

    def dense(self, eps: float = 0.0, max_dim: int = DENSE_DIM_LIMIT) -> np.ndarray:
        """Dense Hessian by composing the four terms with explicit matrices.

        Debugging/verification aid; refuses pipelines with more than
        ``max_dim`` parameters. Independent of :func:`dense_hessian`,
        which loops hvp over basis vectors instead.
        """
        if self.n > max_dim:
            raise ValueError(
                f"dense export limited to {max_dim} parameters, have {self.n}"
            )
        parts = self.dense_parts()
        inner = parts["p"] @ np.linalg.solve(parts["m"], parts["d_x"])
        c_x, c_z = parts["c_x"], parts["c_z"]
        h = (
            c_x @ parts["d_xx"]
            + c_x @ parts["d_zx"] @ inner
            + inner.T @ c_z @ parts["d_xz"]
            + inner.T @ c_z @ parts["d_zz"] @ inner
        )
        if eps != 0.0:
            h = h + eps * np.eye(self.n)
        return h


def dense_hessian(
    h: HessianOperator, eps: float = 0.0, max_dim: int = DENSE_DIM_LIMIT
) -> np.ndarray:
    """Full (H + eps I) by applying hvp to every basis vector.

    Guarded to ``max_dim`` parameters; the result is *not* symmetrized,
    so symmetry checks on it are meaningful.
    """
    n = h.n
    if n > max_dim:
        raise ValueError(f"dense export limited to {max_dim} parameters, have {n}")
    ws = h.make_workspace()
    out = np.empty((n, n))
    e = np.zeros(n)
    for i in range(n):
        e[i] = 1.0
        out[:, i] = h.hvp(e, eps=eps, workspace=ws)
        e[i] = 0.0
    return out


def hvp_pearlmutter(point: EvaluationPoint, v: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Hessian-vector product by forward/backward directional recursion.

    Pushes the direction through the pipeline (tangent states), then
    runs a second adjoint sweep that accumulates curvature terms. No
    bidiagonal solves, no shift operator: an independent referee for
    :meth:`HessianOperator.hvp`.
    """
    pipe = point.pipeline
    if pipe.out_dim != 1:
        raise ValueError("Hessian requires a scalar-output pipeline")
    derivs = point.derivs
    if derivs is None:
        raise ValueError("point was evaluated without derivatives")
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (pipe.total_params,):
        raise ValueError(f"v has shape {v.shape}, expected ({pipe.total_params},)")
    v_parts = list(pipe.split_params(v))
    b_blocks = pipe.backprop_rows(point)
    depth = pipe.depth
    a_dims = pipe.state_dims
    in_dims = (pipe.in_dim,) + a_dims[:-1]

    # forward: tangent states under direction v (tangent of z0 is zero)
    tangents = [np.zeros(pipe.in_dim)]
    for l, d in enumerate(derivs):
        t = d.jac_z @ tangents[l] + d.jac_x @ v_parts[l]
        instrument.add_flops(
            instrument.gemv_flops(*d.jac_z.shape)
            + instrument.gemv_flops(*d.jac_x.shape) + a_dims[l]
        )
        tangents.append(t)

    # backward: curvature adjoint rows
    bdot = np.zeros(a_dims[-1])
    out_parts = [None] * depth
    for l in range(depth - 1, -1, -1):
        d = derivs[l]
        a, p, npre = a_dims[l], pipe.param_dims[l], in_dims[l]
        w_x = d.hess_zx @ tangents[l] + d.hess_xx @ v_parts[l]
        instrument.add_flops(
            instrument.gemv_flops(*d.hess_zx.shape)
            + instrument.gemv_flops(*d.hess_xx.shape) + a * p
        )
        cube = w_x.reshape(a, p, order="F")
        out_parts[l] = bdot @ d.jac_x + b_blocks[l] @ cube
        instrument.add_flops(
            instrument.gemv_flops(*d.jac_x.shape) + 2 * a * p + p
        )
        if l > 0:
            w_z = d.hess_zz @ tangents[l] + d.hess_xz @ v_parts[l]
            instrument.add_flops(
                instrument.gemv_flops(*d.hess_zz.shape)
                + instrument.gemv_flops(*d.hess_xz.shape) + a * npre
            )
            bdot = bdot @ d.jac_z + b_blocks[l] @ w_z.reshape(a, npre, order="F")
            instrument.add_flops(
                instrument.gemv_flops(*d.jac_z.shape) + 2 * a * npre + npre
            )
    out = np.concatenate(out_parts)
    if eps != 0.0:
        out += eps * v
        instrument.add_flops(2 * v.size)
    return out


def finite_diff_hessian(point: EvaluationPoint, step: float = 1e-5) -> np.ndarray:
    """Central differences of the analytic gradient, column by column."""
    pipe = point.pipeline
    flat = pipe.join_params(point.params)
    n = flat.size

    def grad(x):
        pt = pipe.forward(point.z0, x)
        return pipe.gradient(pt)

    h = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = step
        h[:, k] = (grad(flat + e) - grad(flat - e)) / (2.0 * step)
    return 0.5 * (h + h.T)
