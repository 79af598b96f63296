"""Structured block matrix types: diagonal, bidiagonal, banded, tridiagonal.

Everything here is shape-generic: blocks may be rectangular and block
sizes may vary from position to position. Vectors passed between these
operators are flat stacks of per-block segments.

The ``vec``/``unvec`` helpers fix the matrix-to-vector convention used
throughout the package: column-major. Under that convention
``vec(A @ B @ C) == kron(C.T, A) @ vec(B)``, which is what lets
Kronecker-structured operators be applied by reshape-and-multiply
instead of forming any Kronecker product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import instrument
from .kernels import get_kernels

__all__ = [
    "SingularPivotBlock",
    "vec",
    "unvec",
    "BlockDiagonal",
    "BlockLowerBidiagonal",
    "ShiftOperator",
    "CommutationPermutation",
    "BlockBanded",
    "BlockTridiagonal",
    "LDUFactorization",
    "pivot_to_tridiagonal",
    "block_diag_matvec",
    "lower_bidiag_solve",
    "lower_bidiag_solve_transpose",
    "shift_apply",
    "commutation_apply",
    "block_ldu_factorize",
    "ldu_solve",
]


class SingularPivotBlock(RuntimeError):
    """Raised when a Schur-complement pivot block is numerically singular.

    ``block_index`` is the (0-based) index of the offending pivot.
    """

    def __init__(self, block_index: int, message: str | None = None):
        self.block_index = block_index
        super().__init__(
            message
            or f"pivot block {block_index} is singular to working precision"
        )


def vec(a: np.ndarray) -> np.ndarray:
    """Column-major flattening of a matrix."""
    return np.asarray(a).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec`: reshape a flat vector to (rows, cols) column-major."""
    v = np.asarray(v)
    if v.size != rows * cols:
        raise ValueError(f"cannot unvec length {v.size} into ({rows}, {cols})")
    return v.reshape((rows, cols), order="F")


def _as_block(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_vec(x, n: int, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class BlockDiagonal:
    """Block diagonal operator with (possibly rectangular) dense blocks."""

    blocks: tuple[np.ndarray, ...]

    def __init__(self, blocks: Sequence[np.ndarray]):
        object.__setattr__(
            self,
            "blocks",
            tuple(_as_block(b, f"block {i}") for i, b in enumerate(blocks)),
        )
        if not self.blocks:
            raise ValueError("BlockDiagonal needs at least one block")

    @property
    def row_dims(self) -> tuple[int, ...]:
        return tuple(b.shape[0] for b in self.blocks)

    @property
    def col_dims(self) -> tuple[int, ...]:
        return tuple(b.shape[1] for b in self.blocks)

    @property
    def shape(self) -> tuple[int, int]:
        return (sum(self.row_dims), sum(self.col_dims))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = _check_vec(x, self.shape[1])
        out = np.empty(self.shape[0])
        i = j = 0
        for b in self.blocks:
            m, n = b.shape
            out[i:i + m] = b @ x[j:j + n]
            instrument.add_flops(instrument.gemv_flops(m, n))
            i += m
            j += n
        return out

    def matvec_transpose(self, x: np.ndarray) -> np.ndarray:
        x = _check_vec(x, self.shape[0])
        out = np.empty(self.shape[1])
        i = j = 0
        for b in self.blocks:
            m, n = b.shape
            out[j:j + n] = b.T @ x[i:i + m]
            instrument.add_flops(instrument.gemv_flops(n, m))
            i += m
            j += n
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        i = j = 0
        for b in self.blocks:
            m, n = b.shape
            out[i:i + m, j:j + n] = b
            i += m
            j += n
        return out


@dataclass(frozen=True)
class BlockLowerBidiagonal:
    """Block lower bidiagonal operator with explicit diagonal blocks.

    Row block j holds ``diagonal_blocks[j]`` on the diagonal and
    ``subdiagonal_blocks[j-1]`` at column block j-1. The substitution
    solvers require every diagonal block to be the identity (the only
    case this package ever solves against), so they sweep once and
    never divide; use :meth:`unit` to build that form directly.
    """

    diagonal_blocks: tuple[np.ndarray, ...]
    subdiagonal_blocks: tuple[np.ndarray, ...]

    def __init__(
        self,
        diagonal_blocks: Sequence[np.ndarray],
        subdiagonal_blocks: Sequence[np.ndarray],
    ):
        diags = tuple(
            _as_block(b, f"diagonal block {j}") for j, b in enumerate(diagonal_blocks)
        )
        if not diags:
            raise ValueError("need at least one diagonal block")
        for j, b in enumerate(diags):
            if b.shape[0] != b.shape[1]:
                raise ValueError(f"diagonal block {j} is not square: {b.shape}")
        dims = tuple(b.shape[0] for b in diags)
        subs = tuple(
            _as_block(b, f"subdiagonal block {j}")
            for j, b in enumerate(subdiagonal_blocks)
        )
        if len(subs) != len(dims) - 1:
            raise ValueError(
                f"{len(dims)} diagonal blocks need {len(dims) - 1} subdiagonal "
                f"blocks, got {len(subs)}"
            )
        for j, b in enumerate(subs):
            want = (dims[j + 1], dims[j])
            if b.shape != want:
                raise ValueError(
                    f"subdiagonal block {j} has shape {b.shape}, expected {want}"
                )
        object.__setattr__(self, "diagonal_blocks", diags)
        object.__setattr__(self, "subdiagonal_blocks", subs)

    @classmethod
    def unit(
        cls, dims: Sequence[int], subdiagonal_blocks: Sequence[np.ndarray]
    ) -> "BlockLowerBidiagonal":
        """Build with identity diagonal blocks of the given sizes."""
        return cls([np.eye(int(d)) for d in dims], subdiagonal_blocks)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(b.shape[0] for b in self.diagonal_blocks)

    @property
    def n(self) -> int:
        return sum(self.dims)

    @cached_property
    def has_unit_diagonal(self) -> bool:
        return all(
            np.array_equal(b, np.eye(b.shape[0])) for b in self.diagonal_blocks
        )

    @cached_property
    def _padded(self) -> tuple[np.ndarray, np.ndarray]:
        dims = np.asarray(self.dims, dtype=np.int64)
        dmax = int(dims.max())
        sub = np.zeros((max(len(self.subdiagonal_blocks), 1), dmax, dmax))
        for j, b in enumerate(self.subdiagonal_blocks):
            sub[j, :b.shape[0], :b.shape[1]] = b
        instrument.alloc_bytes(sub.nbytes + dims.nbytes)
        return sub, dims

    def _solve_flops(self) -> int:
        return sum(
            instrument.gemv_flops(b.shape[0], b.shape[1]) + b.shape[0]
            for b in self.subdiagonal_blocks
        )

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = _check_vec(x, self.n)
        out = np.empty(self.n)
        off = np.concatenate(([0], np.cumsum(self.dims)))
        for j, b in enumerate(self.diagonal_blocks):
            out[off[j]:off[j + 1]] = b @ x[off[j]:off[j + 1]]
            instrument.add_flops(instrument.gemv_flops(*b.shape))
        for j, b in enumerate(self.subdiagonal_blocks):
            out[off[j + 1]:off[j + 2]] += b @ x[off[j]:off[j + 1]]
            instrument.add_flops(instrument.gemv_flops(*b.shape) + b.shape[0])
        return out

    def matvec_transpose(self, x: np.ndarray) -> np.ndarray:
        x = _check_vec(x, self.n)
        out = np.empty(self.n)
        off = np.concatenate(([0], np.cumsum(self.dims)))
        for j, b in enumerate(self.diagonal_blocks):
            out[off[j]:off[j + 1]] = b.T @ x[off[j]:off[j + 1]]
            instrument.add_flops(instrument.gemv_flops(*b.shape))
        for j, b in enumerate(self.subdiagonal_blocks):
            out[off[j]:off[j + 1]] += b.T @ x[off[j + 1]:off[j + 2]]
            instrument.add_flops(instrument.gemv_flops(*b.shape) + b.shape[1])
        return out

    def _require_unit_diagonal(self) -> None:
        if not self.has_unit_diagonal:
            raise ValueError(
                "substitution solve requires identity diagonal blocks"
            )

    def solve(self, rhs: np.ndarray, backend: str | None = None) -> np.ndarray:
        """Forward substitution for M y = rhs (M must have unit diagonal)."""
        rhs = _check_vec(rhs, self.n, "rhs")
        self._require_unit_diagonal()
        sub, dims = self._padded
        kern = get_kernels(backend)
        out = kern.bidiag_lower_solve(sub, dims, rhs, False)
        instrument.add_flops(self._solve_flops())
        instrument.alloc_bytes(out.nbytes)
        return out

    def solve_transpose(self, rhs: np.ndarray, backend: str | None = None) -> np.ndarray:
        """Backward substitution for M^T y = rhs (M must have unit diagonal)."""
        rhs = _check_vec(rhs, self.n, "rhs")
        self._require_unit_diagonal()
        sub, dims = self._padded
        kern = get_kernels(backend)
        out = kern.bidiag_lower_solve(sub, dims, rhs, True)
        instrument.add_flops(self._solve_flops())
        instrument.alloc_bytes(out.nbytes)
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        off = np.concatenate(([0], np.cumsum(self.dims)))
        for j, b in enumerate(self.diagonal_blocks):
            out[off[j]:off[j + 1], off[j]:off[j + 1]] = b
        for j, b in enumerate(self.subdiagonal_blocks):
            out[off[j + 1]:off[j + 2], off[j]:off[j + 1]] = b
        return out


@dataclass(frozen=True)
class ShiftOperator:
    """Block down-shift: output block j is input block j-1, output block 0 is zero.

    Rectangular in general: with input block dims (c_1, ..., c_n) the
    output block dims are (r_1, c_1, ..., c_{n-1}) where r_1 is the
    (free) dimension of the zero first output block.
    """

    in_dims: tuple[int, ...]
    out_dims: tuple[int, ...]

    def __init__(self, in_dims: Sequence[int], out_dims: Sequence[int]):
        in_dims = tuple(int(d) for d in in_dims)
        out_dims = tuple(int(d) for d in out_dims)
        if len(in_dims) != len(out_dims):
            raise ValueError(
                f"block counts differ: {len(in_dims)} in, {len(out_dims)} out"
            )
        for j in range(1, len(out_dims)):
            if out_dims[j] != in_dims[j - 1]:
                raise ValueError(
                    f"output block {j} has dim {out_dims[j]} but input block "
                    f"{j - 1} has dim {in_dims[j - 1]}"
                )
        object.__setattr__(self, "in_dims", in_dims)
        object.__setattr__(self, "out_dims", out_dims)

    @classmethod
    def square(cls, dims: Sequence[int]) -> "ShiftOperator":
        """The homogeneous case: block j shifts to block j+1 of the same size."""
        return cls(dims, dims)

    @property
    def shape(self) -> tuple[int, int]:
        return (sum(self.out_dims), sum(self.in_dims))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = _check_vec(x, self.shape[1])
        keep = sum(self.in_dims[:-1])
        out = np.zeros(self.shape[0])
        out[self.out_dims[0]:] = x[:keep]
        return out

    def apply_transpose(self, x: np.ndarray) -> np.ndarray:
        x = _check_vec(x, self.shape[0])
        out = np.zeros(self.shape[1])
        out[:sum(self.in_dims[:-1])] = x[self.out_dims[0]:]
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        r = self.out_dims[0]
        c = 0
        for j in range(1, len(self.out_dims)):
            d = self.out_dims[j]
            out[r:r + d, c:c + d] = np.eye(d)
            r += d
            c += d
        return out


@dataclass(frozen=True)
class CommutationPermutation:
    """Reordering between group-major and interleaved block stacking.

    Built from a grid of block dims ``group_dims[g][j]`` (group g,
    position j). Group-major stacks all of group 0, then group 1, ...;
    interleaved stacks position 0 of every group, then position 1, ...
    ``apply`` maps group-major to interleaved; ``apply_inverse`` maps
    back. The permutation is its own inverse only when the grid is
    square and the dims are symmetric under transposing it, so both
    directions are kept explicit.
    """

    group_dims: tuple[tuple[int, ...], ...]
    perm: np.ndarray = field(compare=False)

    def __init__(self, group_dims: Sequence[Sequence[int]]):
        gd = tuple(tuple(int(d) for d in g) for g in group_dims)
        if not gd or any(len(g) != len(gd[0]) for g in gd):
            raise ValueError("group_dims must be a non-empty rectangular grid")
        # start offset of each (group, position) segment in group-major order
        starts = {}
        off = 0
        for g, dims in enumerate(gd):
            for j, d in enumerate(dims):
                starts[(g, j)] = off
                off += d
        perm = np.empty(off, dtype=np.intp)
        k = 0
        for j in range(len(gd[0])):
            for g in range(len(gd)):
                d = gd[g][j]
                s = starts[(g, j)]
                perm[k:k + d] = np.arange(s, s + d)
                k += d
        object.__setattr__(self, "group_dims", gd)
        object.__setattr__(self, "perm", perm)

    @property
    def n(self) -> int:
        return self.perm.size

    @property
    def outer_count(self) -> int:
        """Number of variable groups being interleaved."""
        return len(self.group_dims)

    @property
    def interleaved_dims(self) -> tuple[int, ...]:
        """Block dims of the interleaved ordering: one block per position."""
        return tuple(
            sum(g[j] for g in self.group_dims) for j in range(len(self.group_dims[0]))
        )

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Group-major vector -> interleaved vector."""
        x = _check_vec(x, self.n)
        return x[self.perm]

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        """Interleaved vector -> group-major vector."""
        x = _check_vec(x, self.n)
        out = np.empty_like(x)
        out[self.perm] = x
        return out

    def permute_dense(self, a: np.ndarray) -> np.ndarray:
        """Conjugate a dense group-major matrix into interleaved ordering."""
        a = _as_block(a, "a")
        if a.shape != (self.n, self.n):
            raise ValueError(f"matrix shape {a.shape} does not match n={self.n}")
        return a[np.ix_(self.perm, self.perm)]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out[np.arange(self.n), self.perm] = 1.0
        return out


@dataclass(frozen=True)
class BlockBanded:
    """Block matrix stored by diagonal lanes, rectangular blocks allowed.

    Row partition ``row_dims`` and column partition ``col_dims`` must have
    the same number of blocks. ``lanes[o]`` holds the blocks of diagonal
    offset o -- block (i, i+o) -- listed top to bottom; missing lanes are
    zero. This is the storage for each cell of the grouped grid that
    :func:`pivot_to_tridiagonal` gathers from.
    """

    row_dims: tuple[int, ...]
    col_dims: tuple[int, ...]
    lanes: dict[int, tuple[np.ndarray, ...]] = field(compare=False)

    def __init__(
        self,
        row_dims: Sequence[int],
        col_dims: Sequence[int],
        lanes: dict[int, Sequence[np.ndarray]],
    ):
        row_dims = tuple(int(d) for d in row_dims)
        col_dims = tuple(int(d) for d in col_dims)
        if len(row_dims) != len(col_dims):
            raise ValueError(
                f"row and column partitions must have the same block count, "
                f"got {len(row_dims)} and {len(col_dims)}"
            )
        n = len(row_dims)
        clean: dict[int, tuple[np.ndarray, ...]] = {}
        for o, blocks in lanes.items():
            o = int(o)
            if abs(o) >= n:
                raise ValueError(f"lane offset {o} out of range for {n} blocks")
            blocks = tuple(
                _as_block(b, f"lane {o} block {j}") for j, b in enumerate(blocks)
            )
            if len(blocks) != n - abs(o):
                raise ValueError(
                    f"lane {o} needs {n - abs(o)} blocks, got {len(blocks)}"
                )
            for j, b in enumerate(blocks):
                i = j if o >= 0 else j - o
                want = (row_dims[i], col_dims[i + o])
                if b.shape != want:
                    raise ValueError(
                        f"lane {o} block {j} has shape {b.shape}, expected {want}"
                    )
            clean[o] = blocks
        object.__setattr__(self, "row_dims", row_dims)
        object.__setattr__(self, "col_dims", col_dims)
        object.__setattr__(self, "lanes", clean)

    @property
    def shape(self) -> tuple[int, int]:
        return (sum(self.row_dims), sum(self.col_dims))

    def block(self, i: int, j: int) -> np.ndarray:
        """Dense block at grid position (i, j); zeros where no lane is stored."""
        n = len(self.row_dims)
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"block index ({i}, {j}) out of range for {n} blocks")
        o = j - i
        blocks = self.lanes.get(o)
        if blocks is None:
            return np.zeros((self.row_dims[i], self.col_dims[j]))
        return blocks[min(i, j)]

    def widest_nonzero_offset(self) -> int:
        """Largest |offset| among lanes holding any nonzero entry (0 if none)."""
        widest = 0
        for o, blocks in self.lanes.items():
            if any(np.any(b != 0.0) for b in blocks):
                widest = max(widest, abs(o))
        return widest

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        roff = np.concatenate(([0], np.cumsum(self.row_dims)))
        coff = np.concatenate(([0], np.cumsum(self.col_dims)))
        for o, blocks in self.lanes.items():
            for j, b in enumerate(blocks):
                i = j if o >= 0 else j - o
                out[roff[i]:roff[i + 1], coff[i + o]:coff[i + o + 1]] = b
        return out


def pivot_to_tridiagonal(
    grid: Sequence[Sequence[BlockBanded | None]],
    perm: CommutationPermutation,
) -> BlockTridiagonal:
    """Gather a grouped grid of banded cells into its interleaved tridiagonal.

    ``grid[u][v]`` is the cell coupling group u (rows) to group v
    (columns), partitioned over positions by ``perm.group_dims``; None
    means a zero cell. Conjugating the assembled matrix by ``perm``
    reorders it position-major, where each position's block row collects
    the (i, j) sub-blocks of every cell. Because each cell is at most
    bidiagonal over positions, the result is block tridiagonal; a cell
    with nonzero entries beyond offset +-1 signals a construction bug
    and raises.
    """
    gd = perm.group_dims
    g = len(gd)
    npos = len(gd[0])
    if len(grid) != g or any(len(row) != g for row in grid):
        raise ValueError(f"grid must be {g}x{g} to match the permutation groups")
    for u, row in enumerate(grid):
        for v, cell in enumerate(row):
            if cell is None:
                continue
            if cell.row_dims != gd[u] or cell.col_dims != gd[v]:
                raise ValueError(
                    f"cell ({u}, {v}) partitions {cell.row_dims}x{cell.col_dims} "
                    f"do not match groups {gd[u]}x{gd[v]}"
                )
            widest = cell.widest_nonzero_offset()
            if widest > 1:
                raise ValueError(
                    f"cell ({u}, {v}) has nonzero entries at lane offset "
                    f"{widest}, outside the tridiagonal envelope"
                )

    out_dims = perm.interleaved_dims
    # per-position row offset of each group inside the gathered block
    starts = np.zeros((g, npos), dtype=np.intp)
    for u in range(1, g):
        starts[u] = starts[u - 1] + gd[u - 1]

    def gathered(i: int, j: int) -> np.ndarray:
        b = np.zeros((out_dims[i], out_dims[j]))
        for u in range(g):
            for v in range(g):
                cell = grid[u][v]
                if cell is None:
                    continue
                r, c = starts[u][i], starts[v][j]
                b[r:r + gd[u][i], c:c + gd[v][j]] = cell.block(i, j)
        return b

    diag = [gathered(i, i) for i in range(npos)]
    lower = [gathered(i + 1, i) for i in range(npos - 1)]
    upper = [gathered(i, i + 1) for i in range(npos - 1)]
    return BlockTridiagonal(out_dims, diag, lower, upper)


@dataclass(frozen=True)
class BlockTridiagonal:
    """Square block tridiagonal matrix with per-position block sizes."""

    dims: tuple[int, ...]
    diag: tuple[np.ndarray, ...]
    lower: tuple[np.ndarray, ...]
    upper: tuple[np.ndarray, ...]

    def __init__(self, dims, diag, lower, upper):
        dims = tuple(int(d) for d in dims)
        n = len(dims)
        diag = tuple(_as_block(b, f"diag block {i}") for i, b in enumerate(diag))
        lower = tuple(_as_block(b, f"lower block {i}") for i, b in enumerate(lower))
        upper = tuple(_as_block(b, f"upper block {i}") for i, b in enumerate(upper))
        if len(diag) != n or len(lower) != n - 1 or len(upper) != n - 1:
            raise ValueError(
                f"need {n} diag, {n - 1} lower, {n - 1} upper blocks; got "
                f"{len(diag)}, {len(lower)}, {len(upper)}"
            )
        for i, b in enumerate(diag):
            if b.shape != (dims[i], dims[i]):
                raise ValueError(
                    f"diag block {i} has shape {b.shape}, expected square {dims[i]}"
                )
        for j, b in enumerate(lower):
            if b.shape != (dims[j + 1], dims[j]):
                raise ValueError(
                    f"lower block {j} has shape {b.shape}, "
                    f"expected ({dims[j + 1]}, {dims[j]})"
                )
        for j, b in enumerate(upper):
            if b.shape != (dims[j], dims[j + 1]):
                raise ValueError(
                    f"upper block {j} has shape {b.shape}, "
                    f"expected ({dims[j]}, {dims[j + 1]})"
                )
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "diag", diag)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def n(self) -> int:
        return sum(self.dims)

    @cached_property
    def _padded(self):
        dims = np.asarray(self.dims, dtype=np.int64)
        dmax = int(dims.max())
        nblk = len(self.dims)
        diag = np.zeros((nblk, dmax, dmax))
        lower = np.zeros((max(nblk - 1, 1), dmax, dmax))
        upper = np.zeros((max(nblk - 1, 1), dmax, dmax))
        for i, b in enumerate(self.diag):
            diag[i, :b.shape[0], :b.shape[1]] = b
        for j, b in enumerate(self.lower):
            lower[j, :b.shape[0], :b.shape[1]] = b
        for j, b in enumerate(self.upper):
            upper[j, :b.shape[0], :b.shape[1]] = b
        instrument.alloc_bytes(diag.nbytes + lower.nbytes + upper.nbytes)
        return diag, lower, upper, dims

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = _check_vec(x, self.n)
        off = np.concatenate(([0], np.cumsum(self.dims)))
        out = np.zeros(self.n)
        for i, b in enumerate(self.diag):
            out[off[i]:off[i + 1]] += b @ x[off[i]:off[i + 1]]
            instrument.add_flops(instrument.gemv_flops(*b.shape))
        for j, b in enumerate(self.lower):
            out[off[j + 1]:off[j + 2]] += b @ x[off[j]:off[j + 1]]
            instrument.add_flops(instrument.gemv_flops(*b.shape))
        for j, b in enumerate(self.upper):
            out[off[j]:off[j + 1]] += b @ x[off[j + 1]:off[j + 2]]
            instrument.add_flops(instrument.gemv_flops(*b.shape))
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        off = np.concatenate(([0], np.cumsum(self.dims)))
        for i, b in enumerate(self.diag):
            out[off[i]:off[i + 1], off[i]:off[i + 1]] = b
        for j, b in enumerate(self.lower):
            out[off[j + 1]:off[j + 2], off[j]:off[j + 1]] = b
        for j, b in enumerate(self.upper):
            out[off[j]:off[j + 1], off[j + 1]:off[j + 2]] = b
        return out

    def factorize(self, tol: float = 1e-12, backend: str | None = None) -> "LDUFactorization":
        """Block LDU factorization; raises SingularPivotBlock on breakdown."""
        diag, lower, upper, dims = self._padded
        kern = get_kernels(backend)
        lu, piv, lfac, ufac, fail = kern.ldu_factorize(diag, lower, upper, dims, tol)
        if fail >= 0:
            raise SingularPivotBlock(int(fail))
        flops = 0
        for i, d in enumerate(self.dims):
            flops += instrument.lu_flops(d)
            if i > 0:
                dp = self.dims[i - 1]
                flops += d * instrument.lu_solve_flops(dp) + instrument.gemm_flops(d, dp, d)
            if i < len(self.dims) - 1:
                flops += self.dims[i + 1] * instrument.lu_solve_flops(d)
        instrument.add_flops(flops)
        instrument.alloc_bytes(lu.nbytes + piv.nbytes + lfac.nbytes + ufac.nbytes)
        return LDUFactorization(
            dims=self.dims, lu=lu, piv=piv, lfac=lfac, ufac=ufac,
            backend=kern.backend,
        )


@dataclass(frozen=True)
class LDUFactorization:
    """Factored block tridiagonal system, ready for repeated solves."""

    dims: tuple[int, ...]
    lu: np.ndarray
    piv: np.ndarray
    lfac: np.ndarray
    ufac: np.ndarray
    backend: str

    @property
    def lower_subdiag(self) -> tuple[np.ndarray, ...]:
        """The L-factor subdiagonal blocks, trimmed to their true shapes."""
        return tuple(
            self.lfac[j, :self.dims[j + 1], :self.dims[j]]
            for j in range(len(self.dims) - 1)
        )

    @property
    def upper_superdiag(self) -> tuple[np.ndarray, ...]:
        """The U-factor superdiagonal blocks, trimmed to their true shapes."""
        return tuple(
            self.ufac[j, :self.dims[j], :self.dims[j + 1]]
            for j in range(len(self.dims) - 1)
        )

    @property
    def pivot_blocks(self) -> tuple[np.ndarray, ...]:
        """Each Schur-complement pivot, rebuilt dense from its stored LU."""
        return tuple(self.pivot_block(i) for i in range(len(self.dims)))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = _check_vec(rhs, sum(self.dims), "rhs")
        kern = get_kernels(self.backend)
        dims = np.asarray(self.dims, dtype=np.int64)
        out = kern.ldu_solve(self.lu, self.piv, self.lfac, self.ufac, dims, rhs)
        flops = 0
        for i, d in enumerate(self.dims):
            flops += instrument.lu_solve_flops(d)
            if i > 0:
                flops += instrument.gemv_flops(d, self.dims[i - 1])
            if i < len(self.dims) - 1:
                flops += instrument.gemv_flops(d, self.dims[i + 1])
        instrument.add_flops(flops)
        instrument.alloc_bytes(out.nbytes)
        return out

    def pivot_condition(self) -> float:
        """Crude conditioning proxy: spread of the pivot-block U diagonals."""
        mags = []
        for i, d in enumerate(self.dims):
            mags.extend(abs(self.lu[i, k, k]) for k in range(d))
        mags = np.asarray(mags)
        lo = mags.min()
        return float("inf") if lo == 0.0 else float(mags.max() / lo)

    def pivot_block(self, i: int) -> np.ndarray:
        """Reconstruct the i-th Schur complement S_i from its stored LU."""
        d = self.dims[i]
        lu = self.lu[i, :d, :d]
        lmat = np.tril(lu, -1) + np.eye(d)
        umat = np.triu(lu)
        s = lmat @ umat
        # undo the partial-pivoting row swaps, last first
        for k in range(d - 1, -1, -1):
            p = int(self.piv[i, k])
            if p != k:
                s[[k, p]] = s[[p, k]]
        return s

    def reconstruct_dense(self) -> np.ndarray:
        """Multiply the factors back together (testing aid)."""
        nblk = len(self.dims)
        off = np.concatenate(([0], np.cumsum(self.dims)))
        n = off[-1]
        lmat = np.eye(n)
        dmat = np.zeros((n, n))
        umat = np.eye(n)
        for i, d in enumerate(self.dims):
            dmat[off[i]:off[i + 1], off[i]:off[i + 1]] = self.pivot_block(i)
        for j in range(nblk - 1):
            d, dn = self.dims[j], self.dims[j + 1]
            lmat[off[j + 1]:off[j + 2], off[j]:off[j + 1]] = self.lfac[j, :dn, :d]
            umat[off[j]:off[j + 1], off[j + 1]:off[j + 2]] = self.ufac[j, :d, :dn]
        return lmat @ dmat @ umat


def block_diag_matvec(a: BlockDiagonal, v: np.ndarray) -> np.ndarray:
    """Apply a block-diagonal operator to a conformant stacked vector."""
    return a.matvec(v)


def lower_bidiag_solve(m: BlockLowerBidiagonal, rhs: np.ndarray) -> np.ndarray:
    """Solve M u = rhs by forward substitution (unit-diagonal M)."""
    return m.solve(rhs)


def lower_bidiag_solve_transpose(
    m: BlockLowerBidiagonal, rhs: np.ndarray
) -> np.ndarray:
    """Solve M^T u = rhs by backward substitution (unit-diagonal M)."""
    return m.solve_transpose(rhs)


def shift_apply(p: ShiftOperator, v: np.ndarray) -> np.ndarray:
    """Apply the block downshift: output block j is input block j-1."""
    return p.apply(v)


def commutation_apply(perm: CommutationPermutation, v: np.ndarray) -> np.ndarray:
    """Reorder a group-major stacked vector to interleaved order."""
    return perm.apply(v)


def block_ldu_factorize(
    t: BlockTridiagonal, pivot_tolerance: float = 1e-12
) -> LDUFactorization:
    """Factor a block tridiagonal matrix; raises SingularPivotBlock on breakdown."""
    return t.factorize(tol=pivot_tolerance)


def ldu_solve(f: LDUFactorization, rhs: np.ndarray) -> np.ndarray:
    """Solve against a completed block LDU factorization."""
    return f.solve(rhs)
