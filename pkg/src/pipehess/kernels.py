"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

The kernels operate on padded block stacks: a sequence of heterogeneous
blocks is stored as one (n, dmax, dmax) array plus an int64 ``dims``
vector giving each block's true side. Stacked vectors are flat, with
block offsets derived from ``dims``.

Backend selection: the ``PIPEHESS_BACKEND`` environment variable may be
set to ``numba`` or ``numpy``; the default is numba when it imports,
numpy otherwise. ``get_kernels`` can also be asked for a specific
backend at runtime, which is how the benchmark compares the two.

Each kernel is written as a single self-contained function (no helper
calls) so the same source compiles under ``numba.njit`` and runs
unchanged as plain Python.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

BACKEND_ENV = "PIPEHESS_BACKEND"

_KERNEL_NAMES = ("bidiag_lower_solve", "ldu_factorize", "ldu_solve")
_namespaces: dict[str, SimpleNamespace] = {}


def bidiag_lower_solve(sub, dims, rhs, transpose):
    """Solve M y = rhs (or M^T y = rhs) for unit-diagonal block lower bidiagonal M.

    ``sub[j]`` holds the block in row j+1, column j, of shape
    (dims[j+1], dims[j]), padded into a (n-1, dmax, dmax) array.
    """
    n = dims.shape[0]
    offs = np.zeros(n + 1, np.int64)
    for i in range(n):
        offs[i + 1] = offs[i] + dims[i]
    out = rhs.copy()
    if not transpose:
        for j in range(1, n):
            d, dp = dims[j], dims[j - 1]
            blk = np.ascontiguousarray(sub[j - 1][:d, :dp])
            out[offs[j]:offs[j] + d] -= np.dot(blk, out[offs[j - 1]:offs[j - 1] + dp])
    else:
        for j in range(n - 2, -1, -1):
            d, dn = dims[j], dims[j + 1]
            blk = np.ascontiguousarray(sub[j][:dn, :d].T)
            out[offs[j]:offs[j] + d] -= np.dot(blk, out[offs[j + 1]:offs[j + 1] + dn])
    return out


def ldu_factorize(diag, lower, upper, dims, tol):
    """Block LDU factorization of a block tridiagonal matrix.

    Runs the Schur-complement recursion: S_1 = B_11, then for i > 1
    lfac_{i-1} = B_{i,i-1} S_{i-1}^{-1} (computed by transposed solves
    against the factored pivot block, never an explicit inverse) and
    S_i = B_ii - lfac_{i-1} B_{i-1,i}. Each S_i is LU-factored in place
    with partial pivoting; ufac_i = S_i^{-1} B_{i,i+1}.

    Returns (lu, piv, lfac, ufac, fail) where ``fail`` is the index of
    the first pivot block whose factorization hit a pivot of magnitude
    <= tol * max|S_i| (-1 when the factorization succeeded).
    """
    n = dims.shape[0]
    dmax = diag.shape[1]
    lu = diag.copy()
    piv = np.zeros((n, dmax), np.int64)
    lfac = np.zeros_like(lower)
    ufac = np.zeros_like(upper)
    for i in range(n):
        d = dims[i]
        if i > 0:
            dp = dims[i - 1]
            # lfac[i-1] = B_{i,i-1} S_{i-1}^{-1}: row r solves S^T w = B[r,:]
            for r in range(d):
                w = lower[i - 1][r, :dp].copy()
                for k in range(dp):          # U^T forward
                    s = w[k]
                    for j in range(k):
                        s -= lu[i - 1][j, k] * w[j]
                    w[k] = s / lu[i - 1][k, k]
                for k in range(dp - 1, -1, -1):  # L^T backward (unit diag)
                    s = w[k]
                    for j in range(k + 1, dp):
                        s -= lu[i - 1][j, k] * w[j]
                    w[k] = s
                for k in range(dp - 1, -1, -1):  # undo the row swaps
                    p = piv[i - 1][k]
                    if p != k:
                        tmp = w[k]
                        w[k] = w[p]
                        w[p] = tmp
                lfac[i - 1][r, :dp] = w
            blk = np.dot(np.ascontiguousarray(lfac[i - 1][:d, :dp]),
                         np.ascontiguousarray(upper[i - 1][:dp, :d]))
            lu[i][:d, :d] -= blk
        # LU with partial pivoting of the Schur complement S_i, in place
        scale = 0.0
        for r in range(d):
            for c in range(d):
                v = abs(lu[i][r, c])
                if v > scale:
                    scale = v
        for k in range(d):
            p = k
            best = abs(lu[i][k, k])
            for r in range(k + 1, d):
                v = abs(lu[i][r, k])
                if v > best:
                    best = v
                    p = r
            if best <= tol * scale:
                return lu, piv, lfac, ufac, i
            piv[i][k] = p
            if p != k:
                for c in range(d):
                    tmp = lu[i][k, c]
                    lu[i][k, c] = lu[i][p, c]
                    lu[i][p, c] = tmp
            akk = lu[i][k, k]
            for r in range(k + 1, d):
                lu[i][r, k] /= akk
                m = lu[i][r, k]
                for c in range(k + 1, d):
                    lu[i][r, c] -= m * lu[i][k, c]
        if i < n - 1:
            dn = dims[i + 1]
            # ufac[i] = S_i^{-1} B_{i,i+1}: column c solves S w = B[:,c]
            for c in range(dn):
                w = upper[i][:d, c].copy()
                for k in range(d):
                    p = piv[i][k]
                    if p != k:
                        tmp = w[k]
                        w[k] = w[p]
                        w[p] = tmp
                for r in range(1, d):        # L forward (unit diag)
                    s = w[r]
                    for j in range(r):
                        s -= lu[i][r, j] * w[j]
                    w[r] = s
                for r in range(d - 1, -1, -1):   # U backward
                    s = w[r]
                    for j in range(r + 1, d):
                        s -= lu[i][r, j] * w[j]
                    w[r] = s / lu[i][r, r]
                ufac[i][:d, c] = w
    return lu, piv, lfac, ufac, -1


def ldu_solve(lu, piv, lfac, ufac, dims, rhs):
    """Solve the factored block tridiagonal system for one flat right-hand side."""
    n = dims.shape[0]
    offs = np.zeros(n + 1, np.int64)
    for i in range(n):
        offs[i + 1] = offs[i] + dims[i]
    x = rhs.copy()
    # L w = b: forward substitution through the unit block lower factor
    for i in range(1, n):
        d, dp = dims[i], dims[i - 1]
        blk = np.ascontiguousarray(lfac[i - 1][:d, :dp])
        x[offs[i]:offs[i] + d] -= np.dot(blk, x[offs[i - 1]:offs[i - 1] + dp])
    # D y = w: one pivot-block LU solve per block
    for i in range(n):
        d = dims[i]
        o = offs[i]
        for k in range(d):
            p = piv[i][k]
            if p != k:
                tmp = x[o + k]
                x[o + k] = x[o + p]
                x[o + p] = tmp
        for r in range(1, d):
            s = x[o + r]
            for j in range(r):
                s -= lu[i][r, j] * x[o + j]
            x[o + r] = s
        for r in range(d - 1, -1, -1):
            s = x[o + r]
            for j in range(r + 1, d):
                s -= lu[i][r, j] * x[o + j]
            x[o + r] = s / lu[i][r, r]
    # U x = y: backward substitution through the unit block upper factor
    for i in range(n - 2, -1, -1):
        d, dn = dims[i], dims[i + 1]
        blk = np.ascontiguousarray(ufac[i][:d, :dn])
        x[offs[i]:offs[i] + d] -= np.dot(blk, x[offs[i + 1]:offs[i + 1] + dn])
    return x


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def default_backend() -> str:
    """Backend chosen by the environment flag, or by numba availability."""
    env = os.environ.get(BACKEND_ENV, "").strip().lower()
    if env in ("numba", "numpy"):
        return env
    if env:
        raise ValueError(f"unknown {BACKEND_ENV} value {env!r}; use 'numba' or 'numpy'")
    return "numba" if numba_available() else "numpy"


def get_kernels(backend: str | None = None) -> SimpleNamespace:
    """Return the kernel namespace for a backend ('numba' or 'numpy')."""
    name = backend if backend is not None else default_backend()
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}; use 'numba' or 'numpy'")
    if name == "numba" and not numba_available():
        raise RuntimeError("numba backend requested but numba is not importable")
    if name not in _namespaces:
        if name == "numpy":
            fns = {k: globals()[k] for k in _KERNEL_NAMES}
        else:
            from numba import njit

            fns = {k: njit(cache=True)(globals()[k]) for k in _KERNEL_NAMES}
        _namespaces[name] = SimpleNamespace(backend=name, **fns)
    return _namespaces[name]
