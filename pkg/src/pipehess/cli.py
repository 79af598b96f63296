"""Command-line front end: verify, solve, and bench.

``pipehess verify`` runs the built-in correctness suite (finite
difference oracles, the adjoint-recursion cross-check, Hessian
symmetry, permutation and Schur-complement identities, exact golden
examples) and prints one line per check.

``pipehess solve`` reads a pipeline spec and a right-hand side vector,
runs the lifted block-tridiagonal solve for (H + eps I) x = b, and
writes a report.

``pipehess bench`` sweeps problem sizes, running the structured solve
against conjugate gradients and a dense factorization, and fits
log-log scaling slopes from instrumented flop and byte counters.

Exit codes: 0 success, 1 a check or solve failed, 2 usage or input
errors.  Progress text goes to stderr; the machine-readable report
goes to ``--out``, or to stdout when ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import re
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import instrument
from .blockmat import (
    BlockBanded,
    CommutationPermutation,
    SingularPivotBlock,
    pivot_to_tridiagonal,
)
from .hessian import (
    DENSE_DIM_LIMIT,
    HessianOperator,
    dense_hessian,
    finite_diff_hessian,
    hvp_pearlmutter,
)
from .kernels import numba_available
from .pipeline import (
    Pipeline,
    finite_diff_gradient,
    random_pipeline,
    random_point,
)
from .solver import NoConvergence, cg_solve, hivp_solve, lift
from .specio import SpecError, load_pipeline_spec, load_vector

__all__ = ["RunConfig", "BenchRecord", "cmd_verify", "cmd_solve", "cmd_bench", "main"]

REPORT_VERSION = 1

# cmd_solve flags failure above this recomputed relative residual
SOLVE_RESIDUAL_TOL = 1e-6


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _rel_err(got: np.ndarray, want: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(want)), 1e-300)
    return float(np.linalg.norm(np.asarray(got) - np.asarray(want))) / denom


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """Parsed invocation; identical configs must produce identical results
    (modulo wall-clock fields)."""

    command: str
    layers: int = 4
    width: int = 3
    params: int = 4
    eps: float = 1e-3
    seed: int = 0
    tol: float | None = None
    fmt: str = "json"
    spec: str | None = None
    rhs: str | None = None
    out: str | None = None
    sweeps: tuple[tuple[str, tuple[int, ...]], ...] = ()
    methods: tuple[str, ...] = ("hivp", "cg", "dense")
    refine: bool = False
    corrupt: bool = False
    compare_backends: bool = False

    def public_dict(self) -> dict:
        """Config as echoed in reports (output routing excluded)."""
        d = {
            "command": self.command,
            "eps": self.eps,
            "seed": self.seed,
        }
        if self.command in ("verify", "bench"):
            d.update(layers=self.layers, width=self.width, params=self.params)
        if self.command == "verify":
            d["tol"] = self.tol
        if self.command == "solve":
            d.update(spec=self.spec, rhs=self.rhs, refine=self.refine)
        if self.command == "bench":
            d["sweeps"] = [[var, list(vals)] for var, vals in self.sweeps]
            d["methods"] = list(self.methods)
            d["compare_backends"] = self.compare_backends
        return d


@dataclass(frozen=True)
class BenchRecord:
    """One benchmark cell: a (shape, method) pair and its meters."""

    layers: int
    width: int
    params: int
    method: str
    backend: str
    wall_time: float | None
    flops: int | None
    peak_bytes: int | None
    residual: float | None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "width": self.width,
            "params": self.params,
            "method": self.method,
            "backend": self.backend,
            "wall_time": self.wall_time,
            "flops": self.flops,
            "peak_bytes": self.peak_bytes,
            "residual": self.residual,
            "error": self.error,
        }


# ---------------------------------------------------------------------------
# report emission


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _emit(cfg: RunConfig, doc: dict, csv_rows) -> None:
    """Write the machine report as JSON or CSV to --out or stdout.

    CSV carries the same numeric values as the JSON document; floats
    are printed with full round-trip precision in both.
    """
    if cfg.fmt == "json":
        text = json.dumps(doc, indent=2) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for row in csv_rows(doc):
            writer.writerow([_cell(v) for v in row])
        text = buf.getvalue()
    if cfg.out:
        with open(cfg.out, "w") as f:
            f.write(text)
        _say(f"report written to {cfg.out}")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# verify


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "error": self.error,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


class _CorruptedLayer:
    """Negative-control hook: delegates to a layer but skews one
    jacobian entry, so analytic derivatives disagree with finite
    differences while values stay intact."""

    def __init__(self, inner):
        self.inner = inner
        self.in_dim = inner.in_dim
        self.out_dim = inner.out_dim
        self.param_dim = inner.param_dim

    def value(self, z, x):
        return self.inner.value(z, x)

    def derivatives(self, z, x):
        d = self.inner.derivatives(z, x)
        jac_x = d.jac_x.copy()
        jac_x[0, 0] += 0.5
        return replace(d, jac_x=jac_x)


def _make_pipeline(cfg: RunConfig, seed: int) -> Pipeline:
    pipe = random_pipeline(cfg.layers, cfg.width, cfg.params, seed=seed)
    if cfg.corrupt:
        pipe = Pipeline([_CorruptedLayer(pipe.layers[0]), *pipe.layers[1:]])
    return pipe


def _tol(cfg: RunConfig, default: float) -> float:
    return default if cfg.tol is None else cfg.tol


def _check_fd_gradient(cfg: RunConfig) -> CheckResult:
    worst = 0.0
    for i in range(5):
        pipe = _make_pipeline(cfg, cfg.seed + i)
        z0, params = random_point(pipe, seed=cfg.seed + i)
        pt = pipe.forward(z0, params)
        worst = max(worst, _rel_err(pipe.gradient(pt), finite_diff_gradient(pipe, z0, params)))
    return CheckResult("finite_diff_gradient", worst, _tol(cfg, 1e-5))


def _check_fd_hessian(cfg: RunConfig) -> CheckResult:
    worst = 0.0
    for i in range(3):
        pipe = _make_pipeline(cfg, cfg.seed + 10 + i)
        z0, params = random_point(pipe, seed=cfg.seed + 10 + i)
        pt = pipe.forward(z0, params)
        hd = dense_hessian(HessianOperator.assemble(pt))
        worst = max(worst, _rel_err(hd, finite_diff_hessian(pt)))
    return CheckResult("finite_diff_hessian", worst, _tol(cfg, 1e-4))


def _check_pearlmutter(cfg: RunConfig) -> CheckResult:
    worst = 0.0
    rng = np.random.default_rng(cfg.seed + 100)
    for i in range(10):
        pipe = _make_pipeline(cfg, cfg.seed + 20 + i)
        z0, params = random_point(pipe, seed=cfg.seed + 20 + i)
        pt = pipe.forward(z0, params)
        h = HessianOperator.assemble(pt)
        v = rng.uniform(-1.0, 1.0, pipe.total_params)
        worst = max(worst, _rel_err(h.hvp(v), hvp_pearlmutter(pt, v)))
    return CheckResult("adjoint_recursion_equivalence", worst, _tol(cfg, 1e-10))


def _check_symmetry(cfg: RunConfig) -> CheckResult:
    worst = 0.0
    for i in range(3):
        pipe = _make_pipeline(cfg, cfg.seed + 30 + i)
        z0, params = random_point(pipe, seed=cfg.seed + 30 + i)
        h = HessianOperator.assemble(pipe.forward(z0, params))
        hd = dense_hessian(h)
        denom = max(float(np.linalg.norm(hd)), 1e-300)
        worst = max(worst, float(np.linalg.norm(hd - hd.T)) / denom)
    return CheckResult("hessian_symmetry", worst, _tol(cfg, 1e-8))


def _check_involution(cfg: RunConfig) -> CheckResult:
    # the interleaving permutation is its own inverse on square grids
    # with transpose-symmetric dims; 25 grids x 40 vectors = 1000 trials
    rng = np.random.default_rng(cfg.seed + 200)
    worst = 0.0
    for _ in range(25):
        g = int(rng.integers(1, 7))
        dims = rng.integers(1, 5, size=(g, g))
        dims = np.triu(dims) + np.triu(dims, 1).T
        perm = CommutationPermutation([tuple(int(d) for d in row) for row in dims])
        for _ in range(40):
            v = rng.uniform(-1.0, 1.0, perm.n)
            worst = max(worst, float(np.max(np.abs(perm.apply(perm.apply(v)) - v))))
    return CheckResult("commutation_involution", worst, _tol(cfg, 0.0))


def _check_schur(cfg: RunConfig) -> CheckResult:
    worst = 0.0
    for i in range(3):
        pipe = _make_pipeline(cfg, cfg.seed + 40 + i)
        z0, params = random_point(pipe, seed=cfg.seed + 40 + i)
        h = HessianOperator.assemble(pipe.forward(z0, params))
        hd = dense_hessian(h)
        n = pipe.total_params
        for eps in (0.0, cfg.eps):
            k = lift(h, eps).dense_group_matrix()
            a, b = k[:n, :n], k[:n, n:]
            c, d = k[n:, :n], k[n:, n:]
            eliminated = a - b @ np.linalg.solve(d, c)
            worst = max(worst, _rel_err(eliminated, hd + eps * np.eye(n)))
    return CheckResult("schur_complement_identity", worst, _tol(cfg, 1e-10))


def _one_by_one(vals):
    return [np.array([[float(v)]]) for v in vals]


def _golden_examples():
    """Two exact 2-group interleavings with hand-written permuted forms."""
    dims = (1, 1)
    perm = CommutationPermutation([dims, dims])

    def cell(lane0, lane1=None):
        lanes = {0: _one_by_one(lane0)}
        if lane1:
            lanes[1] = _one_by_one(lane1)
        return BlockBanded(dims, dims, lanes)

    diag_grid = (
        (cell([2, 3]), cell([5, 7])),
        (cell([11, 13]), cell([17, 19])),
    )
    diag_expected = np.array(
        [[2, 5, 0, 0], [11, 17, 0, 0], [0, 0, 3, 7], [0, 0, 13, 19]], dtype=np.float64
    )
    upper_grid = (
        (cell([2, 3], [23]), cell([5, 7], [29])),
        (cell([11, 13], [31]), cell([17, 19], [37])),
    )
    upper_expected = np.array(
        [[2, 5, 23, 29], [11, 17, 31, 37], [0, 0, 3, 7], [0, 0, 13, 19]],
        dtype=np.float64,
    )
    return perm, ((diag_grid, diag_expected), (upper_grid, upper_expected))


def _dense_grid(grid, row_sizes, col_sizes) -> np.ndarray:
    rows = []
    for u, row in enumerate(grid):
        cols = [
            c.to_dense() if c is not None else np.zeros((row_sizes[u], col_sizes[w]))
            for w, c in enumerate(row)
        ]
        rows.append(np.hstack(cols))
    return np.vstack(rows)


def _check_goldens(cfg: RunConfig) -> CheckResult:
    perm, examples = _golden_examples()
    worst = 0.0
    for grid, expected in examples:
        full = _dense_grid(grid, (2, 2), (2, 2))
        via_dense = perm.permute_dense(full)
        via_gather = pivot_to_tridiagonal(grid, perm).to_dense()
        worst = max(worst, float(np.max(np.abs(via_dense - expected))))
        worst = max(worst, float(np.max(np.abs(via_gather - expected))))
    return CheckResult("golden_interleavings", worst, _tol(cfg, 0.0))


def _envelope_violation(kp: np.ndarray, dims) -> float:
    offs = np.concatenate(([0], np.cumsum(dims)))
    worst = 0.0
    for i in range(len(dims)):
        for j in range(len(dims)):
            if abs(i - j) > 1:
                blk = kp[offs[i]:offs[i + 1], offs[j]:offs[j + 1]]
                worst = max(worst, float(np.max(np.abs(blk), initial=0.0)))
    return worst


def _check_bandwidth(cfg: RunConfig) -> CheckResult:
    worst = 0.0
    shapes = [(cfg.layers, cfg.width, cfg.params), (1, cfg.width, cfg.params), (5, 2, 2)]
    for i, (depth, a, p) in enumerate(shapes):
        pipe = random_pipeline(depth, a, p, seed=cfg.seed + 50 + i)
        z0, params = random_point(pipe, seed=cfg.seed + 50 + i)
        h = HessianOperator.assemble(pipe.forward(z0, params))
        system = lift(h, cfg.eps)
        sizes = [sum(g) for g in system.group_dims]
        kp = system.perm.permute_dense(_dense_grid(system.grid, sizes, sizes))
        worst = max(worst, _envelope_violation(kp, system.layer_dims))
    return CheckResult("pivoted_bandwidth", worst, _tol(cfg, 0.0))


_CHECKS = (
    _check_fd_gradient,
    _check_fd_hessian,
    _check_pearlmutter,
    _check_symmetry,
    _check_involution,
    _check_schur,
    _check_goldens,
    _check_bandwidth,
)


def _verify_csv_rows(doc: dict):
    yield ["row_type", "name", "error", "tolerance", "passed"]
    for c in doc["checks"]:
        yield ["check", c["name"], c["error"], c["tolerance"], c["passed"]]
    yield ["summary", "all_pass", None, None, doc["all_pass"]]


def cmd_verify(cfg: RunConfig) -> int:
    checks = []
    for fn in _CHECKS:
        result = fn(cfg)
        checks.append(result)
        status = "PASS" if result.passed else "FAIL"
        _say(
            f"{result.name}: error={result.error:.3e} "
            f"tol={result.tolerance:.1e} {status}"
        )
    all_pass = all(c.passed for c in checks)
    doc = {
        "version": REPORT_VERSION,
        "command": "verify",
        "config": cfg.public_dict(),
        "checks": [c.to_dict() for c in checks],
        "all_pass": all_pass,
    }
    _emit(cfg, doc, _verify_csv_rows)
    n_pass = sum(c.passed for c in checks)
    _say(f"verify: {n_pass}/{len(checks)} checks passed")
    return 0 if all_pass else 1


# ---------------------------------------------------------------------------
# solve


def _solve_csv_rows(doc: dict):
    yield ["row_type", "name", "value"]
    rep = doc["report"]
    for key in (
        "method",
        "eps",
        "residual_norm",
        "rhs_norm",
        "relative_residual",
        "converged",
        "iterations",
        "pivot_condition",
        "flops",
        "peak_bytes",
        "wall_time",
        "backend",
    ):
        yield ["field", key, rep[key]]
    for w in rep.get("warnings", ()):
        yield ["warning", "", w]
    for i, v in enumerate(rep["solution"]):
        yield ["solution", i, v]


def cmd_solve(cfg: RunConfig) -> int:
    pipe, z0, params = load_pipeline_spec(cfg.spec)
    b = load_vector(cfg.rhs)
    if b.size != pipe.total_params:
        raise SpecError(
            f"rhs has {b.size} entries but the spec's pipeline has "
            f"{pipe.total_params} parameters"
        )
    point = pipe.forward(z0, params)
    try:
        rep = hivp_solve(point, b, eps=cfg.eps, refine=cfg.refine)
    except SingularPivotBlock as e:
        _say(f"solve failed: {e}; consider a larger --eps")
        return 1
    _say(
        f"solved n={b.size} eps={cfg.eps:g}: residual={rep.residual_norm:.3e} "
        f"(relative {rep.relative_residual:.3e}), flops={rep.flops}, "
        f"wall={rep.wall_time:.4f}s, backend={rep.backend}"
    )
    for w in rep.warnings:
        _say(f"warning: {w}")
    doc = {
        "version": REPORT_VERSION,
        "command": "solve",
        "config": cfg.public_dict(),
        "report": rep.to_json_dict(),
    }
    _emit(cfg, doc, _solve_csv_rows)
    if rep.relative_residual > SOLVE_RESIDUAL_TOL:
        _say(
            f"solve failed: relative residual {rep.relative_residual:.3e} "
            f"exceeds {SOLVE_RESIDUAL_TOL:g}"
        )
        return 1
    return 0


# ---------------------------------------------------------------------------
# bench


_SWEEP_RE = re.compile(r"(L|a|p)=(\d+)(?:\.\.(\d+)x(\d+))?$")


def parse_sweep(text: str) -> tuple[str, tuple[int, ...]]:
    """Parse ``L=8..256x2`` (or a single value ``L=16``) into values."""
    m = _SWEEP_RE.match(text.strip())
    if not m:
        raise argparse.ArgumentTypeError(
            f"bad sweep {text!r}; expected VAR=START..ENDxFACTOR with VAR in L,a,p"
        )
    var, start = m.group(1), int(m.group(2))
    if start < 1:
        raise argparse.ArgumentTypeError(f"sweep start must be >= 1 in {text!r}")
    if m.group(3) is None:
        return var, (start,)
    end, factor = int(m.group(3)), int(m.group(4))
    if end < start or factor < 2:
        raise argparse.ArgumentTypeError(
            f"sweep {text!r} needs END >= START and FACTOR >= 2"
        )
    values = []
    v = start
    while v <= end:
        values.append(v)
        v *= factor
    return var, tuple(values)


def _bench_cells(cfg: RunConfig):
    base = {"L": cfg.layers, "a": cfg.width, "p": cfg.params}
    seen = [var for var, _ in cfg.sweeps]
    if len(set(seen)) != len(seen):
        raise SpecError(f"sweep variables repeat: {seen}")
    axes = [vals for _, vals in cfg.sweeps]
    for combo in itertools.product(*axes) if axes else [()]:
        cell = dict(base)
        for (var, _), value in zip(cfg.sweeps, combo):
            cell[var] = value
        yield cell["L"], cell["a"], cell["p"]


def _cell_seed(cfg: RunConfig, depth: int, a: int, p: int) -> int:
    # stable per cell, independent of sweep order
    return cfg.seed * 1000003 + depth * 10007 + a * 101 + p


def _dense_bench(h: HessianOperator, b: np.ndarray, eps: float):
    """Dense-path baseline: form the matrix, factorize, solve.

    Flop and byte meters cover only the factorize-and-solve stage (the
    scaling comparison targets the solve, and the formation cost is a
    property of the probe, not of dense LU); wall time covers the whole
    path.
    """
    n = b.size
    t0 = time.perf_counter()
    hd = dense_hessian(h)
    with instrument.flop_scope() as fc, instrument.memory_scope() as mem:
        instrument.alloc_bytes(hd.nbytes)
        hd[np.diag_indices(n)] += eps
        instrument.add_flops(n)
        instrument.add_flops(instrument.lu_flops(n) + instrument.lu_solve_flops(n))
        x = np.linalg.solve(hd, b)
    wall = time.perf_counter() - t0
    residual = b - (h.hvp(x) + eps * x)
    return x, wall, fc.flops, mem.peak, float(np.linalg.norm(residual))


def _fit_slopes(records):
    groups: dict = {}
    for r in records:
        if r.error is None:
            groups.setdefault((r.method, r.backend, r.width, r.params), []).append(r)
    slopes = []
    for (method, backend, a, p), rs in sorted(groups.items()):
        if len({r.layers for r in rs}) < 2:
            continue
        xs = np.log2([r.layers for r in rs])
        slope_flops = float(np.polyfit(xs, np.log2([r.flops for r in rs]), 1)[0])
        slope_bytes = float(np.polyfit(xs, np.log2([r.peak_bytes for r in rs]), 1)[0])
        slopes.append(
            {
                "method": method,
                "backend": backend,
                "width": a,
                "params": p,
                "flop_slope": slope_flops,
                "bytes_slope": slope_bytes,
                "points": len(rs),
            }
        )
    return slopes


def _bench_csv_rows(doc: dict):
    yield [
        "row_type", "layers", "width", "params", "method", "backend",
        "wall_time", "flops", "peak_bytes", "residual", "error",
        "flop_slope", "bytes_slope", "rel_diff", "points",
    ]
    for r in doc["records"]:
        yield [
            "record", r["layers"], r["width"], r["params"], r["method"],
            r["backend"], r["wall_time"], r["flops"], r["peak_bytes"],
            r["residual"], r["error"], None, None, None, None,
        ]
    for s in doc["slopes"]:
        yield [
            "slope", None, s["width"], s["params"], s["method"], s["backend"],
            None, None, None, None, None,
            s["flop_slope"], s["bytes_slope"], None, s["points"],
        ]
    for c in doc["cross_checks"]:
        yield [
            "cross_check", c["layers"], c["width"], c["params"], c["pair"],
            None, None, None, None, None, None, None, None, c["rel_diff"], None,
        ]


def cmd_bench(cfg: RunConfig) -> int:
    records: list[BenchRecord] = []
    cross_checks: list[dict] = []
    for depth, a, p in _bench_cells(cfg):
        seed = _cell_seed(cfg, depth, a, p)
        pipe = random_pipeline(depth, a, p, seed=seed)
        z0, params = random_point(pipe, seed=seed)
        h = HessianOperator.assemble(pipe.forward(z0, params))
        n = pipe.total_params
        rng = np.random.default_rng(seed + 17)
        b = rng.uniform(-1.0, 1.0, n)
        solutions: dict[str, np.ndarray] = {}
        for method in cfg.methods:
            if method == "hivp":
                backends = [None]
                if cfg.compare_backends:
                    backends = ["numpy"] + (["numba"] if numba_available() else [])
                for be in backends:
                    rep = hivp_solve(h, b, eps=cfg.eps, backend=be)
                    records.append(
                        BenchRecord(depth, a, p, "hivp", rep.backend, rep.wall_time,
                                    rep.flops, rep.peak_bytes, rep.residual_norm)
                    )
                    solutions[f"hivp[{rep.backend}]"] = rep.solution
            elif method == "cg":
                try:
                    rep = cg_solve(h, b, eps=cfg.eps, tol=1e-8)
                    err = None
                    solutions["cg"] = rep.solution
                except NoConvergence as e:
                    rep, err = e.report, str(e)
                records.append(
                    BenchRecord(depth, a, p, "cg", rep.backend, rep.wall_time,
                                rep.flops, rep.peak_bytes, rep.residual_norm, err)
                )
            elif method == "dense":
                if n > DENSE_DIM_LIMIT:
                    records.append(
                        BenchRecord(depth, a, p, "dense", "numpy", None, None, None,
                                    None, f"guard: {n} parameters > {DENSE_DIM_LIMIT}")
                    )
                else:
                    try:
                        x, wall, flops, peak, res = _dense_bench(h, b, cfg.eps)
                        records.append(
                            BenchRecord(depth, a, p, "dense", "numpy", wall, flops,
                                        peak, res)
                        )
                        solutions["dense"] = x
                    except np.linalg.LinAlgError as e:
                        records.append(
                            BenchRecord(depth, a, p, "dense", "numpy", None, None,
                                        None, None, f"dense solve failed: {e}")
                        )
            r = records[-1]
            if r.error is None:
                _say(
                    f"L={depth} a={a} p={p} {r.method}[{r.backend}]: "
                    f"flops={r.flops} peak_bytes={r.peak_bytes} "
                    f"wall={r.wall_time:.4f}s residual={r.residual:.3e}"
                )
            else:
                _say(f"L={depth} a={a} p={p} {r.method}: {r.error}")
        names = sorted(solutions)
        for i, name_a in enumerate(names):
            for name_b in names[i + 1:]:
                cross_checks.append(
                    {
                        "layers": depth, "width": a, "params": p,
                        "pair": f"{name_a}~{name_b}",
                        "rel_diff": _rel_err(solutions[name_a], solutions[name_b]),
                    }
                )
    slopes = _fit_slopes(records)
    for s in slopes:
        _say(
            f"slope {s['method']}[{s['backend']}] a={s['width']} p={s['params']}: "
            f"flops~L^{s['flop_slope']:.2f} peak_bytes~L^{s['bytes_slope']:.2f} "
            f"({s['points']} points)"
        )
    doc = {
        "version": REPORT_VERSION,
        "command": "bench",
        "config": cfg.public_dict(),
        "records": [r.to_dict() for r in records],
        "slopes": slopes,
        "cross_checks": cross_checks,
    }
    _emit(cfg, doc, _bench_csv_rows)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not np.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {text!r}")
    return v


def _methods_list(text: str) -> tuple[str, ...]:
    methods = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in methods if m not in ("hivp", "cg", "dense")]
    if bad or not methods:
        raise argparse.ArgumentTypeError(
            f"methods must be a comma list drawn from hivp,cg,dense; got {text!r}"
        )
    return methods


def _add_shape_args(sp, layers=4, width=3, params=4):
    sp.add_argument("--layers", type=_positive_int, default=layers,
                    help=f"pipeline depth L (default {layers})")
    sp.add_argument("--width", type=_positive_int, default=width,
                    help=f"state width a (default {width})")
    sp.add_argument("--params", type=_positive_int, default=params,
                    help=f"parameters per layer p (default {params})")


def _add_common_args(sp):
    sp.add_argument("--eps", type=_nonneg_float, default=1e-3,
                    help="damping added to the Hessian (default 1e-3)")
    sp.add_argument("--seed", type=int, default=0, help="base RNG seed (default 0)")
    sp.add_argument("--format", dest="fmt", choices=("json", "csv"), default="json",
                    help="report format (default json)")
    sp.add_argument("--out", default=None,
                    help="report path (default: report to stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pipehess",
        description="Exact Hessian-vector and Hessian-inverse-vector products "
        "for layerwise pipelines via a lifted block-tridiagonal solve.",
        epilog="Exit codes: 0 success, 1 check/solve failure, 2 usage or "
        "input errors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the built-in correctness suite")
    _add_shape_args(v)
    _add_common_args(v)
    v.add_argument("--tol", type=_nonneg_float, default=None,
                   help="override every check's tolerance")
    v.add_argument("--self-test-corrupt", action="store_true", dest="corrupt",
                   help=argparse.SUPPRESS)

    s = sub.add_parser("solve", help="solve (H + eps I) x = b from spec files")
    s.add_argument("--spec", required=True, help="pipeline spec JSON path")
    s.add_argument("--rhs", required=True, help="right-hand-side vector JSON path")
    s.add_argument("--refine", action="store_true",
                   help="one residual-correction pass through the factorization")
    _add_common_args(s)

    b = sub.add_parser("bench", help="sweep sizes and fit scaling slopes")
    _add_shape_args(b)
    _add_common_args(b)
    b.add_argument("--sweep", type=parse_sweep, action="append", default=[],
                   metavar="VAR=START..ENDxFACTOR",
                   help="sweep L, a, or p geometrically, e.g. L=8..256x2; "
                   "repeat for a cartesian sweep")
    b.add_argument("--methods", type=_methods_list, default=("hivp", "cg", "dense"),
                   help="comma list from hivp,cg,dense (default all)")
    b.add_argument("--compare-backends", action="store_true",
                   help="run the structured solve under every available backend")
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    return RunConfig(
        command=ns.command,
        layers=getattr(ns, "layers", 4),
        width=getattr(ns, "width", 3),
        params=getattr(ns, "params", 4),
        eps=ns.eps,
        seed=getattr(ns, "seed", 0),
        tol=getattr(ns, "tol", None),
        fmt=ns.fmt,
        spec=getattr(ns, "spec", None),
        rhs=getattr(ns, "rhs", None),
        out=ns.out,
        sweeps=tuple(getattr(ns, "sweep", []) or []),
        methods=tuple(getattr(ns, "methods", ("hivp", "cg", "dense"))),
        refine=getattr(ns, "refine", False),
        corrupt=getattr(ns, "corrupt", False),
        compare_backends=getattr(ns, "compare_backends", False),
    )


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    cfg = config_from_args(ns)
    dispatch = {"verify": cmd_verify, "solve": cmd_solve, "bench": cmd_bench}
    try:
        return dispatch[cfg.command](cfg)
    except SpecError as e:
        _say(f"error: {e}")
        return 2
    except OSError as e:
        _say(f"error: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
