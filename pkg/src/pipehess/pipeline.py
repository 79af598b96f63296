"""Layerwise pipelines: forward evaluation, backprop, and layer derivatives.

A pipeline is a chain z_l = f_l(z_{l-1}; x_l) where z_0 is fixed input
data and each stage has its own parameter vector x_l. All derivative
blocks follow one flattening convention, documented on
:class:`LayerDerivatives`: second derivatives are Jacobians of the
column-major vec of the first derivative, so the row for output
component i and first-derivative column q sits at index i + a*q.

``finite_diff_layer_derivatives`` rebuilds every block from nested
central differences of ``value`` alone, giving an oracle that shares no
code with the analytic paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import instrument
from .blockmat import vec

__all__ = [
    "LayerDerivatives",
    "Layer",
    "DenseTanh",
    "DenseSoftplus",
    "FusedSquaredLoss",
    "QuadraticLoss",
    "MixTanh",
    "MixSoftplus",
    "MixSquaredLoss",
    "TailPassthrough",
    "Pipeline",
    "EvaluationPoint",
    "finite_diff_layer_derivatives",
    "finite_diff_gradient",
    "random_pipeline",
    "random_point",
]


@dataclass(frozen=True, eq=False)
class LayerDerivatives:
    """First and second derivatives of one stage at a point.

    With a = out_dim, n = in_dim, p = param_dim:

    - ``jac_z``   (a, n):      d f_i / d z_s
    - ``jac_x``   (a, p):      d f_i / d x_q
    - ``hess_xx`` (a*p, p):    row i+a*q, col r -> d2 f_i / d x_q d x_r
    - ``hess_zx`` (a*p, n):    row i+a*q, col s -> d2 f_i / d x_q d z_s
    - ``hess_xz`` (a*n, p):    row i+a*s, col q -> d2 f_i / d z_s d x_q
    - ``hess_zz`` (a*n, n):    row i+a*s, col t -> d2 f_i / d z_s d z_t
    """

    jac_z: np.ndarray
    jac_x: np.ndarray
    hess_xx: np.ndarray
    hess_zx: np.ndarray
    hess_xz: np.ndarray
    hess_zz: np.ndarray


class Layer:
    """One pipeline stage; subclasses supply value() and derivatives()."""

    in_dim: int
    param_dim: int
    out_dim: int

    def value(self, z: np.ndarray, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def derivatives(self, z: np.ndarray, x: np.ndarray) -> LayerDerivatives:
        raise NotImplementedError


def _fold(t: np.ndarray) -> np.ndarray:
    """(a, d1, d2) -> (a*d1, d2) with row index i + a*q."""
    a, d1, d2 = t.shape
    return t.reshape(a * d1, d2, order="F")


def _phi_blocks(phi1, phi2, t_x, t_z, cross) -> LayerDerivatives:
    """Derivative blocks of f = phi(u) for elementwise phi and u with
    constant-in-second-order structure: t_x = du/dx, t_z = du/dz, and
    cross[i, q, s] = d2 u_i / d x_q d z_s (the only nonzero second
    derivative of u)."""
    jac_z = phi1[:, None] * t_z
    jac_x = phi1[:, None] * t_x
    hxx = np.einsum("i,iq,ir->iqr", phi2, t_x, t_x)
    hzz = np.einsum("i,is,it->ist", phi2, t_z, t_z)
    hzx = np.einsum("i,iq,is->iqs", phi2, t_x, t_z) + phi1[:, None, None] * cross
    hxz = hzx.transpose(0, 2, 1)
    return LayerDerivatives(
        jac_z=jac_z,
        jac_x=jac_x,
        hess_xx=_fold(hxx),
        hess_zx=_fold(hzx),
        hess_xz=_fold(hxz),
        hess_zz=_fold(hzz),
    )


def _tanh_derivs(u):
    t = np.tanh(u)
    return t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)


def _softplus_derivs(u):
    s = 1.0 / (1.0 + np.exp(-u))
    return np.logaddexp(0.0, u), s, s * (1.0 - s)


class _DenseActivation(Layer):
    """f(z; x) = phi(W z + c) with x = [vec(W), c] (column-major vec)."""

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.param_dim = self.out_dim * self.in_dim + self.out_dim

    def _unpack(self, x):
        a, n = self.out_dim, self.in_dim
        w = x[:a * n].reshape((a, n), order="F")
        c = x[a * n:]
        return w, c

    def _phi(self, u):
        raise NotImplementedError

    def value(self, z, x):
        w, c = self._unpack(x)
        return self._phi(w @ z + c)[0]

    def derivatives(self, z, x):
        a, n, p = self.out_dim, self.in_dim, self.param_dim
        w, c = self._unpack(x)
        _, phi1, phi2 = self._phi(w @ z + c)
        # du/dx: the vec(W) part is (z^T kron I_a), the c part is I_a
        t_x = np.hstack([np.kron(z.reshape(1, -1), np.eye(a)), np.eye(a)])
        cross = np.zeros((a, p, n))
        for j in range(n):
            cross[np.arange(a), np.arange(a) + a * j, j] = 1.0
        return _phi_blocks(phi1, phi2, t_x, w, cross)


class DenseTanh(_DenseActivation):
    """Fully connected tanh stage: tanh(W z + c)."""

    def _phi(self, u):
        return _tanh_derivs(u)


class DenseSoftplus(_DenseActivation):
    """Fully connected softplus stage: log(1 + exp(W z + c))."""

    def _phi(self, u):
        return _softplus_derivs(u)


class FusedSquaredLoss(Layer):
    """Final stage mapping [features, labels] to 0.5 * ||W f + c - y||^2.

    The incoming state is split as z = [f, y] with f of ``feature_dim``
    and y of ``label_dim``; the parameters are x = [vec(W), c].
    """

    def __init__(self, feature_dim: int, label_dim: int):
        self.feature_dim = int(feature_dim)
        self.label_dim = int(label_dim)
        self.in_dim = self.feature_dim + self.label_dim
        self.out_dim = 1
        self.param_dim = self.label_dim * self.feature_dim + self.label_dim

    def _unpack(self, x):
        m, k = self.label_dim, self.feature_dim
        w = x[:m * k].reshape((m, k), order="F")
        c = x[m * k:]
        return w, c

    def value(self, z, x):
        w, c = self._unpack(x)
        f, y = z[:self.feature_dim], z[self.feature_dim:]
        r = w @ f + c - y
        return np.array([0.5 * float(r @ r)])

    def derivatives(self, z, x):
        m, k = self.label_dim, self.feature_dim
        w, c = self._unpack(x)
        f, y = z[:k], z[k:]
        r = w @ f + c - y
        jr_x = np.hstack([np.kron(f.reshape(1, -1), np.eye(m)), np.eye(m)])
        jr_z = np.hstack([w, -np.eye(m)])
        jac_x = (r @ jr_x).reshape(1, -1)
        jac_z = (r @ jr_z).reshape(1, -1)
        hess_xx = jr_x.T @ jr_x
        hess_zz = jr_z.T @ jr_z
        # d/dz of jac_x picks up the z-dependence of jr_x through f
        bent = np.zeros((self.param_dim, self.in_dim))
        for j in range(k):
            bent[np.arange(m) + m * j, j] = r
        hess_zx = jr_x.T @ jr_z + bent
        return LayerDerivatives(
            jac_z=jac_z, jac_x=jac_x, hess_xx=hess_xx, hess_zx=hess_zx,
            hess_xz=hess_zx.T.copy(), hess_zz=hess_zz,
        )


class QuadraticLoss(Layer):
    """Scalar stage 0.5 * (x - c)^T A (x - c); the state passes through unused."""

    def __init__(self, in_dim: int, a: np.ndarray, center: np.ndarray):
        a = np.asarray(a, dtype=np.float64)
        center = np.asarray(center, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or center.shape != (a.shape[0],):
            raise ValueError("need square A and matching center")
        self.in_dim = int(in_dim)
        self.out_dim = 1
        self.param_dim = a.shape[0]
        self.a_sym = 0.5 * (a + a.T)
        self.center = center

    def value(self, z, x):
        d = x - self.center
        return np.array([0.5 * float(d @ self.a_sym @ d)])

    def derivatives(self, z, x):
        n, p = self.in_dim, self.param_dim
        d = x - self.center
        return LayerDerivatives(
            jac_z=np.zeros((1, n)),
            jac_x=(self.a_sym @ d).reshape(1, -1),
            hess_xx=self.a_sym.copy(),
            hess_zx=np.zeros((p, n)),
            hess_xz=np.zeros((n, p)),
            hess_zz=np.zeros((n, n)),
        )


class _MixActivation(Layer):
    """f(z; x) = phi(W z + U x + c) with fixed seeded W, U, c buffers.

    Decouples the parameter count from the layer widths: any
    (in_dim, param_dim, out_dim) combination is valid.
    """

    def __init__(self, in_dim: int, param_dim: int, out_dim: int, seed: int = 0):
        self.in_dim = int(in_dim)
        self.param_dim = int(param_dim)
        self.out_dim = int(out_dim)
        rng = np.random.default_rng(seed)
        self.w = rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
        self.u = rng.standard_normal((out_dim, param_dim)) / np.sqrt(param_dim)
        self.c = rng.standard_normal(out_dim)

    def _phi(self, u):
        raise NotImplementedError

    def value(self, z, x):
        return self._phi(self.w @ z + self.u @ x + self.c)[0]

    def derivatives(self, z, x):
        _, phi1, phi2 = self._phi(self.w @ z + self.u @ x + self.c)
        cross = np.zeros((self.out_dim, self.param_dim, self.in_dim))
        return _phi_blocks(phi1, phi2, self.u, self.w, cross)


class MixTanh(_MixActivation):
    """tanh(W z + U x + c) with fixed seeded W, U, c."""

    def _phi(self, u):
        return _tanh_derivs(u)


class MixSoftplus(_MixActivation):
    """softplus(W z + U x + c) with fixed seeded W, U, c."""

    def _phi(self, u):
        return _softplus_derivs(u)


class MixSquaredLoss(Layer):
    """Scalar stage 0.5 * ||A z + B x + c||^2 with fixed seeded A, B, c."""

    def __init__(self, in_dim: int, param_dim: int, seed: int = 0):
        self.in_dim = int(in_dim)
        self.param_dim = int(param_dim)
        self.out_dim = 1
        rng = np.random.default_rng(seed)
        m = in_dim
        self.a = rng.standard_normal((m, in_dim)) / np.sqrt(in_dim)
        self.b = rng.standard_normal((m, param_dim)) / np.sqrt(param_dim)
        self.c = rng.standard_normal(m)

    def value(self, z, x):
        r = self.a @ z + self.b @ x + self.c
        return np.array([0.5 * float(r @ r)])

    def derivatives(self, z, x):
        r = self.a @ z + self.b @ x + self.c
        return LayerDerivatives(
            jac_z=(r @ self.a).reshape(1, -1),
            jac_x=(r @ self.b).reshape(1, -1),
            hess_xx=self.b.T @ self.b,
            hess_zx=self.b.T @ self.a,
            hess_xz=self.a.T @ self.b,
            hess_zz=self.a.T @ self.a,
        )


class TailPassthrough(Layer):
    """Wrap a stage so the trailing ``tail_dim`` state entries ride along
    unchanged: [z, t] -> [g(z; x), t].

    Used to carry labels through feature-transforming stages down to a
    loss stage that consumes them.
    """

    def __init__(self, inner: Layer, tail_dim: int):
        self.inner = inner
        self.tail_dim = int(tail_dim)
        self.in_dim = inner.in_dim + self.tail_dim
        self.out_dim = inner.out_dim + self.tail_dim
        self.param_dim = inner.param_dim

    def value(self, z, x):
        k = self.inner.in_dim
        return np.concatenate([self.inner.value(z[:k], x), z[k:]])

    def derivatives(self, z, x):
        k = self.inner.in_dim
        a, n, p, e = self.inner.out_dim, k, self.inner.param_dim, self.tail_dim
        d = self.inner.derivatives(z[:k], x)
        aa, nn = a + e, n + e
        jac_z = np.zeros((aa, nn))
        jac_z[:a, :n] = d.jac_z
        jac_z[a:, n:] = np.eye(e)
        jac_x = np.vstack([d.jac_x, np.zeros((e, p))])

        def embed(h, d1, d2, big1, big2):
            t = h.reshape(a, d1, d2, order="F")
            out = np.zeros((aa, big1, big2))
            out[:a, :d1, :d2] = t
            return _fold(out)

        return LayerDerivatives(
            jac_z=jac_z,
            jac_x=jac_x,
            hess_xx=embed(d.hess_xx, p, p, p, p),
            hess_zx=embed(d.hess_zx, p, n, p, nn),
            hess_xz=embed(d.hess_xz, n, p, nn, p),
            hess_zz=embed(d.hess_zz, n, n, nn, nn),
        )


@dataclass(frozen=True, eq=False)
class EvaluationPoint:
    """A pipeline evaluated at (z0, params): states and layer derivatives."""

    pipeline: "Pipeline"
    z0: np.ndarray
    params: tuple[np.ndarray, ...]
    states: tuple[np.ndarray, ...]
    derivs: tuple[LayerDerivatives, ...] | None

    @property
    def loss(self) -> float:
        if self.pipeline.out_dim != 1:
            raise ValueError("loss is defined for scalar-output pipelines only")
        return float(self.states[-1][0])


class Pipeline:
    """A chain of stages with per-stage parameters."""

    def __init__(self, layers: Sequence[Layer]):
        layers = tuple(layers)
        if not layers:
            raise ValueError("pipeline needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise ValueError(
                    f"layer {k} expects input dim {layers[k].in_dim} but layer "
                    f"{k - 1} produces {layers[k - 1].out_dim}"
                )
        if layers[-1].out_dim != 1:
            raise ValueError(
                f"last layer must produce the scalar loss, got output dim "
                f"{layers[-1].out_dim}"
            )
        self.layers = layers

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def state_dims(self) -> tuple[int, ...]:
        """Output dim of every stage: (a_1, ..., a_L)."""
        return tuple(l.out_dim for l in self.layers)

    @property
    def param_dims(self) -> tuple[int, ...]:
        return tuple(l.param_dim for l in self.layers)

    @property
    def total_params(self) -> int:
        return sum(self.param_dims)

    def split_params(self, flat: np.ndarray) -> tuple[np.ndarray, ...]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_params,):
            raise ValueError(
                f"expected flat parameter vector of length {self.total_params}, "
                f"got shape {flat.shape}"
            )
        out = []
        o = 0
        for p in self.param_dims:
            out.append(flat[o:o + p].copy())
            o += p
        return tuple(out)

    def join_params(self, params: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(x, dtype=np.float64) for x in params])

    def _norm_params(self, params) -> tuple[np.ndarray, ...]:
        if isinstance(params, np.ndarray) and params.ndim == 1:
            return self.split_params(params)
        params = tuple(np.asarray(x, dtype=np.float64) for x in params)
        if len(params) != self.depth:
            raise ValueError(f"expected {self.depth} parameter vectors, got {len(params)}")
        for k, (x, p) in enumerate(zip(params, self.param_dims)):
            if x.shape != (p,):
                raise ValueError(f"params[{k}] has shape {x.shape}, expected ({p},)")
        return params

    def value(self, z0, params) -> np.ndarray:
        params = self._norm_params(params)
        z = np.asarray(z0, dtype=np.float64)
        for layer, x in zip(self.layers, params):
            z = layer.value(z, x)
        return z

    def forward(self, z0, params, want_derivatives: bool = True) -> EvaluationPoint:
        params = self._norm_params(params)
        z0 = np.asarray(z0, dtype=np.float64)
        if z0.shape != (self.in_dim,):
            raise ValueError(f"z0 has shape {z0.shape}, expected ({self.in_dim},)")
        states = []
        derivs = [] if want_derivatives else None
        z = z0
        for k, (layer, x) in enumerate(zip(self.layers, params)):
            if want_derivatives:
                derivs.append(layer.derivatives(z, x))
            z = layer.value(z, x)
            if not np.all(np.isfinite(z)):
                raise ValueError(f"non-finite activation at stage {k}")
            states.append(z)
        return EvaluationPoint(
            pipeline=self,
            z0=z0,
            params=params,
            states=tuple(states),
            derivs=tuple(derivs) if want_derivatives else None,
        )

    def backprop_rows(self, point: EvaluationPoint) -> tuple[np.ndarray, ...]:
        """Adjoint row vectors b_l with b_L = (1) and b_l = b_{l+1} jac_z_{l+1}."""
        if self.out_dim != 1:
            raise ValueError("adjoint rows are defined for scalar-output pipelines")
        if point.derivs is None:
            raise ValueError("point was evaluated without derivatives")
        rows = [np.ones(1)]
        for d in reversed(point.derivs[1:]):
            rows.append(rows[-1] @ d.jac_z)
            instrument.add_flops(instrument.gemv_flops(*d.jac_z.shape))
        return tuple(reversed(rows))

    def gradient(self, point: EvaluationPoint) -> np.ndarray:
        """Flat parameter gradient via matrix-form backprop."""
        rows = self.backprop_rows(point)
        segs = []
        for b, d in zip(rows, point.derivs):
            segs.append(b @ d.jac_x)
            instrument.add_flops(instrument.gemv_flops(*d.jac_x.shape))
        return np.concatenate(segs)


def finite_diff_layer_derivatives(
    layer: Layer, z, x, step: float = 1e-4, step2: float = 1e-3
) -> LayerDerivatives:
    """All six derivative blocks from central differences of value() only.

    First derivatives use ``step``; second derivatives use nested central
    differences with ``step2`` at both levels. Shares nothing with the
    analytic derivative code, so it can referee it.
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    a = layer.out_dim

    def jac(zz, xx, wrt, h):
        n = zz.size if wrt == "z" else xx.size
        cols = np.empty((a, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = h
            if wrt == "z":
                hi, lo = layer.value(zz + e, xx), layer.value(zz - e, xx)
            else:
                hi, lo = layer.value(zz, xx + e), layer.value(zz, xx - e)
            cols[:, k] = (hi - lo) / (2.0 * h)
        return cols

    def hess(first, second):
        n = z.size if second == "z" else x.size
        cols = []
        for k in range(n):
            e = np.zeros(n)
            e[k] = step2
            if second == "z":
                hi, lo = jac(z + e, x, first, step2), jac(z - e, x, first, step2)
            else:
                hi, lo = jac(z, x + e, first, step2), jac(z, x - e, first, step2)
            cols.append(vec((hi - lo) / (2.0 * step2)))
        return np.column_stack(cols)

    return LayerDerivatives(
        jac_z=jac(z, x, "z", step),
        jac_x=jac(z, x, "x", step),
        hess_xx=hess("x", "x"),
        hess_zx=hess("x", "z"),
        hess_xz=hess("z", "x"),
        hess_zz=hess("z", "z"),
    )


def finite_diff_gradient(pipeline: Pipeline, z0, params, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the scalar loss over the flat parameters."""
    if pipeline.out_dim != 1:
        raise ValueError("gradient is defined for scalar-output pipelines")
    flat = (
        np.asarray(params, dtype=np.float64)
        if isinstance(params, np.ndarray) and np.asarray(params).ndim == 1
        else pipeline.join_params(params)
    )
    g = np.empty(flat.size)
    for k in range(flat.size):
        e = np.zeros(flat.size)
        e[k] = step
        hi = pipeline.value(z0, flat + e)[0]
        lo = pipeline.value(z0, flat - e)[0]
        g[k] = (hi - lo) / (2.0 * step)
    return g


def random_pipeline(
    depth: int,
    width: int,
    params_per_layer: int,
    seed: int = 0,
    label_dim: int = 1,
    activation: str = "tanh",
) -> Pipeline:
    """Seeded test pipeline: feature stages with label passthrough, then a
    squared loss that consumes features and labels together.

    The state carries [features, labels]; every stage has exactly
    ``params_per_layer`` free parameters, so depth/width/parameter count
    vary independently.
    """
    if depth < 1:
        raise ValueError("depth must be at least 1")
    mix = {"tanh": MixTanh, "softplus": MixSoftplus}.get(activation)
    if mix is None:
        raise ValueError(f"unknown activation {activation!r}")
    layers: list[Layer] = []
    for l in range(depth - 1):
        core = mix(width, params_per_layer, width, seed=1000 * seed + l)
        layers.append(TailPassthrough(core, label_dim))
    layers.append(
        MixSquaredLoss(width + label_dim, params_per_layer, seed=1000 * seed + depth)
    )
    return Pipeline(layers)


def random_point(pipeline: Pipeline, seed: int = 0):
    """Seeded (z0, params) pair sized to the pipeline.

    Parameters are uniform draws scaled by 1/sqrt(fan-in), keeping
    stacked saturating stages in their curved region so second
    derivatives stay informative.
    """
    rng = np.random.default_rng(seed + 7919)
    z0 = rng.uniform(-1.0, 1.0, pipeline.in_dim)
    params = tuple(
        rng.uniform(-1.0, 1.0, p) / np.sqrt(max(p, 1)) for p in pipeline.param_dims
    )
    return z0, params
