"""Reading and writing pipeline specs and vectors as versioned JSON.

Pipeline spec schema (version 1)::

    {
      "version": 1,
      "layers": [ {"kind": "...", ...}, ... ],
      "point": {"seed": 7}                       # or explicit values:
      "point": {"z0": [...], "params": [[...], ...]}
    }

Layer kinds and their fields:

- ``dense_tanh`` / ``dense_softplus``: ``in_dim``, ``out_dim``; the
  stage's weight matrix and bias are its parameters.
- ``mix_tanh`` / ``mix_softplus``: ``in_dim``, ``param_dim``,
  ``out_dim``, optional ``seed``; fixed seeded buffers mix state and
  parameters, so the parameter count is free.
- ``mix_squared_loss``: ``in_dim``, ``param_dim``, optional ``seed``.
- ``fused_squared_loss``: ``feature_dim``, ``label_dim``.
- ``quadratic_loss``: ``matrix`` (square, row-major nested lists),
  ``center``, optional ``in_dim`` (defaults to the center length).
- ``tail_passthrough``: ``inner`` (a nested layer object), ``tail_dim``.

Vector file schema (version 1)::

    {"version": 1, "values": [0.25, -1.5, ...]}

All malformed content raises :class:`SpecError`, which the CLI maps to
its usage-error exit code.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .pipeline import (
    DenseSoftplus,
    DenseTanh,
    FusedSquaredLoss,
    Layer,
    MixSoftplus,
    MixSquaredLoss,
    MixTanh,
    Pipeline,
    QuadraticLoss,
    TailPassthrough,
    random_point,
)

__all__ = [
    "SpecError",
    "SPEC_VERSION",
    "layer_from_dict",
    "pipeline_from_dict",
    "load_pipeline_spec",
    "load_vector",
    "save_vector",
]

SPEC_VERSION = 1


class SpecError(ValueError):
    """A spec or vector file is malformed or uses an unsupported version."""


def _require(cfg: dict, key: str, kind: str):
    if key not in cfg:
        raise SpecError(f"layer kind {kind!r} is missing field {key!r}")
    return cfg[key]


def _int_field(cfg: dict, key: str, kind: str, default=None) -> int:
    if default is not None and key not in cfg:
        return default
    v = _require(cfg, key, kind)
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise SpecError(f"{kind}.{key} must be a positive integer, got {v!r}")
    return v


def _seed_field(cfg: dict, kind: str) -> int:
    v = cfg.get("seed", 0)
    if not isinstance(v, int) or isinstance(v, bool):
        raise SpecError(f"{kind}.seed must be an integer, got {v!r}")
    return v


def _dense_tanh(cfg):
    return DenseTanh(_int_field(cfg, "in_dim", "dense_tanh"),
                     _int_field(cfg, "out_dim", "dense_tanh"))


def _dense_softplus(cfg):
    return DenseSoftplus(_int_field(cfg, "in_dim", "dense_softplus"),
                         _int_field(cfg, "out_dim", "dense_softplus"))


def _mix_tanh(cfg):
    return MixTanh(_int_field(cfg, "in_dim", "mix_tanh"),
                   _int_field(cfg, "param_dim", "mix_tanh"),
                   _int_field(cfg, "out_dim", "mix_tanh"),
                   seed=_seed_field(cfg, "mix_tanh"))


def _mix_softplus(cfg):
    return MixSoftplus(_int_field(cfg, "in_dim", "mix_softplus"),
                       _int_field(cfg, "param_dim", "mix_softplus"),
                       _int_field(cfg, "out_dim", "mix_softplus"),
                       seed=_seed_field(cfg, "mix_softplus"))


def _mix_squared_loss(cfg):
    return MixSquaredLoss(_int_field(cfg, "in_dim", "mix_squared_loss"),
                          _int_field(cfg, "param_dim", "mix_squared_loss"),
                          seed=_seed_field(cfg, "mix_squared_loss"))


def _fused_squared_loss(cfg):
    return FusedSquaredLoss(_int_field(cfg, "feature_dim", "fused_squared_loss"),
                            _int_field(cfg, "label_dim", "fused_squared_loss"))


def _quadratic_loss(cfg):
    try:
        matrix = np.asarray(_require(cfg, "matrix", "quadratic_loss"), dtype=np.float64)
        center = np.asarray(_require(cfg, "center", "quadratic_loss"), dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise SpecError(f"quadratic_loss matrix/center not numeric: {e}") from e
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise SpecError(f"quadratic_loss.matrix must be square, got shape {matrix.shape}")
    if center.shape != (matrix.shape[0],):
        raise SpecError("quadratic_loss.center length must match the matrix side")
    in_dim = _int_field(cfg, "in_dim", "quadratic_loss", default=center.size)
    return QuadraticLoss(in_dim, matrix, center)


def _tail_passthrough(cfg):
    inner = _require(cfg, "inner", "tail_passthrough")
    if not isinstance(inner, dict):
        raise SpecError("tail_passthrough.inner must be a layer object")
    return TailPassthrough(layer_from_dict(inner),
                           _int_field(cfg, "tail_dim", "tail_passthrough"))


_LAYER_KINDS = {
    "dense_tanh": _dense_tanh,
    "dense_softplus": _dense_softplus,
    "mix_tanh": _mix_tanh,
    "mix_softplus": _mix_softplus,
    "mix_squared_loss": _mix_squared_loss,
    "fused_squared_loss": _fused_squared_loss,
    "quadratic_loss": _quadratic_loss,
    "tail_passthrough": _tail_passthrough,
}


def layer_from_dict(cfg: dict) -> Layer:
    """Build one layer from its JSON object."""
    if not isinstance(cfg, dict):
        raise SpecError(f"layer entry must be an object, got {type(cfg).__name__}")
    kind = cfg.get("kind")
    builder = _LAYER_KINDS.get(kind)
    if builder is None:
        raise SpecError(
            f"unknown layer kind {kind!r}; known: {sorted(_LAYER_KINDS)}"
        )
    return builder(cfg)


def _check_version(doc: dict, what: str) -> None:
    v = doc.get("version")
    if v != SPEC_VERSION:
        raise SpecError(f"{what} version must be {SPEC_VERSION}, got {v!r}")


def pipeline_from_dict(doc: dict):
    """Build (pipeline, z0, params) from a parsed spec document.

    The evaluation point comes from ``point.seed`` (default seed 0) or
    from explicit ``point.z0`` / ``point.params`` arrays.
    """
    if not isinstance(doc, dict):
        raise SpecError("spec document must be a JSON object")
    _check_version(doc, "pipeline spec")
    layers = doc.get("layers")
    if not isinstance(layers, list) or not layers:
        raise SpecError("spec must contain a non-empty 'layers' list")
    try:
        pipeline = Pipeline([layer_from_dict(c) for c in layers])
    except ValueError as e:
        if isinstance(e, SpecError):
            raise
        raise SpecError(f"layers do not form a valid pipeline: {e}") from e

    point = doc.get("point", {"seed": 0})
    if not isinstance(point, dict):
        raise SpecError("'point' must be an object")
    if "z0" in point or "params" in point:
        try:
            z0 = np.asarray(_require(point, "z0", "point"), dtype=np.float64)
            raw = _require(point, "params", "point")
            params = tuple(np.asarray(x, dtype=np.float64) for x in raw)
        except (TypeError, ValueError) as e:
            raise SpecError(f"point values not numeric: {e}") from e
        if z0.shape != (pipeline.in_dim,):
            raise SpecError(
                f"point.z0 has length {z0.size}, pipeline expects {pipeline.in_dim}"
            )
        if tuple(x.shape for x in params) != tuple((p,) for p in pipeline.param_dims):
            raise SpecError(
                f"point.params lengths {[x.size for x in params]} do not match "
                f"layer parameter dims {list(pipeline.param_dims)}"
            )
    else:
        seed = point.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise SpecError(f"point.seed must be an integer, got {seed!r}")
        z0, params = random_point(pipeline, seed)
    return pipeline, z0, params


def _load_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise SpecError(f"cannot read {path}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise SpecError(f"{path} is not valid JSON: {e}") from e


def load_pipeline_spec(path):
    """Read a spec file; returns (pipeline, z0, params)."""
    return pipeline_from_dict(_load_json(path))


def load_vector(path) -> np.ndarray:
    """Read a vector file; returns a float array."""
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise SpecError("vector document must be a JSON object")
    _check_version(doc, "vector file")
    values = doc.get("values")
    if not isinstance(values, list):
        raise SpecError("vector file must contain a 'values' list")
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise SpecError(f"vector values not numeric: {e}") from e
    if arr.ndim != 1:
        raise SpecError(f"vector values must be flat, got shape {arr.shape}")
    return arr


def save_vector(path, values) -> None:
    """Write a flat array to the versioned vector format."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a flat vector, got shape {arr.shape}")
    doc = {"version": SPEC_VERSION, "values": [float(v) for v in arr]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
