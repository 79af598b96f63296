"""Exact Hessian-vector and Hessian-inverse-vector products for
layerwise pipelines, without ever forming the Hessian.

The loss of a layered pipeline has a Hessian built from per-layer
jacobians and curvature blocks chained through a unit-lower-bidiagonal
recursion.  :class:`HessianOperator` applies that Hessian to vectors in
time linear in depth; :func:`hivp_solve` solves (H + eps I) x = b by
lifting the same structure into a block-tridiagonal system, factorizing
it, and reading the answer back out.  ``pipehess verify`` runs the
self-checks from the command line.
"""

from .blockmat import (
    BlockBanded,
    BlockDiagonal,
    BlockLowerBidiagonal,
    BlockTridiagonal,
    CommutationPermutation,
    LDUFactorization,
    ShiftOperator,
    SingularPivotBlock,
    pivot_to_tridiagonal,
    unvec,
    vec,
)
from .hessian import (
    AdjointContraction,
    HessianOperator,
    HvpWorkspace,
    dense_hessian,
    finite_diff_hessian,
    hvp_pearlmutter,
)
from .pipeline import (
    DenseSoftplus,
    DenseTanh,
    EvaluationPoint,
    FusedSquaredLoss,
    Layer,
    LayerDerivatives,
    MixSoftplus,
    MixSquaredLoss,
    MixTanh,
    Pipeline,
    QuadraticLoss,
    TailPassthrough,
    finite_diff_gradient,
    random_pipeline,
    random_point,
)
from .solver import (
    LiftedSystem,
    NoConvergence,
    SolveReport,
    cg_solve,
    hivp_solve,
    lift,
    unpivot_extract,
)

__version__ = "0.1.0"

__all__ = [
    "AdjointContraction",
    "BlockBanded",
    "BlockDiagonal",
    "BlockLowerBidiagonal",
    "BlockTridiagonal",
    "CommutationPermutation",
    "DenseSoftplus",
    "DenseTanh",
    "EvaluationPoint",
    "FusedSquaredLoss",
    "HessianOperator",
    "HvpWorkspace",
    "LDUFactorization",
    "Layer",
    "LayerDerivatives",
    "LiftedSystem",
    "MixSoftplus",
    "MixSquaredLoss",
    "MixTanh",
    "NoConvergence",
    "Pipeline",
    "QuadraticLoss",
    "ShiftOperator",
    "SingularPivotBlock",
    "SolveReport",
    "TailPassthrough",
    "cg_solve",
    "dense_hessian",
    "finite_diff_gradient",
    "finite_diff_hessian",
    "hivp_solve",
    "hvp_pearlmutter",
    "lift",
    "pivot_to_tridiagonal",
    "random_pipeline",
    "random_point",
    "unpivot_extract",
    "vec",
    "unvec",
]
