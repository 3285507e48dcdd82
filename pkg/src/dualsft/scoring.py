"""Interaction matrices, closed-form dual scores, the shared projection
vector, rank-one practical scores, ghost dot-product streaming and signed
top-k selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .models import GhostTapes
from .surrogate import DATA_SIDE, DIAG, FIRST, FULL, ORDERS, PARAMETER_SIDE, Selection
from .tensor import DenseHessian, ParameterVector, PerSampleGradients

EXPLICIT_ENTRY_LIMIT = 2 ** 24


def _rows(grads) -> np.ndarray:
    return grads.rows if isinstance(grads, PerSampleGradients) else np.asarray(grads, dtype=np.float64)


def interaction_weights(order: str, val_grad: np.ndarray, curvature, grad_total: np.ndarray,
                        step_size: float) -> np.ndarray:
    """The D-vector w with M_{n,d} = w_d * g_{n,d}: first-order keeps
    step*val_grad, the second-order variants subtract half a squared-step
    curvature correction along the aggregate gradient."""
    first = step_size * val_grad
    if order == FIRST:
        return first
    if order == DIAG:
        c = np.asarray(curvature, dtype=np.float64)
        return first - 0.5 * step_size ** 2 * c * grad_total
    if order == FULL:
        h = curvature.entries if isinstance(curvature, DenseHessian) else curvature
        hg = h(grad_total) if callable(h) else np.asarray(h, dtype=np.float64) @ grad_total
        return first - 0.5 * step_size ** 2 * hg
    raise ValueError(f"order must be one of {ORDERS}")


@dataclass
class InteractionMatrix:
    order: str
    step_size: float
    weights: np.ndarray  # w_d such that M_{n,d} = w_d g_{n,d}
    rows: np.ndarray  # per-sample gradient rows (N, D)
    entries: np.ndarray | None  # explicit matrix, only when N*D is small

    @property
    def explicit(self) -> bool:
        return self.entries is not None


def build_interaction(order: str, grads, val_grad: np.ndarray, curvature,
                      step_size: float) -> InteractionMatrix:
    rows = _rows(grads)
    total = np.add.reduce(rows, axis=0)
    weights = interaction_weights(order, val_grad, curvature, total, step_size)
    entries = weights[None, :] * rows if rows.size <= EXPLICIT_ENTRY_LIMIT else None
    return InteractionMatrix(order, step_size, weights, rows, entries)


@dataclass
class ScorePair:
    param_scores: np.ndarray  # length D, column sums
    data_scores: np.ndarray  # length N, row sums
    order: str


def aggregate_scores(matrix: InteractionMatrix) -> ScorePair:
    """Column sums give parameter scores, row sums give data scores. The
    implicit representation evaluates both without materializing entries."""
    total = np.add.reduce(matrix.rows, axis=0)
    param_scores = matrix.weights * total
    data_scores = matrix.rows @ matrix.weights
    return ScorePair(param_scores, data_scores, matrix.order)


@dataclass
class ProjectionVector:
    """Validation-improvement direction shared by both score axes."""

    vector: np.ndarray
    step_size: float
    prior_weight: float
    components: dict = field(default_factory=dict)


def build_projection(step_size: float, val_grad_new: np.ndarray, val_grad_prior: np.ndarray,
                     prior_weight: float, curvature: np.ndarray, grad_total: np.ndarray,
                     expected_step: tuple[float, int] | None = None) -> ProjectionVector:
    """u = step*(v_new + weight*v_prior) - (step^2/2) * curvature ⊙ G.

    The curvature proxy must be strictly positive; `expected_step`
    (fine-tune step, pool size) lets the pipeline assert its step-size
    calibration step = lr / pool_size."""
    if step_size <= 0:
        raise ValueError("scoring step size must be positive")
    curvature = np.asarray(curvature, dtype=np.float64)
    if np.any(curvature <= 0):
        raise ValueError("curvature proxy violated its positivity contract")
    if expected_step is not None:
        lr, pool_size = expected_step
        if step_size != lr / pool_size:
            raise ValueError("scoring step must equal fine-tune step / pool size")
    vector = step_size * (val_grad_new + prior_weight * val_grad_prior) \
        - 0.5 * step_size ** 2 * curvature * grad_total
    return ProjectionVector(vector, step_size, prior_weight, {
        "val_grad_new": val_grad_new,
        "val_grad_prior": val_grad_prior,
        "curvature": curvature,
        "grad_total": grad_total,
    })


def practical_scores(projection: ProjectionVector | np.ndarray, grads) -> ScorePair:
    """Rank-one scores along the projection: parameter side u ⊙ G, data
    side <u, g_n>."""
    u = projection.vector if isinstance(projection, ProjectionVector) else np.asarray(projection)
    rows = _rows(grads)
    total = np.add.reduce(rows, axis=0)
    return ScorePair(u * total, rows @ u, DIAG)


def ghost_dot(projection: ProjectionVector | np.ndarray, params: ParameterVector,
              tapes: GhostTapes) -> np.ndarray:
    """Streamed data scores from affine-layer tapes: for every example,
    sum over layers of eps^T U a plus the bias term eps^T u_bias, where U is
    the layer-shaped slice of the projection vector. Per-sample gradient
    rows are never materialized."""
    u = projection.vector if isinstance(projection, ProjectionVector) else np.asarray(projection)
    recorded = {tape.name for tape in tapes.tapes}
    for seg in params.segments:
        layer = seg.name.rsplit(".", 1)[0]
        if layer not in recorded:
            raise ValueError(f"missing ghost tape for layer {layer!r} covered by the projection")
    scores = np.zeros(tapes.batch_size)
    u_pv = params.with_values(u)
    for tape in tapes.tapes:
        u_mat = np.ascontiguousarray(u_pv.view(f"{tape.name}.weight"))
        eps = np.ascontiguousarray(tape.preact_grads)
        act = np.ascontiguousarray(tape.activations)
        if eps.ndim == 2:
            kernels.ghost_scores_2d(eps, act, u_mat, scores)
        else:
            kernels.ghost_scores_3d(eps, act, u_mat, scores)
        if tape.has_bias:
            u_bias = u_pv.view(f"{tape.name}.bias")
            if eps.ndim == 2:
                scores += eps @ u_bias
            else:
                scores += np.einsum("nto,o->n", eps, u_bias)
    return scores


def topk_signed(scores: np.ndarray, budget: int, side: str = PARAMETER_SIDE) -> Selection:
    """Indices of the `budget` largest values by signed comparison; ties
    break toward the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= budget <= scores.size:
        raise ValueError(f"budget must lie in [0, {scores.size}]")
    order = np.argsort(-scores, kind="stable")
    return Selection(side, np.sort(order[:budget]))


def topb_signed(scores: np.ndarray, budget: int) -> Selection:
    return topk_signed(scores, budget, side=DATA_SIDE)


def export_scores(path, scores: np.ndarray):
    """Write (index, score) rows for audit."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "score"])
        for i, s in enumerate(np.asarray(scores)):
            writer.writerow([i, repr(float(s))])
