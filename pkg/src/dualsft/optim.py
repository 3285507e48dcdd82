"""Masked AdamW, the damped second-moment curvature proxy, diagonal-proxy
perturbation identities with their operator-norm bounds, top-k stability
certificates, and the rank-agreement / score-drift diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats

from . import kernels
from .tensor import DenseHessian, NumericsError, ParameterVector, PerSampleGradients


@dataclass
class OptimizerState:
    """AdamW state. Masked coordinates keep zero moments, are never decayed
    and stay bit-identical across steps."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    mask: np.ndarray | None = None  # None means all coordinates trainable


def make_optimizer(dim: int, lr: float, mask: np.ndarray | None = None,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                   weight_decay: float = 0.0) -> OptimizerState:
    mask_arr = None if mask is None else np.ascontiguousarray(mask, dtype=np.bool_)
    return OptimizerState(np.zeros(dim), np.zeros(dim), 0, lr, beta1, beta2, eps,
                          weight_decay, mask_arr)


def masked_step(state: OptimizerState, params: ParameterVector,
                gradient: np.ndarray) -> ParameterVector:
    """One bias-corrected AdamW update applied in place on the unmasked
    coordinates; decoupled weight decay is masked as well."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != (params.dim,):
        raise ValueError("gradient length must match the parameter dimension")
    if not np.all(np.isfinite(gradient)):
        raise NumericsError("non-finite gradient passed to the optimizer")
    state.step_count += 1
    mask = state.mask if state.mask is not None else np.ones(params.dim, dtype=np.bool_)
    c1 = 1.0 - state.beta1 ** state.step_count
    c2 = 1.0 - state.beta2 ** state.step_count
    kernels.adamw_masked_update(params.values, gradient, state.first_moment,
                                state.second_moment, mask, c1, c2, state.lr,
                                state.beta1, state.beta2, state.eps, state.weight_decay)
    return params


def curvature_proxy(state: OptimizerState) -> np.ndarray:
    """Damped bias-corrected RMS gradient scale sqrt(r_t / (1 - beta2^t)) +
    eps. The caller snapshots this once at the end of warmup and treats it
    as immutable for the whole scoring pass."""
    if state.step_count < 1:
        raise ValueError("curvature proxy undefined before the first optimizer step")
    corrected = state.second_moment / (1.0 - state.beta2 ** state.step_count)
    return np.sqrt(corrected) + state.eps


def operator_norm(matrix: np.ndarray, iterations: int = 64, tol: float = 1e-8) -> float:
    """Spectral norm of a symmetric matrix by power iteration on M^2
    (deterministic start vector)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    dim = matrix.shape[0]
    if dim == 0:
        return 0.0
    vec = np.ones(dim) + 1e-3 * np.arange(dim)
    vec /= np.linalg.norm(vec)
    estimate = 0.0
    for _ in range(iterations):
        nxt = matrix @ (matrix @ vec)
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            return 0.0
        vec = nxt / norm
        new_estimate = float(np.sqrt(vec @ (matrix @ (matrix @ vec))))
        if abs(new_estimate - estimate) <= tol * max(1.0, new_estimate):
            return new_estimate
        estimate = new_estimate
    return estimate


@dataclass
class ScorePerturbation:
    """Exact diagonal-vs-full score deviations and their l-infinity bounds."""

    param_deviation: np.ndarray  # (D,)
    data_deviation: np.ndarray  # (N,)
    param_bound: float
    data_bound: float
    op_norm: float
    max_row_norm: float


def score_perturbation(hessian, proxy: np.ndarray, grad_total: np.ndarray,
                       step_size: float, grads) -> ScorePerturbation:
    """Deviation of proxy-diagonal scores from full-curvature scores:
    parameter side (step^2/2)((H - D)G)_d G_d, data side
    (step^2/2) g_n^T (H - D)G, with D = Diag(proxy)."""
    h = hessian.entries if isinstance(hessian, DenseHessian) else np.asarray(hessian)
    rows = grads.rows if isinstance(grads, PerSampleGradients) else np.asarray(grads)
    gap_matrix = h - np.diag(proxy)
    gap_vec = gap_matrix @ grad_total
    half_sq = 0.5 * step_size ** 2
    param_dev = half_sq * gap_vec * grad_total
    data_dev = half_sq * rows @ gap_vec
    opn = operator_norm(gap_matrix)
    g_norm = float(np.linalg.norm(grad_total))
    max_row = float(np.max(np.linalg.norm(rows, axis=1))) if rows.size else 0.0
    return ScorePerturbation(param_dev, data_dev,
                             half_sq * opn * g_norm ** 2,
                             half_sq * max_row * opn * g_norm,
                             opn, max_row)


@dataclass
class StabilityCertificate:
    boundary_gap: float
    perturbation: float
    certified: bool

    @property
    def verdict(self) -> str:
        return "certified-stable" if self.certified else "not-certified"


def stability_certificate(scores: np.ndarray, budget: int, perturbation: float) -> StabilityCertificate:
    """Certified-stable when the signed-score boundary gap at the budget
    exceeds twice the l-infinity perturbation bound; a certificate implies
    proxy and full-curvature top selections coincide. Budget 0 or full has
    no boundary and is trivially certified."""
    scores = np.asarray(scores, dtype=np.float64)
    if budget in (0, scores.size):
        return StabilityCertificate(np.inf, perturbation, True)
    ordered = np.sort(scores)[::-1]
    gap = float(ordered[budget - 1] - ordered[budget])
    return StabilityCertificate(gap, perturbation, gap > 2.0 * perturbation)


def save_optimizer(state: OptimizerState, path):
    """Same flat-float64 + plain-text-manifest format as model checkpoints."""
    from .models import save_params

    mask = state.mask if state.mask is not None else np.ones(state.first_moment.size, bool)
    payload = ParameterVector.from_arrays([
        ("first_moment", state.first_moment),
        ("second_moment", state.second_moment),
        ("mask", mask.astype(np.float64)),
    ])
    save_params(payload, path, extra={
        "step_count": state.step_count, "lr": state.lr, "beta1": state.beta1,
        "beta2": state.beta2, "eps": state.eps, "weight_decay": state.weight_decay,
        "has_mask": int(state.mask is not None),
    })


def load_optimizer(path) -> OptimizerState:
    from .models import load_params

    payload, extra = load_params(path)
    mask = payload.view("mask").astype(bool) if extra["has_mask"] else None
    return OptimizerState(payload.view("first_moment").copy(),
                          payload.view("second_moment").copy(),
                          int(extra["step_count"]), float(extra["lr"]),
                          float(extra["beta1"]), float(extra["beta2"]),
                          float(extra["eps"]), float(extra["weight_decay"]), mask)


# ---------------------------------------------------------------------------
# Rank agreement metrics
# ---------------------------------------------------------------------------

def pairwise_agreement(a: np.ndarray, b: np.ndarray) -> float:
    """Percentage of index pairs ordered the same way by both score vectors."""
    a, b = np.asarray(a), np.asarray(b)
    diff_a = np.sign(a[:, None] - a[None, :])
    diff_b = np.sign(b[:, None] - b[None, :])
    upper = np.triu_indices(a.size, k=1)
    return 100.0 * float(np.mean(diff_a[upper] == diff_b[upper]))


def top_fraction_overlap(a: np.ndarray, b: np.ndarray, fraction: float = 0.05) -> float:
    count = max(1, int(np.ceil(fraction * a.size)))
    top_a = set(np.argsort(-a, kind="stable")[:count].tolist())
    top_b = set(np.argsort(-b, kind="stable")[:count].tolist())
    return len(top_a & top_b) / count


def rank_agreement(a: np.ndarray, b: np.ndarray, top_fraction: float = 0.05) -> dict:
    rho = float(sstats.spearmanr(a, b).statistic)
    return {
        "spearman": rho,
        "pairwise": pairwise_agreement(a, b),
        "top_overlap": top_fraction_overlap(a, b, top_fraction),
    }


@dataclass
class RankAgreementReport:
    data: dict
    param: dict
    data_random_baseline: dict
    param_random_baseline: dict
    block: tuple[int, int]


def diag_full_rank_agreement(obj, theta_bar: ParameterVector, grads,
                             proxy: np.ndarray, step_size: float,
                             block: tuple[int, int],
                             rng: np.random.Generator) -> RankAgreementReport:
    """Compare proxy-diagonal and exact full-curvature rankings on a
    contiguous coordinate block: build both block-level projections, score
    data and parameters each way, and report Spearman / pairwise / top-5%
    agreement next to a shuffled-score baseline."""
    from .tensor import dense_hessian

    start, stop = block
    width = stop - start
    if width < 2 or width > 512:
        raise ValueError("block width must lie in [2, 512]")
    rows = grads.rows if isinstance(grads, PerSampleGradients) else np.asarray(grads)
    _, _, val_grad = obj.grad_val(theta_bar)
    hessian = dense_hessian(obj.tape_loss, theta_bar).entries[start:stop, start:stop]
    g_block = np.add.reduce(rows, axis=0)[start:stop]
    v_block = val_grad[start:stop]
    rows_block = rows[:, start:stop]
    half_sq = 0.5 * step_size ** 2
    u_full = step_size * v_block - half_sq * hessian @ g_block
    u_diag = step_size * v_block - half_sq * proxy[start:stop] * g_block
    data_full, data_diag = rows_block @ u_full, rows_block @ u_diag
    param_full, param_diag = u_full * g_block, u_diag * g_block
    data_rand = rng.permutation(data_full)
    param_rand = rng.permutation(param_full)
    return RankAgreementReport(
        data=rank_agreement(data_diag, data_full),
        param=rank_agreement(param_diag, param_full),
        data_random_baseline=rank_agreement(data_rand, data_full),
        param_random_baseline=rank_agreement(param_rand, param_full),
        block=(start, stop),
    )


# ---------------------------------------------------------------------------
# Score drift along a trajectory
# ---------------------------------------------------------------------------

@dataclass
class DriftReport:
    displacements: np.ndarray
    drifts: np.ndarray
    bounds: np.ndarray
    violations: int
    constants: dict = field(default_factory=dict)


def score_drift_report(obj, model, example, trajectory: list[ParameterVector],
                       theta_bar: ParameterVector, step_size: float) -> DriftReport:
    """Empirical drift of one example's first-order data score along a
    checkpoint trajectory against the product bound
    step * (B_v L_g + B_g L_v) * ||theta_t - theta_bar||, with the norm and
    Lipschitz constants estimated from the trajectory probes themselves."""
    from .tensor import value_and_grad

    points = [theta_bar] + list(trajectory)
    val_grads, ex_grads = [], []
    for point in points:
        _, _, v = obj.grad_val(point)
        val_grads.append(v)
        _, g = value_and_grad(lambda th: model.example_loss(th, example), point)
        ex_grads.append(g.values)
    bound_v = max(np.linalg.norm(v) for v in val_grads)
    bound_g = max(np.linalg.norm(g) for g in ex_grads)
    lip_v = lip_g = 0.0
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            dist = np.linalg.norm(points[i].values - points[j].values)
            if dist == 0.0:
                continue
            lip_v = max(lip_v, np.linalg.norm(val_grads[i] - val_grads[j]) / dist)
            lip_g = max(lip_g, np.linalg.norm(ex_grads[i] - ex_grads[j]) / dist)
    base_score = step_size * float(val_grads[0] @ ex_grads[0])
    displacements = np.array([np.linalg.norm(p.values - theta_bar.values) for p in points[1:]])
    drifts = np.array([abs(step_size * float(v @ g) - base_score)
                       for v, g in zip(val_grads[1:], ex_grads[1:])])
    bounds = step_size * (bound_v * lip_g + bound_g * lip_v) * displacements
    violations = int(np.sum(drifts > bounds * (1.0 + 1e-12) + 1e-300))
    return DriftReport(displacements, drifts, bounds, violations,
                       {"bound_v": bound_v, "bound_g": bound_g,
                        "lip_v": lip_v, "lip_g": lip_g})
