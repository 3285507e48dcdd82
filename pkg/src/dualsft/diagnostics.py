"""Diagnostic protocols re-instantiated at desk scale: closed-form vs exact
Shapley sweeps, truncation-order scans, coordination-gap residuals,
local-regret and fixed-side re-selection under the shared projection,
proxy-vs-full stability counts, slice-level rank agreement, and score
fidelity against realized optimization."""

from __future__ import annotations

import numpy as np

from .models import make_mlp, make_softmax_classifier
from .objectives import DatasetLoss, QuadraticTask, ValidationObjective
from .optim import (
    diag_full_rank_agreement,
    make_optimizer,
    masked_step,
    rank_agreement,
    score_perturbation,
    stability_certificate,
)
from .scoring import aggregate_scores, build_interaction, topb_signed, topk_signed
from .shapley import (
    game_from_instance,
    closed_form_scores,
    efficiency_residual,
    exact_shapley,
    random_instance,
    verify_closed_form,
)
from .surrogate import (
    DATA_SIDE,
    DIAG,
    FIRST,
    FULL,
    ORDERS,
    PARAMETER_SIDE,
    Selection,
    coordination_gap,
    isolated_scores,
    mask_aware_data_scores,
    mask_aware_param_scores,
    truncation_scan,
)
from .tensor import PerSampleGradients, per_sample_grads


def _jaccard(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = set(a.tolist()), set(b.tolist())
    union = sa | sb
    return len(sa & sb) / len(union) if union else 1.0


def _ordered_sum(scores: np.ndarray, members: np.ndarray) -> float:
    # Ascending-index accumulation so identical sets sum identically.
    return float(np.add.reduce(scores[np.sort(members)])) if members.size else 0.0


def _utility_ratio(aware: np.ndarray, chosen: np.ndarray, reference: np.ndarray) -> float:
    num = _ordered_sum(aware, chosen)
    den = _ordered_sum(aware, reference)
    if den == 0.0:
        return 1.0 if num == 0.0 else float("inf") * np.sign(num)
    return num / den


# ---------------------------------------------------------------------------
# Closed-form vs exact Shapley
# ---------------------------------------------------------------------------

def shapley_report(rng: np.random.Generator, num_seeds: int = 50, num_samples: int = 6,
                   dim: int = 6, step_size: float = 0.1) -> dict:
    deviations = {(order, side): 0.0 for order in ORDERS for side in (PARAMETER_SIDE, DATA_SIDE)}
    max_efficiency = 0.0
    for _ in range(num_seeds):
        inst = random_instance(rng, num_samples, dim, step_size)
        for order in ORDERS:
            curvature = inst["diag_curvature"] if order == DIAG else inst["hessian"]
            for side in (PARAMETER_SIDE, DATA_SIDE):
                dev = verify_closed_form(order, side, inst["rows"], inst["val_grad"],
                                         curvature, inst["step_size"])
                deviations[(order, side)] = max(deviations[(order, side)], dev)
                game = game_from_instance(side, order, inst["rows"], inst["val_grad"],
                                          curvature, inst["step_size"])
                scores = closed_form_scores(order, inst["rows"], inst["val_grad"],
                                            curvature, inst["step_size"])
                closed = scores.param_scores if side == PARAMETER_SIDE else scores.data_scores
                max_efficiency = max(max_efficiency, efficiency_residual(game, closed))
    return {
        "num_instances": num_seeds,
        "max_deviation": max(deviations.values()),
        "max_efficiency_residual": max_efficiency,
        "per_game_max_deviation": {f"{order}/{side}": val
                                   for (order, side), val in deviations.items()},
    }


# ---------------------------------------------------------------------------
# Truncation-order scans
# ---------------------------------------------------------------------------

def _logistic_toy(rng):
    model = make_softmax_classifier(5, 2)
    theta = model.init_params(rng, scale=0.8)
    train = [(rng.normal(size=5), int(rng.integers(0, 2))) for _ in range(12)]
    val = [(rng.normal(size=5), int(rng.integers(0, 2))) for _ in range(16)]
    return model, theta, train, val


def _mlp_toy(rng):
    model = make_mlp(4, [6], 3)
    theta = model.init_params(rng, scale=0.8)
    train = [(rng.normal(size=4), int(rng.integers(0, 3))) for _ in range(12)]
    val = [(rng.normal(size=4), int(rng.integers(0, 3))) for _ in range(16)]
    return model, theta, train, val


def _quadratic_toy(rng):
    model = QuadraticTask(8)
    theta = model.init_params(rng)
    target = rng.normal(size=8)

    def draw(count):
        x = rng.normal(size=(count, 8))
        return [(x[i], float(x[i] @ target), float(rng.uniform(0.5, 2.0))) for i in range(count)]

    return model, theta, draw(12), draw(16)


def _scan_one(builder, rng, step_sizes) -> dict:
    model, theta, train, val = builder(rng)
    obj = ValidationObjective(DatasetLoss(model, val))
    grads = per_sample_grads(model.example_loss, train, theta)
    sel = Selection(DATA_SIDE, rng.choice(len(train), size=6, replace=False))
    scan = truncation_scan(sel, obj, theta, grads, step_sizes)
    return {
        "first_slope": scan.first_slope,
        "second_slope": scan.second_slope,
        "first_status": scan.first_status,
        "second_status": scan.second_status,
        "max_second_error": float(scan.second_errors.max()),
        "step_sizes": scan.step_sizes.tolist(),
    }


def truncation_report(rng: np.random.Generator, step_sizes=None) -> dict:
    steps = np.logspace(-3, -1, 7) if step_sizes is None else np.asarray(step_sizes)
    return {
        "logistic": _scan_one(_logistic_toy, rng, steps),
        "mlp": _scan_one(_mlp_toy, rng, steps),
        "quadratic": _scan_one(_quadratic_toy, rng, steps),
    }


# ---------------------------------------------------------------------------
# Coordination-gap identities
# ---------------------------------------------------------------------------

def coordination_report(rng: np.random.Generator, num_seeds: int = 100,
                        num_samples: int = 12, dim: int = 10) -> dict:
    max_residual = 0.0
    max_full_mask_gap = 0.0
    max_full_subset_gap = 0.0
    for _ in range(num_seeds):
        inst = random_instance(rng, num_samples, dim)
        rows, val_grad, eta = inst["rows"], inst["val_grad"], inst["step_size"]
        mask = (rng.uniform(size=dim) < 0.5).astype(np.float64)
        subset = Selection(DATA_SIDE, np.flatnonzero(rng.uniform(size=num_samples) < 0.5))
        data_gap, param_gap = coordination_gap(mask, subset, val_grad, rows, eta)
        iso_data, iso_param = isolated_scores(val_grad, rows, eta)
        aware_data = mask_aware_data_scores(mask, val_grad, rows, eta)
        aware_param = mask_aware_param_scores(subset, val_grad, rows, eta)
        max_residual = max(max_residual,
                           float(np.max(np.abs(iso_data - aware_data - data_gap))),
                           float(np.max(np.abs(iso_param - aware_param - param_gap))))
        ones_gap, _ = coordination_gap(np.ones(dim), subset, val_grad, rows, eta)
        _, full_gap = coordination_gap(mask, Selection(DATA_SIDE, np.arange(num_samples)),
                                       val_grad, rows, eta)
        max_full_mask_gap = max(max_full_mask_gap, float(np.max(np.abs(ones_gap))))
        max_full_subset_gap = max(max_full_subset_gap, float(np.max(np.abs(full_gap))))
    return {
        "num_instances": num_seeds,
        "max_identity_residual": max_residual,
        "max_full_mask_gap": max_full_mask_gap,
        "max_full_subset_gap": max_full_subset_gap,
    }


# ---------------------------------------------------------------------------
# Diagonal-proxy stability certificates
# ---------------------------------------------------------------------------

def stability_report(rng: np.random.Generator, required_fired: int = 100,
                     max_attempts: int = 2000, num_samples: int = 10, dim: int = 12,
                     step_size: float = 1e-4, param_budget: int = 4,
                     data_budget: int = 4) -> dict:
    """Draw random instances until `required_fired` certificates fire per
    side; on every fired certificate compare proxy-diagonal and full top
    selections (violations expected: zero)."""
    fired = {"param": 0, "data": 0}
    violations = {"param": 0, "data": 0}
    attempts = 0
    while attempts < max_attempts and (fired["param"] < required_fired
                                       or fired["data"] < required_fired):
        attempts += 1
        inst = random_instance(rng, num_samples, dim, step_size)
        rows, val_grad = inst["rows"], inst["val_grad"]
        proxy = inst["diag_curvature"]
        hessian = inst["hessian"]
        total = np.add.reduce(rows, axis=0)
        diag_scores = aggregate_scores(build_interaction(DIAG, rows, val_grad, proxy, step_size))
        full_scores = aggregate_scores(build_interaction(FULL, rows, val_grad, hessian, step_size))
        pert = score_perturbation(hessian, proxy, total, step_size, rows)
        cert_p = stability_certificate(diag_scores.param_scores, param_budget, pert.param_bound)
        if cert_p.certified and fired["param"] < required_fired:
            fired["param"] += 1
            sel_diag = topk_signed(diag_scores.param_scores, param_budget)
            sel_full = topk_signed(full_scores.param_scores, param_budget)
            if not np.array_equal(sel_diag.members, sel_full.members):
                violations["param"] += 1
        cert_d = stability_certificate(diag_scores.data_scores, data_budget, pert.data_bound)
        if cert_d.certified and fired["data"] < required_fired:
            fired["data"] += 1
            sel_diag = topb_signed(diag_scores.data_scores, data_budget)
            sel_full = topb_signed(full_scores.data_scores, data_budget)
            if not np.array_equal(sel_diag.members, sel_full.members):
                violations["data"] += 1
    return {"attempts": attempts, "fired": fired, "violations": violations}


# ---------------------------------------------------------------------------
# Context-based diagnostics
# ---------------------------------------------------------------------------

def regret_report(context, rng=None, param_mask: np.ndarray | None = None) -> dict:
    """Aware-vs-unaware scoring under the shared projection: fixing the
    other side's selection, report top-set overlap, the aware-utility ratio
    of the unaware selection, and the relative regret."""
    rows = context.rows.rows
    u = context.projection.vector
    mask = context.param_mask if param_mask is None else np.asarray(param_mask, np.float64)
    unaware_data = rows @ u
    aware_data = mask_aware_data_scores(mask, u, rows)
    top_unaware = topb_signed(unaware_data, context.data_budget_count).members
    top_aware = topb_signed(aware_data, context.data_budget_count).members
    ratio_d = _utility_ratio(aware_data, top_unaware, top_aware)
    data_side = {"jaccard": _jaccard(top_aware, top_unaware), "ratio": ratio_d,
                 "regret_pct": 100.0 * (1.0 - ratio_d)}
    total = np.add.reduce(rows, axis=0)
    unaware_param = u * total
    aware_param = mask_aware_param_scores(context.data_sel, u, rows)
    top_unaware_p = topk_signed(unaware_param, context.param_budget_count).members
    top_aware_p = topk_signed(aware_param, context.param_budget_count).members
    ratio_p = _utility_ratio(aware_param, top_unaware_p, top_aware_p)
    param_side = {"jaccard": _jaccard(top_aware_p, top_unaware_p), "ratio": ratio_p,
                  "regret_pct": 100.0 * (1.0 - ratio_p)}
    return {"data": data_side, "param": param_side}


def reselect_report(context, rng: np.random.Generator) -> dict:
    """One round of fixed-side re-selection: re-score one side conditioned
    on the other side's one-shot selection, at unchanged budgets."""
    rows = context.rows.rows
    u = context.projection.vector
    new_param_scores = mask_aware_param_scores(context.data_sel, u, rows)
    new_param = topk_signed(new_param_scores, context.param_budget_count).members
    old_param = context.param_mask_sel.members
    data_scores_masked = mask_aware_data_scores(context.param_mask, u, rows)
    new_data = topb_signed(data_scores_masked, context.data_budget_count).members
    old_data = context.data_sel.members
    dim = context.theta_old.dim
    random_mask = np.sort(rng.choice(dim, size=context.param_budget_count, replace=False))
    random_subset = np.sort(rng.choice(rows.shape[0], size=context.data_budget_count,
                                       replace=False))
    return {
        "data_to_param": {
            "jaccard": _jaccard(old_param, new_param),
            "aware_utility_delta": _ordered_sum(new_param_scores, new_param)
                                   - _ordered_sum(new_param_scores, old_param),
        },
        "param_to_data": {
            "jaccard": _jaccard(old_data, new_data),
            "aware_utility_delta": _ordered_sum(data_scores_masked, new_data)
                                   - _ordered_sum(data_scores_masked, old_data),
        },
        "random_baseline": {
            "param_jaccard": _jaccard(old_param, random_mask),
            "data_jaccard": _jaccard(old_data, random_subset),
        },
    }


def diag_full_report(context, rng: np.random.Generator, block: tuple | None = None) -> dict:
    dim = context.theta_old.dim
    if block is None:
        block = (0, min(dim, 128))
    report = diag_full_rank_agreement(context.objective, context.theta_bar, context.rows,
                                      context.proxy, context.scoring_step, block, rng)
    return {
        "block": list(report.block),
        "data": report.data,
        "param": report.param,
        "data_random_baseline": report.data_random_baseline,
        "param_random_baseline": report.param_random_baseline,
    }


def _realized_gain_exact(context, update: np.ndarray) -> float:
    shifted = context.theta_bar.with_values(context.theta_bar.values + update)
    return context.objective.eval_val(context.theta_bar) - context.objective.eval_val(shifted)


def _realized_gain_adamw(context, examples, mask: np.ndarray | None, steps: int) -> float:
    from .pipeline import batched_mean_gradient

    params = context.theta_bar.copy()
    state = make_optimizer(params.dim, context.config.ft_lr, mask=mask)
    for _ in range(steps):
        grad = batched_mean_gradient(context.model, params, examples)
        masked_step(state, params, grad)
    return context.objective.eval_val(context.theta_bar) - context.objective.eval_val(params)


def fidelity_report(context, rng: np.random.Generator, num_subsets: int = 32,
                    subset_size: int = 16, steps: int = 10, mode: str = "adamw") -> dict:
    """Predicted subset/mask utilities (score sums) against realized
    validation gains. Mode 'exact' takes the one-step surrogate update
    itself; mode 'adamw' runs a short restricted optimization."""
    if mode not in ("adamw", "exact"):
        raise ValueError("fidelity mode must be 'adamw' or 'exact'")
    rows = context.rows.rows
    pool = context.split.pool
    subset_size = min(subset_size, len(pool))
    predicted_d, realized_d = [], []
    for _ in range(num_subsets):
        subset = np.sort(rng.choice(len(pool), size=subset_size, replace=False))
        predicted_d.append(_ordered_sum(context.data_scores, subset))
        if mode == "exact":
            update = -context.scoring_step * np.add.reduce(rows[subset], axis=0)
            realized_d.append(_realized_gain_exact(context, update))
        else:
            realized_d.append(_realized_gain_adamw(
                context, [pool[i] for i in subset], None, steps))
    dim = context.theta_old.dim
    mask_size = max(1, context.param_budget_count)
    total = np.add.reduce(rows, axis=0)
    predicted_p, realized_p = [], []
    for _ in range(num_subsets):
        picked = np.sort(rng.choice(dim, size=mask_size, replace=False))
        predicted_p.append(_ordered_sum(context.param_scores, picked))
        mask = np.zeros(dim, dtype=bool)
        mask[picked] = True
        if mode == "exact":
            update = np.where(mask, -context.scoring_step * total, 0.0)
            realized_p.append(_realized_gain_exact(context, update))
        else:
            realized_p.append(_realized_gain_adamw(context, pool, mask, steps))
    data_metrics = rank_agreement(np.array(predicted_d), np.array(realized_d))
    param_metrics = rank_agreement(np.array(predicted_p), np.array(realized_p))
    return {"mode": mode, "steps": steps, "num_subsets": num_subsets,
            "data": data_metrics, "param": param_metrics}
