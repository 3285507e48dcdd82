"""End-to-end pipeline: pilot warmup, one-shot dual scoring through the
shared projection vector, signed top-k / top-b selection, and masked
restricted fine-tuning restarted from the original parameters. Also hosts
the diagnostics orchestration and report emission."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as data_mod
from .cwsd import CwsdConfig, CwsdPreservation
from .models import (
    MLP,
    SOFTMAX_CLASSIFIER,
    TINY_CAUSAL_LM,
    GhostTapes,
    ToyModel,
    make_mlp,
    make_softmax_classifier,
    make_tiny_causal_lm,
    record_ghost_tapes,
)
from .objectives import DatasetLoss, DatasetSplit, QuadraticTask, ValidationObjective, ZeroPreservation
from .optim import curvature_proxy, make_optimizer, masked_step
from .scoring import ProjectionVector, build_projection, ghost_dot, topb_signed, topk_signed
from .surrogate import DATA_SIDE, DIAG, FIRST, PARAMETER_SIDE, Selection
from .tensor import ParameterVector, PerSampleGradients, per_sample_grads, value_and_grad

# Sub-seeds for the independent random streams of a run.
STAGE_DATA, STAGE_INIT, STAGE_WARMUP, STAGE_FT, STAGE_BASELINE, STAGE_DIAG = range(6)

DIAGNOSTIC_KINDS = ("shapley", "truncation", "coordination", "regret",
                    "stability", "diag_full", "fidelity", "reselect")


@dataclass
class RunConfig:
    seed: int = 0
    model_kind: str = SOFTMAX_CLASSIFIER
    hidden_dims: tuple = (8,)
    embed_dim: int = 8
    dataset: dict = field(default_factory=lambda: {"kind": data_mod.MIXTURE})
    prior_weight: float = 0.8
    temperature: float = 1.0
    data_budget: float = 0.10
    param_budget: float = 0.05
    warm_fraction: float = 0.05
    warm_epochs: int = 1
    ft_lr: float = 0.05
    ft_epochs: int | None = None
    batch_size: int = 32
    order: str = DIAG
    diagnostics: tuple = ()

    def __post_init__(self):
        if not (0.0 <= self.data_budget <= 1.0 and 0.0 <= self.param_budget <= 1.0):
            raise ValueError("budgets are fractions in [0, 1]")
        if self.ft_lr <= 0:
            raise ValueError("fine-tuning learning rate must be positive")
        if self.order not in (FIRST, DIAG):
            raise ValueError("pipeline scoring order must be 'first' or 'diag'")
        for kind in self.diagnostics:
            if kind not in DIAGNOSTIC_KINDS:
                raise ValueError(f"unknown diagnostic {kind!r}")

    def resolved_ft_epochs(self) -> int:
        if self.ft_epochs is not None:
            return self.ft_epochs
        return 2 if self.model_kind == TINY_CAUSAL_LM else 3

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden_dims"] = list(self.hidden_dims)
        out["diagnostics"] = list(self.diagnostics)
        return out


def stage_rng(seed: int, stage: int, extra: int | None = None) -> np.random.Generator:
    key = [seed, stage] if extra is None else [seed, stage, extra]
    return np.random.default_rng(key)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def _run_stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def build_model(config: RunConfig):
    spec = config.dataset
    kind = spec.get("kind", data_mod.MIXTURE)
    if kind == data_mod.QUADRATIC:
        return QuadraticTask(int(spec.get("num_features", 8)))
    if kind == data_mod.CHAR_LM or config.model_kind == TINY_CAUSAL_LM:
        return make_tiny_causal_lm(int(spec.get("vocab_size", 16)), config.embed_dim)
    num_features = int(spec.get("num_features", 6))
    num_classes = int(spec.get("num_classes", 2))
    if config.model_kind == MLP:
        return make_mlp(num_features, list(config.hidden_dims), num_classes)
    return make_softmax_classifier(num_features, num_classes)


def make_split(config: RunConfig) -> DatasetSplit:
    spec = dict(config.dataset)
    rng = stage_rng(config.seed, STAGE_DATA)
    if spec.get("kind") == "jsonl":
        train = data_mod.load_jsonl(spec["train"])
        val = data_mod.load_jsonl(spec["val"])
        anchor = data_mod.load_jsonl(spec["anchor"]) if spec.get("anchor") else []
        n_warm = int(np.ceil(config.warm_fraction * len(train)))
        warm = np.sort(rng.choice(len(train), size=n_warm, replace=False))
        return DatasetSplit(train, val, anchor, warm, meta={"kind": "jsonl"})
    spec.setdefault("warm_fraction", config.warm_fraction)
    return data_mod.synth_dataset(spec, rng)


def batched_mean_gradient(model, point: ParameterVector, examples) -> np.ndarray:
    _, grad = value_and_grad(lambda th: model.loss_mean(th, examples), point)
    return grad.values


def _epoch_steps(model, params: ParameterVector, examples, opt_state, batch_size: int,
                 rng: np.random.Generator):
    order = rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        batch = [examples[i] for i in order[start : start + batch_size]]
        grad = batched_mean_gradient(model, params, batch)
        masked_step(opt_state, params, grad)


def warmup(model, theta_old: ParameterVector, warm_examples, config: RunConfig):
    """Unmasked optimizer pass over the warmup split; returns the scoring
    checkpoint and the frozen curvature proxy snapshot."""
    if len(warm_examples) == 0:
        warnings.warn("empty warmup split: scoring at the initial checkpoint with a "
                      "degenerate curvature proxy", RuntimeWarning)
        state = make_optimizer(theta_old.dim, config.ft_lr)
        return theta_old.copy(), np.full(theta_old.dim, state.eps), state
    params = theta_old.copy()
    state = make_optimizer(theta_old.dim, config.ft_lr)
    rng = stage_rng(config.seed, STAGE_WARMUP)
    for _ in range(config.warm_epochs):
        _epoch_steps(model, params, warm_examples, state, config.batch_size, rng)
    return params, curvature_proxy(state).copy(), state


def grad_sum(model, theta_bar: ParameterVector, pool) -> GhostTapes:
    """First streaming pass: aggregate gradient of the summed pool loss plus
    the affine-layer tapes the second pass will score against."""
    if isinstance(model, ToyModel):
        return record_ghost_tapes(model, theta_bar, pool)
    rows = per_sample_grads(model.example_loss, pool, theta_bar)
    return GhostTapes([], theta_bar.fingerprint(), len(pool), rows.total)


def pool_rows(model, theta_bar: ParameterVector, pool) -> PerSampleGradients:
    return per_sample_grads(model.example_loss, pool, theta_bar)


def finetune(model, theta_start: ParameterVector, examples, mask: np.ndarray | None,
             config: RunConfig, rng: np.random.Generator) -> ParameterVector:
    """Masked restricted fine-tuning: gradients, adaptive moments and
    decoupled decay all act only on unmasked coordinates."""
    if len(examples) == 0:
        raise ValueError("restricted fine-tuning needs a non-empty dataset")
    params = theta_start.copy()
    state = make_optimizer(theta_start.dim, config.ft_lr, mask=mask)
    for _ in range(config.resolved_ft_epochs()):
        _epoch_steps(model, params, examples, state, config.batch_size, rng)
    return params


def make_validation_objective(model, split: DatasetSplit, theta_old: ParameterVector,
                              config: RunConfig) -> ValidationObjective:
    new_loss = DatasetLoss(model, split.val)
    if isinstance(model, ToyModel) and len(split.anchor) > 0:
        prior = CwsdPreservation(model, CwsdConfig(config.temperature,
                                                   split.anchor, theta_old))
    else:
        prior = ZeroPreservation()
    return ValidationObjective(new_loss, prior, config.prior_weight)


# ---------------------------------------------------------------------------
# Scoring context: everything up to (and including) the selections
# ---------------------------------------------------------------------------

@dataclass
class ScoringContext:
    config: RunConfig
    model: object
    split: DatasetSplit
    theta_old: ParameterVector
    theta_bar: ParameterVector
    proxy: np.ndarray
    tapes: GhostTapes
    pool_size: int
    scoring_step: float
    objective: ValidationObjective
    val_grad_new: np.ndarray
    val_grad_prior: np.ndarray
    projection: ProjectionVector
    param_scores: np.ndarray
    data_scores: np.ndarray
    param_budget_count: int
    data_budget_count: int
    param_mask_sel: Selection
    data_sel: Selection  # positions within the scoring pool
    _rows: PerSampleGradients | None = None

    @property
    def param_mask(self) -> np.ndarray:
        return self.param_mask_sel.mask(self.theta_old.dim).astype(np.float64)

    @property
    def rows(self) -> PerSampleGradients:
        if self._rows is None:
            self._rows = pool_rows(self.model, self.theta_bar, self.split.pool)
        return self._rows

    @property
    def selected_train_indices(self) -> np.ndarray:
        return self.split.pool_indices[self.data_sel.members]


def build_context(config: RunConfig, split: DatasetSplit | None = None) -> ScoringContext:
    model = _run_stage("build_model", build_model, config)
    if split is None:
        split = _run_stage("dataset", make_split, config)
    theta_old = model.init_params(stage_rng(config.seed, STAGE_INIT))
    theta_bar, proxy, _ = _run_stage("warmup", warmup, model, theta_old, split.warm, config)
    pool = split.pool
    if len(pool) == 0:
        raise StageError("grad_sum", ValueError("scoring pool is empty after warmup"))
    rows_cache = None
    if isinstance(model, ToyModel):
        tapes = _run_stage("grad_sum", grad_sum, model, theta_bar, pool)
    else:
        rows_cache = _run_stage("grad_sum", pool_rows, model, theta_bar, pool)
        tapes = GhostTapes([], theta_bar.fingerprint(), len(pool), rows_cache.total)
    pool_size = len(pool)
    scoring_step = config.ft_lr / pool_size
    objective = make_validation_objective(model, split, theta_old, config)
    v_new = _run_stage("val_grad", lambda: objective.new_loss.gradient(theta_bar))
    v_prior = _run_stage("preservation", lambda: objective.prior_loss.gradient(theta_bar))
    # The first-order variant drops the curvature correction by zeroing the
    # aggregate-gradient term (the positive proxy is kept for audit).
    correction_total = tapes.total_grad if config.order == DIAG else np.zeros_like(tapes.total_grad)
    projection = build_projection(scoring_step, v_new, v_prior, config.prior_weight,
                                  proxy, correction_total,
                                  expected_step=(config.ft_lr, pool_size))
    param_scores = projection.vector * tapes.total_grad
    if isinstance(model, ToyModel):
        data_scores = _run_stage("ghost_dot", ghost_dot, projection, theta_old, tapes)
    else:
        data_scores = rows_cache.rows @ projection.vector
    k_count = math.ceil(config.param_budget * theta_old.dim)
    b_count = math.ceil(config.data_budget * pool_size)
    param_mask_sel = topk_signed(param_scores, k_count, side=PARAMETER_SIDE)
    data_sel = topb_signed(data_scores, b_count)
    return ScoringContext(config, model, split, theta_old, theta_bar, proxy, tapes,
                          pool_size, scoring_step, objective, v_new, v_prior, projection,
                          param_scores, data_scores, k_count, b_count,
                          param_mask_sel, data_sel, _rows=rows_cache)


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------

@dataclass
class RunArtifacts:
    context: ScoringContext
    theta_star: ParameterVector
    metrics: dict
    diagnostics: dict

    @property
    def config(self) -> RunConfig:
        return self.context.config


def run_dualsft(config: RunConfig, split: DatasetSplit | None = None) -> RunArtifacts:
    context = build_context(config, split=split)
    diagnostics = {kind: None for kind in DIAGNOSTIC_KINDS}
    for i, kind in enumerate(config.diagnostics):
        diagnostics[kind] = diagnose(kind, config, context=context,
                                     rng=stage_rng(config.seed, STAGE_DIAG, i))
    selected = [context.split.train[i] for i in context.selected_train_indices]
    mask_bool = context.param_mask_sel.mask(context.theta_old.dim)
    theta_star = _run_stage("masked_ft", finetune, context.model, context.theta_old,
                            selected, mask_bool, config,
                            stage_rng(config.seed, STAGE_FT))
    metrics = _run_stage("metrics", _collect_metrics, context, theta_star, selected)
    return RunArtifacts(context, theta_star, metrics, diagnostics)


def _collect_metrics(context: ScoringContext, theta_star: ParameterVector, selected) -> dict:
    obj = context.objective
    model = context.model
    train_loss = DatasetLoss(model, context.split.pool)
    sel_loss = DatasetLoss(model, selected)
    return {
        "val_new_loss_initial": obj.new_loss.value(context.theta_old),
        "val_new_loss_checkpoint": obj.new_loss.value(context.theta_bar),
        "val_new_loss_final": obj.new_loss.value(theta_star),
        "val_total_initial": obj.eval_val(context.theta_old),
        "val_total_final": obj.eval_val(theta_star),
        "prior_loss_final": obj.prior_loss.value(theta_star),
        "pool_loss_initial": train_loss.value(context.theta_old),
        "pool_loss_final": train_loss.value(theta_star),
        "selected_loss_final": sel_loss.value(theta_star),
        "selected_count": len(selected),
        "param_mask_count": int(context.param_mask_sel.size),
        "pool_size": context.pool_size,
        "scoring_step": context.scoring_step,
    }


def random_baseline(config: RunConfig, split: DatasetSplit | None = None) -> dict:
    """Matched-budget random selection: same pipeline, but the data subset
    and parameter mask are drawn uniformly instead of score-ranked."""
    context = build_context(config, split=split)
    rng = stage_rng(config.seed, STAGE_BASELINE)
    b_count, k_count = context.data_budget_count, context.param_budget_count
    data_pick = np.sort(rng.choice(context.pool_size, size=b_count, replace=False))
    param_pick = np.sort(rng.choice(context.theta_old.dim, size=k_count, replace=False))
    selected = [context.split.pool[i] for i in data_pick]
    mask = np.zeros(context.theta_old.dim, dtype=bool)
    mask[param_pick] = True
    theta_star = finetune(context.model, context.theta_old, selected, mask, config,
                          stage_rng(config.seed, STAGE_FT))
    return {
        "val_new_loss_final": context.objective.new_loss.value(theta_star),
        "val_total_final": context.objective.eval_val(theta_star),
        "data_pick": data_pick,
        "param_pick": param_pick,
    }


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def diagnose(kind: str, config: RunConfig, context: ScoringContext | None = None,
             rng: np.random.Generator | None = None, **overrides) -> dict:
    if kind not in DIAGNOSTIC_KINDS:
        raise ValueError(f"unknown diagnostic {kind!r}; choose from {DIAGNOSTIC_KINDS}")
    rng = rng if rng is not None else stage_rng(config.seed, STAGE_DIAG)
    if kind in ("regret", "reselect", "fidelity", "diag_full"):
        context = context if context is not None else build_context(config)
    from . import diagnostics as diag_mod

    fn = getattr(diag_mod, f"{kind}_report")
    if kind in ("shapley", "truncation", "coordination", "stability"):
        return fn(rng=rng, **overrides)
    return fn(context, rng=rng, **overrides)
