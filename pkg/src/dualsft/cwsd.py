"""Confidence-weighted self-distillation: a forward-KL objective against
the frozen pre-adaptation model, entropy-weighted per anchor input, whose
gradient supplies the preservation direction without a pre-training corpus.

For every anchor the weight is 1 - H/log|V| with H the teacher's mean
per-token predictive entropy (natural log throughout; the ratio is
base-invariant). The KL is the token-mean over non-padding response tokens,
then averaged over anchors. Teacher distributions come from a plain numpy
forward, so no gradient can flow into the frozen parameters.

The KL node uses the analytic logit-level backward (p - q)/tau and shares
one tempered log-softmax routine with the teacher pass; student == teacher
therefore gives a bitwise-zero loss and gradient, and a finite-difference
oracle validates the fused backward elsewhere."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .models import TINY_CAUSAL_LM, ToyModel
from .tensor import ParameterVector, Var, backward, mul, vsum


def tempered_log_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    """log softmax(z / temperature); the single code path shared by the
    teacher statistics and the student KL node."""
    zs = logits * (1.0 / temperature)
    shift = zs.max(axis=-1, keepdims=True)
    total = np.exp(zs - shift).sum(axis=-1, keepdims=True)
    return zs - (np.log(total) + shift)


def forward_kl(q: np.ndarray, log_q: np.ndarray, logits: Var, temperature: float) -> Var:
    """Per-position KL(q || softmax(z/temperature)) with the closed-form
    backward dz = (p - q)/temperature. q and log_q are frozen teacher
    quantities."""
    log_p = tempered_log_softmax(logits.value, temperature)
    value = (q * (log_q - log_p)).sum(axis=-1)
    p = np.exp(log_p)

    def grad(g):
        return (g[..., None] * (p - q) * (1.0 / temperature),)

    return Var(value, (logits,), grad)


@dataclass
class CwsdConfig:
    temperature: float
    anchors: list
    teacher: ParameterVector

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("distillation temperature must be positive")
        if len(self.anchors) < 1:
            raise ValueError("need at least one anchor input")


@dataclass
class _TeacherStats:
    """Frozen per-anchor teacher quantities, computed once."""

    inputs: np.ndarray  # model inputs: (B, F) features or (B, L, V) one-hots
    log_q: np.ndarray  # tempered teacher log-probs
    q: np.ndarray
    mask: np.ndarray  # scored-position mask: (B,) ones or (B, L)
    counts: np.ndarray  # scored positions per anchor
    omega: np.ndarray  # confidence weights in [0, 1]


def _teacher_stats(model: ToyModel, config: CwsdConfig) -> _TeacherStats:
    if model.kind == TINY_CAUSAL_LM:
        tokens, starts = model.stack_inputs(config.anchors)
        onehot_in, _, mask = model._lm_targets(tokens, starts)
        counts = mask.sum(axis=1)
        if np.any(counts < 1):
            raise ValueError("every anchor needs at least one scored token")
        logits = model.logits_np(config.teacher.values, onehot_in)
        inputs = onehot_in
    else:
        x, _ = model.stack_inputs(config.anchors)
        logits = model.logits_np(config.teacher.values, x)
        mask = np.ones(len(config.anchors))
        counts = np.ones(len(config.anchors))
        inputs = x
    # Confidence weights use the untempered predictive distribution.
    log_nat = tempered_log_softmax(logits, 1.0)
    entropy = -(np.exp(log_nat) * log_nat).sum(axis=-1)
    if model.kind == TINY_CAUSAL_LM:
        mean_entropy = (entropy * mask).sum(axis=1) / counts
    else:
        mean_entropy = entropy
    omega = np.clip(1.0 - mean_entropy / np.log(model.num_outputs), 0.0, 1.0)
    log_q = tempered_log_softmax(logits, config.temperature)
    return _TeacherStats(inputs, log_q, np.exp(log_q), mask, counts, omega)


def confidence_weight(model: ToyModel, teacher: ParameterVector, anchor) -> float:
    """1 - H/log|V| for one anchor, clamped to [0, 1]."""
    if model.num_outputs < 2:
        raise ValueError("confidence weight needs at least two output classes")
    stats = _teacher_stats(model, CwsdConfig(1.0, [anchor], teacher))
    return float(stats.omega[0])


@dataclass
class CwsdDirection:
    """Preservation direction plus the recorded logit-level gradients.

    `logit_grads` is the raw tape gradient at the student logits;
    multiplying by `token_scale` (broadcast over the class axis) recovers
    the per-token convention weight * tau * (p - q)."""

    values: np.ndarray
    degenerate: bool
    logit_grads: np.ndarray
    token_scale: np.ndarray


class CwsdPreservation:
    """Preservation-loss evaluator compatible with ValidationObjective."""

    def __init__(self, model: ToyModel, config: CwsdConfig):
        self.model = model
        self.config = config
        self.stats = _teacher_stats(model, config)

    def tape_loss(self, theta: Var, record_logits: list | None = None) -> Var:
        stats = self.stats
        tau = self.config.temperature
        num_anchors = len(self.config.anchors)
        z = self.model.logits(theta, stats.inputs)
        if record_logits is not None:
            record_logits.append(z)
        kl = forward_kl(stats.q, stats.log_q, z, tau)
        if self.model.kind == TINY_CAUSAL_LM:
            per_anchor = vsum(mul(kl, stats.mask / stats.counts[:, None]), axis=1)
        else:
            per_anchor = kl
        weights = stats.omega * tau ** 2 / num_anchors
        return vsum(mul(per_anchor, weights))

    def value(self, point: ParameterVector) -> float:
        return float(self.tape_loss(Var(point.values)).value)

    def gradient(self, point: ParameterVector) -> np.ndarray:
        return self.direction(point).values

    def direction(self, point: ParameterVector) -> CwsdDirection:
        """One backward pass; also records the logit-level gradient."""
        record: list = []
        theta = Var(point.values)
        loss = self.tape_loss(theta, record_logits=record)
        backward(loss)
        logits = record[0]
        grad = theta.grad if theta.grad is not None else np.zeros(point.dim)
        logit_grads = logits.grad if logits.grad is not None else np.zeros_like(logits.value)
        num_anchors = len(self.config.anchors)
        if self.model.kind == TINY_CAUSAL_LM:
            scale = np.where(self.stats.mask > 0,
                             num_anchors * self.stats.counts[:, None], 0.0)
        else:
            scale = np.full(num_anchors, float(num_anchors))
        degenerate = np.array_equal(point.values, self.config.teacher.values)
        if degenerate:
            warnings.warn("self-distillation evaluated at the frozen reference point; "
                          "the preservation direction is degenerate (zero)", RuntimeWarning)
        return CwsdDirection(grad, degenerate, logit_grads, scale)


def cwsd_loss(model: ToyModel, student: ParameterVector, config: CwsdConfig) -> float:
    return CwsdPreservation(model, config).value(student)


def cwsd_direction(model: ToyModel, student: ParameterVector, config: CwsdConfig) -> CwsdDirection:
    return CwsdPreservation(model, config).direction(student)
