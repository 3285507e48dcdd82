"""Training, target-validation and preservation losses combined into the
shared outer criterion L_val = L_new + weight * L_prior."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import ParameterVector, Var, matvec, mul, value_and_grad, vsum


def _example_key(example) -> bytes:
    first = np.asarray(example[0])
    return hashlib.sha256(first.tobytes() + str(example[1:]).encode()).digest()


@dataclass
class DatasetSplit:
    """Stable split of a run's data: training pool, validation set, warmup
    subset (indices into train) and the anchor set used only for
    preservation scoring. The scoring pool is train minus warmup."""

    train: list
    val: list
    anchor: list
    warm_indices: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.warm_indices = np.asarray(sorted(set(int(i) for i in np.atleast_1d(self.warm_indices))),
                                       dtype=np.int64) if len(np.atleast_1d(self.warm_indices)) else \
            np.zeros(0, dtype=np.int64)
        if self.warm_indices.size and (self.warm_indices[0] < 0 or
                                       self.warm_indices[-1] >= len(self.train)):
            raise ValueError("warmup indices out of range")
        train_keys = {_example_key(ex) for ex in self.train}
        for ex in self.anchor:
            if _example_key(ex) in train_keys:
                raise ValueError("anchor example overlaps the training pool")

    @property
    def pool_indices(self) -> np.ndarray:
        mask = np.ones(len(self.train), dtype=bool)
        mask[self.warm_indices] = False
        return np.flatnonzero(mask)

    @property
    def warm(self) -> list:
        return [self.train[i] for i in self.warm_indices]

    @property
    def pool(self) -> list:
        return [self.train[i] for i in self.pool_indices]


class DatasetLoss:
    """Mean loss of a model over a fixed dataset, differentiable on the tape."""

    def __init__(self, model, examples):
        if len(examples) < 1:
            raise ValueError("dataset loss needs at least one example")
        self.model = model
        self.examples = list(examples)

    def tape_loss(self, theta: Var) -> Var:
        return mul(self.model.loss_sum(theta, self.examples), 1.0 / len(self.examples))

    def value(self, point: ParameterVector) -> float:
        return float(self.tape_loss(Var(point.values)).value)

    def gradient(self, point: ParameterVector) -> np.ndarray:
        _, grad = value_and_grad(self.tape_loss, point)
        return grad.values


class ZeroPreservation:
    """Placeholder preservation loss: identically zero."""

    def value(self, point: ParameterVector) -> float:
        return 0.0

    def gradient(self, point: ParameterVector) -> np.ndarray:
        return np.zeros(point.dim)

    def tape_loss(self, theta: Var) -> Var:
        return Var(np.zeros(()))


@dataclass
class ValidationObjective:
    """L_val(theta) = L_new(theta) + weight * L_prior(theta), weight >= 0."""

    new_loss: DatasetLoss
    prior_loss: object = field(default_factory=ZeroPreservation)
    weight: float = 0.0

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("preservation weight must be non-negative")

    def eval_val(self, point: ParameterVector) -> float:
        return self.new_loss.value(point) + self.weight * self.prior_loss.value(point)

    def grad_val(self, point: ParameterVector) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (new-task gradient, preservation gradient, combined
        validation gradient); the combination is the exact componentwise sum
        v_new + weight * v_prior."""
        v_new = self.new_loss.gradient(point)
        v_prior = self.prior_loss.gradient(point)
        return v_new, v_prior, v_new + self.weight * v_prior

    def tape_loss(self, theta: Var) -> Var:
        return self.new_loss.tape_loss(theta) + mul(self.prior_loss.tape_loss(theta), self.weight)


class QuadraticTask:
    """Per-example losses 0.5 * c_n * (<x_n, theta> - y_n)^2. Quadratic in
    the parameters, so second-order expansions of any induced objective are
    exact; used as the zero-remainder oracle task."""

    def __init__(self, num_features: int):
        self.dim = num_features
        self.kind = "quadratic"

    def init_params(self, rng: np.random.Generator, scale: float = 0.5) -> ParameterVector:
        return ParameterVector.from_arrays([("theta", rng.normal(0.0, scale, self.dim))])

    def loss_sum(self, theta: Var, batch) -> Var:
        x = np.stack([np.asarray(ex[0], dtype=np.float64) for ex in batch])
        y = np.array([float(ex[1]) for ex in batch])
        c = np.array([float(ex[2]) for ex in batch])
        residual = matvec(x, theta) - y
        return mul(vsum(mul(mul(residual, residual), 0.5 * c)), 1.0)

    def loss_mean(self, theta: Var, batch) -> Var:
        return mul(self.loss_sum(theta, batch), 1.0 / len(batch))

    def example_loss(self, theta: Var, example) -> Var:
        return self.loss_sum(theta, [example])
