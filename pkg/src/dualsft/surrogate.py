"""One-step surrogate updates around a shared checkpoint, their exact and
Taylor-truncated utilities, truncation-order scans, and the coordination
gap between isolated and restriction-aware first-order scores."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .objectives import ValidationObjective
from .tensor import DenseHessian, ParameterVector, PerSampleGradients

PARAMETER_SIDE = "parameter"
DATA_SIDE = "data"

FIRST = "first"
DIAG = "diag"
FULL = "full"
ORDERS = (FIRST, DIAG, FULL)

ERROR_FLOOR = 1e-14


@dataclass(frozen=True)
class Selection:
    """A selected index set on one side of the dual problem."""

    side: str
    members: np.ndarray

    def __post_init__(self):
        if self.side not in (PARAMETER_SIDE, DATA_SIDE):
            raise ValueError(f"side must be parameter or data, got {self.side!r}")
        members = np.unique(np.asarray(self.members, dtype=np.int64))
        if members.size and members[0] < 0:
            raise ValueError("negative selection index")
        object.__setattr__(self, "members", members)

    def mask(self, size: int) -> np.ndarray:
        if self.members.size and self.members[-1] >= size:
            raise ValueError("selection index out of range")
        out = np.zeros(size, dtype=bool)
        out[self.members] = True
        return out

    @property
    def size(self) -> int:
        return self.members.size


@dataclass
class SurrogateConfig:
    step_size: float
    order: str = FIRST
    curvature: object = None  # (D,) diagonal, DenseHessian, or hvp callable

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")


def _rows(grads) -> np.ndarray:
    return grads.rows if isinstance(grads, PerSampleGradients) else np.asarray(grads, dtype=np.float64)


def one_step_update(sel: Selection, grads, step_size: float) -> np.ndarray:
    """Surrogate inner update for a selection: the parameter side masks the
    aggregate gradient, the data side sums selected-example gradients. The
    empty selection returns the zero update."""
    rows = _rows(grads)
    dim = rows.shape[1]
    if sel.side == PARAMETER_SIDE:
        total = np.add.reduce(rows, axis=0)
        update = np.zeros(dim)
        update[sel.members] = -step_size * total[sel.members]
        return update
    if sel.size == 0:
        return np.zeros(dim)
    return -step_size * np.add.reduce(rows[sel.members], axis=0)


def exact_step_utility(sel: Selection, obj: ValidationObjective, theta_bar: ParameterVector,
                       grads, step_size: float) -> float:
    """Validation gain of the one-step update, by full re-forward:
    L_val(theta_bar) - L_val(theta_bar + update)."""
    update = one_step_update(sel, grads, step_size)
    return obj.eval_val(theta_bar) - obj.eval_val(theta_bar.with_values(theta_bar.values + update))


def _curvature_quadratic(update: np.ndarray, curvature) -> float:
    """update^T H update for a diagonal vector, dense matrix, or hvp callable."""
    if curvature is None:
        raise ValueError("second-order utility needs a curvature source")
    if isinstance(curvature, DenseHessian):
        return float(update @ (curvature.entries @ update))
    if callable(curvature):
        return float(update @ curvature(update))
    curvature = np.asarray(curvature, dtype=np.float64)
    if curvature.ndim == 1:
        return float(np.sum(curvature * update * update))
    return float(update @ (curvature @ update))


def taylor_utility(sel: Selection, order: str, val_grad: np.ndarray, curvature,
                   grads, step_size: float) -> float:
    """First- or second-order truncation of the local utility expansion:
    -v^T update (- 1/2 update^T H update for the second-order variants,
    with H the diagonal vector for `diag` and the dense/implicit Hessian
    for `full`)."""
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    update = one_step_update(sel, grads, step_size)
    first = -float(np.dot(val_grad, update))
    if order == FIRST:
        return first
    return first - 0.5 * _curvature_quadratic(update, curvature)


@dataclass
class TruncationScan:
    step_sizes: np.ndarray
    first_errors: np.ndarray
    second_errors: np.ndarray
    first_slope: float | None
    second_slope: float | None
    first_status: str
    second_status: str


def _fit_slope(step_sizes: np.ndarray, errors: np.ndarray) -> tuple[float | None, str]:
    usable = errors > ERROR_FLOOR
    if not np.any(usable):
        return None, "exact"
    if usable.sum() < 3:
        return None, "inconclusive"
    x = np.log(step_sizes[usable])
    y = np.log(errors[usable])
    slope = float(np.polyfit(x, y, 1)[0])
    return slope, "fitted"


def truncation_scan(sel: Selection, obj: ValidationObjective, theta_bar: ParameterVector,
                    grads, step_sizes, hessian: DenseHessian | None = None) -> TruncationScan:
    """Scan |U_step - U_1st| and |U_step - U_2nd| over a geometric step-size
    ladder and fit log-log slopes. Points at the 1e-14 floor are excluded
    from the fit; with fewer than 3 usable points the fit is reported as
    inconclusive rather than failed."""
    step_sizes = np.asarray(step_sizes, dtype=np.float64)
    if step_sizes.size < 4 or step_sizes.max() / step_sizes.min() < 99.0:
        raise ValueError("scan needs at least 4 step sizes spanning two decades")
    if hessian is None:
        from .tensor import dense_hessian

        hessian = dense_hessian(obj.tape_loss, theta_bar)
    _, _, val_grad = obj.grad_val(theta_bar)
    err1 = np.empty_like(step_sizes)
    err2 = np.empty_like(step_sizes)
    for i, eta in enumerate(step_sizes):
        exact = exact_step_utility(sel, obj, theta_bar, grads, eta)
        err1[i] = abs(exact - taylor_utility(sel, FIRST, val_grad, None, grads, eta))
        err2[i] = abs(exact - taylor_utility(sel, FULL, val_grad, hessian, grads, eta))
    slope1, status1 = _fit_slope(step_sizes, err1)
    slope2, status2 = _fit_slope(step_sizes, err2)
    return TruncationScan(step_sizes, err1, err2, slope1, slope2, status1, status2)


def estimate_smoothness(obj: ValidationObjective, theta_bar: ParameterVector,
                        radius: float, rng: np.random.Generator,
                        num_probes: int = 32) -> float:
    """Empirical gradient-Lipschitz constant: max ratio of gradient change
    to displacement over random probes within `radius` of the checkpoint."""
    _, _, base = obj.grad_val(theta_bar)
    beta = 0.0
    for _ in range(num_probes):
        delta = rng.normal(size=theta_bar.dim)
        delta *= radius * rng.uniform(0.1, 1.0) / np.linalg.norm(delta)
        _, _, probe = obj.grad_val(theta_bar.with_values(theta_bar.values + delta))
        beta = max(beta, np.linalg.norm(probe - base) / np.linalg.norm(delta))
    return beta


def isolated_scores(val_grad: np.ndarray, grads, step_size: float) -> tuple[np.ndarray, np.ndarray]:
    """First-order scores ignoring the other side's restriction:
    data side eta*<v, g_n>, parameter side eta*v_d*G_d."""
    rows = _rows(grads)
    total = np.add.reduce(rows, axis=0)
    return step_size * rows @ val_grad, step_size * val_grad * total


def mask_aware_data_scores(param_mask: np.ndarray, direction: np.ndarray, grads,
                           step_size: float = 1.0) -> np.ndarray:
    """Data scores aware of a frozen-coordinate mask:
    step_size * <direction ⊙ mask, g_n>. Pass the projection vector as
    `direction` with step_size=1 for the shared-surrogate diagnostic."""
    rows = _rows(grads)
    return step_size * rows @ (direction * np.asarray(param_mask, dtype=np.float64))


def mask_aware_param_scores(data_sel: Selection, direction: np.ndarray, grads,
                            step_size: float = 1.0) -> np.ndarray:
    """Parameter scores aware of the selected data subset:
    step_size * direction_d * (sum of selected rows)_d."""
    rows = _rows(grads)
    if data_sel.size == 0:
        partial = np.zeros(rows.shape[1])
    else:
        partial = np.add.reduce(rows[data_sel.members], axis=0)
    return step_size * direction * partial


def coordination_gap(param_mask: np.ndarray, data_sel: Selection, val_grad: np.ndarray,
                     grads, step_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact gap between isolated and restriction-aware first-order scores.
    The data-side gap lives on frozen coordinates, the parameter-side gap on
    excluded samples."""
    rows = _rows(grads)
    n, dim = rows.shape
    frozen = 1.0 - np.asarray(param_mask, dtype=np.float64)
    data_gap = step_size * rows @ (val_grad * frozen)
    excluded = np.setdiff1d(np.arange(n), data_sel.members)
    if excluded.size == 0:
        param_gap = np.zeros(dim)
    else:
        param_gap = step_size * val_grad * np.add.reduce(rows[excluded], axis=0)
    return data_gap, param_gap
