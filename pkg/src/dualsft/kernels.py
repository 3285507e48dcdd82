"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the ``DUALSFT_BACKEND``
environment variable (``"numba"`` or ``"numpy"``). Default is numba when it
imports, numpy otherwise. Both implementations of every kernel stay
importable so the benchmark and the equivalence tests can compare them.
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

BACKEND = os.environ.get("DUALSFT_BACKEND", "numba" if HAS_NUMBA else "numpy")
if BACKEND not in ("numba", "numpy"):
    raise ValueError(f"DUALSFT_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")
if BACKEND == "numba" and not HAS_NUMBA:
    BACKEND = "numpy"


# ---------------------------------------------------------------------------
# AdamW update restricted to unmasked coordinates.
# Masked coordinates must stay bit-identical (no moment update, no decay).
# Bias corrections c1 = 1 - beta1^t, c2 = 1 - beta2^t are precomputed by the
# caller so both backends consume identical scalars.
# ---------------------------------------------------------------------------

def _adamw_masked_numpy(values, grad, m, r, mask, c1, c2, lr, beta1, beta2, eps, weight_decay):
    on = mask
    m[on] = beta1 * m[on] + (1.0 - beta1) * grad[on]
    r[on] = beta2 * r[on] + (1.0 - beta2) * (grad[on] * grad[on])
    mhat = m[on] / c1
    rhat = r[on] / c2
    values[on] -= lr * (mhat / (np.sqrt(rhat) + eps) + weight_decay * values[on])


def _adamw_masked_loop(values, grad, m, r, mask, c1, c2, lr, beta1, beta2, eps, weight_decay):
    for d in range(values.shape[0]):
        if not mask[d]:
            continue
        m[d] = beta1 * m[d] + (1.0 - beta1) * grad[d]
        r[d] = beta2 * r[d] + (1.0 - beta2) * (grad[d] * grad[d])
        mhat = m[d] / c1
        rhat = r[d] / c2
        values[d] -= lr * (mhat / (np.sqrt(rhat) + eps) + weight_decay * values[d])


# ---------------------------------------------------------------------------
# Streamed per-sample score pass: out[n] += eps[n]^T U a[n] for an affine
# layer, without materializing per-sample gradient rows. 2-d tapes carry one
# vector per example, 3-d tapes carry one vector per (example, position).
# ---------------------------------------------------------------------------

def _ghost_scores_2d_numpy(eps, act, u_mat, out):
    out += np.einsum("no,oi,ni->n", eps, u_mat, act, optimize=True)


def _ghost_scores_2d_loop(eps, act, u_mat, out):
    n_ex, n_out = eps.shape
    n_in = act.shape[1]
    for n in range(n_ex):
        s = 0.0
        for o in range(n_out):
            row = 0.0
            for i in range(n_in):
                row += u_mat[o, i] * act[n, i]
            s += eps[n, o] * row
        out[n] += s


def _ghost_scores_3d_numpy(eps, act, u_mat, out):
    out += np.einsum("nto,oi,nti->n", eps, u_mat, act, optimize=True)


def _ghost_scores_3d_loop(eps, act, u_mat, out):
    n_ex, n_pos, n_out = eps.shape
    n_in = act.shape[2]
    for n in range(n_ex):
        s = 0.0
        for t in range(n_pos):
            for o in range(n_out):
                row = 0.0
                for i in range(n_in):
                    row += u_mat[o, i] * act[n, t, i]
                s += eps[n, t, o] * row
        out[n] += s


if HAS_NUMBA:
    _adamw_masked_numba = njit(cache=True)(_adamw_masked_loop)
    _ghost_scores_2d_numba = njit(cache=True)(_ghost_scores_2d_loop)
    _ghost_scores_3d_numba = njit(cache=True)(_ghost_scores_3d_loop)

if BACKEND == "numba":
    adamw_masked_update = _adamw_masked_numba
    ghost_scores_2d = _ghost_scores_2d_numba
    ghost_scores_3d = _ghost_scores_3d_numba
else:
    adamw_masked_update = _adamw_masked_numpy
    ghost_scores_2d = _ghost_scores_2d_numpy
    ghost_scores_3d = _ghost_scores_3d_numpy
