"""Exact Shapley values of the localized surrogate games by subset
enumeration, plus the closed-form equivalence and efficiency checks."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .scoring import ScorePair, aggregate_scores, build_interaction
from .surrogate import DATA_SIDE, PARAMETER_SIDE, Selection, taylor_utility

MAX_EXACT_PLAYERS = 10


@dataclass
class SurrogateGame:
    """A cooperative game over `num_players` players whose utility is a set
    function on index tuples. Utilities are evaluated once per subset; the
    empty set must map to zero for the truncated surrogate utilities."""

    num_players: int
    utility: object  # callable(tuple[int, ...]) -> float

    def utilities_by_mask(self) -> np.ndarray:
        table = np.empty(1 << self.num_players)
        for mask in range(1 << self.num_players):
            members = tuple(i for i in range(self.num_players) if mask >> i & 1)
            table[mask] = self.utility(members)
        return table


def shapley_subset_weights(num_players: int) -> np.ndarray:
    """w[s] = s!(P-s-1)!/P! for subsets of size s not containing the player."""
    p_fact = math.factorial(num_players)
    return np.array([math.factorial(s) * math.factorial(num_players - s - 1) / p_fact
                     for s in range(num_players)])


def exact_shapley(game: SurrogateGame) -> np.ndarray:
    """phi_i = sum over S not containing i of w[|S|] * (U(S+i) - U(S)),
    by full subset enumeration. Refuses more than 10 players; there is no
    sampling estimator here by design."""
    p = game.num_players
    if p > MAX_EXACT_PLAYERS:
        raise ValueError(f"exact enumeration limited to {MAX_EXACT_PLAYERS} players (got {p})")
    if p == 0:
        return np.zeros(0)
    table = game.utilities_by_mask()
    weights = shapley_subset_weights(p)
    sizes = np.array([bin(mask).count("1") for mask in range(1 << p)])
    values = np.zeros(p)
    for i in range(p):
        bit = 1 << i
        without = np.flatnonzero((np.arange(1 << p) & bit) == 0)
        values[i] = np.sum(weights[sizes[without]] * (table[without | bit] - table[without]))
    return values


def permutation_shapley(game: SurrogateGame) -> np.ndarray:
    """Independent oracle: average marginal contribution over all P!
    orderings. Only sensible for very small P."""
    p = game.num_players
    values = np.zeros(p)
    count = 0
    cache: dict[tuple, float] = {}

    def u(members: tuple) -> float:
        if members not in cache:
            cache[members] = game.utility(members)
        return cache[members]

    for perm in itertools.permutations(range(p)):
        seen: list[int] = []
        for player in perm:
            before = tuple(sorted(seen))
            after = tuple(sorted(seen + [player]))
            values[player] += u(after) - u(before)
            seen.append(player)
        count += 1
    return values / count


def precedence_fraction(num_players: int, i: int, j: int) -> float:
    """Fraction of all orderings that place player j before player i."""
    hits = total = 0
    for perm in itertools.permutations(range(num_players)):
        total += 1
        if perm.index(j) < perm.index(i):
            hits += 1
    return hits / total


def game_from_instance(side: str, order: str, grads, val_grad: np.ndarray, curvature,
                       step_size: float) -> SurrogateGame:
    """Localized surrogate game whose utility is the Taylor-truncated
    validation gain of the one-step update for the chosen side."""
    rows = grads.rows if hasattr(grads, "rows") else np.asarray(grads, dtype=np.float64)
    num_players = rows.shape[1] if side == PARAMETER_SIDE else rows.shape[0]

    def utility(members: tuple) -> float:
        sel = Selection(side, np.asarray(members, dtype=np.int64))
        return taylor_utility(sel, order, val_grad, curvature, rows, step_size)

    return SurrogateGame(num_players, utility)


def closed_form_scores(order: str, grads, val_grad: np.ndarray, curvature,
                       step_size: float) -> ScorePair:
    return aggregate_scores(build_interaction(order, grads, val_grad, curvature, step_size))


def verify_closed_form(order: str, side: str, grads, val_grad: np.ndarray, curvature,
                       step_size: float) -> float:
    """Max |exact Shapley - closed-form score| for one (order, side) game."""
    game = game_from_instance(side, order, grads, val_grad, curvature, step_size)
    values = exact_shapley(game)
    scores = closed_form_scores(order, grads, val_grad, curvature, step_size)
    closed = scores.param_scores if side == PARAMETER_SIDE else scores.data_scores
    return float(np.max(np.abs(values - closed))) if values.size else 0.0


def efficiency_residual(game: SurrogateGame, scores: np.ndarray) -> float:
    """|sum of scores - utility of the grand coalition|."""
    grand = game.utility(tuple(range(game.num_players)))
    return abs(float(np.sum(scores)) - grand)


def random_instance(rng: np.random.Generator, num_samples: int, dim: int,
                    step_size: float = 0.1) -> dict:
    """Small random scoring instance shared by the verification sweeps:
    gradient rows, validation gradient, positive diagonal curvature and a
    symmetric dense curvature matrix."""
    rows = rng.normal(size=(num_samples, dim))
    val_grad = rng.normal(size=dim)
    diag = np.abs(rng.normal(size=dim)) + 0.1
    half = rng.normal(size=(dim, dim)) / np.sqrt(dim)
    hessian = 0.5 * (half + half.T)
    return {
        "rows": rows,
        "val_grad": val_grad,
        "diag_curvature": diag,
        "hessian": hessian,
        "step_size": step_size,
    }
