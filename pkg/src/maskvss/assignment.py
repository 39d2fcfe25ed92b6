"""Matching-cost construction and two-round bipartite assignment.

Round 1 pairs each ground truth with its best-fit query under the
combined score lambda_ce * bce + lambda_dice * dice - p(class).
Round 2 re-matches the leftover queries against the same ground truths
using only the stored binary-cross-entropy component; queries still
unmatched after both rounds are later supervised toward no-object.

Matching always runs on detached values: the assignment is piecewise
constant, so no gradient flows through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .predictions import GroundTruth, PredictionSet
from .rng import Rng

EPS_PROB = 1e-7   # probability clamp inside bce costs
DICE_SMOOTH = 1.0

BRUTE_FORCE_LIMIT = 8

__all__ = [
    "CostComponents",
    "MatchResult",
    "MatchConfig",
    "build_cost_components",
    "hungarian",
    "assignment_total",
    "brute_force_match",
    "two_round_match",
]


@dataclass
class MatchConfig:
    lambda_ce: float = 2.5
    lambda_dice: float = 2.5
    rounds: int = 2
    num_points: int | None = None  # None samples nothing: dense costs

    def __post_init__(self):
        if self.rounds not in (1, 2):
            raise ContractError("matching supports exactly 1 or 2 rounds")


@dataclass
class CostComponents:
    """Pairwise cost matrices, queries along rows, ground truths along columns."""

    ce: np.ndarray      # [N, G] binary-cross-entropy mask costs, >= 0
    dice: np.ndarray    # [N, G] dice costs, >= 0
    cls: np.ndarray     # [N, G] predicted probability of the gt class, in [0, 1]
    lambda_ce: float
    lambda_dice: float

    def combined(self) -> np.ndarray:
        return self.lambda_ce * self.ce + self.lambda_dice * self.dice - self.cls

    @property
    def num_queries(self) -> int:
        return self.ce.shape[0]

    @property
    def num_gts(self) -> int:
        return self.ce.shape[1]


@dataclass(frozen=True)
class MatchResult:
    """Assignments from both rounds plus the leftover query set.

    sigma1/sigma2 map ground-truth index -> query index; sigma2 may be
    partial when fewer than `num_gts` queries remain after round 1.
    """

    sigma1: dict
    sigma2: dict
    unmatched: tuple
    num_queries: int

    def validate(self) -> None:
        r1 = set(self.sigma1.values())
        r2 = set(self.sigma2.values())
        if len(r1) != len(self.sigma1) or len(r2) != len(self.sigma2):
            raise ContractError("assignment is not injective")
        if r1 & r2:
            raise ContractError("rounds share a query")
        everything = r1 | r2 | set(self.unmatched)
        if len(everything) != self.num_queries or everything != set(range(self.num_queries)):
            raise ContractError("rounds plus unmatched must partition the queries")


def _bce_cost_matrix(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # probs [N, P], targets [G, P]; mean over positions of the bce between
    # every (query, gt) pair, computed with two matmuls
    p = np.clip(probs, EPS_PROB, 1.0 - EPS_PROB)
    log_p = np.log(p)
    log_not_p = np.log1p(-p)
    n_pos = probs.shape[1]
    return -(log_p @ targets.T + log_not_p @ (1.0 - targets).T) / n_pos


def _dice_cost_matrix(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    inter = probs @ targets.T
    sums = probs.sum(axis=1)[:, None] + targets.sum(axis=1)[None, :]
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (sums + DICE_SMOOTH)


def build_cost_components(preds: PredictionSet, gts: GroundTruth,
                          cfg: MatchConfig, rng: Rng | None = None) -> CostComponents:
    """Fill all three cost matrices from detached prediction values.

    With cfg.num_points set, costs are evaluated on one uniformly sampled
    point set shared by every (query, gt) pair of the clip.
    """
    mask_probs = preds.mask_probs.data
    if gts.count and mask_probs.shape[1:] != gts.masks.shape[1:]:
        raise ShapeError("prediction and ground-truth mask shapes disagree")
    if mask_probs.min() < -1e-9 or mask_probs.max() > 1.0 + 1e-9:
        raise ContractError("prediction masks must be probabilities")

    n = preds.num_queries
    if gts.count == 0:
        empty = np.zeros((n, 0))
        return CostComponents(empty, empty.copy(), empty.copy(),
                              cfg.lambda_ce, cfg.lambda_dice)

    flat_p = mask_probs.reshape(n, -1)
    flat_t = gts.masks.reshape(gts.count, -1)
    if cfg.num_points is not None:
        if rng is None:
            raise ContractError("point sampling requires an rng")
        pts = rng.choice(flat_p.shape[1], size=min(cfg.num_points, flat_p.shape[1]))
        flat_p = flat_p[:, pts]
        flat_t = flat_t[:, pts]

    class_probs = preds.class_probs.data
    if gts.labels.max() > preds.num_classes:
        raise ContractError("ground-truth label exceeds class count")
    cls = class_probs[:, gts.labels - 1]

    return CostComponents(
        ce=_bce_cost_matrix(flat_p, flat_t),
        dice=_dice_cost_matrix(flat_p, flat_t),
        cls=cls,
        lambda_ce=cfg.lambda_ce,
        lambda_dice=cfg.lambda_dice,
    )


# -- optimal assignment -------------------------------------------------------


def _lap(cost: np.ndarray):
    """Shortest-augmenting-path assignment for cost [n, m] with n <= m.

    Returns (col_of_row [n], u [n], v [m]) where u, v are dual potentials
    with cost[i, j] - u[i] - v[j] >= 0 and equality on matched edges.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)               # index m is the virtual start column
    col_row = np.full(m + 1, n, dtype=np.intp)
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(n):
        col_row[m] = i
        j0 = m
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            free = np.flatnonzero(~used[:m])
            if free.size == 0:
                raise ContractError("assignment search exhausted columns")
            cur = cost[i0, free] - u[i0] - v[free]
            better = cur < minv[free]
            minv[free[better]] = cur[better]
            way[free[better]] = j0
            k = int(np.argmin(minv[free]))
            j1 = int(free[k])
            delta = minv[j1]
            used_cols = np.flatnonzero(used)
            u[col_row[used_cols]] += delta
            v[used_cols] -= delta
            minv[free] -= delta
            j0 = j1
            if col_row[j0] == n:
                break
        while j0 != m:
            j1 = int(way[j0])
            col_row[j0] = col_row[j1]
            j0 = j1
    row_col = np.empty(n, dtype=np.intp)
    row_col[col_row[:m][col_row[:m] < n]] = np.flatnonzero(col_row[:m] < n)
    return row_col, u[:n], v[:m]


def _matching_feasible(adj: np.ndarray, rows, cols_available: np.ndarray) -> bool:
    """Kuhn's algorithm: can every row in `rows` take a distinct available column?"""
    owner = {}

    def try_row(r, banned):
        for c in np.flatnonzero(adj[r] & cols_available):
            if c in banned:
                continue
            banned.add(c)
            if c not in owner or try_row(owner[c], banned):
                owner[c] = r
                return True
        return False

    for r in rows:
        if not try_row(r, set()):
            return False
    return True


def _lex_canonical(costT: np.ndarray, u: np.ndarray, v: np.ndarray,
                   fallback: np.ndarray) -> np.ndarray:
    """Lexicographically smallest optimal assignment: scanning ground
    truths in order, each takes the smallest query index that still
    admits an optimal completion (complementary-slackness tight edges)."""
    n, m = costT.shape
    tol = 1e-9 * max(1.0, float(np.abs(costT).max(initial=0.0)))
    tight = (costT - u[:, None] - v[None, :]) <= tol
    chosen = np.full(n, -1, dtype=np.intp)
    available = np.ones(m, dtype=bool)
    for i in range(n):
        rest = range(i + 1, n)
        for j in np.flatnonzero(tight[i] & available):
            available[j] = False
            if _matching_feasible(tight, rest, available):
                chosen[i] = j
                break
            available[j] = True
        if chosen[i] < 0:
            return fallback
    cols = np.arange(n)
    if costT[cols, chosen].sum() > costT[cols, fallback].sum():
        return fallback
    return chosen


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost injective column -> row assignment for cost [R, C], R >= C.

    Ties in the optimum are broken toward the lexicographically smallest
    assignment (lowest column takes the lowest row). Rectangular inputs
    are handled by padding with a constant above every entry.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError("cost must be a matrix")
    rows, cols = cost.shape
    if cols == 0:
        return np.zeros(0, dtype=np.intp)
    if rows < cols:
        raise ContractError(f"need rows >= cols, got {rows} x {cols}")
    if not np.isfinite(cost).all():
        raise NumericError("cost matrix contains non-finite entries")
    t = cost.T  # [C, R]: assign every gt-row a distinct query-column
    assignment, u, v = _lap(t)
    return _lex_canonical(t, u, v, assignment)


def assignment_total(cost: np.ndarray, assignment: np.ndarray) -> float:
    """Total cost of a column -> row assignment, summed in column order."""
    total = 0.0
    for col, row in enumerate(assignment):
        total += cost[row, col]
    return total


def brute_force_match(cost: np.ndarray) -> np.ndarray:
    """Exact optimum by permutation enumeration; oracle for `hungarian`.

    Enumerates assignments in lexicographic order and keeps strictly
    better totals only, so ties resolve exactly like `hungarian`.
    """
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = cost.shape
    if rows > BRUTE_FORCE_LIMIT:
        raise ContractError(f"brute force limited to {BRUTE_FORCE_LIMIT} rows")
    if rows < cols:
        raise ContractError("need rows >= cols")
    if cols == 0:
        return np.zeros(0, dtype=np.intp)
    best = None
    best_total = np.inf
    for perm in permutations(range(rows), cols):
        total = 0.0
        for col, row in enumerate(perm):
            total += cost[row, col]
        if total < best_total:
            best_total = total
            best = perm
    return np.asarray(best, dtype=np.intp)


def two_round_match(components: CostComponents, rounds: int = 2) -> MatchResult:
    """Run the configured matching rounds over prebuilt cost components.

    Round 2 reuses the stored ce entries restricted to the rows round 1
    left free; nothing is recomputed. When fewer queries than ground
    truths remain, as many ground truths as possible are matched,
    chosen optimally.
    """
    if rounds not in (1, 2):
        raise ContractError("rounds must be 1 or 2")
    n, g = components.num_queries, components.num_gts
    if n < g:
        raise ContractError(f"need at least as many queries as ground truths ({n} < {g})")

    sigma1 = {}
    if g:
        first = hungarian(components.combined())
        sigma1 = {gt: int(q) for gt, q in enumerate(first)}

    taken = set(sigma1.values())
    remaining = [q for q in range(n) if q not in taken]
    sigma2 = {}
    if rounds == 2 and g and remaining:
        sub = components.ce[remaining, :]
        if len(remaining) >= g:
            second = hungarian(sub)
            sigma2 = {gt: remaining[int(q)] for gt, q in enumerate(second)}
        else:
            # more ground truths than leftover queries: give every leftover
            # query a distinct ground truth, optimally
            second = hungarian(sub.T)
            sigma2 = {int(second[q]): remaining[q] for q in range(len(remaining))}

    taken |= set(sigma2.values())
    unmatched = tuple(q for q in range(n) if q not in taken)
    result = MatchResult(sigma1=sigma1, sigma2=sigma2,
                         unmatched=unmatched, num_queries=n)
    result.validate()
    return result
