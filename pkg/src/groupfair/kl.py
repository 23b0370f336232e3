"""Bernoulli KL divergence and the KL-UCB confidence index.

All logarithms are natural. The jitted kernels (``*_nb``) are shared with the
simulation loops; the plain functions validate arguments and delegate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from numba import njit

from groupfair.errors import QOutOfRange

INDEX_TOL = 1e-9


@njit(cache=True)
def bernoulli_kl_nb(p, q):
    # 0 * log 0 := 0; caller guarantees q in (0, 1) unless p == q
    if p == q:
        return 0.0
    # log1p form: for q near p both terms are O(q - p) and cancel to O((q - p)^2);
    # plain logs would lose that difference entirely
    out = 0.0
    if p > 0.0:
        if abs(q - p) < 0.5 * p:
            out -= p * math.log1p((q - p) / p)
        else:
            out += p * math.log(p / q)
    if p < 1.0:
        r = 1.0 - p
        if abs(q - p) < 0.5 * r:
            out -= r * math.log1p((p - q) / r)
        else:
            out += r * math.log(r / (1.0 - q))
    return max(out, 0.0)


@njit(cache=True)
def kl_budget_nb(t):
    if t <= 1:
        return 0.0
    lt = math.log(t)
    if t <= math.e:
        return lt
    return max(0.0, lt + 3.0 * math.log(lt))


@njit(cache=True)
def kl_ucb_index_nb(mean, pulls, budget):
    if mean >= 1.0:
        return 1.0
    if budget <= 0.0:
        return mean
    lo = mean
    hi = 1.0
    # hi is always infeasible (KL(mean, 1) = inf for mean < 1)
    while hi - lo > INDEX_TOL:
        mid = 0.5 * (lo + hi)
        if pulls * bernoulli_kl_nb(mean, mid) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def bernoulli_kl(p: float, q: float) -> float:
    """KL(Ber(p) || Ber(q)) in nats."""
    if not (0.0 <= p <= 1.0):
        raise QOutOfRange(f"p={p} outside [0, 1]")
    if p == q:
        return 0.0
    if not (0.0 < q < 1.0):
        raise QOutOfRange(f"q={q} must lie in (0, 1) when p != q")
    return float(bernoulli_kl_nb(float(p), float(q)))


@dataclass(frozen=True)
class KlBudget:
    """Exploration budget log t + 3 log log t at step t (floored at 0).

    For t <= e the log log term is undefined and the budget is log t.
    """

    t: int

    def __post_init__(self):
        if self.t < 1:
            raise ValueError("t must be >= 1")

    @property
    def value(self) -> float:
        return float(kl_budget_nb(int(self.t)))


def kl_budget(t: int) -> float:
    return KlBudget(t).value


def kl_ucb_index(empirical_mean: float, pulls: int, budget: KlBudget | float) -> float:
    """Largest q in [mean, 1] with pulls * KL(mean, q) <= budget (bisection to 1e-9).

    Unpulled arms are the caller's business: their index is 1 by convention.
    """
    if pulls < 1:
        raise ValueError("pulls must be >= 1; unpulled arms use index 1")
    if not (0.0 <= empirical_mean <= 1.0):
        raise ValueError(f"empirical mean {empirical_mean} outside [0, 1]")
    b = budget.value if isinstance(budget, KlBudget) else float(budget)
    if b < 0:
        raise ValueError("budget must be non-negative")
    return float(kl_ucb_index_nb(float(empirical_mean), float(pulls), b))
