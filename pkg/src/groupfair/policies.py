"""Arm-selection rules for the grouped K-armed bandit: KL-UCB, greedy, PF-UCB.

These are the reference (pure Python) versions, one decision per call. The
simulator runs jitted copies of the same rules; the two are checked against
each other step by step in the tests.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from groupfair.instance import Group, GroupedInstance, analyze
from groupfair.kl import kl_budget_nb, kl_ucb_index_nb
from groupfair.nash import solve_nash

KAPPA = 1e-6
UNPULLED_PLACEHOLDER = 0.5
# empirical means are kept this far inside (0, 1) so every KL stays finite
MEAN_CLIP = 1e-6


class Reason(enum.Enum):
    EXPLORE = "EXPLORE"
    GREEDY = "GREEDY"


@dataclass
class PolicyState:
    n_total: np.ndarray
    n_group: np.ndarray
    sums: np.ndarray
    t: int = 1
    q_hat: np.ndarray | None = None
    q_hat_time: int = 0
    resolves: int = 0

    @classmethod
    def empty(cls, G: int, K: int) -> "PolicyState":
        return cls(
            n_total=np.zeros(K, dtype=np.int64),
            n_group=np.zeros((G, K), dtype=np.int64),
            sums=np.zeros(K),
            q_hat=np.zeros((G, K)),
        )

    def means(self) -> np.ndarray:
        """Empirical means; NaN for unpulled arms."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.n_total > 0, self.sums / np.maximum(self.n_total, 1), np.nan)

    def update(self, group: int, arm: int, reward: float) -> None:
        self.n_total[arm] += 1
        self.n_group[group, arm] += 1
        self.sums[arm] += reward
        self.t += 1


def ucb_indices(state: PolicyState) -> np.ndarray:
    """KL-UCB index of every arm at the current step (1 for unpulled arms)."""
    budget = kl_budget_nb(state.t)
    out = np.ones(len(state.n_total))
    for a, n in enumerate(state.n_total):
        if n > 0:
            out[a] = kl_ucb_index_nb(state.sums[a] / n, float(n), budget)
    return out


def _argmax_lowest(values: np.ndarray, arms) -> int:
    best, best_v = -1, -np.inf
    for a in sorted(arms):
        if values[a] > best_v:
            best, best_v = a, values[a]
    return int(best)


def klucb_select(state: PolicyState, group: int, available_arms) -> int:
    if not len(available_arms):
        raise ValueError("no available arms")
    return _argmax_lowest(ucb_indices(state), available_arms)


def greedy_select(state: PolicyState, available_arms) -> int:
    """Highest empirical mean; an unpulled arm outranks every pulled one."""
    if not len(available_arms):
        raise ValueError("no available arms")
    score = np.where(state.n_total > 0, state.sums / np.maximum(state.n_total, 1), 2.0)
    return _argmax_lowest(score, available_arms)


def ucb_argmax_set(state: PolicyState, access) -> set:
    """Arms that are some group's UCB-argmax (ties to the lowest id)."""
    idx = ucb_indices(state)
    return {_argmax_lowest(idx, arms) for arms in access}


def pfucb_candidates(state: PolicyState, group: int, access) -> list:
    ucb_set = ucb_argmax_set(state, access)
    q = state.q_hat
    return sorted(
        a for a in access[group]
        if a in ucb_set and state.n_group[group, a] <= q[group, a] * state.n_total[a]
    )


def pfucb_select(state: PolicyState, group: int, access, u: float) -> tuple[int, Reason]:
    """One PF-UCB decision. ``u`` in [0, 1) picks among several candidates."""
    cand = pfucb_candidates(state, group, access)
    if cand:
        return cand[min(int(u * len(cand)), len(cand) - 1)], Reason.EXPLORE
    return greedy_select(state, access[group]), Reason.GREEDY


def empirical_instance(state: PolicyState, instance: GroupedInstance) -> GroupedInstance:
    means = state.means()
    th = np.where(np.isnan(means), UNPULLED_PLACEHOLDER, means)
    th = np.clip(th, MEAN_CLIP, 1.0 - MEAN_CLIP)
    groups = [Group(g.p, g.arms) for g in instance.groups]
    return GroupedInstance(th, groups, name=instance.name + "-empirical")


def resolve_empirical_program(state: PolicyState, instance: GroupedInstance, kappa: float = KAPPA) -> np.ndarray:
    """Min-norm Nash shares of the program built on current empirical means.

    Groups with no empirically suboptimal arm drop out of the objective. If
    the empirical instance admits no positive-gain point, the regret-optimal
    shares are used instead (each arm explored by its minimal-OPT groups).
    All-zero shares would be the literal reading, but they can freeze PF-UCB
    into pure greedy play after an unlucky first reward.
    """
    an = analyze(empirical_instance(state, instance), margin=kappa)
    q = solve_nash(an, skip_vacuous=True).q
    state.q_hat = q
    state.q_hat_time = state.t
    state.resolves += 1
    return q
