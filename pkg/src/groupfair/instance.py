"""Grouped K-armed Bernoulli instances and their closed-form analytics.

Everything here is log-scaled: pull counts and regrets are coefficients of
log T in the large-horizon limit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from groupfair.errors import (
    ArrivalProbsNotSimplex,
    DegenerateKL,
    EmptyGroupArms,
    MeanOutOfRange,
    OrphanArm,
)
from groupfair.kl import bernoulli_kl

SIMPLEX_TOL = 1e-12
FORMAT_VERSION = 1


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Group:
    p: float
    arms: frozenset

    def __init__(self, p: float, arms):
        object.__setattr__(self, "p", float(p))
        object.__setattr__(self, "arms", frozenset(int(a) for a in arms))


@dataclass(frozen=True)
class GroupedInstance:
    arm_means: tuple
    groups: tuple
    name: str = field(default="", compare=False)

    def __init__(self, arm_means: Sequence[float], groups: Sequence[Group], name: str = ""):
        object.__setattr__(self, "arm_means", tuple(float(x) for x in arm_means))
        object.__setattr__(self, "groups", tuple(groups))
        object.__setattr__(self, "name", name)

    @property
    def K(self) -> int:
        return len(self.arm_means)

    @property
    def G(self) -> int:
        return len(self.groups)

    @cached_property
    def theta(self) -> np.ndarray:
        return _frozen(np.array(self.arm_means, dtype=float))

    @cached_property
    def p(self) -> np.ndarray:
        return _frozen(np.array([g.p for g in self.groups], dtype=float))

    @cached_property
    def access(self) -> np.ndarray:
        """Boolean (G, K) bipartite adjacency."""
        m = np.zeros((self.G, self.K), dtype=bool)
        for gi, grp in enumerate(self.groups):
            for a in grp.arms:
                m[gi, a] = True
        return _frozen(m)

    @cached_property
    def groups_of_arm(self) -> tuple:
        """G_a for each arm, as sorted tuples of group ids."""
        return tuple(tuple(int(g) for g in np.flatnonzero(self.access[:, a])) for a in range(self.K))

    @cached_property
    def has_ties(self) -> bool:
        return len(set(self.arm_means)) < self.K

    @cached_property
    def assumption1(self) -> bool:
        """Every group has a strictly suboptimal arm shared with another group."""
        shared = self.access.sum(axis=0) >= 2
        for gi in range(self.G):
            arms = self.access[gi]
            opt = self.theta[arms].max()
            if not np.any(arms & shared & (self.theta < opt)):
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "arm_means": list(self.arm_means),
            "groups": [{"p": g.p, "arms": sorted(g.arms)} for g in self.groups],
        }

    @classmethod
    def from_dict(cls, d: dict, name: str = "") -> "GroupedInstance":
        groups = [Group(g["p"], g["arms"]) for g in d["groups"]]
        return cls(d["arm_means"], groups, name=name or d.get("name", ""))

    def dumps(self) -> str:
        # repr-based float formatting is shortest round-trip, hence lossless
        return json.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "GroupedInstance":
        path = Path(path)
        return validate(cls.from_dict(json.loads(path.read_text()), name=path.stem))


def validate(raw: GroupedInstance) -> GroupedInstance:
    """Check model invariants; a missing shared suboptimal arm is recorded, not rejected."""
    if raw.K == 0:
        raise OrphanArm("instance has no arms")
    for a, th in enumerate(raw.arm_means):
        if not (0.0 < th < 1.0):
            raise MeanOutOfRange(f"arm {a} mean {th} not in (0, 1)")
    if raw.G == 0:
        raise ArrivalProbsNotSimplex("no groups")
    for gi, grp in enumerate(raw.groups):
        if not grp.arms:
            raise EmptyGroupArms(f"group {gi} has no arms")
        bad = [a for a in grp.arms if not (0 <= a < raw.K)]
        if bad:
            raise EmptyGroupArms(f"group {gi} references unknown arms {bad}")
        if not (0.0 < grp.p <= 1.0):
            raise ArrivalProbsNotSimplex(f"group {gi} arrival probability {grp.p} not in (0, 1]")
    total = sum(g.p for g in raw.groups)
    if abs(total - 1.0) > SIMPLEX_TOL:
        raise ArrivalProbsNotSimplex(f"arrival probabilities sum to {total!r}")
    orphans = [a for a, gs in enumerate(raw.groups_of_arm) if not gs]
    if orphans:
        raise OrphanArm(f"arms {orphans} are reachable by no group")
    return raw


@dataclass(frozen=True)
class InstanceAnalytics:
    """Closed-form log-scaled quantities of an instance.

    Arrays are dense over (group, arm); entries for pairs outside the
    relevant set are 0 (gap, j_group) or False (masks).
    """

    instance: GroupedInstance
    opt: np.ndarray
    gap: np.ndarray
    sub_of_group: np.ndarray
    sub_global: np.ndarray
    gamma: tuple
    j_group: np.ndarray
    j_max: np.ndarray
    disagreement: np.ndarray
    lower_bound: float
    assumption1: bool

    @property
    def G(self) -> int:
        return self.instance.G

    @property
    def K(self) -> int:
        return self.instance.K

    @cached_property
    def gamma_mask(self) -> np.ndarray:
        m = np.zeros((self.G, self.K), dtype=bool)
        for a, gs in enumerate(self.gamma):
            m[list(gs), a] = True
        return _frozen(m)

    @cached_property
    def variable_mask(self) -> np.ndarray:
        """(g, a) pairs that carry a share variable: a in A_sub and a in A^g."""
        return _frozen(self.instance.access & self.sub_global[None, :])

    @cached_property
    def cost(self) -> np.ndarray:
        """Regret group g pays per unit share of arm a: Delta^g(a) J(a)."""
        return _frozen(np.where(self.variable_mask, self.gap * self.j_max[None, :], 0.0))

    def gains(self, q: np.ndarray) -> np.ndarray:
        """Utility gains S^g(q) = R~^g - sum_a Delta^g(a) q^g(a) J(a) 1{a in A_sub}."""
        return self.disagreement - (self.cost * q).sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "opt": self.opt.tolist(),
            "gap": self.gap.tolist(),
            "sub_of_group": [np.flatnonzero(r).tolist() for r in self.sub_of_group],
            "sub_global": np.flatnonzero(self.sub_global).tolist(),
            "gamma": [list(g) for g in self.gamma],
            "j_group": self.j_group.tolist(),
            "j_max": self.j_max.tolist(),
            "disagreement": self.disagreement.tolist(),
            "lower_bound": self.lower_bound,
            "assumption1": self.assumption1,
            "has_ties": self.instance.has_ties,
        }


def lower_bound_from_scratch(inst: GroupedInstance) -> float:
    """Lower bound recomputed with plain loops (used as a consistency check)."""
    th = inst.arm_means
    opt = [max(th[a] for a in g.arms) for g in inst.groups]
    total = 0.0
    for a in range(inst.K):
        gs = inst.groups_of_arm[a]
        if not all(th[a] < opt[g] for g in gs):
            continue
        gmin = min(opt[g] for g in gs)
        jmax = max(1.0 / bernoulli_kl(th[a], opt[g]) for g in gs)
        total += (gmin - th[a]) * jmax
    return total


def analyze(instance: GroupedInstance, margin: float = 0.0) -> InstanceAnalytics:
    """Closed-form analytics.

    ``margin`` > 0 counts arms within ``margin`` of a group's best mean as
    optimal for that group (used on empirical means, where near-ties would
    otherwise produce enormous J values); their gap is then reported as 0.
    """
    inst = instance
    th = inst.theta
    acc = inst.access
    G, K = inst.G, inst.K
    opt = np.array([th[acc[g]].max() for g in range(G)])
    sub_g = acc & (th[None, :] < opt[:, None] - margin)
    gap = np.where(sub_g, opt[:, None] - th[None, :], 0.0)
    # suboptimal for every group with access
    sub_global = np.array([bool(sub_g[acc[:, a], a].all()) for a in range(K)])

    j_group = np.zeros((G, K))
    for g in range(G):
        for a in np.flatnonzero(sub_g[g]):
            kl = bernoulli_kl(th[a], opt[g])
            if kl <= 0.0:
                raise DegenerateKL(f"KL({th[a]}, {opt[g]}) = 0 for suboptimal arm {a} of group {g}")
            j_group[g, a] = 1.0 / kl

    gamma = []
    j_max = np.zeros(K)
    for a in range(K):
        gs = np.flatnonzero(acc[:, a])
        m = opt[gs].min()
        gamma.append(tuple(int(g) for g in gs[opt[gs] == m]))
        if sub_global[a]:
            j_max[a] = j_group[gs, a].max()

    disagreement = (gap * j_group).sum(axis=1)
    lower_bound = 0.0
    for a in range(K):
        if sub_global[a]:
            lower_bound += gap[gamma[a][0], a] * j_max[a]

    return InstanceAnalytics(
        instance=inst,
        opt=_frozen(opt),
        gap=_frozen(gap),
        sub_of_group=_frozen(sub_g),
        sub_global=_frozen(sub_global),
        gamma=tuple(gamma),
        j_group=_frozen(j_group),
        j_max=_frozen(j_max),
        disagreement=_frozen(disagreement),
        lower_bound=float(lower_bound),
        assumption1=bool(np.all((sub_g & (acc.sum(axis=0) >= 2)[None, :]).any(axis=1))),
    )


def regret_optimal_allocation(an: InstanceAnalytics) -> np.ndarray:
    """Per-group log-scaled regret of a regret-optimal policy.

    Each A_sub arm's J(a) pulls go to Gamma(a), split equally on ties.
    """
    r = np.zeros(an.G)
    for a in np.flatnonzero(an.sub_global):
        gs = an.gamma[a]
        share = an.j_max[a] / len(gs)
        for g in gs:
            r[g] += an.gap[g, a] * share
    return r


def regret_optimal_shares(an: InstanceAnalytics) -> np.ndarray:
    """Share matrix q of the regret-optimal policy (Gamma(a) split equally)."""
    q = np.zeros((an.G, an.K))
    for a in np.flatnonzero(an.sub_global):
        gs = an.gamma[a]
        q[list(gs), a] = 1.0 / len(gs)
    return q
