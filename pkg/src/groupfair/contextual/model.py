"""Grouped linear contextual instances: actions are feature vectors in R^d.

Rewards are <a, theta> plus standard normal noise. Each group draws contexts
from its own distribution over the finite context set.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from groupfair.errors import ArrivalProbsNotSimplex, InstanceError
from groupfair.instance import FORMAT_VERSION, SIMPLEX_TOL


@dataclass(eq=False)
class ContextualInstance:
    """``contexts[m]`` is an (n_m, d) array whose rows are the actions of context m.

    ``context_probs`` is (G, M): row g is the distribution of contexts seen by
    group g. ``p`` holds the group arrival probabilities.
    """

    theta: np.ndarray
    contexts: list
    p: np.ndarray
    context_probs: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        self.contexts = [np.atleast_2d(np.asarray(c, dtype=float)) for c in self.contexts]
        self.p = np.asarray(self.p, dtype=float).ravel()
        self.context_probs = np.atleast_2d(np.asarray(self.context_probs, dtype=float))
        validate_contextual(self)

    @property
    def dim(self) -> int:
        return self.theta.size

    @property
    def M(self) -> int:
        return len(self.contexts)

    @property
    def G(self) -> int:
        return self.p.size

    @cached_property
    def supports(self) -> list:
        """M^g: indices of contexts group g can see."""
        return [np.flatnonzero(row > 0) for row in self.context_probs]

    @cached_property
    def context_mass(self) -> np.ndarray:
        """Probability that a step arrives with group g and context m, shape (G, M)."""
        return self.p[:, None] * self.context_probs

    @cached_property
    def group_weights(self) -> np.ndarray:
        """w^g(m): share of context m's traffic that belongs to group g."""
        mass = self.context_mass
        tot = mass.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            w = np.where(tot > 0, mass / np.where(tot > 0, tot, 1.0), 0.0)
        return w

    @cached_property
    def rank(self) -> int:
        return int(np.linalg.matrix_rank(np.vstack(self.contexts)))

    @property
    def rank_deficient(self) -> bool:
        return self.rank < self.dim

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "theta": self.theta.tolist(),
            "contexts": [c.tolist() for c in self.contexts],
            "groups": [{"p": float(pg), "context_probs": row.tolist()}
                       for pg, row in zip(self.p, self.context_probs)],
        }

    @classmethod
    def from_dict(cls, d: dict, name: str = "") -> "ContextualInstance":
        return cls(
            theta=d["theta"],
            contexts=d["contexts"],
            p=[g["p"] for g in d["groups"]],
            context_probs=[g["context_probs"] for g in d["groups"]],
            name=name or d.get("name", ""),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "ContextualInstance":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), name=path.stem)


def validate_contextual(inst: ContextualInstance) -> None:
    d = inst.dim
    if d == 0:
        raise InstanceError("theta must be non-empty")
    if not np.all(np.isfinite(inst.theta)):
        raise InstanceError("theta must be finite")
    if inst.M == 0:
        raise InstanceError("at least one context is required")
    for m, acts in enumerate(inst.contexts):
        if acts.shape[1] != d or acts.shape[0] == 0:
            raise InstanceError(f"context {m} must hold a non-empty (n, {d}) action array")
        if not np.all(np.isfinite(acts)):
            raise InstanceError(f"context {m} has non-finite action vectors")
    P = inst.context_probs
    if P.shape != (inst.G, inst.M):
        raise InstanceError(f"context_probs must have shape ({inst.G}, {inst.M})")
    if inst.G == 0:
        raise InstanceError("at least one group is required")
    for name, vec in [("arrival probabilities", inst.p)] + [(f"context distribution of group {g}", P[g]) for g in range(inst.G)]:
        if np.any(vec < 0) or abs(vec.sum() - 1.0) > SIMPLEX_TOL * max(1, vec.size):
            raise ArrivalProbsNotSimplex(f"{name} must lie on the simplex")


@dataclass(frozen=True)
class Pair:
    context: int
    action: int
    vector: np.ndarray
    gap: float


@dataclass
class ContextualAnalytics:
    instance: ContextualInstance
    opt: np.ndarray
    best: np.ndarray
    gaps: list

    @cached_property
    def suboptimal_pairs(self) -> list:
        return [Pair(m, i, self.instance.contexts[m][i], float(g[i]))
                for m, g in enumerate(self.gaps) for i in np.flatnonzero(g > 0)]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "opt": self.opt.tolist(),
            "best_action": self.best.tolist(),
            "gaps": [g.tolist() for g in self.gaps],
            "rank": self.instance.rank,
            "rank_deficient": self.instance.rank_deficient,
        }


def context_gaps(contexts, theta) -> tuple[np.ndarray, np.ndarray, list]:
    """Per-context best value, best action (lowest index on ties) and gaps."""
    opt, best, gaps = [], [], []
    for acts in contexts:
        v = acts @ theta
        b = int(np.argmax(v))
        opt.append(v[b])
        best.append(b)
        g = v[b] - v
        g[b] = 0.0
        gaps.append(np.maximum(g, 0.0))
    return np.array(opt), np.array(best, dtype=np.int64), gaps


def contextual_analytics(instance: ContextualInstance) -> ContextualAnalytics:
    opt, best, gaps = context_gaps(instance.contexts, instance.theta)
    return ContextualAnalytics(instance, opt, best, gaps)
