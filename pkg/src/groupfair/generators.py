"""Random instance families: i.i.d. bipartite graphs and the skewed topology."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from groupfair.instance import Group, GroupedInstance, validate

log = logging.getLogger(__name__)

CLIP = 1e-4
MAX_ATTEMPTS = 100_000


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str
    G: int
    K: int = 10
    edge_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("iid", "skewed"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.G < 1:
            raise ValueError("G must be >= 1")


def _uniform_means(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.clip(rng.random(n), CLIP, 1.0 - CLIP)


def gen_iid_with_attempts(cfg: GeneratorConfig) -> tuple[GroupedInstance, int]:
    """Edges Bernoulli(edge_prob), means U(0,1); resample until every group has a shared suboptimal arm.

    Arms that no group can reach are dropped (they never affect any quantity).
    """
    rng = np.random.default_rng(cfg.seed)
    G, K = cfg.G, cfg.K
    for attempt in range(1, MAX_ATTEMPTS + 1):
        theta = _uniform_means(rng, K)
        edges = rng.random((G, K)) < cfg.edge_prob
        if not edges.any(axis=1).all():
            continue
        keep = np.flatnonzero(edges.any(axis=0))
        relabel = {int(a): i for i, a in enumerate(keep)}
        groups = [Group(1.0 / G, [relabel[int(a)] for a in np.flatnonzero(row)]) for row in edges]
        inst = GroupedInstance(theta[keep], groups, name=f"iid-G{G}-seed{cfg.seed}")
        # 1/G may not sum to 1 exactly; fix the last group
        inst = _normalize_p(inst)
        validate(inst)
        if inst.assumption1:
            if attempt > 1:
                log.debug("iid generator seed %s accepted after %d attempts", cfg.seed, attempt)
            return inst, attempt
    raise RuntimeError(f"no valid iid instance after {MAX_ATTEMPTS} attempts (seed {cfg.seed})")


def _normalize_p(inst: GroupedInstance) -> GroupedInstance:
    ps = [g.p for g in inst.groups]
    ps[-1] = 1.0 - sum(ps[:-1])
    return GroupedInstance(inst.arm_means, [Group(p, g.arms) for p, g in zip(ps, inst.groups)], name=inst.name)


def gen_iid(cfg: GeneratorConfig) -> GroupedInstance:
    return gen_iid_with_attempts(cfg)[0]


def gen_skewed(cfg: GeneratorConfig) -> GroupedInstance:
    """K = G + 1 arms. Groups 0..G-2 see {own arm, arm G-1}; group G-1 sees all.

    Means: the G-1 own arms share the lowest of three sorted uniforms, arm G-1
    gets the middle one and arm G the highest.
    """
    rng = np.random.default_rng(cfg.seed)
    G = cfg.G
    if G < 2:
        raise ValueError("skewed family needs G >= 2")
    lo, mid, hi = np.sort(_uniform_means(rng, 3))
    theta = [lo] * (G - 1) + [mid, hi]
    groups = [Group(1.0 / G, [g, G - 1]) for g in range(G - 1)]
    groups.append(Group(1.0 / G, range(G + 1)))
    inst = _normalize_p(GroupedInstance(theta, groups, name=f"skewed-G{G}-seed{cfg.seed}"))
    return validate(inst)


def generate(cfg: GeneratorConfig) -> tuple[GroupedInstance, int]:
    if cfg.kind == "iid":
        return gen_iid_with_attempts(cfg)
    return gen_skewed(cfg), 1
