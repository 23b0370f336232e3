"""Hypothesis strategies and small instance builders shared by the tests."""
import numpy as np
from hypothesis import strategies as st

from groupfair.instance import Group, GroupedInstance

EXAMPLE1 = dict(arm_means=(0.3, 0.5, 0.7), arms=([0, 1], [0, 2]), p=(0.5, 0.5))


def example1() -> GroupedInstance:
    return GroupedInstance([0.3, 0.5, 0.7], [Group(0.5, [0, 1]), Group(0.5, [0, 2])], name="example1")


def build(theta, arms, p=None) -> GroupedInstance:
    G = len(arms)
    p = p if p is not None else [1.0 / G] * G
    p = list(p)
    p[-1] = 1.0 - sum(p[:-1])
    return GroupedInstance(theta, [Group(pg, a) for pg, a in zip(p, arms)])


@st.composite
def instances(draw, max_groups=4, max_arms=6, distinct=True):
    G = draw(st.integers(1, max_groups))
    K = draw(st.integers(1, max_arms))
    if distinct:
        theta = draw(st.lists(st.integers(1, 999), min_size=K, max_size=K, unique=True))
        theta = [t / 1000 for t in theta]
    else:
        theta = draw(st.lists(st.sampled_from([0.1, 0.25, 0.5, 0.75, 0.9]), min_size=K, max_size=K))
    acc = np.array(draw(st.lists(st.lists(st.booleans(), min_size=K, max_size=K), min_size=G, max_size=G)))
    # every arm reachable, every group non-empty
    for a in range(K):
        if not acc[:, a].any():
            acc[draw(st.integers(0, G - 1)), a] = True
    for g in range(G):
        if not acc[g].any():
            acc[g, draw(st.integers(0, K - 1))] = True
    return build(theta, [np.flatnonzero(r).tolist() for r in acc])


def two_group_instance(rng):
    """Two groups sharing exactly one arm that is suboptimal for both.

    Returns the instance and the closed-form parameters (dA, dB, J, KA, KB)
    computed from first principles with the mpmath KL. Optionally a second
    shared arm is optimal for one group, adding a constant to the other's gain.
    """
    from oracles import kl
    while True:
        th0 = rng.uniform(0.05, 0.6)
        privA = list(rng.uniform(0.02, 0.98, size=rng.integers(1, 3)))
        privB = list(rng.uniform(0.02, 0.98, size=rng.integers(1, 3)))
        cross = [rng.uniform(0.02, 0.98)] if rng.random() < 0.5 else []
        theta = [th0] + privA + privB + cross
        armsA = [0] + list(range(1, 1 + len(privA)))
        armsB = [0] + list(range(1 + len(privA), 1 + len(privA) + len(privB)))
        if cross:
            armsA.append(len(theta) - 1)
            armsB.append(len(theta) - 1)
        optA = max(theta[a] for a in armsA)
        optB = max(theta[a] for a in armsB)
        if len(set(np.round(theta, 12))) < len(theta) or not (th0 < optA and th0 < optB):
            continue
        if cross and theta[-1] < optA and theta[-1] < optB:
            continue
        if min(optA, optB) - th0 < 0.02:
            continue
        break
    inst = build(theta, [armsA, armsB])
    dA, dB = optA - th0, optB - th0
    J = 1 / kl(th0, min(optA, optB))
    KA, KB = dA / kl(th0, optA), dB / kl(th0, optB)
    if cross:
        x = theta[-1]
        if x < optA:
            KA += (optA - x) / kl(x, optA)
        if x < optB:
            KB += (optB - x) / kl(x, optB)
    return inst, (dA, dB, J, KA, KB)


@st.composite
def shared_or_exclusive(draw, max_groups=4):
    """Every arm is either seen by all groups or by exactly one; every group has a shared suboptimal arm."""
    G = draw(st.integers(2, max_groups))
    n_shared = draw(st.integers(2, 4))
    n_excl = draw(st.lists(st.integers(0, 2), min_size=G, max_size=G))
    K = n_shared + sum(n_excl)
    theta = draw(st.lists(st.integers(1, 999), min_size=K, max_size=K, unique=True))
    theta = [t / 1000 for t in theta]
    arms, k = [], n_shared
    for g in range(G):
        arms.append(list(range(n_shared)) + list(range(k, k + n_excl[g])))
        k += n_excl[g]
    return build(theta, arms)


def example1_contextual():
    """Example 1 as one-hot contexts: group A sees context 0 = {e0, e1}, B sees 1 = {e0, e2}."""
    from groupfair.contextual.model import ContextualInstance
    E = np.eye(3)
    return ContextualInstance([0.3, 0.5, 0.7], [E[[0, 1]], E[[0, 2]]], [0.5, 0.5], [[1, 0], [0, 1]],
                              name="example1-contextual")


def random_contextual(rng, d=3, M=3, G=2, n_actions=3):
    """Random grouped contextual instance; each group sees a random non-empty context subset."""
    from groupfair.contextual.model import ContextualInstance
    theta = rng.normal(size=d)
    contexts = [rng.normal(size=(n_actions, d)) for _ in range(M)]
    probs = np.zeros((G, M))
    sups = rng.random((G, M)) < 0.6
    for m in range(M):
        sups[rng.integers(G), m] = True
    for g in range(G):
        sups[g, rng.integers(M)] = True
        probs[g, sups[g]] = rng.dirichlet(np.ones(sups[g].sum()))
    return ContextualInstance(theta, contexts, np.full(G, 1.0 / G), probs)
