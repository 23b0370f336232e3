import numpy as np
import pytest

from groupfair.generators import GeneratorConfig, gen_iid, gen_iid_with_attempts, gen_skewed, generate
from groupfair.instance import validate


def test_iid_deterministic():
    a = gen_iid(GeneratorConfig("iid", 3, seed=42))
    b = gen_iid(GeneratorConfig("iid", 3, seed=42))
    assert a == b
    assert a != gen_iid(GeneratorConfig("iid", 3, seed=43))


def test_iid_valid_and_assumption1():
    for seed in range(50):
        inst = gen_iid(GeneratorConfig("iid", 5, seed=seed))
        validate(inst)
        assert inst.assumption1
        assert inst.K <= 10
        assert all(1e-4 <= t <= 1 - 1e-4 for t in inst.arm_means)
        assert sum(g.p for g in inst.groups) == pytest.approx(1.0, abs=1e-12)


def test_iid_edge_density():
    # density of the raw draws, before conditioning, over 500 seeds
    dens = []
    for seed in range(500):
        rng = np.random.default_rng(seed)
        rng.random(10)
        dens.append((rng.random((3, 10)) < 0.5).mean())
    assert np.mean(dens) == pytest.approx(0.5, abs=0.05)
    # accepted instances stay close too
    acc = []
    for seed in range(500):
        inst = gen_iid(GeneratorConfig("iid", 3, seed=seed))
        acc.append(inst.access.sum() / (3 * 10))
    assert np.mean(acc) == pytest.approx(0.5, abs=0.05)


def test_iid_rejection_counted():
    attempts = [gen_iid_with_attempts(GeneratorConfig("iid", 3, seed=s))[1] for s in range(200)]
    assert min(attempts) == 1
    assert max(attempts) > 1


def test_skewed_construction_G3():
    inst = gen_skewed(GeneratorConfig("skewed", 3, seed=7))
    assert inst.K == 4
    assert sorted(inst.groups[0].arms) == [0, 2]
    assert sorted(inst.groups[1].arms) == [1, 2]
    assert sorted(inst.groups[2].arms) == [0, 1, 2, 3]
    th = inst.arm_means
    assert th[0] == th[1] < th[2] < th[3]
    assert inst.has_ties


def test_skewed_means_are_sorted_draws():
    seed = 19
    rng = np.random.default_rng(seed)
    lo, mid, hi = np.sort(np.clip(rng.random(3), 1e-4, 1 - 1e-4))
    inst = gen_skewed(GeneratorConfig("skewed", 5, seed=seed))
    assert inst.arm_means == (lo,) * 4 + (mid, hi)


@pytest.mark.parametrize("G", [2, 3, 5, 10, 50])
def test_skewed_assumption1(G):
    for seed in range(10):
        inst, att = generate(GeneratorConfig("skewed", G, seed=seed))
        validate(inst)
        assert inst.assumption1 and att == 1


def test_config_errors():
    with pytest.raises(ValueError):
        GeneratorConfig("grid", 3)
    with pytest.raises(ValueError):
        gen_skewed(GeneratorConfig("skewed", 1))
