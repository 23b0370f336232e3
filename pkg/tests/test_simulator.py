import json
import math

import numpy as np
import pytest
from hypothesis import given, settings

from groupfair.errors import EmptyTraces, MixedInstances
from groupfair.simulator import (
    aggregate, checkpoint_times, disagreement_baseline, run, run_reference, split_fractions, stream,
)

from strategies import build, example1, instances


# the resolve schedule only affects pfucb
@pytest.mark.parametrize("policy,resolve", [("klucb", "doubling"), ("greedy", "doubling"),
                                            ("pfucb", "doubling"), ("pfucb", "every")])
def test_kernel_matches_reference_example1(policy, resolve):
    # per-step resolves cost a Nash solve each, so that mode gets a shorter run
    T = 400 if resolve == "every" else 3000
    tr = run(example1(), policy, T, seed=5, resolve=resolve)
    pulls, regret, _ = run_reference(example1(), policy, T, seed=5, resolve=resolve)
    assert np.array_equal(tr.pulls, pulls)
    assert np.allclose(tr.regret, regret, rtol=1e-12, atol=1e-9)


@settings(max_examples=15)
@given(instances(max_groups=3, max_arms=5))
def test_kernel_matches_reference_random(inst):
    for policy in ("klucb", "pfucb"):
        tr = run(inst, policy, 400, seed=1)
        pulls, regret, _ = run_reference(inst, policy, 400, seed=1)
        assert np.array_equal(tr.pulls, pulls)
        assert np.allclose(tr.regret, regret, rtol=1e-12, atol=1e-9)


def test_single_step_single_arm():
    tr = run(build([0.4], [[0]]), "klucb", 1, seed=0)
    assert tr.pulls.tolist() == [[1]]
    assert tr.regret.tolist() == [0.0]


def test_identical_seeds_identical_traces():
    a = run(example1(), "pfucb", 5000, seed=9)
    b = run(example1(), "pfucb", 5000, seed=9)
    assert np.array_equal(a.pulls, b.pulls)
    assert np.array_equal(a.checkpoint_regret, b.checkpoint_regret)
    assert a.csv_text() == b.csv_text()


def test_arrivals_shared_across_policies():
    a = run(example1(), "klucb", 2000, seed=3)
    b = run(example1(), "greedy", 2000, seed=3)
    assert np.array_equal(a.arrivals, b.arrivals)


def test_named_streams_are_independent_of_each_other():
    x = stream(7, "rewards/arm-0").random(5)
    assert np.array_equal(x, stream(7, "rewards/arm-0").random(5))
    assert not np.array_equal(x, stream(7, "rewards/arm-1").random(5))
    assert not np.array_equal(x, stream(8, "rewards/arm-0").random(5))


def test_reward_sequence_independent_of_puller():
    # KL-UCB ignores group identity on identical access sets; if rewards were
    # drawn per group the two arm sequences would diverge
    inst = build([0.5, 0.5], [[0, 1], [0, 1]])
    solo = build([0.5, 0.5], [[0, 1]])
    _, _, seq_a = run_reference(inst, "klucb", 300, seed=2)
    _, _, seq_b = run_reference(solo, "klucb", 300, seed=2)
    assert seq_a == seq_b


@settings(max_examples=20)
@given(instances(max_groups=3, max_arms=5))
def test_conservation_and_monotone_regret(inst):
    T = 2000
    tr = run(inst, "pfucb", T, seed=4)
    assert tr.pulls.sum() == T
    assert np.all(np.diff(tr.checkpoint_regret, axis=0) >= -1e-12)
    assert np.all(np.diff(tr.checkpoint_t) > 0)
    assert np.all(tr.pulls[~inst.access] == 0)
    for g, p in enumerate(inst.p):
        assert abs(tr.arrivals[g] / T - p) <= 5 * math.sqrt(p * (1 - p) / T) + 1e-12


def test_checkpoints():
    ts = checkpoint_times(10 ** 6)
    assert ts[0] == 1 and len(ts) <= 64
    assert np.all(np.diff(ts) > 0)
    assert ts[-1] <= 10 ** 6


def test_pfucb_mostly_greedy_for_b():
    tr = run(example1(), "pfucb", 100_000, seed=0)
    assert tr.greedy_steps[1] / tr.arrivals[1] >= 0.95


def test_export(tmp_path):
    tr = run(example1(), "klucb", 500, seed=0, label="x")
    tr.export(tmp_path / "trace.csv")
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert rows[0] == "t,group,arm,pulls,cum_regret"
    assert len(rows) == 1 + len(tr.checkpoint_t) * 2 * 3
    meta = json.loads((tmp_path / "trace.json").read_text())
    assert meta["seed"] == 0 and meta["policy"] == "klucb" and meta["T"] == 500


def test_aggregate_single_trace():
    tr = run(example1(), "klucb", 1000, seed=0)
    rep = aggregate([tr])
    assert rep.regret_se is None
    assert rep.regret_mean == pytest.approx(tr.regret / math.log(1000))


def test_aggregate_errors():
    with pytest.raises(EmptyTraces):
        aggregate([])
    a = run(example1(), "klucb", 100, seed=0)
    b = run(build([0.2, 0.6], [[0, 1]]), "klucb", 100, seed=0)
    with pytest.raises(MixedInstances):
        aggregate([a, b])


def test_split_fractions_sum_to_one():
    trs = [run(example1(), "pfucb", 3000, seed=s) for s in range(4)]
    fr = split_fractions(trs)
    assert fr[:, 0].sum() == pytest.approx(1.0)
    rep = aggregate(trs, baseline=disagreement_baseline(example1(), 3000, range(4)))
    assert rep.paired_gains.shape == (4, 2)
    assert rep.to_dict()["share_of_seeds_with_all_gains_positive"] == rep.share_all_positive


def test_baseline_trivial_groups():
    # group 0 has a single arm; group 1's arms are tied at the optimum
    inst = build([0.4, 0.7, 0.7], [[0], [1, 2]])
    base = disagreement_baseline(inst, 2000, [0, 1])
    assert np.all(base == 0.0)
