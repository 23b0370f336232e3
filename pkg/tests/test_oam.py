import math

import numpy as np
import pytest

from groupfair.contextual.model import ContextualInstance
from groupfair.contextual.oam import (
    Branch, OamConfig, OamState, epsilon_t, f_budget, f_T, least_squares, oam_step, pfoam_step, simulate,
)
from groupfair.contextual.programs import solve_Lfair

from strategies import example1_contextual

TWO_CONTEXT = ContextualInstance(
    [1.0, 0.8, 0.2],
    [[[1, 0, 0], [0, 1, 0], [0.6, 0.6, 0.0]], [[0, 0, 1], [0.5, 0, 0.5]]],
    [0.5, 0.5], [[1, 0], [0.3, 0.7]],
)


def test_budget_formulas():
    T, d = 10 ** 4, 3
    lt = math.log(T)
    assert f_budget(T, 0.01, d) == pytest.approx(2 * (1 + 1 / lt) * math.log(100) + d * math.log(d * lt))
    assert f_T(T, d, c=2.0) == pytest.approx(2 * (1 + 1 / lt) * lt + 2 * d * math.log(d * lt))


def test_epsilon_schedule():
    assert epsilon_t(1) == epsilon_t(15) == 1.0
    assert epsilon_t(16) == pytest.approx(1 / math.log(math.log(16)))
    assert epsilon_t(10 ** 6) < epsilon_t(10 ** 3)


def test_config_validation():
    with pytest.raises(ValueError):
        OamConfig(T=1)
    with pytest.raises(ValueError):
        OamConfig(T=10, resolve="never")


def test_cold_start_pulls_least_pulled():
    st = OamState.start(TWO_CONTEXT, OamConfig(T=1000))
    a, br = oam_step(st, 0)
    assert br is Branch.LEAST_PULLED and a == 0


def test_least_squares_no_data():
    st = OamState.start(TWO_CONTEXT, OamConfig(T=100))
    assert np.all(least_squares(st) == 0)
    assert st.rank_deficient


def test_least_squares_noiseless_recovery():
    inst = TWO_CONTEXT
    st = OamState.start(inst, OamConfig(T=100))
    for m, acts in enumerate(inst.contexts):
        for i, a in enumerate(acts):
            for _ in range(3):
                st.update(0, m, i, float(a @ inst.theta))
    assert least_squares(st) == pytest.approx(inst.theta, abs=1e-6)
    assert not st.rank_deficient


def test_least_squares_rank_deficient_flagged():
    st = OamState.start(TWO_CONTEXT, OamConfig(T=100))
    st.update(0, 0, 0, 1.0)
    st.update(0, 0, 0, 1.0)
    th = least_squares(st)
    assert st.rank_deficient
    # ridge solution: only the observed direction is estimated
    assert th[1] == 0 and th[2] == 0 and th[0] == pytest.approx(1.0, abs=1e-5)


def test_pfoam_rejects_unsupported_context():
    st = OamState.start(TWO_CONTEXT, OamConfig(T=100), fair=True)
    with pytest.raises(AssertionError):
        # group 0 never sees context 1
        pfoam_step(st, 1, 0)
    pfoam_step(st, 1, 1)


def test_simulation_deterministic_and_exported(tmp_path):
    a = simulate(TWO_CONTEXT, "oam", 2000, seed=3)
    b = simulate(TWO_CONTEXT, "oam", 2000, seed=3)
    assert a.csv_text() == b.csv_text()
    assert a.branches.sum() == 2000
    a.export(tmp_path / "c.csv")
    assert (tmp_path / "c.json").exists()
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "t,group,cum_regret,exploit_steps"
    with pytest.raises(ValueError):
        simulate(TWO_CONTEXT, "ucb", 10, seed=0)


def test_single_group_oam_and_pfoam_coincide():
    inst = ContextualInstance(TWO_CONTEXT.theta, TWO_CONTEXT.contexts, [1.0], [[0.4, 0.6]])
    a = simulate(inst, "oam", 3000, seed=1)
    b = simulate(inst, "pfoam", 3000, seed=1)
    assert np.array_equal(a.regret, b.regret)
    assert np.array_equal(a.branches, b.branches)
    for x, y in zip(a.pulls[0], b.pulls[0]):
        assert np.array_equal(x, y)


def test_exploit_fraction_tends_to_one():
    tr = simulate(TWO_CONTEXT, "oam", 100_000, seed=0)
    assert tr.exploit_fraction(50_000) >= 0.99
    assert tr.exploit_fraction(0, 1000) < 0.5


@pytest.mark.xfail(strict=True, reason="split stays near 0.55-0.7 under the three-branch explore rule; see decisions log")
def test_pfoam_split_tracks_fair_shares():
    inst = example1_contextual()
    fair = solve_Lfair(inst)
    target = fair.q[0][0][0] / (fair.q[0][0][0] + fair.q[1][1][0])
    splits = []
    for seed in range(3):
        tr = simulate(inst, "pfoam", 100_000, seed)
        pa, pb = tr.pulls[0][0][0], tr.pulls[1][1][0]
        splits.append(pa / (pa + pb))
    assert abs(np.mean(splits) - target) <= 0.1
