"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL ...`` line. The slow ones
(the PoF table and the two T = 1e6 simulations) take several minutes in total.
Criterion 8 uses the real warfarin export when GROUPFAIR_WARFARIN_CSV points
at it and the substitute invariant suite otherwise.
"""
import math
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from groupfair.contextual.programs import solve_L_gaps
from groupfair.contextual.model import context_gaps
from groupfair.experiments import pof_table
from groupfair.instance import analyze
from groupfair.nash import NEG_INFINITY, price_of_fairness, solve_nash
from groupfair.simulator import disagreement_baseline, run, split_fractions

from oracles import example1_values, lower_bound_subgradient, two_group_closed_form, two_group_grid
from strategies import build, example1, random_contextual, two_group_instance
from synth import synthetic_rows, write_csv

POF_TARGETS = {
    ("iid", 3): (0.073, 0.289), ("iid", 5): (0.054, 0.177), ("iid", 10): (0.040, 0.142), ("iid", 50): (0.015, 0.063),
    ("skewed", 3): (0.327, 0.632), ("skewed", 5): (0.407, 0.764), ("skewed", 10): (0.454, 0.845),
    ("skewed", 50): (0.521, 0.924),
}
T_SIM = 10 ** 6
SEEDS = range(50)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def pof_results():
    return pof_table(n=500, master_seed=2024)


@pytest.fixture(scope="module")
def example1_runs():
    inst = example1()
    kl = [run(inst, "klucb", T_SIM, s) for s in SEEDS]
    pf = [run(inst, "pfucb", T_SIM, s) for s in SEEDS]
    base = disagreement_baseline(inst, T_SIM, SEEDS)
    return inst, kl, pf, base


def test_criterion_1_pof_table(pof_results, capsys):
    bad, cells = [], []
    for c in pof_results.cells:
        med, p95 = POF_TARGETS[(c.kind, c.G)]
        cells.append(f"{c.kind}{c.G}={c.median:.3f}/{c.p95:.3f}")
        if abs(c.median - med) > 0.05 or abs(c.p95 - p95) > 0.08:
            bad.append((c.kind, c.G, c.median, c.p95))
    report(capsys, 1, not bad and len(pof_results.cells) == 8, "median/p95 " + " ".join(cells))


def test_criterion_2_two_group_oracle(capsys):
    rng = np.random.default_rng(2)
    worst_q = worst_w = worst_grid = 0.0
    for _ in range(100):
        inst, (dA, dB, J, KA, KB) = two_group_instance(rng)
        sol = solve_nash(analyze(inst))
        q = two_group_closed_form(dA, dB, J, KA, KB)
        w = math.log(KA - dA * J * (1 - q)) + math.log(KB - dB * J * q)
        qg, _ = two_group_grid(dA, dB, J, KA, KB)
        worst_q = max(worst_q, abs(sol.q[1, 0] - q))
        worst_w = max(worst_w, abs(sol.welfare - w))
        worst_grid = max(worst_grid, abs(sol.q[1, 0] - qg))
    ok = worst_q <= 1e-6 and worst_w <= 1e-6 and worst_grid <= 1e-6
    report(capsys, 2, ok, f"max |dq|={worst_q:.2e} |dW|={worst_w:.2e} |dq_grid|={worst_grid:.2e}")


def test_criterion_3_example1(capsys):
    ref = example1_values()
    an = analyze(example1())
    sol = solve_nash(an)
    rep = price_of_fairness(an, sol)
    got = {"JA": an.j_group[0, 0], "JB": an.j_group[1, 0], "LB": an.lower_bound,
           "qB": sol.q[1, 0], "W": sol.welfare, "pof": rep.pof}
    errs = {k: abs(v - ref[k]) for k, v in got.items()}
    ok = max(errs.values()) <= 1e-4
    report(capsys, 3, ok, " ".join(f"{k}={v:.6g}" for k, v in got.items()) + f" max err {max(errs.values()):.1e}")


def test_criterion_4_klucb_unfair(example1_runs, capsys):
    inst, kl, _, _ = example1_runs
    an = analyze(inst)
    r = np.array([tr.regret for tr in kl]).mean(axis=0) / math.log(T_SIM)
    ratio = r[0] / an.lower_bound
    gain_A = an.disagreement[0] - r[0]
    ok = r[1] < 0.15 and 0.6 <= ratio <= 1.4 and gain_A < 0.1
    report(capsys, 4, ok, f"regret/logT A={r[0]:.4f} (x{ratio:.3f} of LB) B={r[1]:.4f} gain_A={gain_A:.4f}")


def test_criterion_5_pfucb_split(example1_runs, capsys):
    _, _, pf, base = example1_runs
    split = split_fractions(pf)[1, 0]
    reg = np.array([tr.regret for tr in pf]) / math.log(T_SIM)
    share = float(np.mean(np.all(base - reg > 0, axis=1)))
    ok = abs(split - 0.121) <= 0.05 and share >= 0.9
    report(capsys, 5, ok, f"split N^B(0)/N(0)={split:.4f} seeds with both gains positive={share:.2f}")


def _shared_or_exclusive(rng):
    while True:
        G = int(rng.integers(2, 6))
        n_shared = int(rng.integers(2, 5))
        n_excl = rng.integers(0, 3, size=G)
        K = n_shared + int(n_excl.sum())
        theta = rng.choice(np.arange(1, 1000), size=K, replace=False) / 1000
        arms, k = [], n_shared
        for g in range(G):
            arms.append(list(range(n_shared)) + list(range(k, k + int(n_excl[g]))))
            k += int(n_excl[g])
        an = analyze(build(theta, arms))
        # PoF is undefined when no group has a suboptimal arm
        if an.disagreement.sum() - an.lower_bound > 1e-12:
            return an


def test_criterion_6_pof_bounds(pof_results, capsys):
    general = sum(int(np.sum(c.pof > c.bound + 1e-9)) for c in pof_results.cells)
    n_general = sum(c.n for c in pof_results.cells)
    rng = np.random.default_rng(6)
    topo, worst = 0, 0.0
    for _ in range(100):
        rep = price_of_fairness(_shared_or_exclusive(rng))
        worst = max(worst, rep.pof)
        topo += rep.pof > 0.5 + 1e-9
    report(capsys, 6, general == 0 and topo == 0,
           f"general-bound violations {general}/{n_general}, topology violations {topo}/100 (max PoF {worst:.4f})")


def test_criterion_7_contextual_cross_check(capsys):
    from test_contextual import ORACLE_CASES, test_constraint_gradient_finite_differences
    worst = 0.0
    for ctx, th in ORACLE_CASES.values():
        ctx = [np.array(c, float) for c in ctx]
        _, _, gaps = context_gaps(ctx, np.array(th, float))
        val = solve_L_gaps(ctx, gaps).value
        ref = lower_bound_subgradient(ctx, th)
        worst = max(worst, abs(val - ref) / abs(ref))
    try:
        test_constraint_gradient_finite_differences()
        fd_ok = True
    except AssertionError:
        fd_ok = False
    report(capsys, 7, worst <= 1e-4 and fd_ok, f"max relative objective gap {worst:.2e}, gradient FD check {'ok' if fd_ok else 'failed'}")


def test_criterion_8_warfarin(tmp_path, capsys):
    path = os.environ.get("GROUPFAIR_WARFARIN_CSV")
    if path:
        from groupfair.warfarin import PHARMGKB, run_pipeline
        _, rep = run_pipeline(path, "race", PHARMGKB)
        checks = [(rep.disagreement.sum(), 179.1), (rep.regret_optimal.sum(), 78.6), (rep.fair.sum(), 79.4),
                  (rep.fair[1], 25.4), (rep.fair[2], 54.0)]
        ok = all(abs(v - t) <= 0.15 * t for v, t in checks) and rep.fair[0] <= 0.15 * 79.4 / 3
        report(capsys, 8, ok, "race table totals/fair " + " ".join(f"{v:.1f}~{t}" for v, t in checks))
        return
    from test_contextual import _check_fair_invariants
    from groupfair.warfarin import run_pipeline
    rng = np.random.default_rng(8)
    insts = [random_contextual(rng, d=4, M=3, G=2) for _ in range(20)]
    insts += [random_contextual(rng, d=5, M=4, G=3) for _ in range(10)]
    for i, group_by in enumerate(("race", "age", "race")):
        insts.append(run_pipeline(write_csv(tmp_path / f"w{i}.csv", synthetic_rows(500, 100 + i)), group_by)[0])
    bad = []
    for inst in insts:
        bad += _check_fair_invariants(inst)
    report(capsys, 8, not bad, f"no dataset; substitute suite on {len(insts)} instances, {len(bad)} invariant violations")


def _cli(args, out):
    exe = shutil.which("groupfair")
    cmd = [exe] if exe else [sys.executable, "-m", "groupfair.cli"]
    subprocess.run(cmd + args + ["--out", str(out)], check=True, capture_output=True)
    return out.read_bytes()


def test_criterion_9_determinism(tmp_path, capsys):
    ex = tmp_path / "ex1.json"
    example1().save(ex)
    from strategies import example1_contextual
    cx = tmp_path / "ctx.json"
    example1_contextual().save(cx)
    runs = {
        "nash": ["nash", str(ex)],
        "pof-table": ["pof-table", "--kind", "skewed", "--G", "3", "--n", "20", "--seed", "7", "--format", "csv"],
        "simulate": ["simulate", str(ex), "--policy", "pfucb", "--T", "20000", "--seeds", "0:2"],
        "ctx-solve": ["ctx-solve", "Lfair", str(cx)],
        "ctx-simulate": ["ctx-simulate", str(cx), "--policy", "pfoam", "--T", "3000", "--seed", "1"],
    }
    differ = [k for k, a in runs.items() if _cli(a, tmp_path / f"{k}-1") != _cli(a, tmp_path / f"{k}-2")]
    report(capsys, 9, not differ, f"{len(runs)} commands run twice, differing outputs: {differ or 'none'}")
