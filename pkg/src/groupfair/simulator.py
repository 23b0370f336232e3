"""Seeded event loop for the grouped K-armed bandit.

Randomness comes from named streams derived from one master seed, so the
arrival sequence and every arm's reward sequence are identical across
policies run with the same seed. Arm a's n-th reward is the n-th entry of its
own stream no matter which group pulls it.

Regret is pseudo-regret: each pull adds the true gap Delta^{g_t}(A_t).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from groupfair.errors import EmptyTraces, MixedInstances
from groupfair.instance import FORMAT_VERSION, Group, GroupedInstance, InstanceAnalytics, analyze
from groupfair.kl import kl_budget_nb, kl_ucb_index_nb
from groupfair.policies import PolicyState, Reason, greedy_select, klucb_select, pfucb_select, resolve_empirical_program

POLICIES = ("klucb", "greedy", "pfucb")
_CODE = {"klucb": 0, "greedy": 1, "pfucb": 2}
MAX_CHECKPOINTS = 64


def stream(master_seed: int, label: str) -> np.random.Generator:
    """Generator for a named stream: the label's 64-bit BLAKE2b digest is the spawn key."""
    key = int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(key,))))


def checkpoint_times(T: int) -> np.ndarray:
    ts = []
    k = 0
    while len(ts) < MAX_CHECKPOINTS:
        t = math.ceil(1.5 ** k)
        if t > T:
            break
        if not ts or t > ts[-1]:
            ts.append(t)
        k += 1
    return np.array(ts, dtype=np.int64)


def instance_fingerprint(inst: GroupedInstance) -> str:
    return hashlib.sha256(inst.dumps().encode()).hexdigest()[:16]


@dataclass
class _Streams:
    arrivals: np.ndarray
    rewards: np.ndarray
    unif: np.ndarray


def _make_streams(inst: GroupedInstance, T: int, seed: int, policy: str) -> _Streams:
    cum = np.cumsum(inst.p)
    u = stream(seed, "arrivals").random(T)
    arrivals = np.minimum(np.searchsorted(cum, u, side="right"), inst.G - 1).astype(np.int64)
    rewards = np.empty((inst.K, T), dtype=np.uint8)
    for a, th in enumerate(inst.arm_means):
        rewards[a] = stream(seed, f"rewards/arm-{a}").random(T) < th
    unif = stream(seed, f"policy/{policy}").random(T)
    return _Streams(arrivals, rewards, unif)


@njit(cache=True)
def _argmax_arm(values, acc_row):
    best = -1
    best_v = -np.inf
    for a in range(values.shape[0]):
        if acc_row[a] and values[a] > best_v:
            best = a
            best_v = values[a]
    return best


@njit(cache=True)
def _kernel(policy, t0, T, every, arrivals, rewards, unif, acc, opt, theta, q_hat,
            N, Nt, S, cumreg, thresh, next_pow, ck_t, ck_N, ck_reg, ck_pos, explore, greedy):
    """Run steps t0..T; return the step at which a re-solve is due, or T + 1."""
    G, K = acc.shape
    idx = np.ones(K)
    score = np.empty(K)
    in_set = np.zeros(K, dtype=np.bool_)
    cand = np.empty(K, dtype=np.int64)
    for t in range(t0, T + 1):
        if policy == 2 and t > t0:
            if every or t == next_pow:
                return t
            for a in range(K):
                if Nt[a] >= thresh[a]:
                    return t
        g = arrivals[t - 1]
        if policy == 1:
            for a in range(K):
                score[a] = S[a] / Nt[a] if Nt[a] > 0 else 2.0
            arm = _argmax_arm(score, acc[g])
        else:
            budget = kl_budget_nb(t)
            for a in range(K):
                if policy == 0 and not acc[g, a]:
                    continue
                idx[a] = kl_ucb_index_nb(S[a] / Nt[a], float(Nt[a]), budget) if Nt[a] > 0 else 1.0
            if policy == 0:
                arm = _argmax_arm(idx, acc[g])
            else:
                in_set[:] = False
                for h in range(G):
                    in_set[_argmax_arm(idx, acc[h])] = True
                n_c = 0
                for a in range(K):
                    if acc[g, a] and in_set[a] and N[g, a] <= q_hat[g, a] * Nt[a]:
                        cand[n_c] = a
                        n_c += 1
                if n_c > 0:
                    arm = cand[min(int(unif[t - 1] * n_c), n_c - 1)]
                    explore[g] += 1
                else:
                    for a in range(K):
                        score[a] = S[a] / Nt[a] if Nt[a] > 0 else 2.0
                    arm = _argmax_arm(score, acc[g])
                    greedy[g] += 1
        S[arm] += rewards[arm, Nt[arm]]
        Nt[arm] += 1
        N[g, arm] += 1
        cumreg[g] += opt[g] - theta[arm]
        p = ck_pos[0]
        if p < ck_t.shape[0] and ck_t[p] == t:
            ck_N[p] = N
            ck_reg[p] = cumreg
            ck_pos[0] = p + 1
    return T + 1


@dataclass
class SimulationTrace:
    instance: GroupedInstance
    policy: str
    seed: int
    T: int
    resolve: str
    checkpoint_t: np.ndarray
    checkpoint_pulls: np.ndarray
    checkpoint_regret: np.ndarray
    pulls: np.ndarray
    regret: np.ndarray
    arrivals: np.ndarray
    explore_steps: np.ndarray
    greedy_steps: np.ndarray
    resolves: int = 0
    label: str = ""

    @property
    def instance_id(self) -> str:
        return instance_fingerprint(self.instance)

    @property
    def n_total(self) -> np.ndarray:
        return self.pulls.sum(axis=0)

    def metadata(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "instance": self.instance.to_dict(),
            "instance_id": self.instance_id,
            "label": self.label,
            "policy": self.policy,
            "seed": self.seed,
            "T": self.T,
            "resolve": self.resolve,
            "regret": "pseudo-regret (sum of true gaps of pulled arms)",
            "streams": "PCG64(SeedSequence(seed, spawn_key=(blake2b64(label),))), labels "
                       "'arrivals', 'rewards/arm-<a>', 'policy/<name>'",
            "arrivals_per_group": self.arrivals.tolist(),
            "final_regret": self.regret.tolist(),
            "final_pulls": self.pulls.tolist(),
            "explore_steps": self.explore_steps.tolist(),
            "greedy_steps": self.greedy_steps.tolist(),
            "resolves": self.resolves,
        }

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "group", "arm", "pulls", "cum_regret"])
        for t, pulls, reg in zip(self.checkpoint_t, self.checkpoint_pulls, self.checkpoint_regret):
            for g in range(pulls.shape[0]):
                for a in range(pulls.shape[1]):
                    w.writerow([int(t), g, a, int(pulls[g, a]), repr(float(reg[g]))])
        return buf.getvalue()

    def export(self, csv_path) -> None:
        """Write the checkpoint CSV and a JSON sidecar next to it (same stem, .json)."""
        csv_path = Path(csv_path)
        csv_path.write_text(self.csv_text())
        csv_path.with_suffix(".json").write_text(json.dumps(self.metadata(), indent=2) + "\n")


def run(instance: GroupedInstance, policy: str, T: int, seed: int, resolve: str = "doubling",
        label: str = "") -> SimulationTrace:
    """Simulate T steps of ``policy`` on ``instance``; deterministic in (instance, policy, T, seed)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if resolve not in ("doubling", "every"):
        raise ValueError(f"unknown resolve schedule {resolve!r}")
    inst = instance
    G, K = inst.G, inst.K
    st = _make_streams(inst, T, seed, policy)
    acc = np.ascontiguousarray(inst.access)
    theta = inst.theta.copy()
    opt = np.array([theta[acc[g]].max() for g in range(G)])
    N = np.zeros((G, K), dtype=np.int64)
    Nt = np.zeros(K, dtype=np.int64)
    S = np.zeros(K)
    cumreg = np.zeros(G)
    ck_t = checkpoint_times(T)
    ck_N = np.zeros((len(ck_t), G, K), dtype=np.int64)
    ck_reg = np.zeros((len(ck_t), G))
    ck_pos = np.zeros(1, dtype=np.int64)
    explore = np.zeros(G, dtype=np.int64)
    greedy = np.zeros(G, dtype=np.int64)
    thresh = np.ones(K, dtype=np.int64)
    q_hat = np.zeros((G, K))
    state = PolicyState(n_total=Nt, n_group=N, sums=S, q_hat=q_hat)
    t = 1
    next_pow = 1
    while t <= T:
        if policy == "pfucb":
            state.t = t
            q_hat = resolve_empirical_program(state, inst)
            thresh = np.maximum(1, 2 * Nt)
            next_pow = 1 << t.bit_length()
        t = _kernel(_CODE[policy], t, T, resolve == "every", st.arrivals, st.rewards, st.unif, acc, opt, theta,
                    q_hat, N, Nt, S, cumreg, thresh, next_pow, ck_t, ck_N, ck_reg, ck_pos, explore, greedy)
    return SimulationTrace(
        instance=inst, policy=policy, seed=seed, T=T, resolve=resolve,
        checkpoint_t=ck_t, checkpoint_pulls=ck_N, checkpoint_regret=ck_reg,
        pulls=N, regret=cumreg, arrivals=np.bincount(st.arrivals, minlength=G),
        explore_steps=explore, greedy_steps=greedy, resolves=state.resolves, label=label,
    )


def run_reference(instance: GroupedInstance, policy: str, T: int, seed: int, resolve: str = "doubling"):
    """Plain-Python loop over the reference policy functions (slow; for conformance checks).

    Returns (pulls, regret, arm sequence).
    """
    inst = instance
    G, K = inst.G, inst.K
    st = _make_streams(inst, T, seed, policy)
    access = [sorted(g.arms) for g in inst.groups]
    opt = np.array([max(inst.arm_means[a] for a in arms) for arms in access])
    state = PolicyState.empty(G, K)
    regret = np.zeros(G)
    seq = []
    thresh = np.ones(K, dtype=np.int64)
    next_pow = 1
    for t in range(1, T + 1):
        state.t = t
        g = int(st.arrivals[t - 1])
        if policy == "pfucb":
            if resolve == "every" or t == 1 or t == next_pow or np.any(state.n_total >= thresh):
                resolve_empirical_program(state, inst)
                thresh = np.maximum(1, 2 * state.n_total)
                next_pow = 1 << t.bit_length()
            arm, _ = pfucb_select(state, g, access, float(st.unif[t - 1]))
        elif policy == "klucb":
            arm = klucb_select(state, g, access[g])
        else:
            arm = greedy_select(state, access[g])
        reward = float(st.rewards[arm, state.n_total[arm]])
        state.update(g, arm, reward)
        regret[g] += opt[g] - inst.arm_means[arm]
        seq.append(arm)
    return state.n_group, regret, seq


def run_many(instance, policy, T, seeds, resolve="doubling") -> list:
    return [run(instance, policy, T, s, resolve=resolve) for s in seeds]


def restricted_instance(instance: GroupedInstance, g: int) -> GroupedInstance:
    """Group g alone; arm ids are kept so reward streams line up with the full run."""
    return GroupedInstance(instance.arm_means, [Group(1.0, instance.groups[g].arms)],
                           name=f"{instance.name}-group{g}")


def disagreement_baseline(instance: GroupedInstance, T: int, seeds) -> np.ndarray:
    """Per-seed, per-group regret / log T of KL-UCB run by each group on its own.

    Group g's solo run lasts as many steps as g has arrivals in the full
    run's arrival stream for that seed. Returns an array (n_seeds, G).
    """
    seeds = list(seeds)
    out = np.zeros((len(seeds), instance.G))
    cum = np.cumsum(instance.p)
    for i, seed in enumerate(seeds):
        u = stream(seed, "arrivals").random(T)
        arrivals = np.minimum(np.searchsorted(cum, u, side="right"), instance.G - 1)
        counts = np.bincount(arrivals, minlength=instance.G)
        for g in range(instance.G):
            if counts[g] == 0:
                continue
            tr = run(restricted_instance(instance, g), "klucb", int(counts[g]), seed)
            out[i, g] = tr.regret[0] / math.log(T) if T > 1 else 0.0
    return out


@dataclass
class RegretReport:
    policy: str
    T: int
    seeds: list
    regret_mean: np.ndarray
    regret_se: np.ndarray | None
    split: np.ndarray
    gains: np.ndarray
    targets: dict = field(default_factory=dict)
    gains_vs_baseline: np.ndarray | None = None
    paired_gains: np.ndarray | None = None

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else np.where(np.isnan(x), None, x).tolist()
        return {
            "format_version": FORMAT_VERSION,
            "policy": self.policy,
            "T": self.T,
            "seeds": list(self.seeds),
            "regret_over_logT_mean": arr(self.regret_mean),
            "regret_over_logT_se": arr(self.regret_se),
            "split_fraction": arr(self.split),
            "gains_vs_analytic_disagreement": arr(self.gains),
            "gains_vs_simulated_disagreement": arr(self.gains_vs_baseline),
            "share_of_seeds_with_all_gains_positive": self.share_all_positive,
            "targets": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.targets.items()},
        }


    @property
    def share_all_positive(self) -> float | None:
        """Fraction of seeds whose paired gains are positive for every group."""
        if self.paired_gains is None:
            return None
        return float(np.mean(np.all(self.paired_gains > 0, axis=1)))


def split_fractions(traces) -> np.ndarray:
    """Mean over runs of N^g_T(a) / N_T(a); runs where arm a was never pulled are skipped."""
    fr = []
    for tr in traces:
        nt = tr.pulls.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            fr.append(np.where(nt > 0, tr.pulls / np.maximum(nt, 1), np.nan))
    fr = np.array(fr)
    with np.errstate(invalid="ignore"):
        cnt = np.sum(~np.isnan(fr), axis=0)
        tot = np.nansum(fr, axis=0)
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)


def aggregate(traces, analytics: InstanceAnalytics | None = None, baseline: np.ndarray | None = None,
              nash_q: np.ndarray | None = None) -> RegretReport:
    """Fold runs of one policy on one instance into means, standard errors and split fractions.

    ``baseline`` is the output of :func:`disagreement_baseline` for the same
    seeds in the same order. Each seed's gain is then its solo regret minus
    its regret in the shared run; both runs consume the same streams.
    """
    traces = list(traces)
    if not traces:
        raise EmptyTraces("no traces to aggregate")
    ids = {tr.instance_id for tr in traces}
    if len(ids) > 1:
        raise MixedInstances(f"traces come from {len(ids)} different instances")
    T = traces[0].T
    logT = math.log(T) if T > 1 else 1.0
    reg = np.array([tr.regret for tr in traces]) / logT
    mean = reg.mean(axis=0)
    se = reg.std(axis=0, ddof=1) / math.sqrt(len(traces)) if len(traces) > 1 else None
    an = analytics if analytics is not None else analyze(traces[0].instance)
    targets = {"disagreement": an.disagreement, "lower_bound": an.lower_bound}
    if nash_q is not None:
        targets["nash_pulls"] = nash_q * an.j_max[None, :]
        targets["nash_regret"] = (an.gap * nash_q * an.j_max[None, :] * an.sub_global[None, :]).sum(axis=1)
    gb = paired = None
    if baseline is not None:
        baseline = np.asarray(baseline)
        if baseline.shape != reg.shape:
            raise ValueError(f"baseline shape {baseline.shape} does not match runs {reg.shape}")
        paired = baseline - reg
        gb = paired.mean(axis=0)
    return RegretReport(
        policy=traces[0].policy, T=T, seeds=[tr.seed for tr in traces],
        regret_mean=mean, regret_se=se, split=split_fractions(traces),
        gains=an.disagreement - mean, targets=targets, gains_vs_baseline=gb, paired_gains=paired,
    )
