"""OAM and PF-OAM: allocation-matching policies for grouped linear contextual bandits.

Each step either exploits (greedy on the least-squares estimate) or explores
by following the solution of the empirical allocation program. PF-OAM
follows the Nash allocation instead and counts pulls per group.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from groupfair.contextual.model import ContextualInstance, context_gaps
from groupfair.contextual.programs import proportional_split, solve_L_gaps, solve_Lfair_gaps
from groupfair.errors import GroupFairError
from groupfair.instance import FORMAT_VERSION
from groupfair.simulator import checkpoint_times, stream

RIDGE = 1e-6
REWARD_BLOCK = 4096


@dataclass(frozen=True)
class OamConfig:
    T: int
    c: float = 1.0
    ridge: float = RIDGE
    resolve: str = "doubling"

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("horizon T must be >= 2")
        if self.resolve not in ("doubling", "every"):
            raise ValueError(f"unknown resolve schedule {self.resolve!r}")


def f_budget(T: int, delta: float, d: int, c: float = 1.0) -> float:
    """2 (1 + 1/log T) log(1/delta) + c d log(d log T)."""
    lt = math.log(T)
    return 2.0 * (1.0 + 1.0 / lt) * math.log(1.0 / delta) + c * d * math.log(d * lt)


def f_T(T: int, d: int, c: float = 1.0) -> float:
    return f_budget(T, 1.0 / T, d, c)


def epsilon_t(t: int) -> float:
    """1 / log log t, pinned to 1 while log log t <= 1 (t <= 15)."""
    if t <= 15:
        return 1.0
    return 1.0 / math.log(math.log(t))


class Branch(enum.IntEnum):
    EXPLOIT = 0
    UCB = 1
    LEAST_PULLED = 2
    RATIO = 3


def _action_ids(contexts) -> tuple[list, int]:
    """Global action ids; identical vectors in different contexts share an id."""
    seen, ids = {}, []
    for acts in contexts:
        row = []
        for a in acts:
            key = a.tobytes()
            row.append(seen.setdefault(key, len(seen)))
        ids.append(np.array(row, dtype=np.int64))
    return ids, len(seen)


@dataclass
class OamState:
    """Everything a run accumulates. ``gram`` is G_t without the ridge."""

    instance: ContextualInstance
    config: OamConfig
    fair: bool = False
    gram: np.ndarray = None
    xy: np.ndarray = None
    t: int = 1
    s: int = 0
    action_ids: list = None
    n_actions: np.ndarray = None          # N_t(a), global ids
    n_ctx: list = None                    # N_t^m(a)
    n_group_ctx: list = None              # N_t^g(m, a)
    n_group_action: np.ndarray = None     # N_t^g(a)
    q_hat: list = None                    # per context, or per group then context when fair
    thresh: np.ndarray = None
    next_pow: int = 1
    resolves: int = 0
    solve_failures: int = 0
    rank_deficient: bool = True
    _theta_cache: tuple = field(default=None, repr=False)

    @classmethod
    def start(cls, instance: ContextualInstance, config: OamConfig, fair: bool = False) -> "OamState":
        d = instance.dim
        ids, n = _action_ids(instance.contexts)
        G = instance.G
        return cls(
            instance=instance, config=config, fair=fair,
            gram=np.zeros((d, d)), xy=np.zeros(d), action_ids=ids,
            n_actions=np.zeros(n, dtype=np.int64),
            n_ctx=[np.zeros(len(c), dtype=np.int64) for c in instance.contexts],
            n_group_ctx=[[np.zeros(len(c), dtype=np.int64) for c in instance.contexts] for _ in range(G)],
            n_group_action=np.zeros((G, n), dtype=np.int64),
            thresh=np.ones(n, dtype=np.int64),
        )

    @property
    def d(self) -> int:
        return self.instance.dim

    @property
    def f_T(self) -> float:
        return f_T(self.config.T, self.d, self.config.c)

    def _factor(self):
        if self._theta_cache is None or self._theta_cache[0] != self.t:
            A = self.gram + self.config.ridge * np.eye(self.d)
            fac = cho_factor(A)
            theta = cho_solve(fac, self.xy)
            self._theta_cache = (self.t, fac, theta)
        return self._theta_cache[1], self._theta_cache[2]

    def update(self, group: int, context: int, action: int, reward: float) -> None:
        a = self.instance.contexts[context][action]
        self.gram += np.outer(a, a)
        self.xy += reward * a
        gid = self.action_ids[context][action]
        self.n_actions[gid] += 1
        self.n_ctx[context][action] += 1
        self.n_group_ctx[group][context][action] += 1
        self.n_group_action[group, gid] += 1
        self.t += 1


def least_squares(state: OamState) -> np.ndarray:
    """(G_t + ridge I)^{-1} sum A_s Y_s; sets ``state.rank_deficient`` when G_t is singular."""
    _, theta = state._factor()
    state.rank_deficient = bool(np.linalg.matrix_rank(state.gram) < state.d)
    return theta.copy()


def _sq_norms(fac, acts: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ji->i", acts, cho_solve(fac, acts.T))


def empirical_gaps(state: OamState, theta_hat: np.ndarray):
    _, _, gaps = context_gaps(state.instance.contexts, theta_hat)
    pos = [g[g > 0] for g in gaps]
    nz = np.concatenate(pos) if pos else np.zeros(0)
    gmin = float(nz.min()) if nz.size else math.inf
    return gaps, gmin


def _resolve_due(state: OamState) -> bool:
    if state.q_hat is None or state.config.resolve == "every":
        return True
    return state.t >= state.next_pow or bool(np.any(state.n_actions >= state.thresh))


def _with_free(q: list, free: list) -> list:
    return [np.where(f, math.inf, qm) for qm, f in zip(q, free)]


def _resolve(state: OamState, gaps) -> None:
    """Re-solve the empirical program, scaled to pull counts by f_T / 2."""
    scale = state.f_T / 2.0
    inst = state.instance
    try:
        if state.fair:
            try:
                sol = solve_Lfair_gaps(inst, gaps)
                qg, free = sol.q, sol.free
            except GroupFairError:
                base = solve_L_gaps(inst.contexts, gaps)
                qg, free = proportional_split(base, inst.group_weights), base.free
            state.q_hat = [_with_free([scale * qm for qm in q], free) for q in qg]
        else:
            alloc = solve_L_gaps(inst.contexts, gaps)
            state.q_hat = _with_free([scale * qm for qm in alloc.q], alloc.free)
    except GroupFairError:
        state.solve_failures += 1
        if state.q_hat is None:
            inf = [np.full(len(c), math.inf) for c in inst.contexts]
            state.q_hat = [inf] * inst.G if state.fair else inf
    state.resolves += 1
    state.thresh = np.maximum(1, 2 * state.n_actions)
    state.next_pow = 1 << state.t.bit_length()


def _argmax_lowest(v: np.ndarray) -> int:
    return int(np.argmax(v))


def _argmin_lowest(v: np.ndarray) -> int:
    return int(np.argmin(v))


def _step(state: OamState, context: int, group: int) -> tuple[int, Branch]:
    inst = state.instance
    acts = inst.contexts[context]
    fac, theta_hat = state._factor()
    gaps, gmin = empirical_gaps(state, theta_hat)
    fT = state.f_T
    norms = _sq_norms(fac, acts)
    gap_m = gaps[context]
    # the optimal action has zero empirical gap; it is held to the smallest
    # nonzero gap instead, and no certificate exists before any gap is seen
    if math.isfinite(gmin) and np.all(norms <= np.maximum(gap_m, gmin) ** 2 / fT):
        return _argmax_lowest(acts @ theta_hat), Branch.EXPLOIT

    state.s += 1
    if _resolve_due(state):
        _resolve(state, gaps)
    ids = state.action_ids[context]
    if state.fair:
        q = state.q_hat[group][context]
        n_here = state.n_group_ctx[group][context]
        n_ratio = state.n_group_action[group][ids]
    else:
        q = state.q_hat[context]
        n_here = state.n_ctx[context]
        n_ratio = state.n_actions[ids]
    cap = fT / gmin ** 2 if math.isfinite(gmin) else math.inf
    target = np.minimum(q, cap)
    if np.all(n_here >= target):
        width = math.sqrt(max(f_budget(state.config.T, 1.0 / state.s ** 2, state.d, state.config.c), 0.0))
        return _argmax_lowest(acts @ theta_hat + width * np.sqrt(np.maximum(norms, 0.0))), Branch.UCB
    n_glob = state.n_actions[ids]
    if np.any(n_glob <= epsilon_t(state.t) * state.s):
        return _argmin_lowest(n_glob), Branch.LEAST_PULLED
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(target > 0, n_ratio / target, math.inf)
        ratio = np.where(np.isinf(target), 0.0, ratio)
    return _argmin_lowest(ratio), Branch.RATIO


def oam_step(state: OamState, context: int) -> tuple[int, Branch]:
    """One OAM decision in ``context``; returns the action index and the branch taken."""
    return _step(state, context, 0)


def pfoam_step(state: OamState, context: int, group: int) -> tuple[int, Branch]:
    if state.instance.context_probs[group, context] <= 0:
        raise AssertionError(f"group {group} cannot arrive with context {context}")
    return _step(state, context, group)


# ---------------------------------------------------------------- simulation

class _NoiseStreams:
    """Standard normal noise per global action id, consumed in pull order."""

    def __init__(self, seed: int, n_actions: int):
        self.gens = [stream(seed, f"rewards/action-{j}") for j in range(n_actions)]
        self.buf = [np.zeros(0) for _ in range(n_actions)]
        self.pos = np.zeros(n_actions, dtype=np.int64)

    def next(self, j: int) -> float:
        if self.pos[j] >= self.buf[j].size:
            self.buf[j] = self.gens[j].standard_normal(REWARD_BLOCK)
            self.pos[j] = 0
        v = self.buf[j][self.pos[j]]
        self.pos[j] += 1
        return float(v)


def draw_arrivals(instance: ContextualInstance, T: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    u = stream(seed, "arrivals").random(T)
    groups = np.minimum(np.searchsorted(np.cumsum(instance.p), u, side="right"), instance.G - 1)
    v = stream(seed, "contexts").random(T)
    ctx = np.empty(T, dtype=np.int64)
    for g in range(instance.G):
        sel = groups == g
        cum = np.cumsum(instance.context_probs[g])
        c = np.searchsorted(cum, v[sel], side="right")
        # never land on a zero-probability context through rounding at the top end
        c = np.minimum(c, int(np.flatnonzero(instance.context_probs[g] > 0).max()))
        ctx[sel] = c
    return groups.astype(np.int64), ctx


@dataclass
class ContextualTrace:
    instance: ContextualInstance
    policy: str
    seed: int
    T: int
    config: OamConfig
    checkpoint_t: np.ndarray
    checkpoint_regret: np.ndarray     # (n_ck, G)
    checkpoint_exploit: np.ndarray    # exploit steps so far
    regret: np.ndarray
    pulls: list                       # pulls[g][m] arrays
    branches: np.ndarray              # counts per Branch
    arrivals: np.ndarray
    resolves: int
    solve_failures: int
    final_q_hat: list = None
    label: str = ""

    @property
    def instance_id(self) -> str:
        return hashlib.sha256(self.instance.dumps().encode()).hexdigest()[:16]

    def exploit_fraction(self, start: int, end: int | None = None) -> float:
        """Share of exploit steps among checkpoints ``start`` < t <= ``end``."""
        t, e = self.checkpoint_t, self.checkpoint_exploit
        end = self.T if end is None else end
        i0 = np.searchsorted(t, start, side="right") - 1
        i1 = np.searchsorted(t, end, side="right") - 1
        t0 = t[i0] if i0 >= 0 else 0
        e0 = e[i0] if i0 >= 0 else 0
        return float((e[i1] - e0) / max(t[i1] - t0, 1))

    def metadata(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "instance": self.instance.to_dict(),
            "instance_id": self.instance_id,
            "label": self.label,
            "policy": self.policy,
            "seed": self.seed,
            "T": self.T,
            "c": self.config.c,
            "ridge": self.config.ridge,
            "resolve": self.config.resolve,
            "regret": "pseudo-regret (sum of true gaps of pulled actions)",
            "streams": "labels 'arrivals', 'contexts', 'rewards/action-<j>'",
            "final_regret": self.regret.tolist(),
            "branches": {b.name.lower(): int(self.branches[b]) for b in Branch},
            "arrivals_per_group": self.arrivals.tolist(),
            "resolves": self.resolves,
            "solve_failures": self.solve_failures,
        }

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "group", "cum_regret", "exploit_steps"])
        for t, reg, ex in zip(self.checkpoint_t, self.checkpoint_regret, self.checkpoint_exploit):
            for g in range(reg.size):
                w.writerow([int(t), g, repr(float(reg[g])), int(ex)])
        return buf.getvalue()

    def export(self, csv_path) -> None:
        csv_path = Path(csv_path)
        csv_path.write_text(self.csv_text())
        csv_path.with_suffix(".json").write_text(json.dumps(self.metadata(), indent=2) + "\n")


def simulate(instance: ContextualInstance, policy: str, T: int, seed: int, c: float = 1.0,
             resolve: str = "doubling", label: str = "") -> ContextualTrace:
    """Run OAM (``policy='oam'``) or PF-OAM (``'pfoam'``) for T steps."""
    if policy not in ("oam", "pfoam"):
        raise ValueError(f"unknown contextual policy {policy!r}")
    cfg = OamConfig(T=T, c=c, resolve=resolve)
    fair = policy == "pfoam"
    state = OamState.start(instance, cfg, fair=fair)
    groups, ctxs = draw_arrivals(instance, T, seed)
    noise = _NoiseStreams(seed, state.n_actions.size)
    _, _, true_gaps = context_gaps(instance.contexts, instance.theta)
    G = instance.G
    cum = np.zeros(G)
    ck_t = checkpoint_times(T)
    if ck_t[-1] != T:
        ck_t = np.append(ck_t, T)
    ck_reg = np.zeros((ck_t.size, G))
    ck_ex = np.zeros(ck_t.size, dtype=np.int64)
    branches = np.zeros(len(Branch), dtype=np.int64)
    ci = 0
    for t in range(1, T + 1):
        g, m = int(groups[t - 1]), int(ctxs[t - 1])
        a, br = pfoam_step(state, m, g) if fair else oam_step(state, m)
        branches[br] += 1
        vec = instance.contexts[m][a]
        r = float(vec @ instance.theta) + noise.next(state.action_ids[m][a])
        state.update(g, m, a, r)
        cum[g] += true_gaps[m][a]
        if t == ck_t[ci]:
            ck_reg[ci] = cum
            ck_ex[ci] = branches[Branch.EXPLOIT]
            ci += 1
    return ContextualTrace(
        instance=instance, policy=policy, seed=seed, T=T, config=cfg,
        checkpoint_t=ck_t, checkpoint_regret=ck_reg, checkpoint_exploit=ck_ex,
        regret=cum, pulls=[[x.copy() for x in row] for row in state.n_group_ctx], branches=branches,
        arrivals=np.bincount(groups, minlength=G), resolves=state.resolves,
        solve_failures=state.solve_failures, final_q_hat=state.q_hat, label=label,
    )
