"""Exploration-allocation programs for grouped linear contextual bandits.

``solve_L`` finds the cheapest log-scaled allocation Q(m, a) whose information
matrix H_Q = sum Q(m, a) a a^T certifies every suboptimal pair:
a^T H_Q^{-1} a <= gap(m, a)^2 / 2. ``solve_Lfair`` splits that exploration
among groups to maximize the sum of log utility gains over each group's
stand-alone cost Y(M^g).

Zero-gap actions cost nothing, so the infimum treats them as sampled without
limit. Their span then carries no uncertainty, and both programs are solved
in the coordinates left over: project the suboptimal actions onto the
orthogonal complement of the free span, then onto the span of those
projections. Reported allocations carry Q = 0 on free actions together with a
``free`` mask meaning "unbounded, cost-free".
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from groupfair.contextual.model import ContextualInstance, context_gaps
from groupfair.errors import Infeasible, NoPositiveGainPoint, RankDeficient
from groupfair.instance import FORMAT_VERSION
from groupfair.nash import NEG_INFINITY, nash_welfare

RANK_RTOL = 1e-10
MU_START = 1.0
MU_END = 1e-8
MU_FACTOR = 10.0
# the path keeps going below MU_END until the duality gap is this small
GAP_RTOL = 1e-10
NEWTON_MAX = 200


# --------------------------------------------------------------- reduction

@dataclass
class _Reduced:
    """Suboptimal pairs in scope, in coordinates where free actions vanish."""

    contexts: list
    scope: np.ndarray
    gaps: list
    pairs: list          # (m, i) with non-zero projection
    vecs: np.ndarray     # (n, k) reduced action vectors
    cost: np.ndarray     # gaps of those pairs
    bound: np.ndarray    # gap^2 / 2
    basis: np.ndarray    # (d, k); reduced = basis.T @ a
    free: list           # per context, mask of zero-gap actions in scope

    @property
    def n(self) -> int:
        return len(self.pairs)


def _orth_complement(F: np.ndarray, d: int) -> np.ndarray:
    if F.size == 0:
        return np.eye(d)
    _, sv, vt = np.linalg.svd(F, full_matrices=True)
    r = int(np.sum(sv > RANK_RTOL * max(sv.max(), 1.0)))
    return vt[r:].T


def _row_basis(Z: np.ndarray) -> np.ndarray:
    if Z.size == 0:
        return np.zeros((Z.shape[1], 0))
    _, sv, vt = np.linalg.svd(Z, full_matrices=False)
    r = int(np.sum(sv > RANK_RTOL * max(sv.max(), 1.0)))
    return vt[:r].T


def _reduce(contexts, gaps, scope) -> _Reduced:
    d = contexts[0].shape[1]
    scope = np.asarray(sorted(set(int(m) for m in scope)), dtype=np.int64)
    free_vecs, free = [], [np.zeros(len(c), dtype=bool) for c in contexts]
    sub = []
    for m in scope:
        z = gaps[m] <= 0
        free[m] = z
        free_vecs.extend(contexts[m][z])
        sub.extend((int(m), int(i)) for i in np.flatnonzero(~z))
    U = _orth_complement(np.array(free_vecs).reshape(-1, d), d)
    Z = np.array([U.T @ contexts[m][i] for m, i in sub]).reshape(len(sub), U.shape[1])
    V = _row_basis(Z)
    basis = U @ V
    W = Z @ V
    keep = [j for j in range(len(sub))
            if np.linalg.norm(W[j]) > RANK_RTOL * max(1.0, np.linalg.norm(contexts[sub[j][0]][sub[j][1]]))]
    pairs = [sub[j] for j in keep]
    cost = np.array([gaps[m][i] for m, i in pairs])
    return _Reduced(list(contexts), scope, gaps, pairs, W[keep].reshape(len(keep), basis.shape[1]),
                    cost, cost ** 2 / 2.0, basis, free)


def _info(R: _Reduced, x: np.ndarray):
    """Quadratic forms M = W H^{-1} W^T at pair weights x, or None off the PD cone."""
    H = R.vecs.T @ (x[:, None] * R.vecs)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return None
    Y = solve_triangular(L, R.vecs.T, lower=True)
    return Y.T @ Y


def constraint_gradient(H: np.ndarray, actions: np.ndarray, a: np.ndarray) -> np.ndarray:
    """d(a^T H^{-1} a)/dQ(b) = -(a^T H^{-1} b)^2 for each row b of ``actions``."""
    return -(actions @ np.linalg.solve(H, a)) ** 2


# ------------------------------------------------------------ barrier path

@dataclass
class _PathResult:
    x: np.ndarray
    mu: float
    newton: int
    kkt: float


def _newton_center(fun, x, mu, pos, max_iter=NEWTON_MAX, rtol=1e-3):
    """Damped Newton on the barrier objective ``fun(x, mu)``.

    Positive coordinates are scaled by their own value, which keeps the
    system well conditioned near the bounds. Returns the point, the
    iteration count and the last Newton decrement.
    """
    it = 0
    out = fun(x, mu, True)
    if out is None:
        raise Infeasible("barrier path left the interior")
    f, g, Hs = out
    dec = math.inf
    while it < max_iter:
        it += 1
        D = np.where(pos, x, 1.0)
        A = D[:, None] * Hs * D[None, :]
        rhs = -D * g
        try:
            y = cho_solve(cho_factor(A), rhs)
        except np.linalg.LinAlgError:
            y = np.linalg.lstsq(A, rhs, rcond=None)[0]
        dx = D * y
        dec = max(float(-g @ dx), 0.0)
        if not np.isfinite(dec) or dec <= 1e-14 * max(1.0, abs(f)):
            break
        neg = pos & (dx < 0)
        step = min(1.0, 0.99 * np.min(-x[neg] / dx[neg])) if neg.any() else 1.0
        exact = dec <= 1e-12 * max(1.0, abs(f))
        while step > 1e-12:
            xn = x + step * dx
            nout = fun(xn, mu, False)
            if nout is not None and (exact or nout[0] <= f - 0.25 * step * dec):
                break
            step *= 0.5
        else:
            break
        x = xn
        f, g, Hs = fun(x, mu, True)
        if dec / 2 <= rtol * mu:
            break
    return x, it, dec


def _path(fun, x0, pos, n_barrier, scale, mu0=MU_START, stop=None):
    """Follow the central path from ``mu0`` down to MU_END and beyond.

    The path continues below MU_END while the duality-gap bound
    ``n_barrier * mu`` exceeds GAP_RTOL relative to ``scale``. The reported
    KKT residual combines that gap with the Newton decrement (the
    stationarity error measured in the local Hessian norm).
    """
    x, mu, total = x0.copy(), mu0, 0
    while True:
        x, it, dec = _newton_center(fun, x, mu, pos)
        total += it
        if stop is not None and stop(x):
            break
        if mu <= MU_END and n_barrier * mu <= GAP_RTOL * max(1.0, scale(x)):
            break
        if mu < 1e-16:
            break
        mu /= MU_FACTOR
    if stop is None:
        x, it, dec = _newton_center(fun, x, mu, pos, rtol=1e-9)
        total += it
    sc = max(1.0, scale(x))
    kkt = max(math.sqrt(dec) / sc if np.isfinite(dec) else 0.0, n_barrier * mu / sc)
    return _PathResult(x, mu, total, kkt)


# ------------------------------------------------------------------ solve_L

@dataclass
class Allocation:
    """Exploration allocation over (context, action) pairs.

    ``q[m][i]`` is the log-scaled pull count of action i in context m;
    ``free[m][i]`` marks zero-gap actions, which are unbounded and cost-free.
    """

    q: list
    free: list
    gaps: list
    contexts: list
    value: float
    scope: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> np.ndarray:
        """Flat vector of Q(m, a) over all pairs, context-major."""
        return np.concatenate(self.q)

    def information_matrix(self, free_weight: float = 0.0) -> np.ndarray:
        d = self.contexts[0].shape[1]
        H = np.zeros((d, d))
        for m, acts in enumerate(self.contexts):
            w = self.q[m] + free_weight * self.free[m]
            H += acts.T @ (w[:, None] * acts)
        return H

    def constraint_values(self) -> list:
        """(m, i, a^T H^{-1} a, gap^2/2) for the suboptimal pairs in scope.

        Free directions are taken as fully known, matching the program.
        """
        R = _reduce(self.contexts, self.gaps, self.scope)
        if R.n == 0:
            return []
        x = np.array([self.q[m][i] for m, i in R.pairs])
        M = _info(R, x)
        if M is None:
            return [(m, i, math.inf, b) for (m, i), b in zip(R.pairs, R.bound)]
        return [(m, i, float(M[j, j]), float(R.bound[j])) for j, (m, i) in enumerate(R.pairs)]

    def max_violation(self) -> float:
        vals = self.constraint_values()
        return max((v - b for _, _, v, b in vals), default=0.0)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "value": self.value,
            "scope": self.scope.tolist(),
            "q": [q.tolist() for q in self.q],
            "free": [f.tolist() for f in self.free],
            "stats": self.stats,
        }

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["context", "action", "gap", "q", "free"])
        for m in range(len(self.q)):
            for i in range(len(self.q[m])):
                w.writerow([m, i, repr(float(self.gaps[m][i])), repr(float(self.q[m][i])), int(self.free[m][i])])
        return buf.getvalue()


def _L_fun(R: _Reduced):
    c, b = R.cost, R.bound

    def fun(x, mu, derivs):
        if np.any(x <= 0):
            return None
        M = _info(R, x)
        if M is None:
            return None
        s = b - np.diag(M)
        if np.any(s <= 0):
            return None
        f = c @ x - mu * (np.log(s).sum() + np.log(x).sum())
        if not derivs:
            return (f,)
        M2 = M * M
        g = c - mu * (M2.T @ (1.0 / s)) - mu / x
        Hs = mu * (M2.T @ (M2 / s[:, None] ** 2) + 2.0 * M * (M.T @ (M / s[:, None])) + np.diag(1.0 / x ** 2))
        return f, g, 0.5 * (Hs + Hs.T)

    return fun


def _phase1_L(R: _Reduced) -> np.ndarray:
    """Uniform weights scaled until every constraint holds with room to spare."""
    ones = np.ones(R.n)
    M = _info(R, ones)
    if M is None:
        raise RankDeficient("reduced information matrix is singular at uniform weights")
    lam = 2.0 * float(np.max(np.diag(M) / R.bound))
    if not np.isfinite(lam) or lam <= 0:
        raise Infeasible("phase-1 scaling found no interior point")
    return lam * ones


def _empty_q(contexts) -> list:
    return [np.zeros(len(c)) for c in contexts]


def solve_L_gaps(contexts, gaps, scope=None) -> Allocation:
    """``solve_L`` for explicit per-context gaps (used on empirical estimates)."""
    contexts = [np.asarray(c, dtype=float) for c in contexts]
    if scope is None:
        scope = range(len(contexts))
    scope = list(scope)
    if not scope:
        raise ValueError("context subset must be non-empty")
    R = _reduce(contexts, gaps, scope)
    q = _empty_q(contexts)
    stats = {"newton_iterations": 0, "mu": 0.0, "kkt_residual": 0.0, "pairs": R.n}
    if R.n == 0:
        return Allocation(q, R.free, list(gaps), contexts, 0.0, R.scope, stats)
    x0 = _phase1_L(R)
    res = _path(_L_fun(R), x0, np.ones(R.n, dtype=bool), 2 * R.n, lambda x: R.cost @ x)
    for (m, i), v in zip(R.pairs, res.x):
        q[m][i] = v
    stats.update(newton_iterations=res.newton, mu=res.mu, pairs=R.n,
                 kkt_residual=res.kkt)
    return Allocation(q, R.free, list(gaps), contexts, float(R.cost @ res.x), R.scope, stats)


def solve_L(instance: ContextualInstance, subset=None) -> Allocation:
    """Regret-optimal allocation over ``subset`` (default: every context)."""
    _, _, gaps = context_gaps(instance.contexts, instance.theta)
    return solve_L_gaps(instance.contexts, gaps, subset)


def disagreement_values(instance: ContextualInstance, gaps=None) -> np.ndarray:
    """Y(M^g): each group's regret-optimal cost on its own context support."""
    if gaps is None:
        _, _, gaps = context_gaps(instance.contexts, instance.theta)
    return np.array([solve_L_gaps(instance.contexts, gaps, sup).value for sup in instance.supports])


def group_regrets(q_groups: list, gaps: list) -> np.ndarray:
    return np.array([sum(float(qm @ gm) for qm, gm in zip(qg, gaps)) for qg in q_groups])


def proportional_split(alloc: Allocation, weights: np.ndarray) -> list:
    """Q^g(m, a) = w^g(m) Q(m, a): each context's exploration shared by traffic."""
    return [[weights[g, m] * alloc.q[m] for m in range(len(alloc.q))] for g in range(weights.shape[0])]


def allocate_regret_optimal(alloc: Allocation, weights: np.ndarray) -> np.ndarray:
    """Per-group regret when ``alloc`` is charged in proportion to traffic."""
    return group_regrets(proportional_split(alloc, weights), alloc.gaps)


# -------------------------------------------------------------- solve_Lfair

@dataclass
class FairAllocation:
    q: list              # q[g][m] arrays, zero outside M^g
    free: list
    gaps: list
    disagreement: np.ndarray
    regrets: np.ndarray
    gains: np.ndarray
    welfare: object
    aggregate: Allocation
    stats: dict = field(default_factory=dict)

    @property
    def total_regret(self) -> float:
        return float(self.regrets.sum())

    def to_dict(self) -> dict:
        w = self.welfare
        return {
            "format_version": FORMAT_VERSION,
            "disagreement": self.disagreement.tolist(),
            "regrets": self.regrets.tolist(),
            "gains": self.gains.tolist(),
            "welfare": "NEG_INFINITY" if w is NEG_INFINITY else float(w),
            "total_regret": self.total_regret,
            "q": [[qm.tolist() for qm in qg] for qg in self.q],
            "stats": self.stats,
        }

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "context", "action", "gap", "q", "free"])
        for g, qg in enumerate(self.q):
            for m, qm in enumerate(qg):
                for i, v in enumerate(qm):
                    w.writerow([g, m, i, repr(float(self.gaps[m][i])), repr(float(v)), int(self.free[m][i])])
        return buf.getvalue()


def _fair_layout(R: _Reduced, supports):
    """Variables are (group, pair) with the pair's context in the group's support."""
    var_group, var_pair = [], []
    for g, sup in enumerate(supports):
        sup = set(int(m) for m in sup)
        for j, (m, _) in enumerate(R.pairs):
            if m in sup:
                var_group.append(g)
                var_pair.append(j)
    return np.array(var_group, dtype=np.int64), np.array(var_pair, dtype=np.int64)


def _fair_fun(R: _Reduced, Y, vg, vp, G, phase1):
    """Barrier objective of the Nash program; with ``phase1`` the last variable
    is a common margin tau and the objective is -tau."""
    b = R.bound
    cost_v = R.cost[vp]
    S = np.zeros((R.n, vg.size))
    S[vp, np.arange(vg.size)] = 1.0
    C = np.zeros((G, vg.size))
    C[vg, np.arange(vg.size)] = cost_v
    nv = vg.size

    def fun(z, mu, derivs):
        x = z[:nv]
        if np.any(x <= 0):
            return None
        agg = S @ x
        M = _info(R, agg)
        if M is None:
            return None
        s = b - np.diag(M)
        gain = Y - C @ x
        if phase1:
            tau = z[nv]
            slack = gain - tau
        else:
            slack = gain
        if np.any(s <= 0) or np.any(slack <= 0):
            return None
        if phase1:
            f = -tau - mu * (np.log(slack).sum() + np.log(s).sum() + np.log(x).sum())
        else:
            f = -np.log(slack).sum() - mu * (np.log(s).sum() + np.log(x).sum())
        if not derivs:
            return (f,)
        M2 = M * M
        gp = -(M2.T @ (1.0 / s))
        Hp = M2.T @ (M2 / s[:, None] ** 2) + 2.0 * M * (M.T @ (M / s[:, None]))
        gx = mu * (S.T @ gp) - mu / x
        Hx = mu * (S.T @ Hp @ S + np.diag(1.0 / x ** 2))
        w = 1.0 / slack
        coef = mu if phase1 else 1.0
        # -coef * sum log(gain_g - tau): gain is affine in x with Jacobian -C
        gx = gx + coef * (C.T @ w)
        Hx = Hx + coef * (C.T @ (C * (w ** 2)[:, None]))
        if not phase1:
            return f, gx, 0.5 * (Hx + Hx.T)
        g_tau = -1.0 + coef * w.sum()
        h_xt = coef * (C.T @ (w ** 2))
        h_tt = coef * (w ** 2).sum()
        g = np.append(gx, g_tau)
        H = np.zeros((nv + 1, nv + 1))
        H[:nv, :nv] = Hx
        H[:nv, nv] = H[nv, :nv] = h_xt
        H[nv, nv] = h_tt
        return f, g, 0.5 * (H + H.T)

    return fun, S, C


def _degenerate_fair(base: Allocation, weights, Y, reason) -> FairAllocation:
    qg = proportional_split(base, weights)
    regrets = group_regrets(qg, base.gaps)
    gains = Y - regrets
    return FairAllocation(qg, base.free, base.gaps, Y, regrets, gains, NEG_INFINITY, base,
                          {"degenerate": reason})


def solve_Lfair_gaps(instance: ContextualInstance, gaps) -> FairAllocation:
    contexts = instance.contexts
    supports = instance.supports
    G = instance.G
    Y = disagreement_values(instance, gaps)
    scope = sorted(set().union(*[set(int(m) for m in s) for s in supports]))
    base = solve_L_gaps(contexts, gaps, scope)
    weights = instance.group_weights
    if G == 1:
        return _degenerate_fair(base, weights, Y, "single group")
    if np.any(Y <= 0):
        return _degenerate_fair(base, weights, Y, "group with zero achievable gain")
    R = _reduce(contexts, gaps, scope)
    if R.n == 0:
        # the pooled optimal actions already span every needed direction
        q = [_empty_q(contexts) for _ in range(G)]
        return FairAllocation(q, base.free, list(gaps), Y, np.zeros(G), Y.copy(), nash_welfare(Y), base,
                              {"newton_iterations": 0, "pooled_free": True})
    vg, vp = _fair_layout(R, supports)
    nv = vg.size
    # phase 1: regret-optimal allocation inflated into the interior, split by traffic
    x_pair = np.array([base.q[m][i] for m, i in R.pairs])
    x_pair = 1.1 * x_pair + 1e-3 * max(float(x_pair.mean()), 1e-12)
    share = np.array([weights[vg[k], R.pairs[vp[k]][0]] for k in range(nv)])
    tot = np.zeros(R.n)
    np.add.at(tot, vp, share)
    x0 = x_pair[vp] * share / tot[vp]
    fun1, S, C = _fair_fun(R, Y, vg, vp, G, phase1=True)
    gain0 = Y - C @ x0
    tau0 = float(gain0.min()) - max(1.0, float(np.abs(gain0).max()))
    stats = {"phase1_newton": 0}
    if gain0.min() <= 0:
        pos = np.append(np.ones(nv, dtype=bool), False)
        margin = 1e-9 * float(Y.max())
        res1 = _path(fun1, np.append(x0, tau0), pos, nv + R.n + G, lambda z: float(Y.max()),
                     stop=lambda z: z[nv] > margin)
        stats["phase1_newton"] = res1.newton
        if res1.x[nv] <= margin:
            raise NoPositiveGainPoint(
                f"best common gain margin {res1.x[nv]:.3e} is not positive")
        x0 = res1.x[:nv]
    fun2, _, _ = _fair_fun(R, Y, vg, vp, G, phase1=False)
    res = _path(fun2, x0, np.ones(nv, dtype=bool), nv + R.n, lambda x: 1.0)
    x = res.x
    regrets = C @ x
    gains = Y - regrets
    cand = proportional_split(base, weights)
    cand_regrets = group_regrets(cand, gaps)
    cand_w = nash_welfare(Y - cand_regrets)
    w = nash_welfare(gains)
    q = [_empty_q(contexts) for _ in range(G)]
    for k in range(nv):
        m, i = R.pairs[vp[k]]
        q[vg[k]][m][i] = x[k]
    stats.update(newton_iterations=res.newton, mu=res.mu, kkt_residual=res.kkt, polished=False)
    if cand_w is not NEG_INFINITY and (w is NEG_INFINITY or cand_w > w):
        # the traffic-proportional point is exact; keep it when the barrier
        # solution has not yet beaten it to rounding
        q, regrets, gains, w = cand, cand_regrets, Y - cand_regrets, cand_w
        stats["polished"] = True
    agg_q = [sum(q[g][m] for g in range(G)) for m in range(len(contexts))]
    agg = Allocation(agg_q, base.free, list(gaps), list(contexts), float(sum(qm @ gm for qm, gm in zip(agg_q, gaps))),
                     base.scope, {})
    return FairAllocation(q, base.free, list(gaps), Y, regrets, gains, w, agg, stats)


def solve_Lfair(instance: ContextualInstance) -> FairAllocation:
    _, _, gaps = context_gaps(instance.contexts, instance.theta)
    return solve_Lfair_gaps(instance, gaps)
