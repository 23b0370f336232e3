"""Nash social welfare program over exploration shares, and fairness metrics.

The program maximizes sum_g log S^g(q) where S^g(q) is group g's log-scaled
utility gain and q ranges over one simplex per arm in A_sub. Its optimal gain
vector is unique but the optimal q is not; we pick the minimum-norm one.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, nnls

from groupfair.errors import (
    Assumption1Violated,
    Infeasible,
    NotConverged,
    QPNumericallySingular,
    UndefinedPoF,
)
from groupfair.instance import InstanceAnalytics, regret_optimal_shares

MAX_ITER = 100_000
RANK_TOL = 1e-10
X_FLOOR = 1e-200
EG_ITER = 500


class _Welfare(enum.Enum):
    NEG_INFINITY = "NEG_INFINITY"

    def __repr__(self):
        return "NEG_INFINITY"


NEG_INFINITY = _Welfare.NEG_INFINITY


def is_neg_infinity(w) -> bool:
    return w is NEG_INFINITY


def nash_welfare(gains) -> float | _Welfare:
    gains = np.asarray(gains, dtype=float)
    if gains.size == 0 or np.any(gains <= 0):
        return NEG_INFINITY
    return float(np.log(gains).sum())


def util_gains(an: InstanceAnalytics, per_group_regret) -> np.ndarray:
    """UtilGain^g = R~^g - R^g (log-scale); negative entries are kept."""
    return an.disagreement - np.asarray(per_group_regret, dtype=float)


@dataclass
class NashSolution:
    q: np.ndarray
    s: np.ndarray
    welfare: float | _Welfare
    norm_sq: float
    solver_stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        w = self.welfare
        return {
            "format_version": 1,
            "q": self.q.tolist(),
            "s": self.s.tolist(),
            "welfare": "NEG_INFINITY" if w is NEG_INFINITY else w,
            "norm_sq": self.norm_sq,
            "solver_stats": self.solver_stats,
        }


class _Layout:
    """Flat indexing of the free share variables (shared A_sub arms)."""

    def __init__(self, an: InstanceAnalytics, groups=None):
        # groups: ids entering the objective (default all); variables of other
        # groups cannot exist since they have no suboptimal arm
        mask = an.variable_mask
        n_acc = mask.sum(axis=0)
        free_arms = np.flatnonzero(an.sub_global & (n_acc >= 2))
        self.fixed_arms = np.flatnonzero(an.sub_global & (n_acc == 1))
        gi, ai = [], []
        for a in free_arms:
            for g in np.flatnonzero(mask[:, a]):
                gi.append(g)
                ai.append(a)
        self.groups = np.arange(an.G) if groups is None else np.asarray(groups, dtype=int)
        local = np.full(an.G, -1)
        local[self.groups] = np.arange(len(self.groups))
        self.gi_full = np.array(gi, dtype=int)
        self.gi = local[self.gi_full]
        self.ai = np.array(ai, dtype=int)
        self.free_arms = free_arms
        # segment starts per free arm, for column-wise normalization
        self.seg = np.flatnonzero(np.r_[True, self.ai[1:] != self.ai[:-1]]) if len(ai) else np.zeros(0, int)
        self.seg_id = np.repeat(np.arange(len(self.seg)), np.diff(np.r_[self.seg, len(ai)])) if len(ai) else np.zeros(0, int)
        self.cost = an.cost[self.gi, self.ai]
        self.G, self.K = len(self.groups), an.K
        base = np.zeros((an.G, an.K))
        for a in self.fixed_arms:
            base[mask[:, a], a] = 1.0
        self.base_q = base
        self.base_s = an.gains(base)[self.groups]

    @property
    def n(self) -> int:
        return len(self.gi)

    def to_matrix(self, x: np.ndarray) -> np.ndarray:
        q = self.base_q.copy()
        q[self.gi_full, self.ai] = x
        return q

    def gains(self, x: np.ndarray) -> np.ndarray:
        return self.base_s - np.bincount(self.gi, weights=self.cost * x, minlength=self.G)

    def colsum(self, v: np.ndarray) -> np.ndarray:
        return np.add.reduceat(v, self.seg) if len(v) else v


def feasible_init(an: InstanceAnalytics) -> np.ndarray:
    """Share matrix with strictly positive gains for every group.

    Each A_sub arm starts with one Gamma(a) member g, which hands a fraction
    p(a)/2 to a second accessing group g', where p(a) J(a) = J^{g'}(a).
    """
    if not an.assumption1:
        raise Assumption1Violated("some group has no shared suboptimal arm")
    return _split_init(an)


def _split_init(an: InstanceAnalytics) -> np.ndarray:
    q = np.zeros((an.G, an.K))
    for a in np.flatnonzero(an.sub_global):
        gs = np.flatnonzero(an.instance.access[:, a])
        g = an.gamma[a][0]
        others = [h for h in gs if h != g]
        if not others:
            q[g, a] = 1.0
            continue
        g2 = others[0]
        p = an.j_group[g2, a] / an.j_max[a]
        q[g2, a] = p / 2.0
        q[g, a] = 1.0 - p / 2.0
    return q


def _fw_gap(lay: _Layout, x: np.ndarray, grad: np.ndarray) -> float:
    """Frank-Wolfe gap: upper bound on (optimal welfare - current welfare)."""
    if lay.n == 0:
        return 0.0
    colmax = np.maximum.reduceat(grad, lay.seg)
    return float((colmax - lay.colsum(x * grad)).sum())


def _gap_tol(lay: _Layout, grad: np.ndarray, tol: float) -> float:
    """tol plus the rounding floor of the gap itself.

    Near-tied arm means give gains of order 1e-5 and gradients of order 1e8;
    the gap is then only resolvable to a few ulps of |grad| per arm.
    """
    if lay.n == 0:
        return tol
    return tol + 8.0 * np.finfo(float).eps * float(np.maximum.reduceat(np.abs(grad), lay.seg).sum())


def _mirror_ascent(lay: _Layout, x0: np.ndarray, tol: float, max_iter: int):
    """Exponentiated-gradient ascent on the product of per-arm simplices."""
    x = x0.copy()
    s = lay.gains(x)
    f = float(np.log(s).sum())
    scale = 0.1
    it = 0
    gap = math.inf
    while it < max_iter:
        grad = -lay.cost / s[lay.gi]
        gap = _fw_gap(lay, x, grad)
        if gap <= _gap_tol(lay, grad, tol):
            break
        L = float(np.abs(grad).max())
        while True:
            z = (scale / L) * grad
            z = z - np.maximum.reduceat(z, lay.seg)[lay.seg_id]
            # floor keeps coordinates from underflowing to an absorbing exact zero
            y = np.maximum(x * np.exp(z), X_FLOOR)
            y = y / lay.colsum(y)[lay.seg_id]
            s_new = lay.gains(y)
            if np.all(s_new > 0):
                f_new = float(np.log(s_new).sum())
                # relative-smoothness test: f must beat its linear model minus KL(y||x)/eta,
                # up to rounding noise in f
                kl = float(np.sum(y * np.log(y / x)))
                model = f + float(grad @ (y - x)) - kl * L / scale
                if f_new >= model - 4e-16 * max(1.0, abs(f)):
                    break
            scale *= 0.5
            if scale < 1e-12:
                # step underflow: the iterate is stationary to machine precision
                return x, s, f, it, gap
        x, s, f = y, s_new, f_new
        scale = min(scale * 2.0, 1e6)
        it += 1
    return x, s, f, it, gap


def _barrier_newton(lay: _Layout, x0: np.ndarray, tol: float, max_iter: int):
    """Log-barrier Newton path following on the product of simplices.

    Used to finish off stage 1 when mirror ascent crawls, which happens on
    near-degenerate instances (nearly tied cost ratios). Each Newton system
    is reduced to G x G and per-arm pieces via the Woodbury identity.
    """
    n, G, A = lay.n, lay.G, len(lay.seg)
    C = np.zeros((G, n))
    C[lay.gi, np.arange(n)] = lay.cost
    E = np.zeros((A, n))
    E[lay.seg_id, np.arange(n)] = 1.0
    x = np.maximum(x0, 1e-12)
    x = x / lay.colsum(x)[lay.seg_id]
    if np.any(lay.gains(x) <= 0):
        x = x0
    s = lay.gains(x)
    gap = _fw_gap(lay, x, -lay.cost / s[lay.gi])
    mu = max(gap, tol) / n
    it = 0

    def phi(x, s, mu):
        return float(np.log(s).sum() + mu * np.log(x).sum())

    while it < max_iter:
        for _ in range(100):
            it += 1
            s = lay.gains(x)
            grad = -C.T @ (1.0 / s) + mu / x
            # affine-scaled KKT system (dx = x * u): far better conditioned than
            # the raw one when some coordinates are tiny
            B = x[:, None] * (C.T / s[None, :])
            EX = E * x[None, :]
            K = np.zeros((n + A, n + A))
            K[:n, :n] = B @ B.T
            K[np.arange(n), np.arange(n)] += mu
            K[:n, n:] = EX.T
            K[n:, :n] = EX
            rhs = np.r_[x * grad, np.zeros(A)]
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            dx = x * sol[:n]
            # dec >= 0 in exact arithmetic; near the center its sign is rounding noise,
            # so only the step size decides convergence
            dec = float(grad @ dx)
            if np.max(np.abs(dx) / x) < 1e-13:
                break
            t = 1.0
            neg = dx < 0
            if neg.any():
                t = min(1.0, 0.99 * float(np.min(-x[neg] / dx[neg])))
            ds = -C @ dx
            negs = ds < 0
            if negs.any():
                t = min(t, 0.99 * float(np.min(-s[negs] / ds[negs])))
            f0 = phi(x, s, mu)
            # below this the predicted increase is lost in rounding of f; the
            # iterate is then deep in Newton's quadratic region, take the step
            line_search = dec > 1e-12 * max(1.0, abs(f0))
            while line_search and t > 1e-14:
                y = x + t * dx
                f1 = phi(y, lay.gains(y), mu)
                if f1 >= f0 + 0.25 * t * dec - 4e-16 * max(1.0, abs(f0)):
                    break
                t *= 0.5
            x = x + t * dx
            x = np.maximum(x, X_FLOOR)
            x = x / lay.colsum(x)[lay.seg_id]
            if t * np.max(np.abs(dx) / x) < 1e-13:
                break
        s = lay.gains(x)
        g_full = -lay.cost / s[lay.gi]
        gap = _fw_gap(lay, x, g_full)
        if gap <= _gap_tol(lay, g_full, tol):
            break
        mu *= 0.1
    return x, s, float(np.log(s).sum()), it, gap


def _min_norm_on_face(A: np.ndarray, b: np.ndarray, x_feas: np.ndarray):
    """min ||x||^2 s.t. A x = b, x >= 0, given a feasible point.

    The affine projection of the origin, x_p = A^T (A A^T)^+ b, splits the
    problem orthogonally: x = x_p + Z y with Z spanning null(A), so
    ||x||^2 = ||x_p||^2 + ||y||^2 and what remains is the least-distance problem
    min ||y|| s.t. Z y >= -x_p, solved through its NNLS dual. Returns
    (x, used_fallback); the fallback is the feasible point itself, taken only
    when the face has numerically empty interior.
    """
    _, sv, Vt = np.linalg.svd(A)
    rank = int((sv > RANK_TOL * max(1.0, sv[0] if len(sv) else 0.0)).sum())
    x_p = np.linalg.pinv(A, rcond=RANK_TOL) @ b
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    resid = float(np.abs(A @ x_p - b).max(initial=0.0))
    if resid > 1e-8 * scale:
        raise QPNumericallySingular(f"equality system inconsistent after projection (residual {resid:.3e})")
    if np.all(x_p >= 0):
        return x_p, False
    Z = Vt[rank:].T
    if Z.shape[1] == 0:
        return np.maximum(x_p, 0.0), False
    E = np.vstack([Z.T, -x_p[None, :]])
    f = np.zeros(E.shape[0])
    f[-1] = 1.0
    try:
        u = nnls(E, f)[0]
    except RuntimeError:
        # iteration limit: treat like a face without interior
        return x_feas, True
    r = E @ u - f
    if abs(r[-1]) < 1e-12:
        return x_feas, True
    x = np.maximum(x_p - Z @ (r[:-1] / r[-1]), 0.0)
    if np.abs(A @ x - b).max() > 1e-8 * scale or x @ x > x_feas @ x_feas + 1e-12:
        return x_feas, True
    return x, False


def _optimal_support(lay: _Layout, s: np.ndarray, rtol: float = 1e-6) -> np.ndarray:
    """(g, a) pairs that may carry share at the optimum: minimal cost/gain ratio per arm."""
    ratio = lay.cost / s[lay.gi]
    best = np.minimum.reduceat(ratio, lay.seg)[lay.seg_id]
    return ratio <= best * (1.0 + rtol)


def _face_constraints(lay: _Layout, x: np.ndarray, support: np.ndarray):
    """Equalities fixing each free arm's simplex and each group's gain at the value of x."""
    n = lay.n
    idx = np.flatnonzero(support)
    rows, rhs = [], []
    for k in range(len(lay.seg)):
        r = (lay.seg_id[idx] == k).astype(float)
        rows.append(r)
        rhs.append(1.0)
    for g in range(lay.G):
        sel = lay.gi[idx] == g
        if not sel.any():
            continue
        r = np.where(sel, lay.cost[idx], 0.0)
        rows.append(r)
        rhs.append(float(r @ x[idx]))
    return np.array(rows), np.array(rhs), idx


def solve_nash(an: InstanceAnalytics, tol: float = 1e-8, max_iter: int = MAX_ITER,
               x0: np.ndarray | None = None, skip_vacuous: bool = False) -> NashSolution:
    """Maximize Nash welfare over exploration shares; return the min-norm optimum.

    With ``skip_vacuous`` groups without any suboptimal arm are left out of
    the objective instead of forcing it to -inf (their gain is 0 regardless).
    """
    if skip_vacuous:
        active = np.flatnonzero(an.sub_of_group.any(axis=1))
    else:
        active = np.arange(an.G)
    shared_sub = an.sub_of_group & (an.instance.access.sum(axis=0) >= 2)[None, :]
    if len(active) == 0 or not shared_sub[active].any(axis=1).all():
        q = regret_optimal_shares(an)
        s = an.gains(q)
        return NashSolution(q=q, s=s, welfare=NEG_INFINITY, norm_sq=float((q ** 2).sum()),
                            solver_stats={"iterations": 0, "newton_iterations": 0, "fw_gap": 0.0,
                                          "qp_residual": 0.0, "qp_fallback": False})
    lay = _Layout(an, active)
    if x0 is None:
        q0 = _split_init(an)
        x_init = q0[lay.gi_full, lay.ai]
        # mirror ascent cannot leave zero coordinates; mix in the uniform split
        uni = 1.0 / np.bincount(lay.seg_id)[lay.seg_id] if lay.n else x_init
        eps = 1e-2
        while True:
            x = (1 - eps) * x_init + eps * uni
            if np.all(lay.gains(x) > 0):
                break
            eps *= 0.5
    else:
        x = np.asarray(x0, dtype=float)
    x, s, f, iters, gap = _mirror_ascent(lay, x, tol, min(max_iter, EG_ITER))
    newton_iters = 0
    if gap > _gap_tol(lay, -lay.cost / s[lay.gi], tol):
        x, s, f, newton_iters, gap = _barrier_newton(lay, x, tol, max_iter - iters)
    if gap > _gap_tol(lay, -lay.cost / s[lay.gi], tol):
        raise NotConverged(iters + newton_iters, f"(Frank-Wolfe gap {gap:.3e})")
    grad_norm = float(np.linalg.norm(-lay.cost / s[lay.gi])) if lay.n else 0.0

    qp_resid = 0.0
    fallback = False
    if lay.n:
        support = _optimal_support(lay, s)
        # renormalize the support part so the equalities are exactly consistent
        xs = np.where(support, x, 0.0)
        xs = xs / lay.colsum(xs)[lay.seg_id]
        A, b, idx = _face_constraints(lay, xs, support)
        xi, fallback = _min_norm_on_face(A, b, xs[idx])
        x = np.zeros(lay.n)
        x[idx] = xi
        qp_resid = float(np.abs(A @ xi - b).max())
    q = lay.to_matrix(x)
    s = an.gains(q)
    return NashSolution(
        q=q,
        s=s,
        welfare=nash_welfare(s[active]),
        norm_sq=float((q ** 2).sum()),
        solver_stats={"iterations": iters, "newton_iterations": newton_iters, "fw_gap": gap, "grad_norm": grad_norm, "qp_residual": qp_resid, "qp_fallback": fallback},
    )


def max_group_gain(an: InstanceAnalytics, g: int) -> float:
    """Largest gain for group g over shares keeping every group's gain >= 0 (LP)."""
    lay = _Layout(an)
    if lay.base_s.min() < -1e-12:
        raise Infeasible("a group has negative gain for every share profile")
    if lay.n == 0:
        return float(lay.base_s[g])
    n = lay.n
    c = np.zeros(n)
    sel = lay.gi == g
    c[sel] = lay.cost[sel]
    A_eq = np.zeros((len(lay.seg), n))
    A_eq[lay.seg_id, np.arange(n)] = 1.0
    b_eq = np.ones(len(lay.seg))
    A_ub = np.zeros((lay.G, n))
    A_ub[lay.gi, np.arange(n)] = lay.cost
    b_ub = lay.base_s
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise Infeasible(f"LP failed: {res.message}")
    return float(lay.base_s[g] - res.fun)


@dataclass
class PoFReport:
    system: float
    fair: float
    pof: float
    r_asym: float
    bound_general: float
    bound_topology: float | None
    max_gains: np.ndarray

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "system": self.system,
            "fair": self.fair,
            "pof": self.pof,
            "r_asym": self.r_asym,
            "bound_general": self.bound_general,
            "bound_topology": self.bound_topology,
            "max_gains": self.max_gains.tolist(),
        }


def is_shared_or_exclusive(an: InstanceAnalytics) -> bool:
    n_acc = an.instance.access.sum(axis=0)
    return bool(np.all((n_acc == 1) | (n_acc == an.G)))


def price_of_fairness(an: InstanceAnalytics, nash: NashSolution | None = None) -> PoFReport:
    """PoF of the Nash solution with the asymmetry bound and the topology bound."""
    system = float(an.disagreement.sum() - an.lower_bound)
    if system <= 0:
        raise UndefinedPoF("no cooperative regret reduction exists (SYSTEM = 0)")
    if nash is None:
        nash = solve_nash(an)
    fair = float(nash.s.sum())
    pof = (system - fair) / system
    smax = np.array([max_group_gain(an, g) for g in range(an.G)])
    r = float(smax.min() / smax.max()) if smax.max() > 0 else 0.0
    G = an.G
    bound = 1.0 - r * (2.0 * math.sqrt(G) - 1.0) / G
    topo = 0.5 if is_shared_or_exclusive(an) else None
    return PoFReport(system=system, fair=fair, pof=pof, r_asym=r, bound_general=bound,
                     bound_topology=topo, max_gains=smax)
