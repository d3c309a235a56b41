"""Equality-constrained trajectory optimization: augmented Lagrangian outer
loop with damped Gauss-Newton inner iterations on a banded normal system.

Problems are lists of residual terms over named variable blocks. Blocks are
either plain vectors (robot joints) or pose tangents retracted through the
right chart, so quaternion normalization never appears as a constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded

from .geometry import Pose, pose_exp


class SolverError(Exception):
    pass


@dataclass
class Term:
    """One residual: `eval(state) -> (r (dim,), {block_key: (dim, width)})`.

    kind 'cost' contributes ||r||^2; kind 'eq' is driven to zero by the
    augmented Lagrangian (one-sided hinge residuals fit the same mold).
    """

    name: str
    kind: str
    dim: int
    blocks: list
    eval: callable


@dataclass
class VariableLayout:
    entries: list  # ordered (key, width)
    index: dict = dc_field(init=False)
    total: int = dc_field(init=False)

    def __post_init__(self):
        self.index = {}
        off = 0
        for key, width in self.entries:
            self.index[key] = (off, width)
            off += width
        self.total = off

    def slice_of(self, key):
        off, width = self.index[key]
        return slice(off, off + width)


@dataclass
class NlpProblem:
    layout: VariableLayout
    terms: list  # Term, mixed kinds
    state0: object
    retract: callable  # (state, delta (total,)) -> state

    def cost_terms(self):
        return [t for t in self.terms if t.kind == "cost"]

    def eq_terms(self):
        return [t for t in self.terms if t.kind == "eq"]


@dataclass
class SolverConfig:
    mu0: float = 1.0
    mu_growth: float = 2.0
    max_outer: int = 20
    max_inner: int = 50
    armijo_c: float = 1e-4
    constraint_tol: float = 1e-3
    gradient_tol: float = 1e-5
    damping0: float = 1e-6
    restarts: int = 10


@dataclass
class Solution:
    state: object
    status: str  # Converged | MaxIter | LineSearchFail
    cost: float
    max_constraint: float
    residuals: dict  # term name -> final norm
    outer_iters: int
    inner_iters: int


def vector_problem(n: int, terms, x0=None) -> NlpProblem:
    """Plain R^n problem: a single block named ('x',) with additive retract."""
    layout = VariableLayout(entries=[(("x",), n)])
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    return NlpProblem(layout=layout, terms=list(terms), state0=x0,
                      retract=lambda s, d: s + d)


def _eval_all(problem, state):
    out = []
    for term in problem.terms:
        r, jac = term.eval(state)
        out.append((term, np.asarray(r, dtype=float), jac))
    return out


def _al_value(evals, lambdas, mu):
    f = 0.0
    for term, r, _ in evals:
        if term.kind == "cost":
            f += r @ r
        else:
            lam = lambdas[term.name]
            f += lam @ r + mu * (r @ r)
    return f


def gauss_newton_step(problem, evals, lambdas, mu, damping):
    """Solve (J^T W J + damping I) d = -grad on the banded normal system."""
    ab, grad, hbw = _assemble_banded(problem, evals, lambdas, mu, damping)
    eps = damping
    for _ in range(6):
        try:
            delta = solveh_banded(ab, -grad, lower=True)
            return delta, grad
        except LinAlgError:
            extra = max(eps, 1e-8) * 9.0
            ab[0] += extra
            eps += extra
    raise SolverError("banded factorization failed despite damping")


def _assemble_banded(problem, evals, lambdas, mu, damping):
    layout = problem.layout
    n = layout.total
    hbw = 1
    for term, _, jac in evals:
        offs = [layout.index[k] for k in jac]
        if not offs:
            continue
        lo = min(o for o, _ in offs)
        hi = max(o + w for o, w in offs)
        hbw = max(hbw, hi - lo)
    ab = np.zeros((hbw, n))
    grad = np.zeros(n)
    for term, r, jac in evals:
        if term.kind == "cost":
            w_h, w_g = 2.0, 2.0 * r
        else:
            lam = lambdas[term.name]
            w_h, w_g = 2.0 * mu, lam + 2.0 * mu * r
        items = list(jac.items())
        for key_a, Ja in items:
            oa, wa = layout.index[key_a]
            grad[oa:oa + wa] += Ja.T @ w_g
            for key_b, Jb in items:
                ob, wb = layout.index[key_b]
                block = w_h * (Ja.T @ Jb)
                # lower-banded storage ab[i - j, j] = H[i, j] for i >= j;
                # each unordered block pair appears in both orders, so
                # filtering rows >= j fills every lower entry exactly once
                rows = np.arange(oa, oa + wa)
                for bj in range(wb):
                    j = ob + bj
                    sel = rows >= j
                    ab[rows[sel] - j, j] += block[sel, bj]
    ab[0] += damping
    return ab, grad, hbw


def dense_normal_solve(problem, evals, lambdas, mu, damping):
    """Dense reference solve of the same normal equations (testing oracle)."""
    n = problem.layout.total
    H = np.zeros((n, n))
    grad = np.zeros(n)
    for term, r, jac in evals:
        if term.kind == "cost":
            w_h, w_g = 2.0, 2.0 * r
        else:
            lam = lambdas[term.name]
            w_h, w_g = 2.0 * mu, lam + 2.0 * mu * r
        for key_a, Ja in jac.items():
            sa = problem.layout.slice_of(key_a)
            grad[sa] += Ja.T @ w_g
            for key_b, Jb in jac.items():
                sb = problem.layout.slice_of(key_b)
                H[sa, sb] += w_h * (Ja.T @ Jb)
    H += damping * np.eye(n)
    return np.linalg.solve(H, -grad)


def solve_auglag(problem: NlpProblem, config: SolverConfig = None,
                 state=None) -> Solution:
    """Augmented Lagrangian with multiplier update lambda += 2 mu h and
    geometric mu growth; never raises on non-convergence."""
    config = config or SolverConfig()
    state = problem.state0 if state is None else state
    lambdas = {t.name: np.zeros(t.dim) for t in problem.terms if t.kind == "eq"}
    mu = config.mu0
    damping = config.damping0
    status = "MaxIter"
    inner_total = 0
    outer_done = 0
    for outer in range(config.max_outer):
        outer_done = outer + 1
        evals = _eval_all(problem, state)
        f = _al_value(evals, lambdas, mu)
        grad_inf = np.inf
        for _ in range(config.max_inner):
            inner_total += 1
            delta, grad = gauss_newton_step(problem, evals, lambdas, mu, damping)
            grad_inf = np.abs(grad).max() if len(grad) else 0.0
            if grad_inf <= config.gradient_tol:
                break
            pred = -(grad @ delta)  # positive when descending
            alpha = 1.0
            accepted = False
            while alpha >= 1e-8:
                trial = problem.retract(state, alpha * delta)
                trial_evals = _eval_all(problem, trial)
                f_trial = _al_value(trial_evals, lambdas, mu)
                if f_trial <= f + config.armijo_c * alpha * (grad @ delta):
                    actual = f - f_trial
                    state, evals, f = trial, trial_evals, f_trial
                    accepted = True
                    ratio = actual / max(alpha * pred, 1e-300)
                    if ratio > 0.75:
                        damping = max(damping / 3.0, 1e-10)
                    elif ratio < 0.25:
                        damping = min(damping * 3.0, 1e6)
                    break
                alpha *= 0.5
            if not accepted:
                damping = min(damping * 10.0, 1e8)
                if damping >= 1e8:
                    return Solution(state=state, status="LineSearchFail",
                                    cost=_total_cost(evals),
                                    max_constraint=_max_violation(evals),
                                    residuals=_residual_norms(evals),
                                    outer_iters=outer_done,
                                    inner_iters=inner_total)
        # multiplier and penalty updates
        viol = 0.0
        for term, r, _ in evals:
            if term.kind == "eq":
                lambdas[term.name] = lambdas[term.name] + 2.0 * mu * r
                viol = max(viol, np.abs(r).max() if len(r) else 0.0)
        if viol <= config.constraint_tol and grad_inf <= config.gradient_tol * 10:
            status = "Converged"
            break
        mu *= config.mu_growth
    evals = _eval_all(problem, state)
    return Solution(state=state, status=status, cost=_total_cost(evals),
                    max_constraint=_max_violation(evals),
                    residuals=_residual_norms(evals),
                    outer_iters=outer_done, inner_iters=inner_total)


def _total_cost(evals):
    return float(sum(r @ r for term, r, _ in evals if term.kind == "cost"))


def _max_violation(evals):
    v = 0.0
    for term, r, _ in evals:
        if term.kind == "eq" and len(r):
            v = max(v, float(np.abs(r).max()))
    return v


def _residual_norms(evals):
    return {term.name: float(np.linalg.norm(r)) for term, r, _ in evals}


def acceleration_residual(x_prev2, x_prev1, x_t):
    """Second difference x_t - 2 x_{t-1} + x_{t-2}; its squared norm is the
    path cost."""
    return x_t - 2.0 * x_prev1 + x_prev2


# ---------------------------------------------------------------------------
# pose-only feature optimization
# ---------------------------------------------------------------------------

def solve_pose_only(task_terms, coll_terms=None, w_coll: float = 1.0,
                    restarts: int = 10, seed: int = 0, init_poses=None,
                    max_iter: int = 60):
    """Two-stage local minimization over a single pose.

    Stage 1 minimizes sum ||task residual||^2; stage 2 restarts from the
    stage-1 result with the collision residuals added at weight sqrt(w_coll).
    Each term maps a Pose to (residual, jacobian (m, 6)) in the right chart.
    Returns (best pose, best stage-2 objective).
    """
    rng = np.random.default_rng(seed)
    if init_poses is None:
        init_poses = []
    inits = list(init_poses)
    while len(inits) < restarts:
        q = rng.normal(size=4)
        inits.append(Pose(t=rng.normal(0.0, 0.08, size=3), q=q))
    inits = inits[:restarts]

    def run(terms, weights, q0):
        q = q0
        damping = 1e-6
        for _ in range(max_iter):
            rs, Js = [], []
            for (term, w) in zip(terms, weights):
                r, J = term(q)
                rs.append(np.atleast_1d(r) * w)
                Js.append(np.atleast_2d(J) * w)
            r = np.concatenate(rs)
            J = np.concatenate(Js, axis=0)
            f = r @ r
            g = 2.0 * J.T @ r
            if np.abs(g).max() < 1e-10:
                break
            H = 2.0 * J.T @ J + damping * np.eye(6)
            try:
                delta = np.linalg.solve(H, -g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            improved = False
            alpha = 1.0
            while alpha >= 1e-6:
                trial = q.compose(pose_exp(alpha * delta))
                ft = _objective(terms, weights, trial)
                if ft < f - 1e-12:
                    q = trial
                    improved = True
                    break
                alpha *= 0.5
            if improved:
                damping = max(damping / 2.0, 1e-9)
            else:
                damping *= 10.0
                if damping > 1e6:
                    break
        return q, _objective(terms, weights, q)

    coll_terms = coll_terms or []
    all_terms = list(task_terms) + list(coll_terms)
    all_weights = [1.0] * len(task_terms) + [np.sqrt(w_coll)] * len(coll_terms)
    best = None
    for q0 in inits:
        q1, _ = run(task_terms, [1.0] * len(task_terms), q0)
        q2, f2 = run(all_terms, all_weights, q1)
        if best is None or f2 < best[1]:
            best = (q2, f2)
    return best


def _objective(terms, weights, q):
    f = 0.0
    for term, w in zip(terms, weights):
        r, _ = term(q)
        r = np.atleast_1d(r) * w
        f += r @ r
    return float(f)
