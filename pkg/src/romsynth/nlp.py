"""Dense constrained nonlinear programming via sequential quadratic programming.

Problem form::

    min  cost(w)
    s.t. block residuals  c(w) = 0   (kind 'eq')
         block residuals  c(w) <= 0  (kind 'ineq')
         lower <= w <= upper

The solver is an SQP with an l1 merit line search. Each subproblem is a
convex QP over the linearized constraints, solved with an active-set method:
equalities are eliminated through a nullspace basis, the remaining
inequality QP is transformed to least-distance form and solved by
Lawson-Hanson NNLS, and the identified active set is polished with one
direct KKT solve. Multiplier sign convention: the Lagrangian is
L = cost + nu^T c, so equality multipliers are free and inequality/bound
multipliers are nonnegative at a minimum.

All routines are deterministic: identical problems, options and start
points produce identical reports.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

_REG_SCHEDULE = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


class EvaluationError(RuntimeError):
    """Problem callables raise this when a trial point is not evaluable;
    the line search then rejects the point instead of aborting."""


@dataclass
class ConstraintBlock:
    """One family of constraint rows with a shared residual/Jacobian pair."""

    name: str
    kind: str  # 'eq' or 'ineq' (residual <= 0)
    rows: int
    fun: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.kind not in ("eq", "ineq"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")


@dataclass
class NlpProblem:
    dim: int
    cost: Callable[[np.ndarray], tuple[float, np.ndarray]]
    constraint_blocks: list[ConstraintBlock]
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    # optional positive-semidefinite cost curvature for 'gauss_newton' mode
    cost_hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        self.lower = (np.full(self.dim, -np.inf) if self.lower is None
                      else np.asarray(self.lower, dtype=float).reshape(self.dim))
        self.upper = (np.full(self.dim, np.inf) if self.upper is None
                      else np.asarray(self.upper, dtype=float).reshape(self.dim))

    @property
    def total_rows(self) -> int:
        return sum(b.rows for b in self.constraint_blocks)

    def block_ranges(self) -> dict[str, tuple[int, int]]:
        out, k = {}, 0
        for b in self.constraint_blocks:
            out[b.name] = (k, k + b.rows)
            k += b.rows
        return out


@dataclass
class SolveOptions:
    constraint_tol: float = 1e-6
    optimality_tol: float = 1e-5
    max_major_iters: int = 500
    active_set_tol: float = 1e-6
    hessian_mode: str = "gauss_newton"  # or 'damped_bfgs'
    iteration_log: str | None = None    # CSV path; None disables logging
    trust_radius: float = 5.0           # initial per-variable step box

    def __post_init__(self):
        for name in ("constraint_tol", "optimality_tol", "active_set_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ActiveSet:
    """Tight rows at a solution, in global (stacked block) row indices."""

    eq_rows: np.ndarray
    ineq_rows: np.ndarray
    lower_idx: np.ndarray
    upper_idx: np.ndarray
    weakly_active_rows: np.ndarray  # tight inequality rows with ~zero multiplier


@dataclass
class SolveReport:
    status: str  # optimal | infeasible | iteration_limit | numerical_failure
    w_star: np.ndarray
    cost_value: float
    multipliers: np.ndarray        # per stacked constraint row (block order)
    bound_mult_lower: np.ndarray
    bound_mult_upper: np.ndarray
    active_set: ActiveSet | None
    iterations: int
    stationarity: float
    constraint_violation: float


# ---------------------------------------------------------------------------
# low-level pieces

def nnls(E: np.ndarray, f: np.ndarray, tol: float = 1e-11,
         max_iter: int | None = None) -> np.ndarray:
    """Lawson-Hanson nonnegative least squares: min |E u - f|, u >= 0.

    Deterministic tie-breaking (first max index); tolerances scale with the
    problem data.
    """
    m, n = E.shape
    if max_iter is None:
        max_iter = 3 * max(n, 10)
    scale = max(np.abs(E).max(initial=0.0) * max(np.abs(f).max(initial=0.0), 1.0), 1.0)
    gtol = tol * scale
    passive = np.zeros(n, dtype=bool)
    u = np.zeros(n)
    for _ in range(max_iter):
        resid = f - E @ u
        grad = E.T @ resid
        grad_masked = np.where(passive, -np.inf, grad)
        j = int(np.argmax(grad_masked))
        if grad_masked[j] <= gtol:
            break
        passive[j] = True
        while True:
            idx = np.flatnonzero(passive)
            s_passive, *_ = np.linalg.lstsq(E[:, idx], f, rcond=None)
            if s_passive.size and s_passive.min() > 0:
                u = np.zeros(n)
                u[idx] = s_passive
                break
            bad = s_passive <= 0
            denom = u[idx][bad] - s_passive[bad]
            with np.errstate(divide="ignore", invalid="ignore"):
                steps = np.where(denom > 0, u[idx][bad] / denom, np.inf)
            alpha = steps.min() if steps.size else 0.0
            u_new = u.copy()
            u_new[idx] = u[idx] + alpha * (s_passive - u[idx])
            u = np.maximum(u_new, 0.0)
            drop = idx[u[idx] <= tol * max(1.0, np.abs(u).max())]
            if drop.size == 0:
                drop = idx[np.argmin(u[idx])][None]
            u[drop] = 0.0
            passive[drop] = False
            if not passive.any():
                break
        if not passive.any():
            # re-enter outer loop to pick a fresh index
            continue
    return u


def solve_ldp(G: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Least-distance program min |x| s.t. G x >= h via NNLS.

    Returns (x, multipliers >= 0, feasible flag).
    """
    m, n = G.shape
    if m == 0:
        return np.zeros(n), np.zeros(0), True
    E = np.vstack([G.T, h[None, :]])
    f = np.zeros(n + 1)
    f[-1] = 1.0
    u = nnls(E, f)
    r = E @ u - f
    rn = r[-1]
    if abs(rn) < 1e-12:
        return np.zeros(n), np.zeros(m), False
    x = -r[:n] / rn
    lam = u / (-rn)
    return x, np.maximum(lam, 0.0), True


def _chol_psd(H: np.ndarray) -> np.ndarray:
    """Cholesky of a (near) PSD matrix with the escalating regularization."""
    scale = max(1.0, np.abs(np.diag(H)).max())
    for eps in _REG_SCHEDULE:
        try:
            return np.linalg.cholesky(H + eps * scale * np.eye(H.shape[0])).T
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("Hessian block not factorizable")


class KktSolver:
    """Factorization of the saddle-point matrix [[H, F^T], [F, 0]].

    Applies the escalating diagonal regularization of the H block when the
    plain factorization is singular; one step of iterative refinement keeps
    residuals at direct-solve quality.
    """

    def __init__(self, H: np.ndarray, F: np.ndarray):
        n, m = H.shape[0], F.shape[0]
        self.n, self.m = n, m
        scale = max(1.0, np.abs(H).max())
        probe = np.arange(1, n + m + 1, dtype=float)
        probe /= np.linalg.norm(probe)
        self.K = None
        for eps in _REG_SCHEDULE:
            K = np.zeros((n + m, n + m))
            K[:n, :n] = H + eps * scale * np.eye(n)
            K[:n, n:] = F.T
            K[n:, :n] = F
            try:
                lu = scipy.linalg.lu_factor(K)
            except (scipy.linalg.LinAlgError, ValueError):
                continue
            x = scipy.linalg.lu_solve(lu, probe)
            if not np.isfinite(x).all():
                continue
            if np.linalg.norm(K @ x - probe) <= 1e-6:
                self.K, self._lu, self.regularization = K, lu, eps * scale
                return
        raise np.linalg.LinAlgError(
            "KKT system singular after maximal regularization")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = scipy.linalg.lu_solve(self._lu, rhs)
        # one refinement step
        x += scipy.linalg.lu_solve(self._lu, rhs - self.K @ x)
        return x


def solve_equality_qp(H: np.ndarray, b: np.ndarray, F: np.ndarray,
                      rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve [[H, F^T], [F, 0]] [w; nu] = [-b; rhs] by direct factorization."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    F = np.asarray(F, dtype=float).reshape(-1, H.shape[0])
    rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
    solver = KktSolver(H, F)
    sol = solver.solve(np.concatenate([-b, rhs]))
    return sol[:H.shape[0]], sol[H.shape[0]:]


@dataclass
class _QpResult:
    d: np.ndarray
    nu_eq: np.ndarray
    mu_in: np.ndarray
    mu_lb: np.ndarray
    mu_ub: np.ndarray
    feasible: bool


def solve_qp(H, g, Aeq, beq, Ain, bin_, lb, ub) -> _QpResult:
    """min 1/2 d'Hd + g'd s.t. Aeq d = beq, Ain d <= bin, lb <= d <= ub.

    Nullspace elimination of the equalities, NNLS-based least-distance
    solve of the reduced inequality QP, then a direct KKT polish on the
    identified active set.
    """
    n = H.shape[0]
    Aeq = Aeq.reshape(-1, n)
    Ain = Ain.reshape(-1, n)
    m_eq = Aeq.shape[0]

    # fold finite bounds into inequality rows
    fin_ub = np.flatnonzero(np.isfinite(ub))
    fin_lb = np.flatnonzero(np.isfinite(lb))
    C = np.vstack([
        Ain,
        np.eye(n)[fin_ub],
        -np.eye(n)[fin_lb],
    ])
    c_vec = np.concatenate([bin_, ub[fin_ub], -lb[fin_lb]])

    if m_eq:
        U, sv, Vt = np.linalg.svd(Aeq, full_matrices=True)
        rank = int(np.sum(sv > max(Aeq.shape) * np.finfo(float).eps
                          * (sv[0] if sv.size else 1.0)))
        Z = Vt[rank:].T
        d_p = Vt[:rank].T @ ((U[:, :rank].T @ beq) / sv[:rank])
    else:
        U, sv, Vt = None, None, None
        rank = 0
        Z = np.eye(n)
        d_p = np.zeros(n)

    n_z = Z.shape[1]
    mu = np.zeros(C.shape[0])
    if n_z == 0:
        d = d_p
        feasible = bool(np.all(C @ d <= c_vec + 1e-8))
    else:
        Ht = Z.T @ H @ Z
        gt = Z.T @ (g + H @ d_p)
        R = _chol_psd(Ht)
        t = scipy.linalg.solve_triangular(R, gt, trans="T")
        if C.shape[0]:
            GZ = C @ Z
            Ghat = scipy.linalg.solve_triangular(
                R, GZ.T, trans="N", lower=False)
            Ghat = Ghat.T  # rows: constraints, in z coordinates
            h_hat = (c_vec - C @ d_p) + Ghat @ t
            z, lam, feasible = solve_ldp(-Ghat, -h_hat)
            mu = lam
        else:
            z = np.zeros(n_z)
            feasible = True
        v = scipy.linalg.solve_triangular(R, z - t, lower=False)
        d = d_p + Z @ v

    if not feasible:
        return _QpResult(d=np.zeros(n), nu_eq=np.zeros(m_eq),
                         mu_in=np.zeros(Ain.shape[0]), mu_lb=np.zeros(n),
                         mu_ub=np.zeros(n), feasible=False)

    # active-set refinement: direct KKT solves on the working set seeded by
    # the LDP multiplier support, adding most-violated rows and dropping
    # most-negative multipliers until the step is feasible and optimal
    d, nu, mu, refined = _refine_active_set(
        H, g, Aeq, beq, C, c_vec, np.flatnonzero(mu > 1e-10))
    if not refined:
        nu = _equality_multipliers(H, g, d, C, mu, (U, sv, Vt, rank), m_eq)

    m_in = Ain.shape[0]
    mu_in = mu[:m_in]
    mu_ub = np.zeros(n)
    mu_lb = np.zeros(n)
    mu_ub[fin_ub] = mu[m_in:m_in + fin_ub.size]
    mu_lb[fin_lb] = mu[m_in + fin_ub.size:]
    return _QpResult(d=d, nu_eq=nu, mu_in=mu_in, mu_lb=mu_lb, mu_ub=mu_ub,
                     feasible=True)


def _refine_active_set(H, g, Aeq, beq, C, c_vec, working,
                       tol=1e-9, max_changes=200):
    """Primal working-set iteration with direct KKT solves.

    Returns (d, nu_eq, mu (full inequality vector), converged). On failure
    the last iterate is returned with converged=False so the caller can fall
    back to least-squares multipliers.
    """
    n = H.shape[0]
    m_eq = Aeq.shape[0]
    working = set(int(i) for i in np.atleast_1d(working))
    best = (np.zeros(n), np.zeros(m_eq), np.zeros(C.shape[0]))
    scale = max(1.0, float(np.abs(c_vec).max(initial=0.0)))
    for _ in range(max_changes):
        act = np.array(sorted(working), dtype=int)
        F_act = np.vstack([Aeq, C[act]]) if (m_eq or act.size) \
            else np.zeros((0, n))
        rhs_act = np.concatenate([beq, c_vec[act]])
        keep = prune_redundant_rows(F_act)
        try:
            solver = KktSolver(H, F_act[keep])
            sol = solver.solve(np.concatenate([-g, rhs_act[keep]]))
        except np.linalg.LinAlgError:
            return best[0], best[1], best[2], False
        d = sol[:n]
        mult_full = np.zeros(m_eq + act.size)
        kept_mask = np.zeros(m_eq + act.size, dtype=bool)
        kept_mask[keep] = True
        mult_full[kept_mask] = sol[n:]
        nu = mult_full[:m_eq]
        mu = np.zeros(C.shape[0])
        mu[act] = mult_full[m_eq:]
        best = (d, nu, mu)
        # restore feasibility first: add the most violated inactive row
        if C.shape[0]:
            resid = C @ d - c_vec
            resid[act] = -np.inf
            j = int(np.argmax(resid))
            if resid[j] > tol * scale:
                working.add(j)
                continue
        # then drop the most negative working multiplier, if any
        if act.size:
            worst = act[np.argmin(mu[act])]
            if mu[worst] < -tol * max(1.0, np.abs(mult_full).max()):
                working.remove(int(worst))
                continue
        return d, nu, np.maximum(mu, 0.0), True
    return best[0], best[1], best[2], False


def _equality_multipliers(H, g, d, C, mu, svd_parts, m_eq):
    """Min-norm equality multipliers from stationarity H d + g + Aeq' nu
    + C' mu = 0, using the stored SVD Aeq = U diag(sv) Vt."""
    if m_eq == 0:
        return np.zeros(0)
    U, sv, Vt, rank = svd_parts
    rhs = -(H @ d + g + (C.T @ mu if C.size else 0.0))
    return U[:, :rank] @ ((Vt[:rank] @ rhs) / sv[:rank])


def prune_redundant_rows(F: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Indices of a maximal linearly independent row subset of F.

    Rank-revealing QR with column pivoting on F^T; kept rows preserve their
    original relative order.
    """
    F = np.asarray(F, dtype=float)
    if F.shape[0] == 0:
        return np.array([], dtype=int)
    _, R, piv = scipy.linalg.qr(F.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return np.array([], dtype=int)
    rank = int(np.sum(diag > tol * diag[0]))
    keep = np.sort(piv[:rank])
    return keep


# ---------------------------------------------------------------------------
# SQP driver

def _stack_constraints(problem: NlpProblem, w: np.ndarray):
    """Evaluate all blocks; returns eq/ineq residuals, Jacobians and the
    global row index of every stacked row."""
    ceq, Jeq, rows_eq = [], [], []
    cin, Jin, rows_in = [], [], []
    offset = 0
    for b in problem.constraint_blocks:
        c = np.asarray(b.fun(w), dtype=float).reshape(b.rows)
        J = np.asarray(b.jac(w), dtype=float).reshape(b.rows, problem.dim)
        idx = np.arange(offset, offset + b.rows)
        if b.kind == "eq":
            ceq.append(c)
            Jeq.append(J)
            rows_eq.append(idx)
        else:
            cin.append(c)
            Jin.append(J)
            rows_in.append(idx)
        offset += b.rows

    def cat(parts, width=None):
        if parts:
            return np.concatenate(parts)
        return np.zeros((0, width)) if width else np.zeros(0)

    return (cat(ceq), cat(Jeq, problem.dim).reshape(-1, problem.dim),
            cat(cin), cat(Jin, problem.dim).reshape(-1, problem.dim),
            cat(rows_eq).astype(int), cat(rows_in).astype(int))


def _safe_residuals(problem: NlpProblem, w: np.ndarray):
    """Residual-only evaluation for line searches; None when undefined."""
    try:
        f, _ = problem.cost(w)
        parts_eq, parts_in = [], []
        for b in problem.constraint_blocks:
            c = np.asarray(b.fun(w), dtype=float)
            (parts_eq if b.kind == "eq" else parts_in).append(c.ravel())
        ceq = np.concatenate(parts_eq) if parts_eq else np.zeros(0)
        cin = np.concatenate(parts_in) if parts_in else np.zeros(0)
    except (EvaluationError, FloatingPointError):
        return None
    if not (np.isfinite(f) and np.isfinite(ceq).all()
            and np.isfinite(cin).all()):
        return None
    return f, ceq, cin


def _violation_l1(ceq, cin):
    return float(np.abs(ceq).sum() + np.clip(cin, 0.0, None).sum())


def _violation_inf(ceq, cin):
    v = 0.0
    if ceq.size:
        v = max(v, float(np.abs(ceq).max()))
    if cin.size:
        v = max(v, float(np.clip(cin, 0.0, None).max()))
    return v


def _complementarity(qp: "_QpResult", cin, w, lower, upper) -> float:
    """Worst |multiplier * residual| product over inequalities and bounds."""
    worst = 0.0
    if cin.size:
        worst = max(worst, float(np.abs(qp.mu_in * cin).max()))
    fin = np.isfinite(lower)
    if fin.any():
        worst = max(worst, float(np.abs(qp.mu_lb[fin] * (w - lower)[fin]).max()))
    fin = np.isfinite(upper)
    if fin.any():
        worst = max(worst, float(np.abs(qp.mu_ub[fin] * (upper - w)[fin]).max()))
    return worst


class _DampedBfgs:
    """Powell-damped BFGS approximation of the Lagrangian Hessian."""

    def __init__(self, n):
        self.B = np.eye(n)

    def update(self, s, y):
        sBs = s @ self.B @ s
        sy = s @ y
        if sBs <= 0:
            return
        if sy < 0.2 * sBs:
            theta = 0.8 * sBs / (sBs - sy)
            y = theta * y + (1 - theta) * (self.B @ s)
            sy = s @ y
        if sy <= 1e-12 * max(1.0, sBs):
            return
        Bs = self.B @ s
        self.B = self.B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy


def solve(problem: NlpProblem, w0: np.ndarray,
          opts: SolveOptions | None = None) -> SolveReport:
    """SQP with an l1 merit line search; see the module docstring.

    The returned report carries the primal solution, per-row multipliers
    (Lagrangian convention L = cost + nu^T c), bound multipliers, the tight
    set, and the achieved KKT residuals.
    """
    opts = opts or SolveOptions()
    n = problem.dim
    w = np.clip(np.asarray(w0, dtype=float).reshape(n),
                problem.lower, problem.upper)
    bfgs = _DampedBfgs(n)
    rho = 1.0
    delta_tr = opts.trust_radius
    status = "iteration_limit"
    log_rows = []
    qp = None
    restoration_stalls = 0
    pending_bfgs = None  # (w_old, grad_L_old) awaiting the next gradient

    it = 0
    for it in range(1, opts.max_major_iters + 1):
        if _safe_residuals(problem, w) is None:
            status = "numerical_failure"
            break
        f, g = problem.cost(w)
        ceq, Jeq, cin, Jin, rows_eq, rows_in = _stack_constraints(problem, w)
        viol = _violation_inf(ceq, cin)

        use_bfgs = not (opts.hessian_mode == "gauss_newton"
                        and problem.cost_hessian is not None)
        if use_bfgs and pending_bfgs is not None and qp is not None:
            w_old, grad_L_old = pending_bfgs
            grad_L_new = g + Jeq.T @ qp.nu_eq + Jin.T @ qp.mu_in \
                + qp.mu_ub - qp.mu_lb
            bfgs.update(w - w_old, grad_L_new - grad_L_old)
        pending_bfgs = None
        H = bfgs.B if use_bfgs else problem.cost_hessian(w)

        # adaptive per-variable step box keeps early steps inside the
        # region where the constraint linearization is trustworthy
        scale_w = np.maximum(1.0, np.abs(w))
        step_lo = np.maximum(problem.lower - w, -delta_tr * scale_w)
        step_hi = np.minimum(problem.upper - w, delta_tr * scale_w)
        sigma = 1e-8 * max(1.0, np.abs(np.diag(H)).max())
        try:
            qp = solve_qp(H + sigma * np.eye(n), g, Jeq, -ceq, Jin, -cin,
                          step_lo, step_hi)
        except np.linalg.LinAlgError:
            status = "numerical_failure"
            break

        accepted = False
        if qp.feasible:
            stationarity = float(np.linalg.norm(
                g + Jeq.T @ qp.nu_eq + Jin.T @ qp.mu_in + qp.mu_ub - qp.mu_lb,
                ord=np.inf))
            comp = _complementarity(qp, cin, w, problem.lower, problem.upper)
            if viol <= opts.constraint_tol \
                    and stationarity <= opts.optimality_tol \
                    and comp <= opts.optimality_tol * max(1.0, float(
                        np.abs(w).max())):
                status = "optimal"
                log_rows.append((it, f, viol, 0.0))
                break

            d = qp.d
            mult_scale = max(
                float(np.abs(qp.nu_eq).max(initial=0.0)),
                float(qp.mu_in.max(initial=0.0)),
                float(qp.mu_lb.max(initial=0.0)),
                float(qp.mu_ub.max(initial=0.0)))
            # exact-penalty weight tracks the multiplier scale but is allowed
            # to decay once transient early-iteration multipliers fade
            rho = max(1.2 * mult_scale + 1e-3, 0.5 * rho)
            phi0 = f + rho * _violation_l1(ceq, cin)
            deriv = min(g @ d - rho * _violation_l1(ceq, cin), 0.0)
            grad_L = g + Jeq.T @ qp.nu_eq + Jin.T @ qp.mu_in \
                + qp.mu_ub - qp.mu_lb

            alpha = 1.0
            w_new = None
            while alpha >= 1e-12:
                cand = np.clip(w + alpha * d, problem.lower, problem.upper)
                trial = _safe_residuals(problem, cand)
                if trial is not None:
                    ft, ceqt, cint = trial
                    if ft + rho * _violation_l1(ceqt, cint) \
                            <= phi0 + 0.1 * alpha * deriv:
                        w_new = cand
                        break
                    if alpha == 1.0 and Jeq.shape[0]:
                        # second-order correction against the Maratos effect
                        corr, *_ = np.linalg.lstsq(Jeq, -ceqt, rcond=None)
                        cand2 = np.clip(w + d + corr, problem.lower,
                                        problem.upper)
                        soc = _safe_residuals(problem, cand2)
                        if soc is not None:
                            fs, ceqs, cins = soc
                            if fs + rho * _violation_l1(ceqs, cins) \
                                    <= phi0 + 0.1 * deriv:
                                w_new = cand2
                                break
                alpha *= 0.5
            if w_new is not None:
                pending_bfgs = (w, grad_L)
                w = w_new
                log_rows.append((it, f, viol, alpha))
                restoration_stalls = 0
                accepted = True

        if accepted:
            continue

        # QP infeasible or line search failed: feasibility restoration step
        grad_v = Jeq.T @ ceq + Jin.T @ np.clip(cin, 0.0, None)
        # project onto the bound box: zero components pushing outside
        at_lb = (w - problem.lower <= 1e-12) & (grad_v > 0)
        at_ub = (problem.upper - w <= 1e-12) & (grad_v < 0)
        grad_v = np.where(at_lb | at_ub, 0.0, grad_v)
        if viol > 100.0 * opts.constraint_tol \
                and np.linalg.norm(grad_v) <= 1e-6 * max(1.0, viol):
            # stationary point of the violation measure that is not feasible
            status = "infeasible"
            log_rows.append((it, f, viol, 0.0))
            break
        v0 = 0.5 * (ceq @ ceq + np.clip(cin, 0, None) @ np.clip(cin, 0, None))
        alpha = 1.0
        restored = False
        if np.linalg.norm(grad_v) > 1e-14:
            dr = -grad_v / max(1.0, np.linalg.norm(grad_v))
            while alpha >= 1e-12:
                cand = np.clip(w + alpha * dr, problem.lower, problem.upper)
                trial = _safe_residuals(problem, cand)
                if trial is not None:
                    _, ceqt, cint = trial
                    vt = 0.5 * (ceqt @ ceqt + np.clip(cint, 0, None)
                                @ np.clip(cint, 0, None))
                    if vt < v0 - 1e-12:
                        w = cand
                        restored = True
                        break
                alpha *= 0.5
        log_rows.append((it, f, viol, alpha if restored else 0.0))
        if restored:
            restoration_stalls = 0
        else:
            restoration_stalls += 1
            if restoration_stalls >= 3:
                status = ("infeasible"
                          if viol > 100.0 * opts.constraint_tol
                          else "numerical_failure")
                break

    # final evaluation and report assembly
    f, g = problem.cost(w)
    ceq, Jeq, cin, Jin, rows_eq, rows_in = _stack_constraints(problem, w)
    viol = _violation_inf(ceq, cin)
    stationarity = np.inf
    multipliers = np.zeros(problem.total_rows)
    mu_lb = np.zeros(n)
    mu_ub = np.zeros(n)
    if qp is not None and qp.feasible:
        multipliers[rows_eq] = qp.nu_eq
        multipliers[rows_in] = qp.mu_in
        mu_lb, mu_ub = qp.mu_lb, qp.mu_ub
        stationarity = float(np.linalg.norm(
            g + Jeq.T @ qp.nu_eq + Jin.T @ qp.mu_in + mu_ub - mu_lb,
            ord=np.inf))
        if status == "iteration_limit" and viol <= opts.constraint_tol \
                and stationarity <= opts.optimality_tol \
                and _complementarity(qp, cin, w, problem.lower, problem.upper) \
                <= opts.optimality_tol * max(1.0, float(np.abs(w).max())):
            status = "optimal"

    report = SolveReport(
        status=status, w_star=w, cost_value=float(f),
        multipliers=multipliers, bound_mult_lower=mu_lb,
        bound_mult_upper=mu_ub, active_set=None, iterations=it,
        stationarity=stationarity, constraint_violation=viol)
    report.active_set = extract_active_set(report, problem,
                                           opts.active_set_tol)

    if opts.iteration_log:
        with open(opts.iteration_log, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "cost", "constraint_violation",
                             "step_size"])
            writer.writerows(log_rows)
    return report


def extract_active_set(report: SolveReport, problem: NlpProblem,
                       tol: float = 1e-6) -> ActiveSet:
    """All equality rows plus inequalities/bounds tight at the solution.

    Weakly active rows (tight with near-zero multiplier) are included and
    flagged; they mark points where the cost gradient picks a subgradient.
    """
    w = report.w_star
    eq_rows, ineq_rows, weak = [], [], []
    offset = 0
    for b in problem.constraint_blocks:
        c = np.asarray(b.fun(w), dtype=float).reshape(b.rows)
        idx = np.arange(offset, offset + b.rows)
        if b.kind == "eq":
            eq_rows.append(idx)
        else:
            tight = np.abs(c) <= tol
            ineq_rows.append(idx[tight])
            mults = report.multipliers[idx[tight]]
            weak.append(idx[tight][np.abs(mults) <= tol])
        offset += b.rows
    lower_idx = np.flatnonzero(
        np.isfinite(problem.lower) & (w - problem.lower <= tol))
    upper_idx = np.flatnonzero(
        np.isfinite(problem.upper) & (problem.upper - w <= tol))
    return ActiveSet(
        eq_rows=np.concatenate(eq_rows) if eq_rows else np.zeros(0, int),
        ineq_rows=np.concatenate(ineq_rows) if ineq_rows else np.zeros(0, int),
        lower_idx=lower_idx, upper_idx=upper_idx,
        weakly_active_rows=np.concatenate(weak) if weak else np.zeros(0, int))
