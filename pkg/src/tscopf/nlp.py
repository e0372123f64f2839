"""Primal-dual interior-point solver for smooth nonlinear programs.

Problem form::

    min f(x)   s.t.  c_E(x) = 0,  c_I(x) <= 0,  lb <= x <= ub

Lagrangian convention: ``L = f + y_E.c_E + y_I.c_I - z_L.(x - lb) - z_U.(ub - x)``
with ``y_I, z_L, z_U >= 0``.  Inequalities get slacks ``c_I + s = 0, s >= 0``
and the slack multiplier is ``y_I`` itself.  Barrier subproblems are solved by
Newton steps on the primal-dual system, with a dense Bunch-Kaufman
factorization of the reduced KKT matrix, inertia correction, an l1 exact
penalty merit line search with one second-order correction, and a monotone
(Fiacco-McCormick) barrier schedule.  When progress on feasibility stalls a
feasibility-restoration subproblem is solved; if it cannot reduce the
infeasibility the problem is declared locally infeasible.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
import time
from typing import Callable, Optional

import numpy as np
from scipy.linalg import ldl, solve_triangular

LOCALLY_SOLVED = "locally-solved"
LOCALLY_INFEASIBLE = "locally-infeasible"
ITERATION_LIMIT = "iteration-limit"
NUMERICAL_FAILURE = "numerical-failure"


@dataclass
class NlpProblem:
    """Smooth NLP given by callbacks.

    ``objective(x) -> (f, grad)``; ``eq(x)`` and ``ineq(x)`` return
    ``(values, dense Jacobian)``; ``hessian(x, obj_factor, y_eq, y_ineq)``
    returns the dense Hessian of the Lagrangian (optional).
    """
    n: int
    lb: np.ndarray
    ub: np.ndarray
    objective: Callable
    n_eq: int = 0
    eq: Optional[Callable] = None
    n_ineq: int = 0
    ineq: Optional[Callable] = None
    hessian: Optional[Callable] = None

    def __post_init__(self):
        self.lb = np.broadcast_to(np.asarray(self.lb, float), (self.n,)).copy()
        self.ub = np.broadcast_to(np.asarray(self.ub, float), (self.n,)).copy()
        if (self.n_eq > 0) != (self.eq is not None) or (self.n_ineq > 0) != (self.ineq is not None):
            raise ValueError("constraint counts and callbacks disagree")

    def eval_eq(self, x):
        if self.n_eq == 0:
            return np.zeros(0), np.zeros((0, self.n))
        c, J = self.eq(x)
        return np.asarray(c, float), np.asarray(J, float)

    def eval_ineq(self, x):
        if self.n_ineq == 0:
            return np.zeros(0), np.zeros((0, self.n))
        c, J = self.ineq(x)
        return np.asarray(c, float), np.asarray(J, float)


@dataclass
class SolveOptions:
    tol: float = 1e-6
    max_iter: int = 3000
    mu_init: float = 0.1
    hessian: str = "exact"  # or "bfgs"
    seed: int = 0
    trace_path: Optional[str] = None
    restoration: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.hessian not in ("exact", "bfgs"):
            raise ValueError("hessian must be 'exact' or 'bfgs'")


@dataclass
class SolveResult:
    status: str
    x: np.ndarray
    y_eq: np.ndarray
    y_ineq: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    wall_time: float
    trace: list = field(default_factory=list, repr=False)

    @property
    def bound_duals(self) -> np.ndarray:
        """Net bound multiplier z_L - z_U per variable."""
        return self.z_lower - self.z_upper

    @property
    def ok(self) -> bool:
        return self.status == LOCALLY_SOLVED


# ---------------------------------------------------------------------
# KKT residual

def kkt_components(problem: NlpProblem, x, y_eq, y_ineq, z_lower, z_upper, *, cache=None):
    x = np.asarray(x, float)
    if cache is None:
        f, grad = problem.objective(x)
        cE, JE = problem.eval_eq(x)
        cI, JI = problem.eval_ineq(x)
    else:
        f, grad, cE, JE, cI, JI = cache
    y_eq, y_ineq = np.asarray(y_eq, float), np.asarray(y_ineq, float)
    z_lower, z_upper = np.asarray(z_lower, float), np.asarray(z_upper, float)
    if (len(y_eq) != problem.n_eq or len(y_ineq) != problem.n_ineq
            or len(z_lower) != problem.n or len(z_upper) != problem.n or len(x) != problem.n):
        raise ValueError("dimension mismatch between problem and result vectors")
    stat = np.asarray(grad, float) + JE.T @ y_eq + JI.T @ y_ineq - z_lower + z_upper
    hasL = np.isfinite(problem.lb)
    hasU = np.isfinite(problem.ub)
    dl = np.where(hasL, x - np.where(hasL, problem.lb, 0.0), 0.0)
    du = np.where(hasU, np.where(hasU, problem.ub, 0.0) - x, 0.0)
    prim = np.r_[np.abs(cE), np.maximum(cI, 0.0), np.maximum(-dl, 0.0), np.maximum(-du, 0.0)]
    dual = np.r_[np.maximum(-y_ineq, 0.0), np.maximum(-z_lower, 0.0), np.maximum(-z_upper, 0.0),
                 np.abs(z_lower[~hasL]), np.abs(z_upper[~hasU])]
    comp = np.r_[np.abs(y_ineq * cI), np.abs(z_lower * dl), np.abs(z_upper * du)]
    mx = lambda v: float(np.max(v)) if v.size else 0.0
    return {"stationarity": mx(np.abs(stat)), "primal": mx(prim), "dual": mx(dual), "complementarity": mx(comp)}


def kkt_residual(problem: NlpProblem, result: SolveResult) -> float:
    """Max-norm of stationarity, primal and dual feasibility and complementarity."""
    comps = kkt_components(problem, result.x, result.y_eq, result.y_ineq, result.z_lower, result.z_upper)
    return max(comps.values())


# ---------------------------------------------------------------------
# linear algebra

class _Factor:
    def __init__(self, K):
        lu, d, perm = ldl(K, lower=True)
        self.L = lu[perm]
        self.perm = perm
        self.d = d
        n = K.shape[0]
        diag = np.diag(d).copy()
        off = np.r_[np.diag(d, -1), 0.0] if n > 1 else np.zeros(1)
        self.blocks = []
        eigs = []
        k = 0
        while k < n:
            if k + 1 < n and off[k] != 0.0:
                blk = np.array([[diag[k], off[k]], [off[k], diag[k + 1]]])
                self.blocks.append((k, 2, np.linalg.inv(blk)))
                eigs.extend(np.linalg.eigvalsh(blk))
                k += 2
            else:
                self.blocks.append((k, 1, diag[k]))
                eigs.append(diag[k])
                k += 1
        eigs = np.asarray(eigs)
        # absolute cut: barrier terms make the largest pivot meaningless as a scale
        small = np.abs(eigs) <= 1e-11
        self.n_pos = int(np.sum((eigs > 0) & ~small))
        self.n_neg = int(np.sum((eigs < 0) & ~small))
        self.n_zero = int(np.sum(small))

    def solve(self, b):
        u = solve_triangular(self.L, b[self.perm], lower=True, unit_diagonal=True, check_finite=False)
        w = np.empty_like(u)
        for k, size, inv in self.blocks:
            if size == 1:
                w[k] = u[k] / inv
            else:
                w[k:k + 2] = inv @ u[k:k + 2]
        v = solve_triangular(self.L.T, w, lower=False, unit_diagonal=True, check_finite=False)
        x = np.empty_like(v)
        x[self.perm] = v
        return x


# ---------------------------------------------------------------------
# solver

class _Failure(Exception):
    def __init__(self, status):
        self.status = status


def _default_start(problem: NlpProblem, seed: int):
    rng = np.random.default_rng(seed)
    lb, ub = problem.lb, problem.ub
    x = np.zeros(problem.n)
    both = np.isfinite(lb) & np.isfinite(ub)
    x[both] = 0.5 * (lb[both] + ub[both])
    onlyL = np.isfinite(lb) & ~np.isfinite(ub)
    x[onlyL] = lb[onlyL] + 1.0
    onlyU = ~np.isfinite(lb) & np.isfinite(ub)
    x[onlyU] = ub[onlyU] - 1.0
    span = np.where(both, ub - lb, 1.0)
    x += 1e-3 * span * rng.uniform(-1.0, 1.0, problem.n)
    return x


class _Solver:
    kappa_eps = 10.0
    kappa_mu = 0.2
    theta_mu = 1.5
    tau_min = 0.995
    eta = 1e-4
    kappa_sigma = 1e10

    def __init__(self, problem: NlpProblem, opts: SolveOptions):
        self.p = problem
        self.o = opts
        self.trace = []
        self.n_eval = 0
        fixed = np.isfinite(problem.lb) & (problem.lb == problem.ub)
        self.fixed = fixed
        self.free = np.flatnonzero(~fixed)
        lb, ub = problem.lb[self.free], problem.ub[self.free]
        self.lb, self.ub = lb, ub
        self.hasL = np.isfinite(lb)
        self.hasU = np.isfinite(ub)
        self.nf = len(self.free)
        self.mE, self.mI = problem.n_eq, problem.n_ineq

    # -- evaluation ---------------------------------------------------
    def full(self, xf):
        x = self.p.lb.copy()
        x[~self.fixed] = xf
        x[self.fixed] = self.p.lb[self.fixed]
        return x

    def evaluate(self, xf):
        x = self.full(xf)
        f, g = self.p.objective(x)
        cE, JE = self.p.eval_eq(x)
        cI, JI = self.p.eval_ineq(x)
        self.n_eval += 1
        vals = (float(f), np.asarray(g, float), cE, JE, cI, JI)
        if not (np.isfinite(vals[0]) and np.all(np.isfinite(vals[1])) and np.all(np.isfinite(cE))
                and np.all(np.isfinite(cI))):
            return None
        return vals

    def hess(self, xf, yE, yI):
        H = self.p.hessian(self.full(xf), 1.0, yE, yI)
        H = np.asarray(H, float)[np.ix_(self.free, self.free)]
        return 0.5 * (H + H.T)

    # -- helpers --------------------------------------------------------
    def push_interior(self, x):
        x = x.copy()
        lb, ub = self.lb, self.ub
        k1 = 1e-2
        both = self.hasL & self.hasU
        pl = np.where(self.hasL, k1 * np.maximum(1.0, np.abs(np.where(self.hasL, lb, 0))), 0.0)
        pu = np.where(self.hasU, k1 * np.maximum(1.0, np.abs(np.where(self.hasU, ub, 0))), 0.0)
        span = np.where(both, ub - lb, np.inf)
        pl = np.where(both, np.minimum(pl, k1 * span), pl)
        pu = np.where(both, np.minimum(pu, k1 * span), pu)
        x = np.where(self.hasL, np.maximum(x, np.where(self.hasL, lb, 0) + pl), x)
        x = np.where(self.hasU, np.minimum(x, np.where(self.hasU, ub, 0) - pu), x)
        return x

    def slack_dist(self, x):
        dl = np.where(self.hasL, x - np.where(self.hasL, self.lb, 0.0), 1.0)
        du = np.where(self.hasU, np.where(self.hasU, self.ub, 0.0) - x, 1.0)
        return dl, du

    def barrier_obj(self, f, x, s, mu):
        dl, du = self.slack_dist(x)
        return (f - mu * np.sum(np.log(dl[self.hasL])) - mu * np.sum(np.log(du[self.hasU]))
                - mu * np.sum(np.log(s)))

    def infeas(self, cE, cI, s, order=1):
        v = np.r_[cE, cI + s]
        if not v.size:
            return 0.0
        return float(np.sum(np.abs(v))) if order == 1 else float(np.max(np.abs(v)))

    def errors(self, vals, x, s, yE, yI, zL, zU, mu):
        f, g, cE, JE, cI, JI = vals
        gf = g[self.free]
        stat = gf + JE[:, self.free].T @ yE + JI[:, self.free].T @ yI - zL + zU
        dl, du = self.slack_dist(x)
        prim = max(np.max(np.abs(cE), initial=0.0), np.max(np.abs(cI + s), initial=0.0))
        comp = max(np.max(np.abs(dl * zL - mu)[self.hasL], initial=0.0),
                   np.max(np.abs(du * zU - mu)[self.hasU], initial=0.0),
                   np.max(np.abs(s * yI - mu), initial=0.0))
        return max(np.max(np.abs(stat), initial=0.0), prim, comp)

    def true_kkt(self, vals, x, yE, yI, zL, zU):
        res = self.result(LOCALLY_SOLVED, x, yE, yI, zL, zU, vals, 0, 0.0)
        return res.kkt_residual, res

    def result(self, status, xf, yE, yI, zL, zU, vals, it, t0):
        x = self.full(xf)
        n = self.p.n
        zl = np.zeros(n)
        zu = np.zeros(n)
        zl[self.free] = np.where(self.hasL, zL, 0.0)
        zu[self.free] = np.where(self.hasU, zU, 0.0)
        f, g, cE, JE, cI, JI = vals
        if self.fixed.any():
            rest = g + JE.T @ yE + JI.T @ yI
            zl[self.fixed] = np.maximum(rest[self.fixed], 0.0)
            zu[self.fixed] = np.maximum(-rest[self.fixed], 0.0)
        comps = kkt_components(self.p, x, yE, yI, zl, zu, cache=vals)
        return SolveResult(status=status, x=x, y_eq=yE.copy(), y_ineq=yI.copy(), z_lower=zl, z_upper=zu,
                           objective=f, kkt_residual=max(comps.values()), iterations=it,
                           wall_time=time.perf_counter() - t0 if t0 else 0.0, trace=self.trace)

    def init_multipliers(self, vals, yI, zL, zU):
        f, g, cE, JE, cI, JI = vals
        if self.mE == 0:
            return np.zeros(0)
        A = JE[:, self.free].T
        rhs = -(g[self.free] + JI[:, self.free].T @ yI - zL + zU)
        y, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y), initial=0.0) > 1e3:
            return np.zeros(self.mE)
        return y

    # -- main loop -----------------------------------------------------
    def run(self, x0):
        t0 = time.perf_counter()
        o = self.o
        x = self.push_interior(np.asarray(x0, float)[self.free])
        vals = self.evaluate(x)
        if vals is None:
            raise _Failure(NUMERICAL_FAILURE)
        cI = vals[4]
        s = np.maximum(-cI, 1e-2)
        yI = np.ones(self.mI)
        zL = np.where(self.hasL, 1.0, 0.0)
        zU = np.where(self.hasU, 1.0, 0.0)
        yE = self.init_multipliers(vals, yI, zL, zU)
        return self.loop(x, s, yE, yI, zL, zU, vals, o.mu_init, t0, it0=0)

    def loop(self, x, s, yE, yI, zL, zU, vals, mu, t0, it0):
        o = self.o
        nu = 1.0
        delta_w_last = 0.0
        # Levenberg-style shift raised after short steps, relaxed after full ones
        damping = 0.0
        B = np.eye(self.nf) if o.hessian == "bfgs" else None
        hist = []
        it = it0
        while True:
            kkt, res = self.true_kkt(vals, x, yE, yI, zL, zU)
            if kkt <= o.tol:
                res.status = LOCALLY_SOLVED
                res.iterations = it
                res.wall_time = time.perf_counter() - t0
                return res
            if it >= o.max_iter:
                res.status = ITERATION_LIMIT
                res.iterations = it
                res.wall_time = time.perf_counter() - t0
                return res
            # barrier update
            while mu > o.tol / 10 and self.errors(vals, x, s, yE, yI, zL, zU, mu) <= self.kappa_eps * mu:
                mu = max(o.tol / 10, min(self.kappa_mu * mu, mu ** self.theta_mu))
                hist.clear()
            tau = max(self.tau_min, 1.0 - mu)

            f, g, cE, JE, cI, JI = vals
            JEf, JIf = JE[:, self.free], JI[:, self.free]
            gf = g[self.free]
            W = self.hess(x, yE, yI) if B is None else B
            dl, du = self.slack_dist(x)
            sig = np.where(self.hasL, zL / dl, 0.0) + np.where(self.hasU, zU / du, 0.0)
            sig_s = yI / s
            grad_phi = gf - np.where(self.hasL, mu / dl, 0.0) + np.where(self.hasU, mu / du, 0.0)
            rx = grad_phi + JEf.T @ yE + JIf.T @ yI
            rs = mu / s - yI
            rhs = np.r_[-rx, -cE, -(cI + s) - rs / sig_s]

            fac, dw = self.factor(W, sig, sig_s, JEf, JIf, delta_w_last, mu, damping)
            if fac is None:
                return self.recover(x, s, yE, yI, zL, zU, vals, mu, t0, it, reason="singular KKT matrix")
            delta_w_last = dw
            sol = fac.solve(rhs)
            dx, dyE, dyI = self.split(sol)
            ds = (rs - dyI) / sig_s

            # step sizes
            a_max = min(self.ftb(dl, dx, self.hasL, tau), self.ftb(du, -dx, self.hasU, tau),
                        self.ftb(s, ds, np.ones(self.mI, bool), tau))
            dzL = np.where(self.hasL, mu / dl - zL - zL / dl * dx, 0.0)
            dzU = np.where(self.hasU, mu / du - zU + zU / du * dx, 0.0)
            a_z = min(self.ftb(zL, dzL, self.hasL, tau), self.ftb(zU, dzU, self.hasU, tau),
                      self.ftb(yI, dyI, np.ones(self.mI, bool), tau))

            # penalty update
            theta1 = self.infeas(cE, cI, s)
            dphi = grad_phi @ dx + (-mu / s) @ ds
            curv = dx @ (W + np.diag(sig)) @ dx + ds @ (sig_s * ds)
            if theta1 > 0:
                nu_trial = (dphi + 0.5 * max(curv, 0.0)) / (0.9 * theta1)
                if nu < nu_trial:
                    nu = nu_trial + 1.0
            D = dphi - nu * theta1
            phi0 = self.barrier_obj(f, x, s, mu) + nu * theta1

            accepted = None
            alpha = a_max
            soc_tried = False
            for _ in range(60):
                xt, st = x + alpha * dx, s + alpha * ds
                vt = self.evaluate(xt)
                if vt is not None:
                    phit = self.barrier_obj(vt[0], xt, st, mu) + nu * self.infeas(vt[2], vt[4], st)
                    if np.isfinite(phit) and phit <= phi0 + self.eta * alpha * D:
                        accepted = (xt, st, vt, alpha, phit)
                        break
                    if not soc_tried and alpha == a_max and self.mE + self.mI > 0:
                        soc_tried = True
                        soc = self.second_order(fac, vt, st, dx, ds, x, s, dl, du, tau, mu, nu, phi0, D, sig_s)
                        if soc is not None:
                            accepted = soc
                            break
                alpha *= 0.5
                if alpha < 1e-14:
                    break
            if accepted is None:
                return self.recover(x, s, yE, yI, zL, zU, vals, mu, t0, it, reason="line search failed")
            xn, sn, vn, alpha, phin = accepted
            if alpha < 0.1:
                damping = min(max(10.0 * damping, 1e-3), 1e6)
            elif alpha >= 0.5:
                damping = 0.0 if damping < 1e-6 else damping / 10.0
            if B is not None:
                B = self.bfgs(B, x, xn, vals, vn, yE + alpha * dyE, yI + alpha * dyI)
            x, s, vals = xn, sn, vn
            yE = yE + alpha * dyE
            yI = yI + alpha * dyI
            yI = np.maximum(yI, 1e-20)
            zL = zL + a_z * dzL
            zU = zU + a_z * dzU
            # keep s consistent with c_I when c_I is satisfiable
            s = np.maximum(s, 1e-300)
            dl, du = self.slack_dist(x)
            zL = np.where(self.hasL, np.clip(zL, mu / (self.kappa_sigma * dl), self.kappa_sigma * mu / dl), 0.0)
            zU = np.where(self.hasU, np.clip(zU, mu / (self.kappa_sigma * du), self.kappa_sigma * mu / du), 0.0)
            yI = np.clip(yI, mu / (self.kappa_sigma * s), self.kappa_sigma * mu / s)
            it += 1
            theta_inf = self.infeas(vals[2], vals[4], s, order=np.inf)
            self.trace.append({"iter": it, "objective": vals[0], "kkt": kkt, "mu": mu, "alpha": alpha,
                               "merit_before": phi0, "merit_after": phin, "nu": nu, "infeasibility": theta_inf})
            hist.append((theta_inf, alpha))
            if o.restoration and self.stalled(hist, theta_inf, nu, o.tol):
                return self.recover(x, s, yE, yI, zL, zU, vals, mu, t0, it, reason="stalled")

    @staticmethod
    def ftb(v, dv, mask, tau):
        neg = mask & (dv < 0)
        if not np.any(neg):
            return 1.0
        return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))

    def split(self, sol):
        n, mE = self.nf, self.mE
        return sol[:n], sol[n:n + mE], sol[n + mE:]

    def factor(self, W, sig, sig_s, JEf, JIf, delta_last, mu, floor=0.0):
        n, mE, mI = self.nf, self.mE, self.mI
        H = W + np.diag(sig)
        dc = 0.0
        dw = floor
        for attempt in range(60):
            K = np.zeros((n + mE + mI, n + mE + mI))
            K[:n, :n] = H + dw * np.eye(n)
            K[n:n + mE, :n] = JEf
            K[:n, n:n + mE] = JEf.T
            K[n + mE:, :n] = JIf
            K[:n, n + mE:] = JIf.T
            K[n:n + mE, n:n + mE] = -dc * np.eye(mE)
            K[n + mE:, n + mE:] = -np.diag(1.0 / sig_s) - dc * np.eye(mI)
            try:
                fac = _Factor(K)
            except (np.linalg.LinAlgError, ValueError):
                fac = None
            if fac is not None and fac.n_pos == n and fac.n_neg == mE + mI and fac.n_zero == 0:
                return fac, dw
            if fac is not None and fac.n_zero > 0 and dc == 0.0:
                dc = 1e-8 * mu ** 0.25
                continue
            if dw == 0.0:
                dw = 1e-4 if delta_last == 0.0 else max(1e-20, delta_last / 3.0)
            else:
                dw *= 100.0 if delta_last == 0.0 else 8.0
            if dw > 1e40:
                return None, dw
        return None, dw

    def second_order(self, fac, vt, st, dx, ds, x, s, dl, du, tau, mu, nu, phi0, D, sig_s):
        """Up to four chord corrections of the trial step towards the constraints."""
        n = self.nf
        theta_prev = self.infeas(vt[2], vt[4], st)
        for _ in range(4):
            rhs = np.r_[np.zeros(n), -vt[2], -(vt[4] + st)]
            cx, _, cyI = self.split(fac.solve(rhs))
            dx, ds = dx + cx, ds - cyI / sig_s
            a = min(self.ftb(dl, dx, self.hasL, tau), self.ftb(du, -dx, self.hasU, tau),
                    self.ftb(s, ds, np.ones(self.mI, bool), tau))
            if a < 1.0:
                return None
            xt, st = x + dx, s + ds
            vt = self.evaluate(xt)
            if vt is None:
                return None
            theta = self.infeas(vt[2], vt[4], st)
            phit = self.barrier_obj(vt[0], xt, st, mu) + nu * theta
            if np.isfinite(phit) and phit <= phi0 + self.eta * D:
                return xt, st, vt, 1.0, phit
            if theta > 0.99 * theta_prev:
                return None
            theta_prev = theta
        return None

    def bfgs(self, B, x, xn, vals, vn, yE, yI):
        def grad_lag(v):
            f, g, cE, JE, cI, JI = v
            return g[self.free] + JE[:, self.free].T @ yE + JI[:, self.free].T @ yI
        sk = xn - x
        yk = grad_lag(vn) - grad_lag(vals)
        Bs = B @ sk
        sBs = sk @ Bs
        if sBs <= 1e-16:
            return B
        sy = sk @ yk
        if sy < 0.2 * sBs:
            th = 0.8 * sBs / (sBs - sy)
            yk = th * yk + (1 - th) * Bs
            sy = sk @ yk
        return B + np.outer(yk, yk) / sy - np.outer(Bs, Bs) / sBs

    @staticmethod
    def stalled(hist, theta_inf, nu, tol):
        # near-feasible iterates are left to the optimality loop
        if theta_inf <= 1e2 * tol:
            return False
        if nu > 1e8:
            return True
        if len(hist) < 15:
            return False
        # full steps mean the merit is still moving; only short ones signal a stall
        window = hist[-15:]
        if np.mean([a for _, a in window]) >= 0.5:
            return False
        return window[0][0] - window[-1][0] < 1e-3 * window[0][0]

    # -- restoration -----------------------------------------------------
    def recover(self, x, s, yE, yI, zL, zU, vals, mu, t0, it, reason):
        theta0 = self.infeas(vals[2], vals[4], np.maximum(-vals[4], 0.0), order=np.inf)
        if not self.o.restoration or theta0 <= 1e2 * self.o.tol:
            res = self.result(NUMERICAL_FAILURE, x, yE, yI, zL, zU, vals, it, t0)
            return res
        xr = self.restore(x)
        if xr is None:
            return self.result(NUMERICAL_FAILURE, x, yE, yI, zL, zU, vals, it, t0)
        vr = self.evaluate(xr)
        if vr is None:
            return self.result(NUMERICAL_FAILURE, x, yE, yI, zL, zU, vals, it, t0)
        theta_r = self.infeas(vr[2], vr[4], np.maximum(-vr[4], 0.0), order=np.inf)
        if theta_r > max(10 * self.o.tol, 1e-2 * theta0):
            return self.result(LOCALLY_INFEASIBLE, xr, yE, yI, zL, zU, vr, it, t0)
        self.n_restorations = getattr(self, "n_restorations", 0) + 1
        if self.n_restorations > 3:
            return self.result(NUMERICAL_FAILURE, xr, yE, yI, zL, zU, vr, it, t0)
        xr = self.push_interior(xr)
        vr = self.evaluate(xr)
        s = np.maximum(-vr[4], 1e-2 * max(mu, 1e-4))
        yI = np.full(self.mI, mu) / s if self.mI else np.zeros(0)
        dl, du = self.slack_dist(xr)
        zL = np.where(self.hasL, np.minimum(1.0, mu / dl * 10), 0.0)
        zU = np.where(self.hasU, np.minimum(1.0, mu / du * 10), 0.0)
        yE = self.init_multipliers(vr, yI, zL, zU)
        return self.loop(xr, s, yE, yI, zL, zU, vr, mu, t0, it)

    def restore(self, xf):
        """Minimize the l1 infeasibility near ``xf``; returns the free-variable point."""
        nf, mE, mI = self.nf, self.mE, self.mI
        p = self.p
        free = self.free
        Dr = 1.0 / np.maximum(1.0, np.abs(xf))
        zeta = 1e-6
        nr = nf + 2 * mE + mI

        def unpack(z):
            return z[:nf], z[nf:nf + mE], z[nf + mE:nf + 2 * mE], z[nf + 2 * mE:]

        def obj(z):
            xv, pe, ne, pi = unpack(z)
            dev = Dr * (xv - xf)
            val = pe.sum() + ne.sum() + pi.sum() + 0.5 * zeta * dev @ dev
            grad = np.r_[zeta * Dr * dev, np.ones(2 * mE + mI)]
            return val, grad

        def eq(z):
            xv, pe, ne, pi = unpack(z)
            c, J = p.eval_eq(self.full(xv))
            Jr = np.hstack([J[:, free], -np.eye(mE), np.eye(mE), np.zeros((mE, mI))])
            return c - pe + ne, Jr

        def ineq(z):
            xv, pe, ne, pi = unpack(z)
            c, J = p.eval_ineq(self.full(xv))
            Jr = np.hstack([J[:, free], np.zeros((mI, 2 * mE)), -np.eye(mI)])
            return c - pi, Jr

        def exact_hess(z, of, yE, yI):
            xv = unpack(z)[0]
            H = np.zeros((nr, nr))
            Hx = p.hessian(self.full(xv), 0.0, yE, yI)[np.ix_(free, free)]
            H[:nf, :nf] = Hx + of * zeta * np.diag(Dr ** 2)
            return H

        hess = exact_hess if p.hessian is not None and self.o.hessian == "exact" else None

        lb = np.r_[self.lb, np.zeros(2 * mE + mI)]
        ub = np.r_[self.ub, np.full(2 * mE + mI, np.inf)]
        prob = NlpProblem(nr, lb, ub, obj, mE, eq if mE else None, mI, ineq if mI else None, hess)
        cE, _ = p.eval_eq(self.full(xf))
        cI, _ = p.eval_ineq(self.full(xf))
        z0 = np.r_[xf, np.maximum(cE, 0) + 1e-2, np.maximum(-cE, 0) + 1e-2, np.maximum(cI, 0) + 1e-2]
        sub_opts = SolveOptions(tol=max(self.o.tol, 1e-8), max_iter=500, mu_init=1e-2,
                                hessian=self.o.hessian, seed=self.o.seed, restoration=False)
        r = solve(prob, z0, sub_opts)
        if r.status in (LOCALLY_SOLVED, ITERATION_LIMIT) and np.all(np.isfinite(r.x)):
            return r.x[:nf]
        return None


def solve(problem: NlpProblem, start=None, opts: SolveOptions | None = None) -> SolveResult:
    """Solve ``problem`` from ``start`` (projected into the bounds)."""
    opts = opts or SolveOptions()
    if start is None:
        start = _default_start(problem, opts.seed)
    start = np.clip(np.asarray(start, float), problem.lb, problem.ub)
    solver = _Solver(problem, opts)
    t0 = time.perf_counter()
    try:
        res = solver.run(start)
    except _Failure as exc:
        n = problem.n
        x = start
        res = SolveResult(exc.status, x, np.zeros(problem.n_eq), np.zeros(problem.n_ineq), np.zeros(n),
                          np.zeros(n), float("nan"), float("inf"), len(solver.trace),
                          time.perf_counter() - t0, solver.trace)
    except (np.linalg.LinAlgError, FloatingPointError, OverflowError):
        n = problem.n
        res = SolveResult(NUMERICAL_FAILURE, start, np.zeros(problem.n_eq), np.zeros(problem.n_ineq),
                          np.zeros(n), np.zeros(n), float("nan"), float("inf"), len(solver.trace),
                          time.perf_counter() - t0, solver.trace)
    res.wall_time = time.perf_counter() - t0
    if opts.trace_path:
        write_trace(res.trace, opts.trace_path)
    return res


def write_trace(trace, path):
    cols = ["iter", "objective", "kkt", "mu", "alpha"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "objective", "kkt_residual", "barrier_mu", "step_length"])
        for row in trace:
            w.writerow([row[c] if c == "iter" else format(row[c], ".17g") for c in cols])
