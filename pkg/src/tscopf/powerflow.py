"""Polar power-flow expressions with analytic first and second derivatives.

Every bus injection and branch-end flow is a sum of pair terms

    P += Va Vb (G cos(ta - tb) + B sin(ta - tb))
    Q += Va Vb (G sin(ta - tb) - B cos(ta - tb))

with (G, B) the real and imaginary part of one admittance entry.  Pairs with
a == b give the diagonal Va^2 G / -Va^2 B contributions automatically, so a
single vectorized routine covers injections and flows.  Derivatives are
taken with respect to the stacked vector ``[V (n), theta (n)]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkCase, admittance_matrix, branch_admittances


@dataclass
class PairTerms:
    row: np.ndarray
    a: np.ndarray
    b: np.ndarray
    G: np.ndarray
    B: np.ndarray
    n_rows: int
    n_bus: int

    def _parts(self, V, th):
        t = th[self.a] - th[self.b]
        c, s = np.cos(t), np.sin(t)
        Va, Vb = V[self.a], V[self.b]
        return Va, Vb, c, s

    def values(self, V, th):
        Va, Vb, c, s = self._parts(V, th)
        P = np.zeros(self.n_rows)
        Q = np.zeros(self.n_rows)
        np.add.at(P, self.row, Va * Vb * (self.G * c + self.B * s))
        np.add.at(Q, self.row, Va * Vb * (self.G * s - self.B * c))
        return P, Q

    def jacobian(self, V, th):
        """(dP, dQ), each n_rows x 2n with columns [V, theta]."""
        n = self.n_bus
        Va, Vb, c, s = self._parts(V, th)
        out = []
        for G, B in ((self.G, self.B), (-self.B, self.G)):
            k = G * c + B * s
            kt = -G * s + B * c
            J = np.zeros((self.n_rows, 2 * n))
            np.add.at(J, (self.row, self.a), Vb * k)
            np.add.at(J, (self.row, self.b), Va * k)
            np.add.at(J, (self.row, n + self.a), Va * Vb * kt)
            np.add.at(J, (self.row, n + self.b), -Va * Vb * kt)
            out.append(J)
        return out[0], out[1]

    def hessian(self, V, th, wP, wQ):
        """Hessian of sum_r wP[r] P_r + wQ[r] Q_r in [V, theta] (2n x 2n)."""
        n = self.n_bus
        Va, Vb, c, s = self._parts(V, th)
        H = np.zeros((2 * n, 2 * n))
        a, b = self.a, self.b
        for G, B, w in ((self.G, self.B, wP), (-self.B, self.G, wQ)):
            wt = w[self.row]
            k = wt * (G * c + B * s)
            kt = wt * (-G * s + B * c)
            # V-V block
            np.add.at(H, (a, b), k)
            np.add.at(H, (b, a), k)
            # theta-theta block: d2/dt2 = -Va Vb k
            tt = -Va * Vb * k
            np.add.at(H, (n + a, n + a), tt)
            np.add.at(H, (n + b, n + b), tt)
            np.add.at(H, (n + a, n + b), -tt)
            np.add.at(H, (n + b, n + a), -tt)
            # V-theta: d2/dVa dt = Vb kt, d2/dVb dt = Va kt
            for vi, coef in ((a, Vb * kt), (b, Va * kt)):
                np.add.at(H, (vi, n + a), coef)
                np.add.at(H, (n + a, vi), coef)
                np.add.at(H, (vi, n + b), -coef)
                np.add.at(H, (n + b, vi), -coef)
        return H


def _terms_from_entries(rows, a, b, Y, n_rows, n_bus) -> PairTerms:
    Y = np.asarray(Y, complex)
    return PairTerms(np.asarray(rows, int), np.asarray(a, int), np.asarray(b, int),
                     Y.real.copy(), Y.imag.copy(), n_rows, n_bus)


def injection_terms(case: NetworkCase, Y: np.ndarray | None = None) -> PairTerms:
    """Net bus injections P_i(V, theta), Q_i(V, theta)."""
    if Y is None:
        Y = admittance_matrix(case)
    i, k = np.nonzero(Y)
    n = case.n_bus
    if len(i) == 0:
        # keep the structure valid with zero-valued diagonal entries
        i = k = np.arange(n)
        return _terms_from_entries(i, i, k, np.zeros(n), n, n)
    return _terms_from_entries(i, i, k, Y[i, k], n, n)


def flow_terms(case: NetworkCase) -> tuple[PairTerms, PairTerms]:
    """Branch power flows at the from end and at the to end."""
    f, t, Yff, Yft, Ytf, Ytt = branch_admittances(case)
    nl = len(f)
    l = np.arange(nl)
    n = case.n_bus
    from_terms = _terms_from_entries(np.r_[l, l], np.r_[f, f], np.r_[f, t], np.r_[Yff, Yft], nl, n)
    to_terms = _terms_from_entries(np.r_[l, l], np.r_[t, t], np.r_[t, f], np.r_[Ytt, Ytf], nl, n)
    return from_terms, to_terms


def bus_injections(case: NetworkCase, V, th) -> tuple[np.ndarray, np.ndarray]:
    return injection_terms(case).values(np.asarray(V, float), np.asarray(th, float))


def balance_residual(case: NetworkCase, g, r, V, th, d=None, l=None) -> np.ndarray:
    """Stacked residuals of d - M g + p and l - M r + q."""
    if d is None or l is None:
        d, l = case.load_pu
    P, Q = bus_injections(case, V, th)
    return np.r_[d - case.M @ g + P, l - case.M @ r + Q]


class PowerFlowDiverged(RuntimeError):
    pass


def solve_power_flow(case: NetworkCase, g, vset, d=None, l=None, *, tol=1e-10, max_iter=30):
    """Newton-Raphson AC power flow.

    Generator buses are PV (voltage ``vset``), the reference bus is the slack,
    all others are PQ.  Returns (V, theta, g_out, r_out) where the slack
    bus generation is adjusted and reactive output is split across
    generators at a bus in proportion to their reactive range.
    """
    if d is None or l is None:
        d, l = case.load_pu
    n = case.n_bus
    ref = case.ref_bus
    gen_buses = set(int(i) for i in case.gen_bus_idx)
    pv = np.array(sorted(gen_buses - {ref}), int)
    pq = np.array(sorted(set(range(n)) - gen_buses - {ref}), int)
    terms = injection_terms(case)
    V = np.ones(n)
    vset = np.asarray(vset, float)
    for i in gen_buses:
        V[i] = vset[i]
    th = np.zeros(n)
    Psch = case.M @ np.asarray(g, float) - d
    Qsch = -l
    ang = np.r_[pv, pq]
    for _ in range(max_iter):
        P, Q = terms.values(V, th)
        mis = np.r_[P[ang] - Psch[ang], Q[pq] - Qsch[pq]]
        if np.max(np.abs(mis), initial=0.0) < tol:
            break
        dP, dQ = terms.jacobian(V, th)
        J = np.block([[dP[np.ix_(ang, n + ang)], dP[np.ix_(ang, pq)]],
                      [dQ[np.ix_(pq, n + ang)], dQ[np.ix_(pq, pq)]]])
        try:
            dx = np.linalg.solve(J, -mis)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowDiverged("singular power-flow Jacobian") from exc
        th[ang] += dx[: len(ang)]
        V[pq] += dx[len(ang):]
        if not np.all(np.isfinite(V)) or np.any(V <= 0):
            raise PowerFlowDiverged("power flow diverged")
    else:
        raise PowerFlowDiverged("power flow did not converge")
    P, Q = terms.values(V, th)
    g_out = np.array(g, float).copy()
    ref_gens = np.flatnonzero(case.gen_bus_idx == ref)
    g_out[ref_gens] += (P[ref] + d[ref] - case.M[ref] @ g_out) / len(ref_gens)
    r_out = np.zeros(case.n_gen)
    for i in gen_buses:
        js = np.flatnonzero(case.gen_bus_idx == i)
        need = Q[i] + l[i]
        span = case.rmax[js] - case.rmin[js]
        w = span / span.sum() if span.sum() > 0 else np.full(len(js), 1.0 / len(js))
        r_out[js] = need * w
    return V, th, g_out, r_out
