import dataclasses

import numpy as np
import pytest

from tscopf import nlp
from tscopf.acopf import (OpfModel, ReserveModel, build_acopf, max_reserve, parse_dispatch, power_flow_residual,
                          serialize_dispatch, solve_acopf)
from tscopf.network import Generator, bundled_case_path, parse_case
from tscopf.powerflow import PowerFlowDiverged, flow_terms, injection_terms, solve_power_flow


def _gen(**kw):
    base = dict(id=1, bus=1, gmin=0, gmax=87.2, rmin=0, rmax=0, c2=0, c1=0, c0=0, droop=0.05,
                inertia_s=5, damping=0, tgov_s=5)
    base.update(kw)
    return Generator(**base)


def two_bus_text(**subs):
    with open(bundled_case_path("two_bus")) as fh:
        text = fh.read()
    for old, new in subs.items():
        text = text.replace(old, new)
    return text


def test_max_reserve_examples():
    assert max_reserve(_gen(), 60, 58.5) == pytest.approx(43.6, rel=1e-12)
    assert max_reserve(_gen(), 60, 60) == 0
    assert max_reserve(_gen(droop=0.5), 60, 58.5) == pytest.approx(4.36, rel=1e-12)


def test_max_reserve_rejects_bad_droop():
    with pytest.raises(ValueError):
        max_reserve(_gen(droop=0), 60, 58.5)


def test_variable_counts(two_bus):
    with_h = build_acopf(two_bus, ReserveModel.for_case(two_bus, "relaxed-inequalities"))
    assert with_h.n == 6
    without = build_acopf(two_bus)
    assert without.n == 5


def test_relaxed_reserve_adds_two_rows_per_generator(toy9):
    base = OpfModel(toy9)
    relaxed = OpfModel(toy9, ReserveModel.for_case(toy9, "relaxed-inequalities"))
    assert relaxed.n_ineq - base.n_ineq == 2 * toy9.n_gen
    assert relaxed.n_eq == base.n_eq


def test_equality_min_is_not_an_nlp_mode(toy9):
    with pytest.raises(ValueError):
        OpfModel(toy9, ReserveModel.for_case(toy9, "equality-min"))


def test_two_bus_price_equals_marginal_cost(two_bus):
    sol = solve_acopf(two_bus)
    assert sol.ok
    assert sol.g[0] == pytest.approx(0.5, abs=1e-6)
    # stored prices are $/pu-h
    np.testing.assert_allclose(sol.lam / two_bus.base_mva, 10.0, atol=1e-5)
    assert np.ptp(sol.lam / two_bus.base_mva) <= 1e-6


def test_zero_load_gives_fixed_cost():
    case = parse_case(two_bus_text(**{"c2=0 c1=10 c0=0": "c2=0.01 c1=10 c0=7", "d_mw=50 l_mvar=10": "d_mw=0 l_mvar=0"}))
    sol = solve_acopf(case)
    assert sol.ok
    assert abs(sol.g[0]) <= 1e-6
    assert sol.objective == pytest.approx(7.0, abs=1e-4)


def test_undeliverable_load_is_infeasible():
    case = parse_case(two_bus_text(**{"smax=500": "smax=20"}))
    assert solve_acopf(case).status == nlp.LOCALLY_INFEASIBLE


def test_accepted_solution_balances(toy9):
    sol = solve_acopf(toy9)
    assert sol.ok
    assert np.max(np.abs(power_flow_residual(toy9, sol))) <= 1e-6
    tol = 1e-6
    assert np.all(sol.g >= toy9.gmin - tol) and np.all(sol.g <= toy9.gmax + tol)
    assert np.all(sol.V >= toy9.vmin - tol) and np.all(sol.V <= toy9.vmax + tol)


def test_flat_start_residual_is_the_load(two_bus):
    d, l = two_bus.load_pu
    n, m = two_bus.n_bus, two_bus.n_gen
    point = solve_acopf(two_bus)
    flat = dataclasses.replace(point, g=np.zeros(m), r=np.zeros(m), V=np.ones(n), theta=np.zeros(n), d=d, l=l)
    np.testing.assert_array_equal(power_flow_residual(two_bus, flat), np.r_[d, l])


def test_angle_perturbation_first_order(toy9):
    sol = solve_acopf(toy9)
    th = sol.theta.copy()
    th[4] += 1e-3
    res = np.max(np.abs(power_flow_residual(toy9, dataclasses.replace(sol, theta=th))))
    dP, dQ = injection_terms(toy9).jacobian(sol.V, sol.theta)
    col = np.r_[dP[:, toy9.n_bus + 4], dQ[:, toy9.n_bus + 4]]
    assert res > 1e-5
    assert res <= np.max(np.abs(col)) * 1e-3 + 1e-5


def test_redundant_constraint_leaves_objective(toy9):
    model = OpfModel(toy9)
    ref = nlp.solve(model.problem(), model.flat_start())
    model.ineq_blocks.append(model.ineq_blocks[0])
    dup = nlp.solve(model.problem(), model.flat_start())
    assert ref.ok and dup.ok
    assert abs(dup.objective - ref.objective) <= 1e-8 * abs(ref.objective) + 1e-6


def test_reserve_decouples(toy9):
    a = solve_acopf(toy9)
    b = solve_acopf(toy9, reserve=ReserveModel.for_case(toy9, "relaxed-inequalities"))
    assert a.ok and b.ok
    np.testing.assert_allclose(b.g, a.g, atol=1e-5)
    assert b.objective == pytest.approx(a.objective, rel=1e-7)


def test_serialize_round_trip(toy9):
    sol = solve_acopf(toy9)
    text = serialize_dispatch(sol, toy9)
    back = parse_dispatch(text, toy9)
    assert serialize_dispatch(back, toy9) == text
    np.testing.assert_array_equal(back.g, sol.g)
    np.testing.assert_array_equal(back.lam, sol.lam)


def _pf_cost(case, g2, g3, vset):
    """Cheapest feasible operating point with units 2, 3 fixed and bus 1 as slack.

    Units 1 and 4 share the slack bus; their split is an exact 1-D convex
    minimization over the output the power flow leaves for that bus.
    """
    g = np.array([0.0, g2, g3, 0.0])
    try:
        V, th, g_out, r_out = solve_power_flow(case, g, vset)
    except PowerFlowDiverged:
        return np.inf
    if np.any(V < case.vmin - 1e-9) or np.any(V > case.vmax + 1e-9):
        return np.inf
    sf, st = flow_terms(case)
    lim = np.array([b.smax for b in case.branches]) / case.base_mva
    for t in (sf, st):
        P, Q = t.values(V, th)
        if np.any(P ** 2 + Q ** 2 > lim ** 2):
            return np.inf
    # the reactive split is free across the bus-1 pair, so only the bus total matters
    m = case.M
    qbus = m @ r_out
    if np.any(qbus > m @ case.rmax + 1e-9) or np.any(qbus < m @ case.rmin - 1e-9):
        return np.inf
    slack = g_out[0] + g_out[3]
    lo, hi = max(case.gmin[0], slack - case.gmax[3]), min(case.gmax[0], slack - case.gmin[3])
    if lo > hi:
        return np.inf
    split = np.linspace(lo, hi, 2001)
    cost = case.gen_cost(0, split) + case.gen_cost(3, slack - split)
    return float(np.min(cost) + case.gen_cost(1, g2) + case.gen_cost(2, g3))


def test_objective_matches_grid_oracle(toy9):
    sol = solve_acopf(toy9)
    vset = np.ones(toy9.n_bus)
    vset[toy9.gen_bus_idx] = sol.V[toy9.gen_bus_idx]

    def search(g2s, g3s):
        best = (np.inf, None, None)
        for a in g2s:
            for b in g3s:
                c = _pf_cost(toy9, a, b, vset)
                if c < best[0]:
                    best = (c, a, b)
        return best

    coarse = search(np.arange(0.3, 4.2001, 0.1), np.arange(0.3, 4.0001, 0.1))
    _, a0, b0 = coarse
    fine = search(np.arange(max(0.3, a0 - 0.1), min(4.2, a0 + 0.1) + 1e-9, 0.01),
                  np.arange(max(0.3, b0 - 0.1), min(4.0, b0 + 0.1) + 1e-9, 0.01))
    oracle = fine[0]
    assert np.isfinite(oracle)
    assert abs(sol.objective - oracle) <= 0.005 * oracle
