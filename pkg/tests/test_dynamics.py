import numpy as np
import pytest

from tscopf.acopf import dispatch_from_power_flow, solve_acopf, within_limits
from tscopf.dynamics import (DynamicsInitError, SimConfig, Trajectory, classify_stability, initialize_steady_state,
                             largest_generator, simulate_contingency, simulate_dispatch, state_derivatives)
from tscopf.network import bundled_case_path, parse_case


@pytest.fixture(scope="module")
def sme_dispatch(sme):
    sol = solve_acopf(sme)
    assert sol.ok
    return sol


@pytest.fixture(scope="module")
def toy9_dispatch(toy9):
    sol = solve_acopf(toy9)
    assert sol.ok
    return sol


@pytest.fixture(scope="module")
def toy9_stressed(toy9):
    """Unit 1 near its cap with little headroom left on the others."""
    vset = np.ones(toy9.n_bus)
    vset[toy9.gen_bus_idx] = 1.05
    sol = dispatch_from_power_flow(toy9, np.array([4.4, 3.79, 3.3, 0.0]), vset)
    assert within_limits(toy9, sol)
    return sol


def _trajectory(nadir):
    f = np.array([[60.0], [nadir], [59.9]])
    return Trajectory(np.arange(3.0), f, np.zeros((3, 1)), np.zeros((3, 1)), "horizon")


@pytest.mark.parametrize("nadir,label", [(59.1, 1), (58.2, 0), (58.5, 1)])
def test_classify_boundaries(nadir, label):
    out = classify_stability(_trajectory(nadir), 58.5)
    assert out.label == label
    assert out.nadir == nadir


def test_classify_collapse_is_unstable():
    traj = _trajectory(59.5)
    traj.reason = "numerical collapse"
    assert classify_stability(traj, 58.5).label == 0


def test_largest_generator(toy9, sme):
    assert largest_generator(toy9) == 1
    assert largest_generator(sme) == 1


def test_initial_derivatives_vanish(toy9, toy9_dispatch):
    init = initialize_steady_state(toy9, toy9_dispatch)
    assert np.max(np.abs(state_derivatives(toy9, init))) <= 1e-8


def test_flat_start_is_rejected(toy9, toy9_dispatch):
    n, m = toy9.n_bus, toy9.n_gen
    flat = dispatch_from_power_flow(toy9, toy9_dispatch.g, np.ones(n))
    flat.g, flat.r = np.zeros(m), np.zeros(m)
    flat.V, flat.theta = np.ones(n), np.zeros(n)
    with pytest.raises(DynamicsInitError):
        initialize_steady_state(toy9, flat)


def test_equilibrium_holds_without_trip(toy9, toy9_dispatch):
    init = initialize_steady_state(toy9, toy9_dispatch)
    traj = simulate_contingency(init, toy9, SimConfig(contingency=None, early_stop=False))
    assert traj.time[-1] == pytest.approx(60.0)
    assert np.max(np.abs(traj.bus_freq - 60.0)) <= 1e-3


def test_initial_rocof_single_machine(sme, sme_dispatch):
    init = initialize_steady_state(sme, sme_dispatch)
    cfg = SimConfig(contingency=2, governors=False, early_stop=False, horizon=2.0)
    traj = simulate_contingency(init, sme, cfg)
    k = int(np.searchsorted(traj.time, 1.0))
    rocof = (traj.bus_freq[k + 1, 0] - traj.bus_freq[k, 0]) / cfg.dt
    lost = sme_dispatch.g[1]
    h_left = init.inertia[0]  # machine 1 carries all remaining inertia
    expected = -lost * sme.nominal_hz / (2 * h_left)
    assert rocof == pytest.approx(expected, rel=0.01)


def test_zero_output_trip_keeps_nominal(sme):
    sol = dispatch_from_power_flow(sme, np.array([20.0, 0.0]), np.ones(1))
    traj, lab = simulate_dispatch(sme, sol, SimConfig(contingency=2, early_stop=False, horizon=5.0))
    assert lab.label == 1
    assert abs(lab.nadir - 60.0) <= 1e-9


def test_stressed_toy9_is_unstable(toy9, toy9_stressed):
    traj, lab = simulate_dispatch(toy9, toy9_stressed)
    assert lab.label == 0 and lab.nadir < 58.5


def test_governor_clamp_is_exact(toy9, toy9_stressed):
    traj, _ = simulate_dispatch(toy9, toy9_stressed, SimConfig(contingency=1, early_stop=False))
    assert np.max(traj.p_mech - toy9.gmax) <= 0.0
    assert np.min(traj.p_mech) >= 0.0
    # some unit actually hits its cap
    assert np.any(np.isclose(traj.p_mech, toy9.gmax, rtol=0, atol=1e-12))


@pytest.mark.parametrize("name,gen", [("sme", 2), ("toy9", 1)])
def test_step_halving_moves_nadir_little(request, name, gen):
    case = request.getfixturevalue(name)
    sol = request.getfixturevalue(f"{name}_dispatch")
    _, a = simulate_dispatch(case, sol, SimConfig(contingency=gen, dt=0.01))
    _, b = simulate_dispatch(case, sol, SimConfig(contingency=gen, dt=0.005))
    assert abs(a.nadir - b.nadir) <= 1e-3


def test_step_halving_on_stressed_case(toy9, toy9_stressed):
    _, a = simulate_dispatch(toy9, toy9_stressed, SimConfig(contingency=1, dt=0.01, early_stop=False))
    _, b = simulate_dispatch(toy9, toy9_stressed, SimConfig(contingency=1, dt=0.005, early_stop=False))
    assert abs(a.nadir - b.nadir) <= 1e-3


@pytest.mark.parametrize("which", ["sme_dispatch", "toy9_dispatch", "toy9_stressed"])
def test_early_stop_keeps_label(request, which):
    case = request.getfixturevalue("sme" if which.startswith("sme") else "toy9")
    sol = request.getfixturevalue(which)
    gen = 2 if case.name == "sme" or case.n_bus == 1 else 1
    _, short = simulate_dispatch(case, sol, SimConfig(contingency=gen))
    _, full = simulate_dispatch(case, sol, SimConfig(contingency=gen, early_stop=False))
    assert short.label == full.label


def test_energy_balance_per_step(toy9, toy9_dispatch):
    with open(bundled_case_path("toy9")) as fh:
        case = parse_case(fh.read().replace("damping=2", "damping=0"))
    init = initialize_steady_state(case, toy9_dispatch)
    cfg = SimConfig(contingency=1, governors=False, early_stop=False, horizon=3.0)
    traj = simulate_contingency(init, case, cfg)
    dw, pm, pe = traj.d_omega, traj.p_mech, traj.p_elec
    k0 = int(np.searchsorted(traj.time, cfg.trip_time)) + 1  # skip the switching step
    on = np.arange(case.n_gen) != 0
    kinetic = (init.inertia * dw ** 2)[:, on]
    power = (dw * (pm - pe))[:, on]
    dE = np.diff(kinetic, axis=0)[k0:]
    work = 0.5 * cfg.dt * (power[1:] + power[:-1])[k0:]
    scale = np.max(np.abs(dE), axis=0)
    assert np.all(np.abs(dE - work) <= 1e-3 * scale)


def test_headroom_monotone_single_machine(sme):
    nadirs = []
    for out in np.linspace(0.2, 1.0, 5):
        sol = dispatch_from_power_flow(sme, np.array([20.0 - out, out]), np.ones(1))
        _, lab = simulate_dispatch(sme, sol, SimConfig(contingency=2))
        nadirs.append(lab.nadir)
    assert all(b <= a for a, b in zip(nadirs, nadirs[1:]))


def test_trajectory_csv(tmp_path, toy9, toy9_dispatch):
    traj, _ = simulate_dispatch(toy9, toy9_dispatch, SimConfig(contingency=1, horizon=2.0, early_stop=False))
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + len(traj.time) * toy9.n_bus


def test_unknown_contingency(toy9, toy9_dispatch):
    with pytest.raises(ValueError):
        simulate_dispatch(toy9, toy9_dispatch, SimConfig(contingency=99))
