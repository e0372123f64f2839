"""Post-contingency frequency simulation with a classical machine model.

Each generator is a voltage source behind a transient reactance driven by a
swing equation and a first-order droop governor whose output is hard-limited
to ``[0, g_max]``.  Loads are frozen as constant admittances at the initial
operating point, the network is Kron-reduced to machine internal nodes, and
the reduction is redone once when the contingency generator trips.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .acopf import DispatchSolution, power_flow_residual
from .network import NetworkCase, admittance_matrix

# Transient reactance on each machine's own MVA base (g_max); the case format
# carries no machine impedance data so a typical value is used for all units.
TRANSIENT_REACTANCE = 0.25
TRIP_TIME_S = 1.0
RECOVERY_WINDOW_S = 0.5


class DynamicsInitError(RuntimeError):
    """The dispatch is not an AC power-flow solution, so no equilibrium exists."""


@dataclass
class MachineState:
    delta: float
    d_omega: float
    p_mech: float
    valve: float


@dataclass
class SimConfig:
    dt: float = 0.01
    horizon: float = 60.0
    contingency: Optional[int] = None  # generator id; None runs without a trip
    trip_time: float = TRIP_TIME_S
    early_stop: bool = True
    governors: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        if self.horizon < self.trip_time:
            raise ValueError("horizon must not end before the trip time")


@dataclass
class InitialState:
    machines: list[MachineState]
    E: np.ndarray  # internal EMF magnitudes, pu
    V: np.ndarray  # complex bus voltages
    y_load: np.ndarray  # constant load admittances per bus
    x_d: np.ndarray  # transient reactance on system base
    inertia: np.ndarray  # H' on system base
    damping: np.ndarray  # D' on system base
    g_cap: np.ndarray  # pu
    p_ref: np.ndarray  # pu
    tgov: np.ndarray  # s
    droop_gain: np.ndarray  # pu power per pu speed

    @property
    def delta(self):
        return np.array([m.delta for m in self.machines])

    @property
    def p_mech(self):
        return np.array([m.p_mech for m in self.machines])


@dataclass
class Trajectory:
    time: np.ndarray
    bus_freq: np.ndarray  # (T, n) Hz
    p_mech: np.ndarray  # (T, m) pu
    d_omega: np.ndarray  # (T, m) pu
    reason: str
    bus_ids: tuple = ()
    gen_ids: tuple = ()
    p_elec: Optional[np.ndarray] = None  # (T, m) pu

    @property
    def nadir(self) -> float:
        return float(np.min(self.bus_freq))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "bus_id", "freq_hz"]
                       + [f"pm_{g}" for g in self.gen_ids] + [f"dw_{g}" for g in self.gen_ids])
            for k, t in enumerate(self.time):
                tail = [format(v, ".10g") for v in self.p_mech[k]] + [format(v, ".10g") for v in self.d_omega[k]]
                for i, b in enumerate(self.bus_ids):
                    w.writerow([format(t, ".4f"), b, format(self.bus_freq[k, i], ".10g")] + tail)


@dataclass
class StabilityLabel:
    label: int
    nadir: float


def classify_stability(traj: Trajectory, min_hz: float) -> StabilityLabel:
    """Stable (1) iff the lowest bus frequency never goes below ``min_hz``."""
    if traj.bus_freq.size == 0:
        raise ValueError("empty trajectory")
    if traj.reason == "numerical collapse":
        return StabilityLabel(0, float("nan"))
    nadir = traj.nadir
    return StabilityLabel(int(nadir >= min_hz), nadir)


# ---------------------------------------------------------------------
# initialization

def initialize_steady_state(case: NetworkCase, dispatch: DispatchSolution, tol: float = 1e-6) -> InitialState:
    res = np.max(np.abs(power_flow_residual(case, dispatch)), initial=0.0)
    if not res <= tol:
        raise DynamicsInitError(f"dispatch is not a power-flow solution (residual {res:.3g} > {tol:g})")
    V = dispatch.V * np.exp(1j * dispatch.theta)
    gb = case.gen_bus_idx
    S_gen = dispatch.g + 1j * dispatch.r
    cap = case.gmax
    mbase = np.maximum(cap, 1e-3)
    x_d = TRANSIENT_REACTANCE / mbase  # system base (cap is already in pu)
    I = np.conj(S_gen / V[gb])
    Ep = V[gb] + 1j * x_d * I

    # load admittance absorbs the remaining injection so the network balances exactly
    Y = admittance_matrix(case)
    S_net = V * np.conj(Y @ V)
    S_load = case.M @ S_gen - S_net
    y_load = np.conj(S_load) / np.abs(V) ** 2

    gens = case.generators
    inertia = np.array([g.inertia_s for g in gens]) * mbase
    damping = np.array([g.damping for g in gens]) * mbase
    machines = [MachineState(float(np.angle(e)), 0.0, float(p), float(p)) for e, p in zip(Ep, dispatch.g)]
    tgov = np.array([g.tgov_s for g in gens])
    droop_gain = cap / np.array([g.droop for g in gens])
    return InitialState(machines, np.abs(Ep), V, y_load, x_d, inertia, damping, cap.copy(), dispatch.g.copy(),
                        tgov, droop_gain)


def _augmented(case: NetworkCase, init: InitialState, online: np.ndarray):
    """Admittance over [buses, online internal nodes] with loads as shunts."""
    n = case.n_bus
    Y = admittance_matrix(case) + np.diag(init.y_load)
    idx = np.flatnonzero(online)
    y_d = 1.0 / (1j * init.x_d[idx])
    gb = case.gen_bus_idx[idx]
    k = len(idx)
    Yb = Y.copy()
    np.add.at(Yb, (gb, gb), y_d)
    Ybm = np.zeros((n, k), complex)
    Ybm[gb, np.arange(k)] = -y_d
    return Yb, Ybm, np.diag(y_d)


def reduced_admittance(case: NetworkCase, init: InitialState, online: np.ndarray) -> np.ndarray:
    """Kron reduction onto the internal nodes of the online machines."""
    Yb, Ybm, Ymm = _augmented(case, init, online)
    return Ymm - Ybm.T @ np.linalg.solve(Yb, Ybm)


def _bus_map(case: NetworkCase, init: InitialState, online: np.ndarray) -> np.ndarray:
    """Weights (n x m) giving each bus frequency from the nearest machine bus."""
    n, m = case.n_bus, case.n_gen
    Yb, _, _ = _augmented(case, init, online)
    Z = np.linalg.inv(Yb)
    gb = case.gen_bus_idx
    on_buses = np.unique(gb[online])
    W = np.zeros((n, m))
    zd = np.diag(Z)
    for i in range(n):
        dist = np.abs(zd[i] + zd[on_buses] - 2 * Z[i, on_buses])
        b = on_buses[int(np.argmin(dist))]
        js = np.flatnonzero((gb == b) & online)
        W[i, js] = init.inertia[js] / init.inertia[js].sum()
    return W


# ---------------------------------------------------------------------
# simulation

class _Phase:
    """Fixed network topology between switching events."""

    def __init__(self, case, init, online):
        self.online = online
        self.idx = np.flatnonzero(online)
        self.Yr = reduced_admittance(case, init, online)
        self.E = init.E[self.idx]
        self.W = _bus_map(case, init, online)

    def electrical_power(self, delta):
        Ec = self.E * np.exp(1j * delta[self.idx])
        pe = np.zeros(len(delta))
        pe[self.idx] = np.real(Ec * np.conj(self.Yr @ Ec))
        return pe


def _derivatives(x, phase: _Phase, init: InitialState, f0: float, governors: bool):
    m = len(init.machines)
    delta, dw, pm = x[:m], x[m:2 * m], x[2 * m:]
    pe = phase.electrical_power(delta)
    on = phase.online
    ddelta = np.where(on, 2 * math.pi * f0 * dw, 0.0)
    ddw = np.where(on, (pm - pe - init.damping * dw) / (2 * init.inertia), 0.0)
    if governors:
        dpm = np.where(on, (init.p_ref - pm - init.droop_gain * dw) / init.tgov, 0.0)
    else:
        dpm = np.zeros(m)
    return np.r_[ddelta, ddw, dpm]


def _clamp(x, m, cap):
    x[2 * m:] = np.clip(x[2 * m:], 0.0, cap)
    return x


def state_derivatives(case: NetworkCase, init: InitialState) -> np.ndarray:
    """Time derivatives of all machine states at the initial point (all online)."""
    phase = _Phase(case, init, np.ones(case.n_gen, bool))
    x0 = np.r_[init.delta, np.zeros(case.n_gen), init.p_mech]
    return _derivatives(x0, phase, init, case.nominal_hz, True)


def simulate_contingency(init: InitialState, case: NetworkCase, config: SimConfig | None = None) -> Trajectory:
    cfg = config or SimConfig()
    m = case.n_gen
    f0 = case.nominal_hz
    gens = case.generators
    online = np.ones(m, bool)
    phase = _Phase(case, init, online)
    trip_idx = None
    if cfg.contingency is not None:
        ids = [g.id for g in gens]
        if cfg.contingency not in ids:
            raise ValueError(f"unknown contingency generator {cfg.contingency}")
        trip_idx = ids.index(cfg.contingency)

    x = np.r_[init.delta, np.zeros(m), init.p_mech]
    dt = cfg.dt
    n_steps = int(round(cfg.horizon / dt))
    trip_step = int(round(cfg.trip_time / dt))
    T, F, P, D, PE = [], [], [], [], []
    reason = "horizon"
    coi_prev = None
    rising_since = None

    def record(k, x, phase):
        dw = x[m:2 * m]
        T.append(k * dt)
        F.append(f0 * (1.0 + phase.W @ dw))
        P.append(x[2 * m:].copy())
        D.append(dw.copy())
        PE.append(phase.electrical_power(x[:m]))

    record(0, x, phase)
    for k in range(n_steps):
        if trip_idx is not None and k == trip_step:
            online = online.copy()
            online[trip_idx] = False
            x[m + trip_idx] = 0.0
            x[2 * m + trip_idx] = 0.0
            phase = _Phase(case, init, online)

        def rhs(v):
            return _derivatives(v, phase, init, f0, cfg.governors)

        k1 = rhs(x)
        k2 = rhs(_clamp(x + 0.5 * dt * k1, m, init.g_cap))
        k3 = rhs(_clamp(x + 0.5 * dt * k2, m, init.g_cap))
        k4 = rhs(_clamp(x + dt * k3, m, init.g_cap))
        x = _clamp(x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), m, init.g_cap)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x[m:2 * m])) > 1.0:
            reason = "numerical collapse"
            if np.all(np.isfinite(x)):
                record(k + 1, x, phase)
            break
        record(k + 1, x, phase)

        if cfg.early_stop and (k + 1) * dt > cfg.trip_time:
            if np.min(F[-1]) < case.min_hz:
                reason = "below minimum frequency"
                break
            on = phase.online
            coi = float(init.inertia[on] @ x[m:2 * m][on] / init.inertia[on].sum())
            if coi_prev is not None and coi > coi_prev:
                rising_since = rising_since if rising_since is not None else (k + 1) * dt
                if (k + 1) * dt - rising_since >= RECOVERY_WINDOW_S - 1e-9:
                    reason = "recovering"
                    break
            else:
                rising_since = None
            coi_prev = coi

    return Trajectory(np.array(T), np.array(F), np.array(P), np.array(D), reason,
                      tuple(b.id for b in case.buses), tuple(g.id for g in gens), np.array(PE))


def largest_generator(case: NetworkCase) -> int:
    """Id of the unit with the largest capacity (lowest id on ties)."""
    caps = [(-g.gmax, g.id) for g in case.generators]
    return min(caps)[1]


def simulate_dispatch(case: NetworkCase, dispatch: DispatchSolution, config: SimConfig | None = None):
    """Initialize, simulate, and classify in one call."""
    cfg = config or SimConfig(contingency=largest_generator(case))
    init = initialize_steady_state(case, dispatch)
    traj = simulate_contingency(init, case, cfg)
    return traj, classify_stability(traj, case.min_hz)
