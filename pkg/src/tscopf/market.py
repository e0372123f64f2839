"""Stability-constrained dispatch, prices from its KKT point, and campaigns.

Prices follow from the stationarity conditions of the constrained dispatch:
each generator is paid the bus price plus the stability dual times the
classifier's sensitivity to that generator's own feature.  When the
classifier only sees bus injections, those sensitivities vanish and every
unit at a bus sees the same price.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from . import nlp
from .acopf import DispatchSolution, OpfModel, ReserveModel, interpret, solve_acopf
from .dynamics import DynamicsInitError, largest_generator
from .embed import NetworkLogit, StabilityBlock, attach_full_space, full_space_start, threshold_logit
from .mlp import MlpParams, input_gradient
from .network import NetworkCase
from .sampling import LoadDistribution, label_dispatch, reserve_mode_for, sample_load, sample_seed
from .surrogate import FeatureSpec, extract_features, feature_gradients


@dataclass(frozen=True)
class TscConfig:
    c: float = 0.5
    reserve_mode: Optional[str] = None  # None: present iff the input set needs it
    full_space: bool = False
    solver: nlp.SolveOptions = field(default_factory=nlp.SolveOptions)

    def __post_init__(self):
        threshold_logit(self.c)  # rejects c outside [0, 1)


def tscopf_model(case: NetworkCase, params: MlpParams, spec: FeatureSpec, cfg: TscConfig, load=None):
    """AC-OPF model with the classifier threshold row; returns (model, logit expr)."""
    model = OpfModel(case, ReserveModel.for_case(case, reserve_mode_for(spec, cfg.reserve_mode)), load)
    if cfg.full_space:
        block, aux, expr, fmap = attach_full_space(model, params, spec, cfg.c)
        model.full_space = (block, aux, fmap)
    else:
        expr = NetworkLogit(model, params, spec)
        model.ineq_blocks.append(StabilityBlock(expr, cfg.c))
        model.full_space = None
    return model, expr


def build_tscopf(case, params, spec, cfg: TscConfig, load=None) -> nlp.NlpProblem:
    return tscopf_model(case, params, spec, cfg, load)[0].problem()


def _start(model: OpfModel, z=None):
    if z is None:
        z = model.flat_start()
    else:
        full = model.flat_start()
        full[: len(z)] = z[: len(full)]
        z = full
    if model.full_space is not None:
        block, aux, fmap = model.full_space
        z = full_space_start(model, block, aux, fmap, z)
    return z


def solve_tscopf(case: NetworkCase, params: MlpParams, spec: FeatureSpec, cfg: TscConfig, load=None,
                 start=None) -> tuple[DispatchSolution, float]:
    """Solve the constrained dispatch; returns the dispatch and the stability dual.

    The dual is expressed per unit of classifier probability ($/h), i.e. the
    solver's multiplier on the logit row divided by the sigmoid slope.
    """
    model, expr = tscopf_model(case, params, spec, cfg, load)
    problem = model.problem()
    res = nlp.solve(problem, _start(model, start), cfg.solver)
    if not res.ok and start is not None:
        res = nlp.solve(problem, _start(model), cfg.solver)
    sol = interpret(model, res)
    y = expr.value_grad(res.x)[0]
    row = model.row_offsets(model.ineq_blocks, model.ineq_blocks[-1]).start
    gamma_y = float(res.y_ineq[row]) if len(res.y_ineq) else 0.0
    s = float(expit(y))
    slope = s * (1 - s)
    # complementary slackness: an inactive row carries no price, whatever residue the barrier leaves
    active = cfg.c > 0 and y - threshold_logit(cfg.c) <= 1e-6
    gamma = gamma_y * case.base_mva / slope if active and gamma_y > 0 and slope > 0 else 0.0
    if spec.needs_reserve:
        sol.h = ReserveModel.for_case(case).evaluate(case, sol.g)
    sol.extra.update(stability_logit=y, stability_prob=s, gamma=gamma, c=cfg.c, x=res.x[: model.layout.n])
    return sol, gamma


# ---------------------------------------------------------------------
# prices

@dataclass
class PriceSet:
    """Per-generator prices in $/pu-h (divide by base MVA for $/MWh)."""

    energy: np.ndarray  # real power price per generator
    reactive: np.ndarray
    reserve: np.ndarray
    lam: np.ndarray  # per bus
    mu: np.ndarray
    gamma: float
    grad_g: np.ndarray  # d f / d g (raw units) used in the energy price
    grad_r: np.ndarray
    grad_zh: np.ndarray
    uniform: bool

    def per_mwh(self, base_mva: float) -> dict:
        return {"energy": self.energy / base_mva, "reactive": self.reactive / base_mva,
                "reserve": self.reserve / base_mva, "lam": self.lam / base_mva, "mu": self.mu / base_mva}


def _colocated_uniform(case: NetworkCase, *prices, tol=1e-8) -> bool:
    for i in range(case.n_bus):
        idx = np.flatnonzero(case.gen_bus_idx == i)
        if len(idx) < 2:
            continue
        for p in prices:
            scale = max(1.0, float(np.max(np.abs(p[idx]))))
            if np.ptp(p[idx]) > tol * scale:
                return False
    return True


def colocated_spread(case: NetworkCase, prices: np.ndarray) -> float:
    """Largest price difference between generators sharing a bus."""
    out = 0.0
    for i in range(case.n_bus):
        idx = np.flatnonzero(case.gen_bus_idx == i)
        if len(idx) > 1:
            out = max(out, float(np.ptp(prices[idx])))
    return out


def stability_gradients(case: NetworkCase, sol: DispatchSolution, params: MlpParams, spec: FeatureSpec) -> dict:
    """d f / d (raw feature) at ``sol`` from the exact input gradient."""
    x = extract_features(case, sol, (sol.d, sol.l), spec)
    return feature_gradients(spec, input_gradient(params, x), case)


def compute_prices(solution: DispatchSolution, gamma: float, params: MlpParams, spec: FeatureSpec,
                   case: NetworkCase) -> PriceSet:
    if solution.lam is None or solution.mu is None:
        raise ValueError("dispatch carries no bus duals")
    lam = np.asarray(solution.lam, float)
    mu = np.asarray(solution.mu, float)
    grads = stability_gradients(case, solution, params, spec)
    bus = case.gen_bus_idx
    energy = lam[bus] + gamma * grads["g"]
    reactive = mu[bus] + gamma * grads["r"]
    # a generator's reserve counts towards its zone total
    reserve = gamma * (case.Z.T @ grads["zh"])
    return PriceSet(energy, reactive, reserve, lam, mu, gamma, grads["g"], grads["r"], grads["zh"],
                    _colocated_uniform(case, energy, reactive))


@dataclass(frozen=True)
class IncentiveCheck:
    gen_id: int
    verdict: str  # "pass", "fail" or "inconclusive"
    dispatch_profit: float  # $/h
    grid_profit: float


def check_incentive_alignment(solution: DispatchSolution, prices: PriceSet, case: NetworkCase,
                              resolution: int = 200) -> list[IncentiveCheck]:
    """Brute-force each price-taking generator's profit over its (g, r) box."""
    hm = ReserveModel.for_case(case).h_max
    out = []
    for j, gen in enumerate(case.generators):
        pi, sg, al = prices.energy[j], prices.reactive[j], prices.reserve[j]

        def profit(g, r):
            h = np.minimum(hm[j], case.gmax[j] - g)
            return pi * g + sg * r + al * h - case.gen_cost(j, g)

        G, R = np.meshgrid(np.linspace(case.gmin[j], case.gmax[j], resolution),
                           np.linspace(case.rmin[j], case.rmax[j], resolution), indexing="ij")
        best = float(np.max(profit(G, R)))
        mine = float(profit(solution.g[j], solution.r[j]))
        if al < -1e-12:
            verdict = "inconclusive"
        else:
            verdict = "pass" if mine >= best - 1e-4 * (1 + abs(best)) else "fail"
        out.append(IncentiveCheck(gen.id, verdict, mine, best))
    return out


# ---------------------------------------------------------------------
# campaigns

@dataclass(frozen=True)
class CampaignRecord:
    load_id: int
    c: float
    status: str
    objective: float  # $/h, nan unless solved
    stable: Optional[int]
    nadir_hz: float
    gamma: float
    energy_price: tuple = ()  # $/MWh per generator


@dataclass
class CampaignReport:
    records: list
    c_grid: tuple
    gen_ids: tuple

    def at(self, c: float) -> list:
        return [r for r in self.records if r.c == c]

    def common_loads(self) -> set:
        """Loads solved at every threshold, so costs compare like with like."""
        ids = None
        for c in self.c_grid:
            ok = {r.load_id for r in self.at(c) if r.status == nlp.LOCALLY_SOLVED}
            ids = ok if ids is None else ids & ok
        return ids or set()

    def summary(self) -> list[dict]:
        rows = []
        common = self.common_loads()
        for c in self.c_grid:
            recs = self.at(c)
            solved = [r for r in recs if r.status == nlp.LOCALLY_SOLVED and r.stable is not None]
            infeasible = [r for r in recs if r.status == nlp.LOCALLY_INFEASIBLE]
            n_solved = len(solved)
            costs = [r.objective for r in recs if r.load_id in common and r.status == nlp.LOCALLY_SOLVED]
            rows.append({
                "c": c,
                "frac_unstable": sum(1 - r.stable for r in solved) / n_solved if n_solved else math.nan,
                "frac_infeasible": len(infeasible) / len(recs) if recs else math.nan,
                "mean_cost": float(np.mean(costs)) if costs else math.nan,
                "mean_gamma": float(np.mean([r.gamma for r in solved])) if solved else math.nan,
                "n_solved": n_solved,
            })
        return rows

    def frac_unstable(self, c: float) -> float:
        return next(r["frac_unstable"] for r in self.summary() if r["c"] == c)

    def mean_cost(self, c: float) -> float:
        return next(r["mean_cost"] for r in self.summary() if r["c"] == c)

    def price_trend(self, top_fraction: float = 0.07) -> list[dict]:
        """Mean generator prices over the highest-dual instances at each c."""
        rows = []
        for c in self.c_grid:
            solved = [r for r in self.at(c) if r.status == nlp.LOCALLY_SOLVED and r.energy_price]
            if not solved:
                continue
            k = max(1, math.ceil(top_fraction * len(solved)))
            top = sorted(solved, key=lambda r: (-r.gamma, r.load_id))[:k]
            prices = np.array([r.energy_price for r in top])
            for j, gid in enumerate(self.gen_ids):
                rows.append({"c": c, "gen_id": gid, "n": k, "mean_gamma": float(np.mean([r.gamma for r in top])),
                             "mean_price_mwh": float(prices[:, j].mean())})
        return rows

    def records_csv(self) -> str:
        cols = ["load_id", "c", "status", "objective", "stable", "nadir_hz", "gamma"] + \
               [f"price_g{g}" for g in self.gen_ids]
        rows = []
        for r in self.records:
            prices = list(r.energy_price) or [math.nan] * len(self.gen_ids)
            rows.append([r.load_id, r.c, r.status, r.objective, "" if r.stable is None else r.stable,
                         r.nadir_hz, r.gamma, *prices])
        return _csv(cols, rows)

    def summary_csv(self) -> str:
        cols = ["c", "frac_unstable", "frac_infeasible", "mean_cost", "mean_gamma"]
        return _csv(cols, [[row[k] for k in cols] for row in self.summary()])

    def trend_csv(self) -> str:
        cols = ["c", "gen_id", "n", "mean_gamma", "mean_price_mwh"]
        return _csv(cols, [[row[k] for k in cols] for row in self.price_trend()])

    def write(self, directory) -> dict:
        from pathlib import Path
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {"records": d / "campaign.csv", "summary": d / "summary.csv", "trend": d / "price_trend.csv"}
        for key, text in (("records", self.records_csv()), ("summary", self.summary_csv()),
                          ("trend", self.trend_csv())):
            paths[key].write_text(text)
        return paths


def _cell(v):
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def _csv(cols, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


@dataclass(frozen=True)
class _LoadJob:
    case: NetworkCase
    params: MlpParams
    spec: FeatureSpec
    c_grid: tuple
    load_id: int
    load: tuple
    contingency: int
    cfg: TscConfig


def _label(case, sol, contingency):
    try:
        return label_dispatch(case, sol, contingency)
    except DynamicsInitError:
        return None, math.nan


def _campaign_load(job: _LoadJob) -> list:
    case, out = job.case, []
    prev = None
    base = case.base_mva
    for c in job.c_grid:
        try:
            if c == 0:
                sol = solve_acopf(case, job.cfg.solver, load=job.load)
                gamma = 0.0
            else:
                sol, gamma = solve_tscopf(case, job.params, job.spec, replace(job.cfg, c=c), job.load, start=prev)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            out.append(CampaignRecord(job.load_id, c, f"error: {exc}", math.nan, None, math.nan, math.nan))
            continue
        if not sol.ok:
            out.append(CampaignRecord(job.load_id, c, sol.status, math.nan, None, math.nan, math.nan))
            continue
        if c != 0:
            prev = sol.extra["x"]
        stable, nadir = _label(case, sol, job.contingency)
        if job.spec.needs_reserve and sol.h is None:
            sol.h = ReserveModel.for_case(case).evaluate(case, sol.g)
        prices = compute_prices(sol, gamma, job.params, job.spec, case).energy / base
        out.append(CampaignRecord(job.load_id, c, sol.status, sol.objective, stable, nadir, gamma,
                                  tuple(float(p) for p in prices)))
    return out


def campaign_loads(case: NetworkCase, n: int, dist: LoadDistribution, seed: int) -> list:
    # iteration slot 0 keeps campaign loads disjoint from training draws
    return [sample_load(case, dist, sample_seed(seed, 0, i)) for i in range(n)]


def run_campaign(case: NetworkCase, params: MlpParams, spec: FeatureSpec, c_grid, n: int,
                 dist: LoadDistribution | None = None, seed: int = 0, *, cfg: TscConfig | None = None,
                 workers: int = 1, contingency: int | None = None) -> CampaignReport:
    """Solve and simulate every (load, c) pair; c = 0 is the plain AC-OPF."""
    dist = dist or LoadDistribution()
    cfg = cfg or TscConfig(c=0.0)
    grid = tuple(sorted(float(c) for c in set(c_grid)))
    for c in grid:
        threshold_logit(c)
    cont = contingency if contingency is not None else largest_generator(case)
    jobs = [_LoadJob(case, params, spec, grid, i, load, cont, cfg)
            for i, load in enumerate(campaign_loads(case, n, dist, seed))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_campaign_load, jobs))
    else:
        results = [_campaign_load(j) for j in jobs]
    records = sorted((r for rs in results for r in rs), key=lambda r: (r.c, r.load_id))
    return CampaignReport(records, grid, tuple(g.id for g in case.generators))
