"""Training-data generation for the stability classifier.

Active sampling alternates between labelling dispatch points by simulation
and retraining; after the first round the dispatch points come from an
optimization that seeks the classifier's 0.5 level set inside the AC-feasible
region, so later samples concentrate near the stability boundary.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nlp
from .acopf import DispatchSolution, OpfModel, ReserveModel, dispatch_from_power_flow, interpret, solve_acopf, \
    within_limits
from .dynamics import DynamicsInitError, SimConfig, classify_stability, initialize_steady_state, \
    largest_generator, simulate_contingency
from .embed import LogitSquareObjective, NetworkLogit, UncertaintyObjective
from .mlp import MlpParams, TrainConfig, train
from .network import NetworkCase, serialize_case
from .powerflow import PowerFlowDiverged
from .surrogate import FeatureSpec, raw_features

log = logging.getLogger(__name__)


class SamplingError(RuntimeError):
    """More than half of an iteration's samples failed."""


@dataclass(frozen=True)
class LoadDistribution:
    shape: float = 3.0
    scale_mw: float = 40.0
    shift_mw: Optional[float] = None  # default: shift_fraction of nominal total load
    shift_fraction: float = 0.8
    std_fraction: float = 0.20
    reactive_scaled: bool = True

    def __post_init__(self):
        if not (self.shape > 0 and self.scale_mw > 0):
            raise ValueError("gamma shape and scale must be positive")
        if self.std_fraction < 0:
            raise ValueError("std fraction must be non-negative")

    def shift_for(self, case: NetworkCase) -> float:
        return self.shift_mw if self.shift_mw is not None else self.shift_fraction * case.total_load_mw


def sample_load(case: NetworkCase, dist: LoadDistribution, seed) -> tuple[np.ndarray, np.ndarray]:
    """Random (d, l) per bus in pu: scaled system total, then per-load noise."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    total = case.total_load_mw
    if total <= 0:
        raise ValueError("case has no load to scale")
    target = dist.shift_for(case) + rng.gamma(dist.shape, dist.scale_mw)
    k = target / total
    base = case.base_mva
    d = np.zeros(case.n_bus)
    l = np.zeros(case.n_bus)
    for ld in case.loads:
        i = case.bus_index[ld.bus]
        dp = k * ld.d_mw
        lq = k * ld.l_mvar if dist.reactive_scaled else ld.l_mvar
        dp += rng.normal(0.0, dist.std_fraction * abs(dp))
        lq += rng.normal(0.0, dist.std_fraction * abs(lq))
        d[i] += max(dp, 0.0) / base
        l[i] += max(lq, 0.0) / base
    return d, l


def sample_seed(master: int, iteration: int, index: int) -> int:
    """Independent per-sample seed, fixed by position rather than scheduling."""
    return int(np.random.SeedSequence([master, iteration, index]).generate_state(1)[0])


def random_start(case: NetworkCase, rng, model: OpfModel | None = None) -> np.ndarray:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    model = model or OpfModel(case)
    lay = model.layout
    g = rng.uniform(case.gmin, case.gmax)
    r = rng.uniform(case.rmin, case.rmax)
    V = rng.uniform(case.vmin, case.vmax)
    h = 0.5 * model.reserve.h_max if lay.h is not None else None
    z = model.flat_start()
    z[: lay.n] = lay.pack(g, r, h, V, np.zeros(case.n_bus))
    return z


def reserve_mode_for(spec: FeatureSpec, forced: Optional[str] = None) -> str:
    if forced:
        return forced
    return "relaxed-inequalities" if spec.needs_reserve else "absent"


def asopf_model(case: NetworkCase, params: MlpParams, spec: FeatureSpec, load, reserve_mode=None) -> OpfModel:
    model = OpfModel(case, ReserveModel.for_case(case, reserve_mode_for(spec, reserve_mode)), load)
    model.objective = UncertaintyObjective(NetworkLogit(model, params, spec))
    return model


def build_asopf(case: NetworkCase, params: MlpParams, spec: FeatureSpec, load, reserve_mode=None) -> nlp.NlpProblem:
    """AC-OPF constraints with objective (f - 1/2)^2 and no threshold row."""
    return asopf_model(case, params, spec, load, reserve_mode).problem()


# ---------------------------------------------------------------------
# labelling

_SIM_CACHE: dict = {}
_SIM_CACHE_MAX = 20000


def _case_digest(case: NetworkCase) -> str:
    return hashlib.sha256(serialize_case(case).encode()).hexdigest()


def _sim_key(case: NetworkCase, sol: DispatchSolution, contingency: int, digest: str | None) -> str:
    h = hashlib.sha256((digest or _case_digest(case)).encode())
    h.update(str(contingency).encode())
    for v in (sol.g, sol.r, sol.V, sol.theta, sol.d, sol.l):
        # +0.0 folds -0.0 into 0.0 so equal points hash equally
        h.update((np.round(np.asarray(v, float), 8) + 0.0).tobytes())
    return h.hexdigest()


def label_dispatch(case: NetworkCase, sol: DispatchSolution, contingency: int, digest: str | None = None):
    """(label, nadir) for a dispatch, cached on the point rounded to 1e-8.

    Rounding only enters the cache key; the simulation itself runs on the
    exact dispatch, since rounding voltages on a stiff network breaks the
    power-flow balance the initialization requires.
    """
    key = _sim_key(case, sol, contingency, digest)
    hit = _SIM_CACHE.get(key)
    if hit is not None:
        return hit
    init = initialize_steady_state(case, sol)
    traj = simulate_contingency(init, case, SimConfig(contingency=contingency))
    lab = classify_stability(traj, case.min_hz)
    out = (lab.label, lab.nadir)
    if len(_SIM_CACHE) >= _SIM_CACHE_MAX:
        _SIM_CACHE.clear()
    _SIM_CACHE[key] = out
    return out


# ---------------------------------------------------------------------
# store

@dataclass
class TrainingSample:
    iteration: int
    sample_id: int
    seed: int
    features: np.ndarray  # raw (un-normalized) feature values
    label: int
    nadir_hz: float
    solver_status: str
    dispatch: Optional[DispatchSolution] = field(default=None, repr=False, compare=False)


@dataclass
class SampleStore:
    spec: FeatureSpec
    samples: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (iteration, sample_id, reason)
    models: dict = field(default_factory=dict)  # iteration -> classifier trained after it

    def extend(self, new: list) -> None:
        self.samples.extend(new)

    def __len__(self):
        return len(self.samples)

    def iteration(self, k: int) -> list:
        return [s for s in self.samples if s.iteration == k]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        X = np.array([s.features for s in self.samples], float).reshape(len(self.samples), self.spec.dim)
        y = np.array([s.label for s in self.samples], float)
        return X, y

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# variant={self.spec.variant}\n")
        w = csv.writer(buf, lineterminator="\n")
        names = [f"{k}{i + 1}" for k, i in self.spec.slots]
        w.writerow(["iteration", "sample_id", "seed", *names, "label", "nadir_hz", "solver_status"])
        for s in self.samples:
            w.writerow([s.iteration, s.sample_id, s.seed, *(format(v, ".17g") for v in s.features),
                        s.label, format(s.nadir_hz, ".17g"), s.solver_status])
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def load(cls, path, case: NetworkCase) -> "SampleStore":
        with open(path) as fh:
            first = fh.readline().strip()
            variant = first.split("=", 1)[1]
            spec = FeatureSpec.for_case(case, variant)
            rows = list(csv.reader(fh))
        store = cls(spec)
        for row in rows[1:]:
            n = spec.dim
            store.samples.append(TrainingSample(int(row[0]), int(row[1]), int(row[2]),
                                                np.array([float(v) for v in row[3:3 + n]]), int(row[3 + n]),
                                                float(row[4 + n]), row[5 + n]))
        return store


# ---------------------------------------------------------------------
# one sample

@dataclass(frozen=True)
class SamplerConfig:
    samples_per_iter: int = 500
    iterations: int = 30
    contingency: Optional[int] = None
    workers: int = 1
    seed: int = 0
    variant: str = "B"
    reserve_mode: Optional[str] = None
    solver: nlp.SolveOptions = field(default_factory=lambda: nlp.SolveOptions(max_iter=500))

    def __post_init__(self):
        if self.samples_per_iter < 1 or self.iterations < 1:
            raise ValueError("need at least one sample and one iteration")


@dataclass(frozen=True)
class _Job:
    case: NetworkCase
    spec: FeatureSpec
    params: Optional[MlpParams]
    dist: LoadDistribution
    contingency: int
    iteration: int
    index: int
    seed: int
    reserve_mode: Optional[str]
    solver: nlp.SolveOptions


def _power_flow_fallback(case: NetworkCase, model: OpfModel, z, load) -> Optional[DispatchSolution]:
    """Project a start point onto the power-flow manifold; None if limits break."""
    g, _, _, V, _ = model.layout.unpack(z)
    vset = np.ones(case.n_bus)
    vset[case.gen_bus_idx] = V[case.gen_bus_idx]
    try:
        sol = dispatch_from_power_flow(case, g, vset, load)
    except PowerFlowDiverged:
        return None
    return sol if within_limits(case, sol) else None


def solve_asopf(model: OpfModel, z, opts: nlp.SolveOptions) -> nlp.SolveResult:
    """Reach the level set with the squared logit, then polish on the real objective."""
    target = model.objective
    model.objective = LogitSquareObjective(target.expr)
    pre = nlp.solve(model.problem(), z, opts)
    model.objective = target
    return nlp.solve(model.problem(), pre.x if pre.ok else z, opts)


def _solve_sample(job: _Job, rng) -> tuple[Optional[DispatchSolution], str]:
    case = job.case
    load = sample_load(case, job.dist, rng)
    if job.params is None:
        sol = solve_acopf(case, job.solver, load=load)
        return (sol if sol.ok else None), sol.status
    status = "failed"
    z = None
    for attempt in range(2):  # one retry from a fresh random start
        model = asopf_model(case, job.params, job.spec, load, job.reserve_mode)
        z = random_start(case, rng, model)
        res = solve_asopf(model, z, job.solver)
        status = res.status
        if res.ok:
            return interpret(model, res), status
    fb = _power_flow_fallback(case, model, z, load)
    if fb is not None:
        return fb, "power-flow"
    return None, status


def _run_job(job: _Job):
    rng = np.random.default_rng(job.seed)
    try:
        sol, status = _solve_sample(job, rng)
    except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        return None, f"solver error: {exc}"
    if sol is None:
        return None, f"solver status {status}"
    case = job.case
    if job.spec.needs_reserve:
        sol = replace(sol, h=ReserveModel.for_case(case).evaluate(case, sol.g))
    try:
        label, nadir = label_dispatch(case, sol, job.contingency)
    except DynamicsInitError as exc:
        return None, f"dynamics init: {exc}"
    x = raw_features(case, sol, (sol.d, sol.l), job.spec)
    return TrainingSample(job.iteration, job.index, job.seed, x, label, nadir, status, sol), None


def _map(jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [_run_job(j) for j in jobs]


def collect_iteration(case, spec, params, dist, cfg: SamplerConfig, iteration: int, contingency: int,
                      n: int | None = None):
    n = cfg.samples_per_iter if n is None else n
    jobs = [_Job(case, spec, params, dist, contingency, iteration, s, sample_seed(cfg.seed, iteration, s),
                 cfg.reserve_mode, cfg.solver) for s in range(n)]
    samples, failures = [], []
    for job, (sample, err) in zip(jobs, _map(jobs, cfg.workers)):
        if sample is None:
            failures.append((iteration, job.index, err))
            log.info("iteration %d sample %d failed: %s", iteration, job.index, err)
        else:
            samples.append(sample)
    if len(failures) > n / 2:
        raise SamplingError(f"iteration {iteration}: {len(failures)} of {n} samples failed")
    return samples, failures


def _train_on(store: SampleStore, train_cfg: TrainConfig, previous: MlpParams | None):
    X, y = store.arrays()
    if len(np.unique(y)) < 2:
        log.warning("store holds a single class; keeping the previous classifier")
        return previous if previous is not None else MlpParams.zeros(store.spec.dim, train_cfg.hidden,
                                                                     train_cfg.activations)
    try:
        return train(store.spec.normalize(X), y, train_cfg)
    except ValueError as exc:
        log.warning("training skipped: %s", exc)
        return previous if previous is not None else MlpParams.zeros(store.spec.dim, train_cfg.hidden,
                                                                     train_cfg.activations)


def run_active_sampling(case: NetworkCase, config: SamplerConfig, dist: LoadDistribution | None = None,
                        train_cfg: TrainConfig | None = None):
    """Iterate: collect labelled samples, retrain on everything so far.

    Round one labels AC-OPF dispatches; later rounds label solutions of the
    uncertainty-seeking problem under the previous classifier.  Feature
    normalization is fixed from round one.  Returns ``(params, store)``.
    """
    dist = dist or LoadDistribution()
    train_cfg = train_cfg or TrainConfig(seed=config.seed)
    contingency = config.contingency if config.contingency is not None else largest_generator(case)
    if contingency not in [g.id for g in case.generators]:
        raise ValueError(f"unknown contingency generator {contingency}")
    spec = FeatureSpec.for_case(case, config.variant)
    store = SampleStore(spec)
    params = None
    for k in range(1, config.iterations + 1):
        samples, failures = collect_iteration(case, store.spec, params, dist, config, k, contingency)
        if k == 1:
            raw = np.array([s.features for s in samples]).reshape(len(samples), spec.dim)
            store.spec = spec.fit(raw, case)
        store.extend(samples)
        store.failures.extend(failures)
        params = _train_on(store, replace(train_cfg, seed=sample_seed(config.seed, k, -1 % 2**31)), params)
        store.models[k] = params
        log.info("iteration %d: %d samples, %d failures, %d unstable", k, len(samples), len(failures),
                 sum(1 - s.label for s in samples))
    return params, store


def run_simple_sampling(case: NetworkCase, n: int, dist: LoadDistribution | None = None,
                        train_cfg: TrainConfig | None = None, *, variant: str = "B", seed: int = 0,
                        workers: int = 1, contingency: int | None = None):
    """Baseline: AC-OPF dispatches at random loads, labelled, one training pass."""
    dist = dist or LoadDistribution()
    cfg = SamplerConfig(samples_per_iter=n, iterations=1, seed=seed, variant=variant, workers=workers,
                        contingency=contingency)
    train_cfg = train_cfg or TrainConfig(seed=seed)
    cont = contingency if contingency is not None else largest_generator(case)
    spec = FeatureSpec.for_case(case, variant)
    samples, failures = collect_iteration(case, spec, None, dist, cfg, 1, cont)
    raw = np.array([s.features for s in samples]).reshape(len(samples), spec.dim)
    store = SampleStore(spec.fit(raw, case), samples, failures)
    params = _train_on(store, replace(train_cfg, seed=sample_seed(seed, 1, -1 % 2**31)), None)
    store.models[1] = params
    return params, store
