"""Command-line entry point: ``tscopf case|train|solve|simulate|campaign``.

Every command writes a JSON run manifest next to its outputs.  Exit codes:
0 ok, 2 parse error, 3 validation error, 4 sampling failure, 5 infeasible,
6 numerical failure, 7 dynamics initialization failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, nlp
from .acopf import interpret, parse_dispatch, serialize_dispatch, solve_acopf
from .dynamics import DynamicsInitError, SimConfig, largest_generator, simulate_dispatch
from .market import TscConfig, compute_prices, run_campaign, solve_tscopf
from .mlp import TrainConfig
from .network import (CaseSyntaxError, CaseValidationError, NetworkCase, bundled_case_path, parse_case,
                      serialize_case, validate_case)
from .sampling import (LoadDistribution, SamplerConfig, SamplingError, asopf_model, random_start, solve_asopf,
                       run_active_sampling, run_simple_sampling, sample_load, sample_seed)
from .surrogate import load_weights, save_weights

EXIT_OK, EXIT_PARSE, EXIT_VALIDATE, EXIT_SAMPLING, EXIT_INFEASIBLE, EXIT_NUMERICAL, EXIT_DYNAMICS = 0, 2, 3, 4, 5, 6, 7

log = logging.getLogger("tscopf")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    case_path: str
    seed: int | None
    config_digest: str
    version: str = __version__
    outputs: list = field(default_factory=list)
    wall_time_s: float = 0.0

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _resolve_case_path(arg: str) -> str:
    if os.path.exists(arg):
        return arg
    try:
        path = bundled_case_path(arg)
    except (FileNotFoundError, ModuleNotFoundError):
        path = None
    if path and os.path.exists(path):
        return path
    raise CliError(EXIT_PARSE, f"no such case file or bundled case: {arg}")


def _read_case(arg: str, check: bool = True) -> tuple[NetworkCase, str, str]:
    path = _resolve_case_path(arg)
    text = Path(path).read_text()
    try:
        case = parse_case(text, check=check, name=Path(path).stem)
    except CaseSyntaxError as exc:
        raise CliError(EXIT_PARSE, f"{path}: {exc}") from None
    except CaseValidationError as exc:
        raise CliError(EXIT_VALIDATE, f"{path}: invalid case\n" + "\n".join(f"  {v}" for v in exc.violations))
    return case, path, text


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode() if isinstance(p, str) else json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\0")
    return h.hexdigest()


def _file_text(path) -> str:
    return Path(path).read_text() if path else ""


def _workers(n: int | None) -> int:
    if n:
        return n
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _finish(manifest: RunManifest, out: Path, outputs: list, t0: float) -> None:
    mpath = _manifest_path(out)
    manifest.outputs = [str(p) for p in outputs] + [str(mpath)]
    manifest.wall_time_s = round(time.perf_counter() - t0, 3)
    manifest.write(mpath)


def _load(case: NetworkCase, seed: int | None):
    return case.load_pu if seed is None else sample_load(case, LoadDistribution(), sample_seed(seed, 0, 0))


# ---------------------------------------------------------------------
# commands

def cmd_case(args) -> int:
    case, path, _ = _read_case(args.path, check=False)
    problems = validate_case(case)
    if args.action == "validate":
        if problems:
            raise CliError(EXIT_VALIDATE, f"{path}: invalid case\n" + "\n".join(f"  {v}" for v in problems))
        print(f"{path}: ok ({case.n_bus} buses, {len(case.branches)} branches, {case.n_gen} generators)")
        return EXIT_OK
    if problems:
        raise CliError(EXIT_VALIDATE, f"{path}: invalid case\n" + "\n".join(f"  {v}" for v in problems))
    print(f"# {path}")
    print(f"# buses={case.n_bus} branches={len(case.branches)} generators={case.n_gen} "
          f"load={case.total_load_mw:g} MW largest unit={largest_generator(case)}")
    sys.stdout.write(serialize_case(case))
    return EXIT_OK


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    case, path, text = _read_case(args.case)
    out = Path(args.out)
    store_path = out.with_name(out.name + ".store.csv")
    train_cfg = TrainConfig(seed=args.seed)
    try:
        if args.simple_sampling:
            params, store = run_simple_sampling(case, args.n, train_cfg=train_cfg, variant=args.inputs,
                                                seed=args.seed, workers=_workers(args.workers))
        else:
            cfg = SamplerConfig(samples_per_iter=args.per_iter, iterations=args.iters, seed=args.seed,
                                variant=args.inputs, workers=_workers(args.workers))
            params, store = run_active_sampling(case, cfg, train_cfg=train_cfg)
    except SamplingError as exc:
        raise CliError(EXIT_SAMPLING, str(exc)) from None
    save_weights(out, params, store.spec)
    store.save(store_path)
    print(f"stored {len(store)} samples ({len(store.failures)} failures, "
          f"{sum(1 - s.label for s in store.samples)} unstable)")
    digest = _digest(text, args.inputs, args.iters, args.per_iter, args.seed, args.simple_sampling, args.n)
    _finish(RunManifest("train", path, args.seed, digest), out, [out, store_path], t0)
    return EXIT_OK


def _status_code(status: str) -> int:
    if status == nlp.LOCALLY_SOLVED:
        return EXIT_OK
    if status == nlp.LOCALLY_INFEASIBLE:
        return EXIT_INFEASIBLE
    return EXIT_NUMERICAL


def _write_prices(path, case, sol, prices):
    per = prices.per_mwh(case.base_mva)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gen_id", "bus_id", "energy_usd_mwh", "reactive_usd_mvarh", "reserve_usd_mwh", "bus_lambda",
                    "gamma"])
        for j, gen in enumerate(case.generators):
            i = case.gen_bus_idx[j]
            w.writerow([gen.id, gen.bus, format(per["energy"][j], ".12g"), format(per["reactive"][j], ".12g"),
                        format(per["reserve"][j], ".12g"), format(per["lam"][i], ".12g"),
                        format(prices.gamma, ".12g")])


def cmd_solve(args) -> int:
    t0 = time.perf_counter()
    case, path, text = _read_case(args.case)
    out = Path(args.out)
    load = _load(case, args.load_seed)
    outputs = [out]
    if args.mode != "acopf" and not args.weights:
        raise CliError(EXIT_PARSE, f"--mode {args.mode} needs --weights")
    weights_text = _file_text(args.weights)
    if args.mode == "acopf":
        sol = solve_acopf(case, load=load)
    elif args.mode == "tscopf":
        params, spec = load_weights(args.weights)
        try:
            cfg = TscConfig(c=args.c)
        except ValueError as exc:
            raise CliError(EXIT_PARSE, str(exc)) from None
        sol, gamma = solve_tscopf(case, params, spec, cfg, load)
        if sol.ok:
            prices_path = out.with_name(out.name + ".prices.csv")
            _write_prices(prices_path, case, sol, compute_prices(sol, gamma, params, spec, case))
            outputs.append(prices_path)
    else:
        params, spec = load_weights(args.weights)
        model = asopf_model(case, params, spec, load)
        seed = 0 if args.load_seed is None else args.load_seed
        z = random_start(case, sample_seed(seed, 0, 1), model)
        sol = interpret(model, solve_asopf(model, z, nlp.SolveOptions(max_iter=500)))
    sol.extra.pop("x", None)
    out.write_text(serialize_dispatch(sol, case))
    print(f"status={sol.status} objective={sol.objective:.6f} iterations={sol.iterations}")
    digest = _digest(text, weights_text, args.mode, args.c, args.load_seed)
    _finish(RunManifest("solve", path, args.load_seed, digest), out, outputs, t0)
    return _status_code(sol.status)


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    case, path, text = _read_case(args.case)
    dispatch_text = Path(args.dispatch).read_text()
    try:
        dispatch = parse_dispatch(dispatch_text, case)
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_PARSE, f"{args.dispatch}: {exc}") from None
    contingency = args.contingency if args.contingency is not None else largest_generator(case)
    cfg = SimConfig(contingency=contingency, early_stop=not args.full_horizon)
    try:
        traj, label = simulate_dispatch(case, dispatch, cfg)
    except DynamicsInitError as exc:
        raise CliError(EXIT_DYNAMICS, str(exc)) from None
    out = Path(args.out)
    traj.to_csv(out)
    print(f"nadir_hz={label.nadir:.6f} label={label.label} reason={traj.reason}")
    digest = _digest(text, dispatch_text, contingency, args.full_horizon)
    _finish(RunManifest("simulate", path, None, digest), out, [out], t0)
    return EXIT_OK


def _grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(EXIT_PARSE, f"bad --c-grid {text!r}") from None


def cmd_campaign(args) -> int:
    t0 = time.perf_counter()
    case, path, text = _read_case(args.case)
    params, spec = load_weights(args.weights)
    grid = _grid(args.c_grid)
    try:
        report = run_campaign(case, params, spec, grid, args.n, seed=args.seed, workers=_workers(args.workers))
    except ValueError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = report.write(out)
    sys.stdout.write(report.summary_csv())
    digest = _digest(text, _file_text(args.weights), grid, args.n, args.seed)
    _finish(RunManifest("campaign", path, args.seed, digest), out, list(files.values()), t0)
    return EXIT_OK


# ---------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tscopf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("case", help="validate or print a case file")
    c.add_argument("action", choices=("validate", "show"))
    c.add_argument("path", help="case file or bundled case name (two_bus, sme, toy9)")
    c.set_defaults(func=cmd_case)

    t = sub.add_parser("train", help="collect labelled samples and train the classifier")
    t.add_argument("case")
    t.add_argument("--inputs", choices=tuple("ABCD"), default="B")
    t.add_argument("--iters", type=int, default=30)
    t.add_argument("--per-iter", type=int, default=500)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="weights file; the store goes to <out>.store.csv")
    t.add_argument("--simple-sampling", action="store_true", help="AC-OPF samples only, one training pass")
    t.add_argument("--n", type=int, default=500, help="sample count with --simple-sampling")
    t.add_argument("--workers", type=int, default=None)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("solve", help="solve one dispatch problem")
    s.add_argument("case")
    s.add_argument("--mode", choices=("acopf", "tscopf", "asopf"), default="acopf")
    s.add_argument("--weights")
    s.add_argument("--c", type=float, default=0.5)
    s.add_argument("--load-seed", type=int, default=None, help="random load draw; nominal load if omitted")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("simulate", help="simulate the largest-unit trip at a dispatch")
    m.add_argument("case")
    m.add_argument("--dispatch", required=True)
    m.add_argument("--out", required=True, help="trajectory CSV")
    m.add_argument("--contingency", type=int, default=None, help="generator id (default: largest unit)")
    m.add_argument("--full-horizon", action="store_true", help="do not stop early")
    m.set_defaults(func=cmd_simulate)

    g = sub.add_parser("campaign", help="stability and cost over many loads and thresholds")
    g.add_argument("case")
    g.add_argument("--weights", required=True)
    g.add_argument("--c-grid", default="0,0.5,0.7,0.9,0.95,0.98")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--workers", type=int, default=None)
    g.set_defaults(func=cmd_campaign)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
