"""Command-line entry point.

Exit codes: 0 success, 1 usage or input error, 2 sweep did not converge
(artifacts are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import MldscError, ProblemValidationError
from .model import PRESETS, LqgProblem, require_valid
from .moments import conditional_covariance
from .montecarlo import SimConfig, analytic_optimal_cost, estimate_cost, moment_cost, simulate_paths
from .numerics import MatrixTrajectory, TimeGrid, default_grid
from .policy import PolicyKind, control_schedule, make_policy
from .sweep import Solution, SweepOptions, solve_mldsc, solve_mlposc

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2
KIND_ORDER = [k.value for k in PolicyKind]

log = logging.getLogger("mldsc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# --- problem and option plumbing ---------------------------------------------


def load_problem(args) -> LqgProblem:
    if args.preset is not None:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; available: {', '.join(PRESETS)}")
        return PRESETS[args.preset]()
    if args.problem in (None, "-"):
        text, source = sys.stdin.read(), "<stdin>"
    else:
        try:
            text, source = Path(args.problem).read_text(), args.problem
        except OSError as exc:
            raise UsageError(f"cannot read problem file: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    p = LqgProblem.from_dict(data)
    require_valid(p)
    return p


def make_grid(p: LqgProblem, args) -> TimeGrid:
    return TimeGrid(p.T, args.n_steps) if args.n_steps else default_grid(p.T)


def sweep_options(args) -> SweepOptions:
    return SweepOptions(max_iters=args.max_iters, tol=args.tol, damping=args.damping)


def parse_policies(text: str | None, default: str) -> list[str]:
    raw = default if text is None else text
    kinds = [k.strip() for k in raw.split(",") if k.strip()]
    if not kinds:
        raise UsageError("at least one policy is required")
    unknown = [k for k in kinds if k not in KIND_ORDER]
    if unknown:
        raise UsageError(f"unknown policies {unknown}; choose from {', '.join(KIND_ORDER)}")
    return list(dict.fromkeys(kinds))


def out_dir(args) -> Path:
    path = Path(args.out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    return path


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def needed_solutions(p, grid, opts, kinds) -> tuple[Solution, Solution | None]:
    dsc = solve_mldsc(p, opts, grid)
    posc = solve_mlposc(p, opts, grid) if {"pi", "mlposc"} & set(kinds) else None
    return dsc, posc


def converged(*sols) -> bool:
    return all(s.report.converged for s in sols if s is not None)


def sim_config(args, domain: int) -> SimConfig:
    return SimConfig(
        n_samples=args.samples,
        sim_dt=args.sim_dt,
        seed=args.seed,
        parallel_width=args.workers,
        record_stride=getattr(args, "record_stride", None),
        stream_domain=domain,
    )


def stream_domain(kind: str, common: bool) -> int:
    return 0 if common else KIND_ORDER.index(kind) + 1


# --- commands --------------------------------------------------------------------


def cmd_preset(args) -> int:
    if args.name not in PRESETS:
        raise UsageError(f"unknown preset {args.name!r}; available: {', '.join(PRESETS)}")
    sys.stdout.write(PRESETS[args.name]().to_json(indent=2) + "\n")
    return EXIT_OK


def cmd_solve(args) -> int:
    p = load_problem(args)
    grid, opts = make_grid(p, args), sweep_options(args)
    out = out_dir(args)
    dsc = solve_mldsc(p, opts, grid)
    posc = solve_mlposc(p, opts, grid)
    dsc.gains.Psi.to_csv(out / "psi.csv")
    posc.gains.Pi.to_csv(out / "pi.csv")
    dsc.gains.Phi.to_csv(out / "phi.csv")
    dsc.affine.alpha.to_csv(out / "alpha.csv")
    dsc.affine.beta.to_csv(out / "beta.csv")
    dsc.moments.mu.to_csv(out / "mu.csv")
    dsc.moments.Sigma.to_csv(out / "sigma.csv")
    report = {
        "grid": {"T": grid.T, "n_steps": grid.n_steps},
        "options": vars(opts),
        "mldsc": dsc.report.to_dict(),
        "mlposc": posc.report.to_dict(),
        "analytic_optimal_cost": analytic_optimal_cost(dsc),
        "converged": converged(dsc, posc),
    }
    write_json(out / "report.json", report)
    return EXIT_OK if report["converged"] else EXIT_NONCONVERGED


def cmd_simulate(args) -> int:
    p = load_problem(args)
    kind = parse_policies(args.policy, "mldsc")
    if len(kind) != 1:
        raise UsageError("simulate takes exactly one policy")
    kind = kind[0]
    grid, opts = make_grid(p, args), sweep_options(args)
    out = out_dir(args)
    dsc, posc = needed_solutions(p, grid, opts, [kind])
    pol = make_policy(kind, dsc, posc)
    batch = simulate_paths(p, pol, sim_config(args, stream_domain(kind, args.common_noise)))
    n, r, d = batch.paths.shape
    rows = np.column_stack(
        [np.repeat(np.arange(n), r), np.tile(batch.times, n), batch.paths.reshape(n * r, d)]
    )
    header = ",".join(["sample", "t"] + [f"s_{j}" for j in range(d)])
    np.savetxt(out / "paths.csv", rows, fmt=["%d", "%.17g"] + ["%.17g"] * d, delimiter=",", header=header, comments="")
    _write_costs(out / "costs.csv", batch)
    est = estimate_cost(batch)
    write_json(out / "estimate.json", {"policy": kind, **est.to_dict(), "config": _config_echo(batch.config)})
    return EXIT_OK if converged(dsc, posc) else EXIT_NONCONVERGED


def cmd_compare(args) -> int:
    p = load_problem(args)
    kinds = parse_policies(args.policies, "mldsc,psi,pi")
    grid, opts = make_grid(p, args), sweep_options(args)
    out = out_dir(args)
    dsc, posc = needed_solutions(p, grid, opts, kinds)
    results = {}
    for kind in kinds:
        pol = make_policy(kind, dsc, posc)
        batch = simulate_paths(p, pol, sim_config(args, stream_domain(kind, args.common_noise)))
        _write_costs(out / f"costs_{kind}.csv", batch)
        results[kind] = {**estimate_cost(batch).to_dict(), "moment_cost": moment_cost(pol)}
    doc = {
        "policies": results,
        "analytic_optimal_cost": analytic_optimal_cost(dsc),
        "samples": args.samples,
        "sim_dt": args.sim_dt if args.sim_dt is not None else grid.dt,
        "seed": args.seed,
        "common_noise": bool(args.common_noise),
        "converged": converged(dsc, posc),
    }
    write_json(out / "compare.json", doc)
    return EXIT_OK if doc["converged"] else EXIT_NONCONVERGED


def cmd_gains(args) -> int:
    p = load_problem(args)
    kinds = parse_policies(args.policies, "mldsc,psi,pi")
    grid, opts = make_grid(p, args), sweep_options(args)
    out = out_dir(args)
    dsc, posc = needed_solutions(p, grid, opts, kinds)
    times = grid.times[:: args.stride]
    if times[-1] != grid.T:
        times = np.append(times, grid.T)
    for kind in kinds:
        sched = control_schedule(make_policy(kind, dsc, posc), times)
        cols, names = [times], ["t"]
        for i in range(p.N):
            F, ff = sched.full[i], sched.feedthrough[i]
            cols += [F.reshape(len(times), -1), ff]
            names += [f"F{i}_{a}_{b}" for a in range(F.shape[1]) for b in range(F.shape[2])]
            names += [f"ff{i}_{a}" for a in range(ff.shape[1])]
        np.savetxt(out / f"gains_{kind}.csv", np.column_stack(cols), fmt="%.17g", delimiter=",",
                   header=",".join(names), comments="")
    return EXIT_OK if converged(dsc, posc) else EXIT_NONCONVERGED


def cmd_analyze(args) -> int:
    """Estimation error of everything outside ``z^i`` given ``z^i``, per policy."""
    p = load_problem(args)
    kinds = parse_policies(args.policies, "mldsc,psi,pi")
    grid, opts = make_grid(p, args), sweep_options(args)
    dsc, posc = needed_solutions(p, grid, opts, kinds)
    times = [float(t) for t in args.times.split(",")] if args.times else [0.5 * p.T]
    part = p.partition
    doc = {}
    for kind in kinds:
        Sigma: MatrixTrajectory = make_policy(kind, dsc, posc).moments.Sigma
        entries = []
        for t in times:
            S = Sigma.at(t)
            for i in range(p.N):
                b = part.z_indices(i)
                a = np.setdiff1d(np.arange(p.d_s), b)
                C = conditional_covariance(S, a, b)
                entries.append({"t": t, "controller": i, "a": a.tolist(), "b": b.tolist(),
                                "conditional_covariance": C.tolist(), "trace": float(np.trace(C))})
        doc[kind] = entries
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        (out_dir(args) / "analyze.json").write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK if converged(dsc, posc) else EXIT_NONCONVERGED


def _write_costs(path: Path, batch) -> None:
    rows = np.column_stack([np.arange(batch.costs.size), batch.costs, batch.diverged.astype(int)])
    np.savetxt(path, rows, fmt=["%d", "%.17g", "%d"], delimiter=",", header="sample,cost,diverged", comments="")


def _config_echo(cfg: SimConfig) -> dict:
    # worker count is deliberately left out: outputs must not depend on it
    return {"n_samples": cfg.n_samples, "sim_dt": cfg.sim_dt, "seed": cfg.seed, "stream_domain": cfg.stream_domain}


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mldsc", description="Memory-limited decentralized LQG control toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log sweep progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pre = sub.add_parser("preset", help="print a built-in problem as JSON")
    pre.add_argument("name")
    pre.set_defaults(func=cmd_preset)

    def common(sp, out_required=True):
        src = sp.add_mutually_exclusive_group()
        src.add_argument("--preset", help="built-in problem name")
        src.add_argument("--problem", help="problem JSON file ('-' or omitted: standard input)")
        sp.add_argument("--n-steps", type=int, default=None, help="solver grid steps (default: dt = 1e-3)")
        sp.add_argument("--tol", type=float, default=1e-8)
        sp.add_argument("--max-iters", type=int, default=200)
        sp.add_argument("--damping", type=float, default=1.0)
        sp.add_argument("--out", required=out_required, default=None, help="output directory")

    def simulation(sp):
        sp.add_argument("--samples", type=int, default=10_000)
        sp.add_argument("--sim-dt", type=float, default=None, help="default: solver grid step")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=1, help="threads (results do not depend on it)")
        sp.add_argument("--common-noise", action="store_true", help="share noise paths across policies")

    s = sub.add_parser("solve", help="solve Psi, Pi and Phi and write trajectories")
    common(s)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("simulate", help="simulate one policy")
    common(s)
    simulation(s)
    s.add_argument("--policy", default=None, help=f"one of {', '.join(KIND_ORDER)} (default mldsc)")
    s.add_argument("--record-stride", type=int, default=None, help="record every k-th step in paths.csv")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("compare", help="Monte Carlo cost of several policies")
    common(s)
    simulation(s)
    s.add_argument("--policies", default=None, help="comma-separated (default mldsc,psi,pi)")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("gains", help="write feedback matrices over time")
    common(s)
    s.add_argument("--policies", default=None, help="comma-separated (default mldsc,psi,pi)")
    s.add_argument("--stride", type=int, default=10, help="write every k-th grid node")
    s.set_defaults(func=cmd_gains)

    s = sub.add_parser("analyze", help="conditional covariance of the coordinates each controller cannot see")
    common(s, out_required=False)
    s.add_argument("--policies", default=None, help="comma-separated (default mldsc,psi,pi)")
    s.add_argument("--times", default=None, help="comma-separated times (default T/2)")
    s.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)
    for name in ("n_steps", "samples", "workers", "max_iters", "stride", "record_stride"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            parser.error(f"--{name.replace('_', '-')} must be >= 1")
    try:
        return args.func(args)
    except ProblemValidationError as exc:
        print(f"mldsc: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except UsageError as exc:
        print(f"mldsc: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MldscError as exc:
        if isinstance(exc, (ValueError,)):
            print(f"mldsc: error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        print(f"mldsc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
