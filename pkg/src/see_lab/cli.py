"""Experiment orchestration: the `see-lab` command line.

    see-lab <subcommand> --config FILE [--seed U64] [--paths INT]
            [--out DIR] [--workers INT]

Subcommands: simulate, couple, verify-model, ergodicity, nse, convergence.
All outputs land under --out together with a manifest.txt; the process exits
0 iff every verdict of the requested experiment passed.  Reruns with the
same effective config produce byte-identical result files for any worker
count: path results depend only on (seed, path_index), and the coordinator
writes all files in a fixed order.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .config import (
    build_model_from_config,
    distance_from_config,
    parse_config,
    plan_from_config,
    start_vector,
    stepper_from_config,
)
from .coefficients import check_antisymmetry, check_form_bounds, lipschitz_probe
from .coupling import dump_coupled_csv, shift_bound_constant, simulate_coupled
from .dynamics import (
    BallRecorder,
    LocalTimeLedger,
    PathSample,
    TrajectoryRecorder,
    dump_path_csv,
    n_steps_for,
    penalization_convergence_study,
    run_paths,
)
from .ergodicity import Verdict, run_ergodicity_battery, save_battery_outputs
from .errors import ConfigError, SeeLabError
from .spectral import h_norm_arr, validate_h1


def parallel_map(fn, items, workers: int | None = None):
    """Map fn over items, returning results in input order.

    Worker count never changes the results; a worker crash is re-raised with
    the failing item index attached.
    """
    items = list(items)
    if workers is None:
        workers = int(os.environ.get("SEE_LAB_WORKERS", "1"))
    workers = max(1, min(workers, max(len(items), 1)))
    if workers == 1 or len(items) <= 1:
        out = []
        for i, it in enumerate(items):
            try:
                out.append(fn(it))
            except Exception as exc:
                raise SeeLabError(f"worker failed on item index {i}: {exc}") from exc
        return out
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, it) for it in items]
        out = []
        for i, fut in enumerate(futures):
            try:
                out.append(fut.result())
            except Exception as exc:
                raise SeeLabError(f"worker failed on item index {i}: {exc}") from exc
        return out


def _chunk_indices(n: int, workers: int):
    bounds = np.linspace(0, n, max(1, workers) + 1).astype(int)
    return [
        np.arange(bounds[i], bounds[i + 1])
        for i in range(len(bounds) - 1)
        if bounds[i] < bounds[i + 1]
    ]


def write_manifest(out_dir, cfg_hash, wall_clock, files, verdicts):
    """Atomically write manifest.txt (config hash, version, wall clock,
    output files, verdicts)."""
    lines = [
        f"config_hash={cfg_hash}",
        f"code_version={__version__}",
        f"wall_clock_s={wall_clock:.3f}",
        "files:",
    ]
    lines += [f"  {os.path.basename(f)}" for f in sorted(files)]
    lines.append("verdicts:")
    for v in verdicts:
        lines.append(f"  [{'PASS' if v.passed else 'FAIL'}] {v.name}: {v.detail}")
    tmp = os.path.join(out_dir, ".manifest.tmp")
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.txt"))


def _write_failures(out_dir, verdicts):
    failures = [
        {"name": v.name, "detail": v.detail, "margin": v.margin}
        for v in verdicts
        if not v.passed
    ]
    if failures:
        with open(os.path.join(out_dir, "failures.json"), "w") as fh:
            json.dump(failures, fh, indent=2, sort_keys=True)
        for f in failures:
            print(f"FAIL {f['name']}: {f['detail']}", file=sys.stderr)
    return failures


# ---------------------------------------------------------------------------
# subcommands


def _model_and_spec(cfg):
    built = build_model_from_config(cfg)
    if isinstance(built, tuple):
        return built  # (NseModel, ModelSpec)
    return None, built


def cmd_simulate(cfg, args, out_dir):
    _, model = _model_and_spec(cfg)
    stepper = stepper_from_config(cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("plan", "base_seed"))
    n_paths = args.paths if args.paths is not None else int(cfg.get("plan", "n_paths"))
    t_final = float(cfg.get("stepper", "t"))
    x0 = start_vector(cfg, model, "x0")
    n_steps = n_steps_for(t_final, stepper.dt)

    def run_chunk(idx):
        traj = TrajectoryRecorder()
        ball = BallRecorder()
        x0_rows = np.repeat(x0[None, :], idx.size, axis=0)
        run_paths(model, stepper, x0_rows, n_steps, seed, idx, recorders=[traj, ball])
        return idx, traj, ball

    chunks = parallel_map(run_chunk, _chunk_indices(n_paths, args.workers), args.workers)
    files, max_h = [], 0.0
    times = np.arange(n_steps + 1) * stepper.dt
    for idx, traj, ball in chunks:
        max_h = max(max_h, float(ball.max_h.max()) if idx.size else 0.0)
        for row, pi in enumerate(idx):
            inc = traj.increments[row]
            path = PathSample(
                times=times,
                states=traj.states[row],
                ledger=LocalTimeLedger(inc, float(h_norm_arr(inc).sum())),
                noise_seed=seed,
                path_index=int(pi),
                model_id=model.model_id,
            )
            files.append(dump_path_csv(path, out_dir))
    if stepper.scheme == "projected":
        ok, tol_txt = max_h <= 1.0, "<= 1 exactly"
    else:
        tol = 1.0 / (stepper.dt * stepper.penalty_n)
        ok, tol_txt = max_h <= 1.0 + tol, f"<= 1 + {tol:g} (penalty heuristic)"
    verdicts = [
        Verdict("ball_invariance", bool(ok), 1.0 - max_h,
                f"max |X|_H = {max_h!r} {tol_txt}")
    ]
    return files, verdicts


def cmd_couple(cfg, args, out_dir):
    _, model = _model_and_spec(cfg)
    stepper = stepper_from_config(cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("plan", "base_seed"))
    n_paths = args.paths if args.paths is not None else int(cfg.get("plan", "n_paths"))
    t_final = float(cfg.get("stepper", "t"))
    dist = distance_from_config(cfg, model)
    x0 = start_vector(cfg, model, "x0")
    y0 = start_vector(cfg, model, "y0")
    if not cfg.has("plan", "x0") and not cfg.has("plan", "y0"):
        x0 = np.zeros(model.dim)
        y0 = np.zeros(model.dim)
        x0[0], y0[0] = 0.5, -0.5

    def one(pi):
        return simulate_coupled(model, x0, y0, t_final, stepper, seed, pi)

    coupled = parallel_map(one, range(n_paths), args.workers)
    files = [dump_coupled_csv(c, dist, out_dir) for c in coupled]
    c_bound = shift_bound_constant(model)
    worst = 0.0
    for c in coupled:
        gap = h_norm_arr(c.x_path.states - c.y_path.states)
        bnorm = h_norm_arr(c.shift_record)
        excess = bnorm - c_bound * gap
        worst = max(worst, float(excess.max()))
    verdicts = [
        Verdict(
            "shift_bound",
            worst <= 1e-9,
            -worst,
            f"||beta|| <= lambda_(N+1)/(2 c_min g_lo) |x-y| (worst excess {worst:.3g})",
        )
    ]
    return files, verdicts


def cmd_verify_model(cfg, args, out_dir):
    nse_model, model = _model_and_spec(cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("plan", "base_seed"))
    lp = lipschitz_probe(model, pairs=1000, seed=seed)
    fb = check_form_bounds(model, samples=1000, seed=seed + 1)
    anti = check_antisymmetry(model, samples=1000, seed=seed + 2)
    h1 = validate_h1(model)
    verdicts = [
        Verdict("lipschitz_a1", lp.passed, lp.declared - lp.estimate,
                f"sampled constant {lp.estimate:.6g} <= declared C1 {lp.declared:g}"),
        Verdict("form_bounds_a2b", fb.passed,
                1.0 - max(fb.max_ratio_trilinear, fb.max_ratio_bmap),
                f"trilinear ratio {fb.max_ratio_trilinear:.3g}, B(u,u) ratio "
                f"{fb.max_ratio_bmap:.3g}"),
        Verdict("antisymmetry_a2a", anti.passed,
                1e-12 - max(anti.max_antisymmetry_resid, anti.max_cancellation_resid),
                f"antisym {anti.max_antisymmetry_resid:.2e}, cancel "
                f"{anti.max_cancellation_resid:.2e}, riesz {anti.max_riesz_resid:.2e}"),
        Verdict("h1_spectral_gap", h1.passed and h1.pinv_ok,
                h1.lambda_next - h1.threshold,
                f"lambda_(N+1)={h1.lambda_next:g} > {h1.threshold:g}, pinv {h1.pinv_ok}"),
    ]
    if nse_model is not None:
        from .nse import run_nse_experiment

        verdicts += run_nse_experiment(nse_model, "verify-model", seed=seed)["verdicts"]
    lines = [f"[{'PASS' if v.passed else 'FAIL'}] {v.name}: {v.detail}" for v in verdicts]
    path = os.path.join(out_dir, "verify_model.txt")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return [path], verdicts


def cmd_ergodicity(cfg, args, out_dir):
    _, model = _model_and_spec(cfg)
    seed = args.seed if args.seed is not None else None
    n_paths = args.paths if args.paths is not None else None
    plan = plan_from_config(cfg, seed=seed, n_paths=n_paths)
    dist = distance_from_config(cfg, model)
    h1 = validate_h1(model)
    if not h1.passed:
        print("warning: spectral-gap condition fails for this model", file=sys.stderr)
    report, series = run_ergodicity_battery(
        model, plan, dist=dist, workers=args.workers
    )
    files = save_battery_outputs(out_dir, report, series)
    return files, report.verdicts


def cmd_nse(cfg, args, out_dir):
    nse_model, model = _model_and_spec(cfg)
    if nse_model is None:
        raise ConfigError(["the nse subcommand needs [model] kind=nse"])
    from .nse import run_nse_experiment

    seed = args.seed if args.seed is not None else None
    n_paths = args.paths if args.paths is not None else None
    if args.experiment == "verify-model":
        res = run_nse_experiment(nse_model, "verify-model",
                                 seed=seed if seed is not None else 0)
        verdicts = res["verdicts"]
        path = os.path.join(out_dir, "nse_verify.txt")
        with open(path, "w") as fh:
            for v in verdicts:
                fh.write(f"[{'PASS' if v.passed else 'FAIL'}] {v.name}: {v.detail}\n")
        return [path], verdicts
    plan = plan_from_config(cfg, seed=seed, n_paths=n_paths)
    if args.experiment == "simulate":
        res = run_nse_experiment(nse_model, "simulate", plan=plan, out_dir=out_dir)
        files = [
            os.path.join(out_dir, f"path_{plan.base_seed}_{i}.csv")
            for i in range(plan.n_paths)
        ]
        return files, []
    res = run_nse_experiment(nse_model, "ergodicity", plan=plan)
    files = save_battery_outputs(out_dir, res["report"], res["series"])
    return files, res["report"].verdicts


def cmd_convergence(cfg, args, out_dir):
    _, model = _model_and_spec(cfg)
    stepper = stepper_from_config(cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("plan", "base_seed"))
    t_final = float(cfg.get("stepper", "t"))
    x0 = start_vector(cfg, model, "x0")
    if not cfg.has("plan", "x0"):
        x0 = np.zeros(model.dim)
        x0[0] = 0.9
    n_list = [10.0, 100.0, 1000.0, 10000.0]
    rows = penalization_convergence_study(model, x0, t_final, stepper.dt, n_list, seed)
    path = os.path.join(out_dir, "penalization_convergence.csv")
    with open(path, "w") as fh:
        fh.write("n,sup_gap\n")
        for n, gap in rows:
            fh.write(f"{n!r},{gap!r}\n")
    gaps = [g for _, g in rows]
    ok = all(gaps[i + 1] <= gaps[i] for i in range(len(gaps) - 1))
    verdicts = [
        Verdict("penalization_monotone", ok,
                min(gaps[i] - gaps[i + 1] for i in range(len(gaps) - 1)),
                f"sup gaps {gaps} nonincreasing along n {n_list}")
    ]
    return [path], verdicts


_COMMANDS = {
    "simulate": cmd_simulate,
    "couple": cmd_couple,
    "verify-model": cmd_verify_model,
    "ergodicity": cmd_ergodicity,
    "nse": cmd_nse,
    "convergence": cmd_convergence,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="see-lab",
        description="simulation and ergodicity-verification lab for "
        "ball-reflected stochastic evolution equations",
    )
    parser.add_argument("subcommand", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--paths", type=int, default=None)
    parser.add_argument("--out", default=None)
    parser.add_argument(
        "--workers", type=int,
        default=int(os.environ.get("SEE_LAB_WORKERS", "1")),
    )
    parser.add_argument(
        "--experiment", default="verify-model",
        choices=["verify-model", "simulate", "ergodicity"],
        help="sub-experiment for the nse subcommand",
    )
    args = parser.parse_args(argv)

    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return 2

    out_dir = args.out if args.out is not None else cfg.get("output", "directory")
    os.makedirs(out_dir, exist_ok=True)
    started = time.monotonic()
    try:
        files, verdicts = _COMMANDS[args.subcommand](cfg, args, out_dir)
    except SeeLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    wall = time.monotonic() - started
    write_manifest(out_dir, cfg.config_hash(), wall, files, verdicts)
    failures = _write_failures(out_dir, verdicts)
    return 0 if not failures else 1


if __name__ == "__main__":
    sys.exit(main())
