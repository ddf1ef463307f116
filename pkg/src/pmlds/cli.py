"""Command-line front end.

Commands
--------
generate        synthetic two-timescale series, or a random heat problem
train           online EM over an observations CSV
predict         filter to the end of a CSV, then forecast with bands
simulate-heat   adaptive burst/leap integration of the heat problem
bench-scaling   wall-time of one EM block across observation dimensions

Exit codes: 0 success, 2 usage/configuration error, 3 data error, 4 numerical
failure.  The PMLDS_LOG environment variable (debug/info/warning/error)
controls verbosity.  All commands are deterministic given ``--seed`` and their
inputs, wall-clock fields aside.
"""
from __future__ import annotations

import functools
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import click
import numpy as np

from .config import ModelConfig
from .em import STREAM_DATA, em_iteration, init_state, run_em
from .errors import ConfigError, DataError, NumericalError
from .finescale import build_heat_problem, generate_synthetic, heat_trajectory
from .integrator import SNAPSHOT_TIMES, IntegrationSchedule, run_adaptive
from .io import (
    load_checkpoint,
    read_json,
    read_matrix_csv,
    save_checkpoint,
    training_log_row,
    write_json,
    write_manifest,
    write_matrix_csv,
    write_prediction_csv,
    write_snapshot_csv,
    write_training_log,
)
from .prediction import predict as predict_posterior
from .rng import seeded_stream
from .smc import run_filter

logger = logging.getLogger("pmlds")

_LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warning": logging.WARNING, "error": logging.ERROR}


def _setup_logging() -> None:
    name = os.environ.get("PMLDS_LOG", "warning").strip().lower()
    level = _LOG_LEVELS.get(name)
    if level is None:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _guarded(fn):
    """Map library errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(exc, 2)
        except DataError as exc:
            _fail(exc, 3)
        except NumericalError as exc:
            _fail(exc, 4)

    return wrapper


def _fail(exc: Exception, code: int) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _common(fn):
    fn = click.option(
        "--config", "config_path", type=click.Path(exists=True, dir_okay=False),
        default=None, help="JSON file with model-config fields; flags override it.",
    )(fn)
    fn = click.option("--seed", type=int, default=0, show_default=True, help="Master RNG seed.")(fn)
    fn = click.option(
        "--threads", type=click.IntRange(min=1), default=None,
        help="Cap BLAS/OpenMP threads (default: library defaults).",
    )(fn)
    fn = click.option(
        "--out", "out_dir", type=click.Path(file_okay=False), default="pmlds-out",
        show_default=True, help="Output directory.",
    )(fn)
    return fn


def _thread_limit(threads):
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def _load_config_file(config_path) -> dict:
    if config_path is None:
        return {}
    data = read_json(config_path)
    if not isinstance(data, dict):
        raise ConfigError(f"{config_path}: config file must hold a JSON object")
    return data


def _build_config(file_cfg: dict, **flags) -> ModelConfig:
    """Defaults < config file < explicit flags (None flags do not override)."""
    merged = dict(file_cfg)
    for key, val in flags.items():
        if val is not None:
            merged[key] = val
    unknown = set(merged) - set(ModelConfig.field_names())
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    try:
        return ModelConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"incomplete configuration: {exc}") from exc


@click.group()
@click.version_option(package_name="pmlds")
def main() -> None:
    """Probabilistic coarse-graining of high-dimensional time series."""
    _setup_logging()


# ---------------------------------------------------------------------------
# generate


@main.group()
def generate() -> None:
    """Write a dataset (and its ground truth) to --out."""


@generate.command("synthetic")
@click.option("--steps", type=click.IntRange(min=1), default=20000, show_default=True)
@click.option("--dims", "d", type=click.IntRange(min=1), default=10, show_default=True)
@_common
@_guarded
def generate_synthetic_cmd(steps, d, config_path, seed, threads, out_dir) -> None:
    """Two-timescale mixture series with known parameters."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _thread_limit(threads):
        rng = seeded_stream(seed, STREAM_DATA)
        data = generate_synthetic(steps, rng, statics=_truth_statics(rng, d))
        obs_path = out / "observations.csv"
        write_matrix_csv(obs_path, data.ys)
        truth_path = out / "truth.json"
        write_json(truth_path, {"dt": 1.0, "statics": data.statics.to_dict()})
    write_manifest(
        out, "generate synthetic", None, seed, [], [obs_path, truth_path],
        time.perf_counter() - t0,
    )
    click.echo(f"wrote {obs_path} ({steps}x{data.ys.shape[1]})")


def _truth_statics(rng, d):
    from .finescale import two_timescale_statics

    return two_timescale_statics(rng, d=d)


@generate.command("heat")
@click.option("--elements", type=click.IntRange(min=2), default=1000, show_default=True)
@click.option("--dt-fine", type=float, default=1e-4, show_default=True)
@click.option("--steps", type=click.IntRange(min=0), default=0, show_default=True,
              help="Also write a pure fine-scale trajectory of this many steps.")
@_common
@_guarded
def generate_heat_cmd(elements, dt_fine, steps, config_path, seed, threads, out_dir) -> None:
    """Random two-material heat problem (conductivity, initial condition)."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _thread_limit(threads):
        problem = build_heat_problem(
            seeded_stream(seed, STREAM_DATA), n_elements=elements, dt_fine=dt_fine
        )
        prob_path = out / "heat_problem.json"
        write_json(prob_path, problem.to_dict())
        outputs = [prob_path]
        if steps:
            traj_path = out / "trajectory.csv"
            write_matrix_csv(traj_path, heat_trajectory(problem, steps))
            outputs.append(traj_path)
    write_manifest(out, "generate heat", None, seed, [], outputs, time.perf_counter() - t0)
    click.echo(f"wrote {prob_path} (d={problem.d})")


# ---------------------------------------------------------------------------
# train


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("-M", "--experts", "m", type=click.IntRange(min=1), default=None, help="Experts [2].")
@click.option("-K", "--factors", "k", type=click.IntRange(min=1), default=None, help="Factors per expert [1].")
@click.option("-L", "--block-len", "ell", type=click.IntRange(min=2), default=None, help="Block length [200].")
@click.option("-N", "--particles", "n", type=click.IntRange(min=2), default=None, help="Particles [200].")
@click.option("--dt", type=float, default=None, help="Observation time step [1.0].")
@click.option("--draws", type=click.IntRange(min=1), default=None, help="Smoother draws [N].")
@click.option("--prior-variance", type=float, default=100.0, show_default=True,
              help="Gaussian prior variance on projection entries (<=0 for none).")
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Checkpoint to continue from.")
@_common
@_guarded
def train(input_path, m, k, ell, n, dt, draws, prior_variance, resume_path,
          config_path, seed, threads, out_dir) -> None:
    """Online EM over an observations CSV (one row per time step)."""
    t0 = time.perf_counter()
    if Path(input_path).stat().st_size == 0:
        raise ConfigError(f"{input_path}: input CSV is empty")
    ys = read_matrix_csv(input_path)
    file_cfg = _load_config_file(config_path)
    prior = None if prior_variance is not None and prior_variance <= 0 else prior_variance
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck_path, log_path, params_path = out / "checkpoint.json", out / "training_log.csv", out / "params.json"

    with _thread_limit(threads):
        rows = []
        clock = [time.perf_counter()]

        if resume_path is not None:
            state = load_checkpoint(resume_path)
            config = state.config
            if config.d != ys.shape[1]:
                raise ConfigError(
                    f"checkpoint expects d={config.d} but {input_path} has d={ys.shape[1]}"
                )
            n_blocks = ys.shape[0] // config.L
            if n_blocks == 0:
                raise DataError("input shorter than one block")
            history = []
            for j in range(n_blocks):
                state, diag = em_iteration(
                    state, ys[j * config.L : (j + 1) * config.L],
                    n_draws=draws, prior_variance=prior,
                )
                history.append(diag)
                _log_block(rows, clock, state, diag, ck_path)
        else:
            config = _build_config(
                file_cfg,
                M=m if m is not None else file_cfg.get("M", 2),
                K=k if k is not None else file_cfg.get("K", 1),
                d=ys.shape[1],
                dt=dt if dt is not None else file_cfg.get("dt", 1.0),
                L=ell if ell is not None else file_cfg.get("L", 200),
                N=n if n is not None else file_cfg.get("N", 200),
                seed=seed,
            )
            state, history = run_em(
                ys, config, n_draws=draws, prior_variance=prior,
                callback=lambda st, dg: _log_block(rows, clock, st, dg, ck_path),
            )

    write_training_log(log_path, rows)
    write_json(params_path, {"dt": state.config.dt, "statics": state.statics.to_dict()})
    write_manifest(
        out, "train", state.config, seed, [input_path],
        [ck_path, log_path, params_path], time.perf_counter() - t0,
    )
    final_bs = ", ".join(f"{ou.b:.4g}" for ou in state.statics.ou_x)
    click.echo(f"trained {len(history)} blocks; b_x = [{final_bs}]")


def _log_block(rows, clock, state, diag, ck_path) -> None:
    now = time.perf_counter()
    rows.append(training_log_row(diag, state.statics, 1e3 * (now - clock[0])))
    clock[0] = now
    save_checkpoint(ck_path, state)
    logger.info(
        "block %d: per-obs fit %.4f, min ESS %.1f",
        diag.block, diag.per_obs_fit_loglik, diag.min_ess,
    )


# ---------------------------------------------------------------------------
# predict


@main.command("predict")
@click.option("--checkpoint", "ck_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Checkpoint or params JSON from `train`.")
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--horizon", type=click.IntRange(min=0), default=100, show_default=True)
@click.option("--draws", type=click.IntRange(min=1), default=500, show_default=True)
@_common
@_guarded
def predict_cmd(ck_path, input_path, horizon, draws, config_path, seed, threads, out_dir) -> None:
    """Filter the trailing block of --input, then forecast --horizon steps."""
    t0 = time.perf_counter()
    state = load_checkpoint(ck_path)
    config = state.config
    ys = read_matrix_csv(input_path)
    if ys.shape[1] != config.d:
        raise ConfigError(
            f"dimension mismatch: checkpoint has d={config.d}, {input_path} has d={ys.shape[1]}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pred_path = out / "prediction.csv"
    with _thread_limit(threads):
        if horizon == 0:
            with open(pred_path, "w") as fh:
                fh.write(f"# config: {json.dumps(config.to_dict(), sort_keys=True)}\n")
                fh.write("t,j,mean,q05,q50,q95\n")
        else:
            rng = seeded_stream(seed, STREAM_DATA, ys.shape[0])
            tail = ys[-config.L :]
            result = run_filter(tail, state.statics, config, rng)
            summary = predict_posterior(
                result.final_cloud, state.statics, horizon, config.dt, rng, n_draws=draws
            )
            write_prediction_csv(pred_path, summary, config)
    write_manifest(
        out, "predict", config, seed, [ck_path, input_path], [pred_path],
        time.perf_counter() - t0,
    )
    click.echo(f"wrote {pred_path} ({horizon} steps x {config.d} coordinates)")


# ---------------------------------------------------------------------------
# simulate-heat


@main.command("simulate-heat")
@click.option("--elements", type=click.IntRange(min=2), default=100, show_default=True,
              help="Finite elements (paper scale: 1000).")
@click.option("--burst", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--leap", type=click.IntRange(min=0), default=500, show_default=True)
@click.option("--tolerance", type=float, default=None,
              help="Adaptive mode: max mean 5-95%% band width while leaping.")
@click.option("--max-time", type=float, default=1.0, show_default=True)
@click.option("--dt-fine", type=float, default=1e-4, show_default=True)
@click.option("-M", "--experts", "m", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("-K", "--factors", "k", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("-L", "--block-len", "ell", type=click.IntRange(min=2), default=10, show_default=True)
@click.option("-N", "--particles", "n", type=click.IntRange(min=2), default=100, show_default=True)
@click.option("--draws", type=click.IntRange(min=1), default=500, show_default=True,
              help="Predictive draws per leap.")
@click.option("--snapshot-times", default=",".join(str(t) for t in SNAPSHOT_TIMES),
              show_default=True, help="Comma-separated times for state snapshots.")
@click.option("--reference/--no-reference", default=True, show_default=True,
              help="Advance the exact fine solution alongside, for validation.")
@click.option("--reinit", type=click.Choice(["mean", "sample"]), default="mean", show_default=True)
@_common
@_guarded
def simulate_heat(elements, burst, leap, tolerance, max_time, dt_fine, m, k, ell, n,
                  draws, snapshot_times, reference, reinit,
                  config_path, seed, threads, out_dir) -> None:
    """Burst/learn/leap integration of the random two-material heat problem."""
    t0 = time.perf_counter()
    try:
        times = tuple(float(s) for s in snapshot_times.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"bad --snapshot-times: {exc}") from exc
    file_cfg = _load_config_file(config_path)
    config = _build_config(
        file_cfg,
        M=m, K=k, d=elements + 1, dt=dt_fine, L=ell, N=n, seed=seed,
    )
    schedule = IntegrationSchedule(
        burst_len=burst, leap_len=leap, tolerance=tolerance, max_time=max_time
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _thread_limit(threads):
        problem = build_heat_problem(
            seeded_stream(seed, STREAM_DATA), n_elements=elements, dt_fine=dt_fine
        )
        report = run_adaptive(
            problem, schedule, config,
            snapshot_times=times, n_draws=draws, reference=reference, reinit=reinit,
        )
    report_path = out / "report.json"
    write_json(report_path, report.to_dict())
    outputs = [report_path]
    for snap in report.snapshots:
        snap_path = out / f"snapshot_t{snap.time:g}.csv"
        write_snapshot_csv(snap_path, snap)
        outputs.append(snap_path)
    state_path = out / "final_state.csv"
    write_matrix_csv(state_path, report.final_state)
    outputs.append(state_path)
    write_manifest(out, "simulate-heat", config, seed, [], outputs, time.perf_counter() - t0)
    if report.truncated:
        click.echo(f"run truncated: {report.truncation_reason}", err=True)
    click.echo(
        f"speedup {report.speedup:g} ({report.fine_steps} fine + "
        f"{report.leaped_steps} leaped steps)"
    )


# ---------------------------------------------------------------------------
# bench-scaling


@main.command("bench-scaling")
@click.option("--dims", default="100,200,400,800", show_default=True,
              help="Comma-separated observation dimensions.")
@click.option("--reps", type=click.IntRange(min=1), default=3, show_default=True,
              help="Timing repetitions; the minimum is reported.")
@click.option("-M", "--experts", "m", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("-K", "--factors", "k", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("-L", "--block-len", "ell", type=click.IntRange(min=2), default=100, show_default=True)
@click.option("-N", "--particles", "n", type=click.IntRange(min=2), default=64, show_default=True)
@click.option("--draws", type=click.IntRange(min=1), default=512, show_default=True)
@_common
@_guarded
def bench_scaling(dims, reps, m, k, ell, n, draws, config_path, seed, threads, out_dir) -> None:
    """Wall time of one EM block vs observation dimension d."""
    t0 = time.perf_counter()
    try:
        d_values = tuple(int(s) for s in dims.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"bad --dims: {exc}") from exc
    if not d_values or any(d < 1 for d in d_values):
        raise ConfigError(f"--dims must name positive integers, got {dims!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    with _thread_limit(threads):
        for d in d_values:
            config = ModelConfig(M=m, K=k, d=d, dt=1.0, L=ell, N=n, seed=seed)
            rng = seeded_stream(seed, STREAM_DATA, d)
            ys = rng.standard_normal((ell, d))
            best, fit = np.inf, 0.0
            for _ in range(reps):
                state = init_state(config, ys)
                t_start = time.perf_counter()
                state, diag = em_iteration(state, ys, n_draws=draws)
                best = min(best, 1e3 * (time.perf_counter() - t_start))
                fit = diag.per_obs_fit_loglik
            rows.append((d, best, fit))
            logger.info("d=%d: %.2f ms/block", d, best)
    bench_path = out / "bench.csv"
    with open(bench_path, "w") as fh:
        fh.write("d,per_block_ms,per_obs_fit_loglik\n")
        for d, ms, fit in rows:
            fh.write(f"{d},{ms:.6g},{fit:.17g}\n")
    write_manifest(out, "bench-scaling", None, seed, [], [bench_path], time.perf_counter() - t0)
    if len(rows) > 1:
        logd = np.log([r[0] for r in rows])
        logt = np.log([r[1] for r in rows])
        slope = float(np.polyfit(logd, logt, 1)[0])
        click.echo(f"log-log slope: {slope:.3f}")
    click.echo(f"wrote {bench_path}")


if __name__ == "__main__":
    main()
