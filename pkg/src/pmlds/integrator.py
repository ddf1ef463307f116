"""Adaptive time integration: fine bursts, online model updates, coarse leaps.

The loop alternates (a) a burst of fine-scale steps whose states are fed to
the online EM as observation blocks, (b) a filtering pass over the freshest
block under the updated parameters, and (c) a predictive leap over many steps,
after which the fine state is reinitialized from the predictive posterior mean
(projected back onto the fine model's constraints).  Walltime is saved because
leaped steps never touch the fine solver; the reported speedup is
total steps / fine steps.

An optional exact reference trajectory is advanced in lockstep for validation;
it obviously costs as much as the pure fine run, so production runs disable it.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .em import (
    STREAM_PREDICT,
    BlockDiagnostics,
    EmState,
    em_iteration,
    init_state,
)
from .errors import ConfigError, NumericalError
from .finescale import HeatProblem, HeatSolver
from .mstep import PROJECTION_PRIOR_VARIANCE
from .params import StaticParams
from .prediction import predict
from .rng import seeded_stream
from .smc import run_filter

__all__ = ["IntegrationSchedule", "LeapRecord", "Snapshot", "IntegrationReport", "run_adaptive"]

SNAPSHOT_TIMES = (0.15, 0.25, 0.5, 1.0)


@dataclass(frozen=True)
class IntegrationSchedule:
    """Burst/leap protocol.

    ``tolerance`` switches leaping to adaptive mode: the leap extends only
    while the mean 5-95% predictive band stays at or below it.  ``leap_len=0``
    degenerates to a pure fine-scale run.
    """

    burst_len: int = 20
    leap_len: int = 500
    tolerance: float | None = None
    max_time: float = 1.0

    def __post_init__(self) -> None:
        if self.burst_len < 1:
            raise ConfigError(f"burst_len must be >= 1, got {self.burst_len}")
        if self.leap_len < 0:
            raise ConfigError(f"leap_len must be >= 0, got {self.leap_len}")
        if not (math.isfinite(self.max_time) and self.max_time > 0):
            raise ConfigError(f"max_time must be positive and finite, got {self.max_time}")
        if self.tolerance is not None and not self.tolerance > 0:
            raise ConfigError(f"tolerance must be positive or None, got {self.tolerance}")


@dataclass(frozen=True)
class LeapRecord:
    """One predictive leap: where it started, how far it got, how wide it was."""

    cycle: int
    start_step: int
    steps: int
    band_width_end: float
    mean_error: float | None  # relative L2 vs reference at leap end, if available


@dataclass(frozen=True)
class Snapshot:
    """State summary at a requested simulated time.

    ``source`` records whether the time fell inside a leap (predictive mean and
    quantiles) or inside a burst (exact fine state, zero-width bands).
    """

    time: float
    step: int
    source: str
    mean: np.ndarray
    quantiles: dict[float, np.ndarray]
    exact: np.ndarray | None

    def band_width(self, lo: float = 0.05, hi: float = 0.95) -> float:
        return float(np.mean(self.quantiles[hi] - self.quantiles[lo]))

    def coverage(self, lo: float = 0.05, hi: float = 0.95) -> float | None:
        """Fraction of coordinates whose reference value lies in [q_lo, q_hi]."""
        if self.exact is None:
            return None
        inside = (self.quantiles[lo] <= self.exact) & (self.exact <= self.quantiles[hi])
        return float(np.mean(inside))

    def rel_l2_error(self) -> float | None:
        if self.exact is None:
            return None
        denom = float(np.linalg.norm(self.exact))
        return float(np.linalg.norm(self.mean - self.exact)) / max(denom, 1e-300)


@dataclass
class IntegrationReport:
    dt: float
    fine_steps: int
    leaped_steps: int
    leaps: list[LeapRecord]
    snapshots: list[Snapshot]
    diagnostics: list[BlockDiagnostics]
    final_state: np.ndarray
    final_statics: StaticParams | None
    truncated: bool = False
    truncation_reason: str | None = None

    @property
    def total_steps(self) -> int:
        return self.fine_steps + self.leaped_steps

    @property
    def elapsed_time(self) -> float:
        return self.total_steps * self.dt

    @property
    def speedup(self) -> float:
        """Fine-step reduction factor: simulated steps per fine-solver step."""
        return self.total_steps / self.fine_steps

    def to_dict(self) -> dict:
        """JSON-ready summary (full fields except the statics and state arrays)."""
        return {
            "dt": self.dt,
            "fine_steps": self.fine_steps,
            "leaped_steps": self.leaped_steps,
            "total_steps": self.total_steps,
            "elapsed_time": self.elapsed_time,
            "speedup": self.speedup,
            "truncated": self.truncated,
            "truncation_reason": self.truncation_reason,
            "leaps": [
                {
                    "cycle": r.cycle,
                    "start_step": r.start_step,
                    "steps": r.steps,
                    "band_width_end": r.band_width_end,
                    "mean_error": r.mean_error,
                }
                for r in self.leaps
            ],
            "snapshots": [
                {
                    "time": s.time,
                    "step": s.step,
                    "source": s.source,
                    "band_width": s.band_width(),
                    "coverage_90": s.coverage(),
                    "rel_l2_error": s.rel_l2_error(),
                }
                for s in self.snapshots
            ],
            "blocks": [
                {
                    "block": b.block,
                    "gamma": b.gamma,
                    "per_obs_loglik": b.per_obs_loglik,
                    "per_obs_fit_loglik": b.per_obs_fit_loglik,
                    "min_ess": b.min_ess,
                    "n_resampled": b.n_resampled,
                    "n_enforcements": b.n_enforcements,
                }
                for b in self.diagnostics
            ],
        }


def _zero_width_quantiles(u: np.ndarray, levels=(0.05, 0.5, 0.95)) -> dict[float, np.ndarray]:
    return {l: u.copy() for l in levels}


def run_adaptive(
    problem,
    schedule: IntegrationSchedule,
    config: ModelConfig,
    *,
    snapshot_times: tuple[float, ...] = SNAPSHOT_TIMES,
    n_draws: int = 500,
    prior_variance: float | None = PROJECTION_PRIOR_VARIANCE,
    reference: bool = True,
    reinit: str = "mean",
) -> IntegrationReport:
    """Drive a fine-scale stepper with burst/learn/leap cycles.

    ``problem`` is a :class:`HeatProblem` or any object exposing ``dt_fine``,
    ``u0``, ``step(u) -> u`` and ``constrain(u) -> u``.  ``config.dt`` must
    equal the stepper's ``dt_fine`` (the surrogate observes every fine step).
    ``reinit`` chooses how the fine state restarts after a leap: the
    predictive posterior mean (default) or one posterior draw ("sample").

    EM failure does not raise: the report comes back truncated with the
    diagnostics gathered so far.
    """
    stepper = HeatSolver(problem) if isinstance(problem, HeatProblem) else problem
    dt = float(stepper.dt_fine)
    if not math.isclose(config.dt, dt, rel_tol=1e-12):
        raise ConfigError(f"config.dt = {config.dt} must equal the stepper's dt_fine = {dt}")
    if reinit not in ("mean", "sample"):
        raise ConfigError(f"reinit must be 'mean' or 'sample', got {reinit!r}")
    u = np.asarray(stepper.u0, dtype=float)
    if u.shape != (config.d,):
        raise ConfigError(f"stepper state has {u.shape[0]} values but config.d = {config.d}")
    max_steps = int(round(schedule.max_time / dt))
    if max_steps < 1:
        raise ConfigError("max_time shorter than one fine step")
    if schedule.leap_len > 0 and schedule.burst_len % config.L != 0:
        raise ConfigError(
            f"burst_len = {schedule.burst_len} must be a multiple of the block "
            f"length L = {config.L} so bursts yield whole blocks"
        )
    targets: dict[int, float] = {}
    for t_req in snapshot_times:
        s = int(round(t_req / dt))
        if 0 < s <= max_steps:
            targets[s] = float(t_req)
        else:
            warnings.warn(
                f"snapshot time {t_req} outside the simulated range; skipped",
                RuntimeWarning,
                stacklevel=2,
            )

    u_ref = u.copy() if reference else None
    state: EmState | None = None
    leaps: list[LeapRecord] = []
    snapshots: list[Snapshot] = []
    diagnostics: list[BlockDiagnostics] = []
    step = fine = leaped = cycle = 0
    truncated, reason = False, None

    while step < max_steps:
        cycle += 1
        # (a) fine burst ---------------------------------------------------
        n_burst = min(schedule.burst_len, max_steps - step)
        burst = np.empty((n_burst, config.d))
        for i in range(n_burst):
            u = stepper.step(u)
            if u_ref is not None:
                u_ref = stepper.step(u_ref)
            burst[i] = u
            step += 1
            fine += 1
            if step in targets:
                snapshots.append(
                    Snapshot(
                        time=targets[step],
                        step=step,
                        source="fine",
                        mean=u.copy(),
                        quantiles=_zero_width_quantiles(u),
                        exact=None if u_ref is None else u_ref.copy(),
                    )
                )
        if schedule.leap_len == 0:
            continue  # degenerate schedule: pure fine-scale run

        # (b) online EM on the burst's blocks -------------------------------
        if state is None:
            state = init_state(config, burst)
        try:
            for j in range(n_burst // config.L):
                state, diag = em_iteration(
                    state,
                    burst[j * config.L : (j + 1) * config.L],
                    prior_variance=prior_variance,
                )
                diagnostics.append(diag)
        except NumericalError as exc:
            truncated, reason = True, f"EM failed in cycle {cycle}: {exc}"
            break
        if step >= max_steps:
            break

        # (c) predictive leap ----------------------------------------------
        rng = seeded_stream(config.seed, STREAM_PREDICT, cycle)
        last_block = burst[-config.L :]
        try:
            fr = run_filter(last_block, state.statics, config, rng)
            horizon = min(schedule.leap_len, max_steps - step)
            summary = predict(fr.final_cloud, state.statics, horizon, dt, rng, n_draws)
        except NumericalError as exc:
            truncated, reason = True, f"prediction failed in cycle {cycle}: {exc}"
            break
        widths = summary.band_width()  # (horizon,)
        if schedule.tolerance is None:
            leap_steps = horizon
        else:
            ok = widths <= schedule.tolerance
            leap_steps = int(np.argmin(ok)) if not ok.all() else horizon
            if leap_steps == 0:
                warnings.warn(
                    f"predictive band {widths[0]:.3g} exceeds tolerance "
                    f"{schedule.tolerance:.3g} after a single step; falling back to "
                    "fine stepping for one burst",
                    RuntimeWarning,
                    stacklevel=2,
                )
                leaps.append(LeapRecord(cycle, step, 0, float(widths[0]), None))
                continue

        start = step
        for i in range(leap_steps):
            if u_ref is not None:
                u_ref = stepper.step(u_ref)
            if step + i + 1 in targets:
                snapshots.append(
                    Snapshot(
                        time=targets[step + i + 1],
                        step=step + i + 1,
                        source="leap",
                        mean=summary.mean[i].copy(),
                        quantiles={l: q[i].copy() for l, q in summary.quantiles.items()},
                        exact=None if u_ref is None else u_ref.copy(),
                    )
                )
        step += leap_steps
        leaped += leap_steps

        # (d) reinitialize the fine state from the predictive posterior -----
        if reinit == "mean":
            u = stepper.constrain(summary.mean[leap_steps - 1])
        else:
            u = stepper.constrain(_posterior_draw(fr, state.statics, leap_steps, dt, rng))
        err = None
        if u_ref is not None:
            err = float(
                np.linalg.norm(summary.mean[leap_steps - 1] - u_ref)
                / max(np.linalg.norm(u_ref), 1e-300)
            )
        leaps.append(LeapRecord(cycle, start, leap_steps, float(widths[leap_steps - 1]), err))

    snapshots.sort(key=lambda s: s.step)
    return IntegrationReport(
        dt=dt,
        fine_steps=fine,
        leaped_steps=leaped,
        leaps=leaps,
        snapshots=snapshots,
        diagnostics=diagnostics,
        final_state=u,
        final_statics=None if state is None else state.statics,
        truncated=truncated,
        truncation_reason=reason,
    )


def _posterior_draw(fr, statics: StaticParams, n_steps: int, dt: float, rng) -> np.ndarray:
    """One sampled future observation at the leap end (for reinit='sample')."""
    from .emission import sample_observation  # local import to avoid cycle noise
    from .membership import to_simplex
    from .prediction import _propagate, _select_particles

    zhat, x = _select_particles(fr.final_cloud, 1, rng)
    for _ in range(n_steps):
        zhat, x = _propagate(statics, zhat, x, dt, rng)
    return sample_observation(statics, to_simplex(zhat), x, rng)[0]
