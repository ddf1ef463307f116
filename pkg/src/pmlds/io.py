"""File formats: full-precision CSV for matrices/series, JSON for parameters,
checkpoints, reports, and run manifests.

CSV numbers are written with 17 significant digits so float64 values
round-trip exactly.  Checkpoint JSON is versioned; loading an unknown version
fails loudly rather than guessing.
"""
from __future__ import annotations

import csv
import json
import platform
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .em import BlockDiagnostics, EmState
from .errors import ConfigError, DataError
from .params import StaticParams
from .suffstats import EmissionSuffStats, OuSuffStats, SuffStats

__all__ = [
    "write_matrix_csv",
    "read_matrix_csv",
    "write_json",
    "read_json",
    "save_checkpoint",
    "load_checkpoint",
    "write_training_log",
    "training_log_row",
    "write_prediction_csv",
    "write_snapshot_csv",
    "write_manifest",
]

CHECKPOINT_VERSION = 1
_FMT = "%.17g"


# ---------------------------------------------------------------------------
# CSV


def write_matrix_csv(path, array: np.ndarray, header: list[str] | None = None) -> None:
    """Headerless (or single-header-row) CSV at full float64 precision."""
    array = np.atleast_2d(np.asarray(array, dtype=float))
    kw = {"header": ",".join(header), "comments": ""} if header else {}
    np.savetxt(path, array, fmt=_FMT, delimiter=",", **kw)


def read_matrix_csv(path, skip_header: bool = False) -> np.ndarray:
    """Parse a numeric CSV; ragged rows and non-finite values name the row."""
    path = Path(path)
    try:
        out = np.loadtxt(path, delimiter=",", skiprows=int(skip_header), ndmin=2)
    except ValueError:
        # produce a better message: find the first offending row
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if skip_header:
            rows = rows[1:]
        rows = [r for r in rows if r]
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            expected = len(rows[0])
            bad = next(i for i, r in enumerate(rows) if len(r) != expected)
            raise DataError(
                f"{path}: ragged CSV — row {bad} has {len(rows[bad])} columns, "
                f"expected {expected}"
            ) from None
        raise DataError(f"{path}: unparseable numeric CSV") from None
    if out.size == 0:
        raise DataError(f"{path}: empty CSV")
    finite = np.isfinite(out).all(axis=1)
    if not finite.all():
        raise DataError(
            f"{path}: non-finite value in row {int(np.argmin(finite))}"
        )
    return out


# ---------------------------------------------------------------------------
# JSON


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# checkpoints


def _ou_stats_to_dict(s: OuSuffStats) -> dict:
    return {
        "phi1": s.phi1.tolist(),
        "phi2": s.phi2.tolist(),
        "phi3": s.phi3.tolist(),
        "phi4": s.phi4.tolist(),
        "phi5": s.phi5.tolist(),
        "phi6": s.phi6.tolist(),
        "phi7": s.phi7.tolist(),
        "block_len": s.block_len,
    }


def _ou_stats_from_dict(data: dict) -> OuSuffStats:
    return OuSuffStats(
        **{f: np.array(data[f]) for f in ("phi1", "phi2", "phi3", "phi4", "phi5", "phi6", "phi7")},
        block_len=int(data["block_len"]),
    )


def _stats_to_dict(stats: SuffStats) -> dict:
    return {
        "ou_x": [_ou_stats_to_dict(s) for s in stats.ou_x],
        "ou_z": _ou_stats_to_dict(stats.ou_z),
        "emission": {
            "A": stats.emission.A.tolist(),
            "B": stats.emission.B.tolist(),
            "ysq": stats.emission.ysq.tolist(),
            "block_len": stats.emission.block_len,
        },
        "block_len": stats.block_len,
    }


def _stats_from_dict(data: dict) -> SuffStats:
    em = data["emission"]
    return SuffStats(
        ou_x=tuple(_ou_stats_from_dict(s) for s in data["ou_x"]),
        ou_z=_ou_stats_from_dict(data["ou_z"]),
        emission=EmissionSuffStats(
            A=np.array(em["A"]),
            B=np.array(em["B"]),
            ysq=np.array(em["ysq"]),
            block_len=int(em["block_len"]),
        ),
        block_len=int(data["block_len"]),
    )


def save_checkpoint(path, state: EmState) -> None:
    """Everything needed to resume training: config, statics, statistics, k."""
    write_json(
        path,
        {
            "format_version": CHECKPOINT_VERSION,
            "config": state.config.to_dict(),
            "statics": state.statics.to_dict(),
            "stats": None if state.stats is None else _stats_to_dict(state.stats),
            "block_count": state.block_count,
        },
    )


def load_checkpoint(path) -> EmState:
    data = read_json(path)
    version = data.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(
            f"{path}: checkpoint format_version {version!r} not supported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    try:
        return EmState(
            config=ModelConfig.from_dict(data["config"]),
            statics=StaticParams.from_dict(data["statics"]),
            stats=None if data["stats"] is None else _stats_from_dict(data["stats"]),
            block_count=int(data["block_count"]),
        )
    except KeyError as exc:
        raise DataError(f"{path}: malformed checkpoint, missing {exc}") from exc


# ---------------------------------------------------------------------------
# run artifacts


def write_training_log(path, rows: list[dict]) -> None:
    """Per-block log: k, gamma_k, likelihoods, b estimates, sigma2 range, wall_ms."""
    if not rows:
        raise DataError("empty training log")
    names = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in rows:
            writer.writerow([_FMT % v if isinstance(v, float) else v for v in (row[n] for n in names)])


def training_log_row(diag: BlockDiagnostics, statics: StaticParams, wall_ms: float) -> dict:
    row = {
        "k": diag.block,
        "gamma": diag.gamma,
        "per_obs_loglik": diag.per_obs_loglik,
        "per_obs_fit_loglik": diag.per_obs_fit_loglik,
    }
    for m, ou in enumerate(statics.ou_x):
        row[f"b_x_{m + 1}"] = ou.b
    row["b_z"] = statics.ou_z.b
    row["sigma2_min"] = float(statics.sigma2.min())
    row["sigma2_max"] = float(statics.sigma2.max())
    row["min_ess"] = diag.min_ess
    row["n_resampled"] = diag.n_resampled
    row["n_enforcements"] = diag.n_enforcements
    row["wall_ms"] = wall_ms
    return row


def write_prediction_csv(path, summary, config: ModelConfig) -> None:
    """Rows (t, j, mean, q05, q50, q95); header row carries a config echo."""
    levels = sorted(summary.quantiles)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config: {json.dumps(config.to_dict(), sort_keys=True)}\n")
        names = ["t", "j", "mean"] + [f"q{int(round(100 * l)):02d}" for l in levels]
        writer = csv.writer(fh)
        writer.writerow(names)
        for t in range(summary.horizon):
            for j in range(summary.mean.shape[1]):
                writer.writerow(
                    [t + 1, j, _FMT % summary.mean[t, j]]
                    + [_FMT % summary.quantiles[l][t, j] for l in levels]
                )


def write_snapshot_csv(path, snapshot) -> None:
    """Nodal rows (node, mean, q05, q50, q95[, exact]) for one snapshot time."""
    levels = sorted(snapshot.quantiles)
    names = ["node", "mean"] + [f"q{int(round(100 * l)):02d}" for l in levels]
    if snapshot.exact is not None:
        names.append("exact")
    with open(path, "w", newline="") as fh:
        fh.write(f"# time: {_FMT % snapshot.time}, step: {snapshot.step}, source: {snapshot.source}\n")
        writer = csv.writer(fh)
        writer.writerow(names)
        for j in range(snapshot.mean.shape[0]):
            row = [j, _FMT % snapshot.mean[j]] + [_FMT % snapshot.quantiles[l][j] for l in levels]
            if snapshot.exact is not None:
                row.append(_FMT % snapshot.exact[j])
            writer.writerow(row)


def write_manifest(
    out_dir,
    command: str,
    config: ModelConfig | None,
    seed: int,
    inputs: list[str],
    outputs: list[str],
    wall_time_s: float,
    extra: dict | None = None,
) -> Path:
    """One manifest.json per output directory (overwritten, never duplicated)."""
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": None if config is None else config.to_dict(),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
        "wall_time_s": wall_time_s,
        "versions": {
            "pmlds": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    path = out_dir / "manifest.json"
    write_json(path, manifest)
    return path
