"""Scikit-learn style front end.

``PartialMembershipLDS`` wraps configuration, initialization, online EM,
scoring, and prediction behind the familiar ``fit`` / ``partial_fit`` /
``predict`` / ``score`` surface so the model composes with sklearn tooling
(``clone``, ``get_params``, pipelines that pass time series as 2-D arrays).
Rows of X are time steps, columns are observed coordinates; there is no y.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .config import ModelConfig
from .em import (
    STREAM_SCORE,
    EmState,
    em_iteration,
    init_state,
    run_em,
)
from .errors import DataError
from .finescale import generate_synthetic
from .prediction import PredictiveSummary, predict
from .rng import seeded_stream
from .smc import run_filter

__all__ = ["PartialMembershipLDS"]


class PartialMembershipLDS(BaseEstimator):
    """Partial-membership mixture of OU experts for multivariate time series.

    Parameters mirror the model configuration: ``n_experts`` hidden OU
    processes of dimension ``n_factors`` each, blocks of ``block_len`` steps
    filtered with ``n_particles`` particles.  ``fit`` consumes a whole series;
    ``partial_fit`` accepts arbitrary-length chunks and buffers the remainder
    of an incomplete block internally.

    Attributes ending in an underscore exist after fitting: ``statics_`` (the
    learned parameters), ``config_``, ``history_`` (per-block diagnostics),
    ``n_features_in_``.
    """

    def __init__(
        self,
        n_experts: int = 2,
        n_factors: int = 1,
        block_len: int = 100,
        n_particles: int = 200,
        dt: float = 1.0,
        gamma_exponent: float = 0.51,
        ess_min_fraction: float = 0.5,
        n_smoother_draws: int | None = None,
        prior_variance: float | None = 100.0,
        random_state: int = 0,
    ) -> None:
        self.n_experts = n_experts
        self.n_factors = n_factors
        self.block_len = block_len
        self.n_particles = n_particles
        self.dt = dt
        self.gamma_exponent = gamma_exponent
        self.ess_min_fraction = ess_min_fraction
        self.n_smoother_draws = n_smoother_draws
        self.prior_variance = prior_variance
        self.random_state = random_state

    # -- plumbing ----------------------------------------------------------

    def _make_config(self, d: int) -> ModelConfig:
        return ModelConfig(
            M=self.n_experts,
            K=self.n_factors,
            d=d,
            dt=self.dt,
            L=self.block_len,
            N=self.n_particles,
            gamma_exponent=self.gamma_exponent,
            ess_min_fraction=self.ess_min_fraction,
            seed=self.random_state,
        )

    def _validate_series(self, X, min_rows: int = 1) -> np.ndarray:
        X = check_array(X, dtype=np.float64, ensure_min_samples=min_rows)
        if hasattr(self, "n_features_in_") and X.shape[1] != self.n_features_in_:
            raise DataError(
                f"series has {X.shape[1]} coordinates, model was fit with "
                f"{self.n_features_in_}"
            )
        return X

    # -- estimation --------------------------------------------------------

    def fit(self, X, y=None):
        """Run online EM over X in consecutive blocks of ``block_len`` rows."""
        X = check_array(X, dtype=np.float64, ensure_min_samples=self.block_len)
        self.n_features_in_ = X.shape[1]
        config = self._make_config(X.shape[1])
        state, history = run_em(
            X,
            config,
            n_draws=self.n_smoother_draws,
            prior_variance=self.prior_variance,
        )
        self.config_ = config
        self._state = state
        self.statics_ = state.statics
        self.history_ = history
        self._buffer = np.empty((0, X.shape[1]))
        return self

    def partial_fit(self, X, y=None):
        """Feed a chunk of the stream; incomplete trailing blocks are buffered."""
        first = not hasattr(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        if first:
            self.n_features_in_ = X.shape[1]
            self.config_ = self._make_config(X.shape[1])
            self._buffer = np.empty((0, X.shape[1]))
            self._state = None
            self.history_ = []
        else:
            X = self._validate_series(X)
        rows = np.concatenate([self._buffer, X], axis=0)
        if self._state is None and rows.shape[0] >= self.config_.L:
            self._state = init_state(self.config_, rows)
        n_blocks = rows.shape[0] // self.config_.L
        for j in range(n_blocks):
            self._state, diag = em_iteration(
                self._state,
                rows[j * self.config_.L : (j + 1) * self.config_.L],
                n_draws=self.n_smoother_draws,
                prior_variance=self.prior_variance,
            )
            self.history_.append(diag)
        self._buffer = rows[n_blocks * self.config_.L :]
        if self._state is not None:
            self.statics_ = self._state.statics
        return self

    # -- inference ---------------------------------------------------------

    def _condition_on(self, X: np.ndarray, stream: int):
        """Filter the trailing block of X; returns (final cloud, rng)."""
        config = self.config_
        tail = X[-config.L :] if X.shape[0] >= config.L else X
        rng = seeded_stream(config.seed, stream, X.shape[0])
        result = run_filter(tail, self.statics_, config, rng)
        return result, rng

    def predict(self, X, horizon: int = 1) -> np.ndarray:
        """Predictive-posterior mean of the next ``horizon`` rows after X."""
        return self.predict_summary(X, horizon).mean

    def predict_summary(
        self, X, horizon: int = 1, n_draws: int = 500, levels=(0.05, 0.5, 0.95)
    ) -> PredictiveSummary:
        """Full predictive summary (mean + quantile bands) after the end of X.

        Conditions on the trailing ``block_len`` rows of X (the split-data
        model treats earlier blocks as independent).
        """
        check_is_fitted(self, "statics_")
        X = self._validate_series(X)
        result, rng = self._condition_on(X, STREAM_SCORE)
        return predict(
            result.final_cloud,
            self.statics_,
            horizon,
            self.config_.dt,
            rng,
            n_draws=n_draws,
            levels=tuple(levels),
        )

    def score(self, X, y=None) -> float:
        """Mean per-observation split-data log-evidence of X under the fit."""
        check_is_fitted(self, "statics_")
        X = self._validate_series(X, min_rows=1)
        config = self.config_
        total, count = 0.0, 0
        n_blocks = max(X.shape[0] // config.L, 1)
        for j in range(n_blocks):
            block = X[j * config.L : (j + 1) * config.L]
            rng = seeded_stream(config.seed, STREAM_SCORE, j)
            total += run_filter(block, self.statics_, config, rng).log_evidence
            count += block.shape[0]
        return total / count

    def sample(self, n_steps: int, seed: int | None = None):
        """Generate a synthetic series from the fitted parameters."""
        check_is_fitted(self, "statics_")
        rng = seeded_stream(self.random_state if seed is None else seed, STREAM_SCORE)
        return generate_synthetic(n_steps, rng, statics=self.statics_, dt=self.config_.dt)
