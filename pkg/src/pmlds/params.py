"""Parameter containers and Gaussian utilities."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "Gaussian",
    "OuParams",
    "LatentState",
    "StaticParams",
    "sym_sqrt",
    "validate_spd",
]

_EIG_FLOOR_REL = 1e-12  # negative eigenvalues beyond this (relative to trace) raise


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigError(f"{name} must be a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} contains non-finite entries")
    return a


def _check_symmetric(a: np.ndarray, name: str) -> np.ndarray:
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > 1e-12 * scale:
        raise ConfigError(f"{name} is not symmetric within 1e-12 relative tolerance")
    return 0.5 * (a + a.T)


def sym_sqrt(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues are floored at zero; a negative eigenvalue below
    ``-1e-12 * trace`` means the input is not a covariance and raises.
    """
    a = _check_symmetric(_as_matrix(a, name), name)
    w, v = np.linalg.eigh(a)
    tol = _EIG_FLOOR_REL * max(float(np.trace(a)), 1.0)
    if w.min(initial=0.0) < -tol:
        raise NumericalError(
            f"{name} has eigenvalue {w.min():.3e} below the PSD floor (-{tol:.1e})"
        )
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def validate_spd(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate symmetry and strict positive definiteness; return symmetrized copy."""
    a = _check_symmetric(_as_matrix(a, name), name)
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise ConfigError(f"{name} is not positive definite") from exc
    return a


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal with validated (possibly singular) covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = _check_symmetric(_as_matrix(self.cov, "cov"), "cov")
        if cov.shape[0] != mean.shape[0]:
            raise ConfigError(
                f"mean/cov dimension mismatch: {mean.shape[0]} vs {cov.shape[0]}"
            )
        w = np.linalg.eigvalsh(cov)
        tol = _EIG_FLOOR_REL * max(float(np.trace(cov)), 1.0)
        if w.min(initial=0.0) < -tol:
            raise NumericalError(f"cov has eigenvalue {w.min():.3e} below the PSD floor")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class OuParams:
    """Ornstein-Uhlenbeck parameters dx = -b (x - q) dt + S^{1/2} dW.

    b : scalar rate, strictly positive
    q : asymptotic mean, shape (n,)
    S : diffusion covariance, SPD, shape (n, n)
    """

    b: float
    q: np.ndarray
    S: np.ndarray

    def __post_init__(self) -> None:
        b = float(self.b)
        if not (np.isfinite(b) and b > 0):
            raise ConfigError(f"OU rate b must be positive and finite, got {b!r}")
        q = np.asarray(self.q, dtype=float).reshape(-1)
        if not np.all(np.isfinite(q)):
            raise ConfigError("OU mean q contains non-finite entries")
        S = validate_spd(np.asarray(self.S, dtype=float), "S")
        if S.shape[0] != q.shape[0]:
            raise ConfigError(f"q/S dimension mismatch: {q.shape[0]} vs {S.shape[0]}")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "S", S)

    @property
    def dim(self) -> int:
        return self.q.shape[0]


@dataclass(frozen=True)
class LatentState:
    """Joint latent state at one time: stacked expert states and membership driver."""

    X: np.ndarray     # (M*K,) expert states, expert-major order
    zhat: np.ndarray  # (M,) membership driver

    def __post_init__(self) -> None:
        object.__setattr__(self, "X", np.asarray(self.X, dtype=float).reshape(-1))
        object.__setattr__(self, "zhat", np.asarray(self.zhat, dtype=float).reshape(-1))


@dataclass(frozen=True)
class StaticParams:
    """All static model parameters.

    ou_x : per-expert OU parameters, length M, each of dimension K
    ou_z : OU parameters of the membership driver, dimension M
    P : per-expert projection matrices, length M, each (d, K)
    sigma2 : observation noise variances, (d,), all > 0
    """

    ou_x: tuple
    ou_z: OuParams
    P: tuple
    sigma2: np.ndarray

    def __post_init__(self) -> None:
        ou_x = tuple(self.ou_x)
        if not ou_x:
            raise ConfigError("need at least one expert")
        K = ou_x[0].dim
        if any(p.dim != K for p in ou_x):
            raise ConfigError("all experts must share the latent dimension K")
        if self.ou_z.dim != len(ou_x):
            raise ConfigError(
                f"ou_z dimension {self.ou_z.dim} != number of experts {len(ou_x)}"
            )
        P = tuple(np.asarray(p, dtype=float) for p in self.P)
        if len(P) != len(ou_x):
            raise ConfigError(f"{len(P)} projection matrices for {len(ou_x)} experts")
        d = P[0].shape[0]
        for m, p in enumerate(P):
            if p.ndim != 2 or p.shape != (d, K):
                raise ConfigError(f"P[{m}] must have shape ({d}, {K}), got {p.shape}")
            if not np.all(np.isfinite(p)):
                raise ConfigError(f"P[{m}] contains non-finite entries")
        sigma2 = np.asarray(self.sigma2, dtype=float).reshape(-1)
        if sigma2.shape[0] != d or not np.all(np.isfinite(sigma2)) or np.any(sigma2 <= 0):
            raise ConfigError("sigma2 must be length-d, finite and strictly positive")
        object.__setattr__(self, "ou_x", ou_x)
        object.__setattr__(self, "ou_z", self.ou_z)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def M(self) -> int:
        return len(self.ou_x)

    @property
    def K(self) -> int:
        return self.ou_x[0].dim

    @property
    def d(self) -> int:
        return self.P[0].shape[0]

    def p_full(self) -> np.ndarray:
        """Concatenated projection [P(1) ... P(M)], shape (d, M*K)."""
        return np.concatenate(self.P, axis=1)

    # -- serialization (JSON checkpoints) ---------------------------------

    def to_dict(self) -> dict:
        return {
            "ou_x": [
                {"b": p.b, "q": p.q.tolist(), "S": p.S.tolist()} for p in self.ou_x
            ],
            "ou_z": {"b": self.ou_z.b, "q": self.ou_z.q.tolist(), "S": self.ou_z.S.tolist()},
            "P": [p.tolist() for p in self.P],
            "sigma2": self.sigma2.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StaticParams":
        try:
            ou_x = tuple(OuParams(p["b"], p["q"], p["S"]) for p in data["ou_x"])
            ou_z = OuParams(data["ou_z"]["b"], data["ou_z"]["q"], data["ou_z"]["S"])
            return cls(ou_x, ou_z, tuple(np.array(p) for p in data["P"]), data["sigma2"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed static-parameter record: {exc}") from exc
