"""Fine-scale data generators.

Two sources of "truth" live here: the model's own sampler (for identification
studies against known parameters) and a 1-D transient-heat finite-element
solver (the multiscale demonstration).  The heat solver uses linear elements,
a consistent mass matrix, and backward Euler in time — an unconditionally
stable choice, since the explicit stability bound at the default step and
element sizes would be violated by three orders of magnitude.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .emission import emission_mean
from .errors import ConfigError, DataError
from .membership import to_simplex
from .ou import sample_stationary, sample_transition
from .params import OuParams, StaticParams

__all__ = [
    "two_timescale_statics",
    "SyntheticData",
    "generate_synthetic",
    "HeatProblem",
    "build_heat_problem",
    "HeatSolver",
    "heat_step",
    "heat_trajectory",
]


# ---------------------------------------------------------------------------
# synthetic sampler


def two_timescale_statics(rng: np.random.Generator, d: int = 10) -> StaticParams:
    """Reference generative parameters: one slow and one fast scalar expert.

    (b, q, S) = (0.1, -5, 0.2) and (1.0, +5, 2.0); isotropic driver with
    b_z = 1, q_z = 0, S_z = 10 I; projection entries ~ N(0, 100); noise
    variance 0.01 per coordinate.  Only the projections are random.
    """
    ou_x = (
        OuParams(0.1, np.array([-5.0]), np.array([[0.2]])),
        OuParams(1.0, np.array([+5.0]), np.array([[2.0]])),
    )
    ou_z = OuParams(1.0, np.zeros(2), 10.0 * np.eye(2))
    p = tuple(10.0 * rng.standard_normal((d, 1)) for _ in range(2))
    return StaticParams(ou_x=ou_x, ou_z=ou_z, P=p, sigma2=np.full(d, 0.01))


@dataclass(frozen=True)
class SyntheticData:
    """Sampled observations plus the latent paths and parameters that made them."""

    ys: np.ndarray  # (T, d)
    X: np.ndarray  # (T, M*K)
    zhat: np.ndarray  # (T, M)
    statics: StaticParams

    @property
    def z(self) -> np.ndarray:
        return to_simplex(self.zhat)


def generate_synthetic(
    n_steps: int,
    rng: np.random.Generator,
    statics: StaticParams | None = None,
    dt: float = 1.0,
) -> SyntheticData:
    """Draw a length-``n_steps`` series from the generative model.

    The first latent state is stationary, so the whole path is too.  Draw
    order per step: driver, experts in order, then observation noise.
    """
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    if statics is None:
        statics = two_timescale_statics(rng)
    m, k, d = statics.M, statics.K, statics.d
    zhat = np.empty((n_steps, m))
    x = np.empty((n_steps, m * k))
    zhat[0] = sample_stationary(statics.ou_z, rng)
    for j, ou in enumerate(statics.ou_x):
        x[0, j * k : (j + 1) * k] = sample_stationary(ou, rng)
    for t in range(1, n_steps):
        zhat[t] = sample_transition(statics.ou_z, zhat[t - 1], dt, rng)
        for j, ou in enumerate(statics.ou_x):
            sl = slice(j * k, (j + 1) * k)
            x[t, sl] = sample_transition(ou, x[t - 1, sl], dt, rng)
    mean = emission_mean(statics, to_simplex(zhat), x)  # (T, d)
    ys = mean + rng.standard_normal((n_steps, d)) * np.sqrt(statics.sigma2)
    return SyntheticData(ys=ys, X=x, zhat=zhat, statics=statics)


# ---------------------------------------------------------------------------
# 1-D transient heat


@dataclass(frozen=True, eq=False)
class HeatProblem:
    """du/dt = d/dx(a(x) du/dx) on (0,1), u(0)=u(1)=0, on a uniform mesh.

    ``conductivity`` holds one value per element; ``u0`` one value per node
    (length n_elements + 1) with zero boundary entries.
    """

    n_elements: int
    conductivity: np.ndarray
    dt_fine: float
    u0: np.ndarray
    lumped_mass: bool = False

    def __post_init__(self) -> None:
        n = self.n_elements
        if n < 2:
            raise ConfigError(f"need at least 2 elements, got {n}")
        cond = np.asarray(self.conductivity, dtype=float).reshape(-1)
        u0 = np.asarray(self.u0, dtype=float).reshape(-1)
        if cond.shape[0] != n or np.any(cond <= 0) or not np.all(np.isfinite(cond)):
            raise ConfigError("conductivity must hold one positive value per element")
        if u0.shape[0] != n + 1 or not np.all(np.isfinite(u0)):
            raise ConfigError(f"u0 must hold {n + 1} finite nodal values")
        if u0[0] != 0.0 or u0[-1] != 0.0:
            raise ConfigError("u0 must vanish at both boundaries")
        if not self.dt_fine > 0:
            raise ConfigError(f"dt_fine must be positive, got {self.dt_fine}")
        object.__setattr__(self, "conductivity", cond)
        object.__setattr__(self, "u0", u0)

    @property
    def d(self) -> int:
        return self.n_elements + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_elements + 1)

    def to_dict(self) -> dict:
        return {
            "n_elements": self.n_elements,
            "conductivity": self.conductivity.tolist(),
            "dt_fine": self.dt_fine,
            "u0": self.u0.tolist(),
            "lumped_mass": self.lumped_mass,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HeatProblem":
        try:
            return cls(
                n_elements=int(data["n_elements"]),
                conductivity=np.array(data["conductivity"], dtype=float),
                dt_fine=float(data["dt_fine"]),
                u0=np.array(data["u0"], dtype=float),
                lumped_mass=bool(data.get("lumped_mass", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed heat-problem record: {exc}") from exc


def build_heat_problem(
    rng: np.random.Generator,
    n_elements: int = 1000,
    dt_fine: float = 1e-4,
    lumped_mass: bool = False,
) -> HeatProblem:
    """Random two-material rod: slow half a ~ U[0.01, 0.1] on x <= 1/2, fast
    half a ~ U[0.51, 0.6] beyond; u0 = 10 x (1-x) (1 + 0.1 Z) with iid
    standard-normal nodal perturbations Z (boundaries exactly zero).
    """
    centers = (np.arange(n_elements) + 0.5) / n_elements
    slow = rng.uniform(0.01, 0.1, size=n_elements)
    fast = rng.uniform(0.51, 0.6, size=n_elements)
    cond = np.where(centers <= 0.5, slow, fast)
    x = np.linspace(0.0, 1.0, n_elements + 1)
    u0 = 10.0 * x * (1.0 - x) * (1.0 + 0.1 * rng.standard_normal(n_elements + 1))
    u0[0] = u0[-1] = 0.0
    return HeatProblem(
        n_elements=n_elements, conductivity=cond, dt_fine=dt_fine, u0=u0, lumped_mass=lumped_mass
    )


class HeatSolver:
    """Prefactored backward-Euler stepper for a :class:`HeatProblem`.

    The interior tridiagonal operator M + dt K is Cholesky-factored once in
    banded form; each step is a mass matvec plus two banded triangular solves.
    ``step`` is a pure function of the nodal vector, so one solver can drive
    any number of independent trajectories of the same problem.
    """

    def __init__(self, problem: HeatProblem) -> None:
        self.problem = problem
        n = problem.n_elements
        h = 1.0 / n
        a = problem.conductivity
        # interior nodes i = 1..n-1: stiffness K and mass M tridiagonals
        k_diag = (a[:-1] + a[1:]) / h  # (n-1,)
        k_off = -a[1:-1] / h  # (n-2,) couples nodes i, i+1
        if problem.lumped_mass:
            m_diag, m_off = np.full(n - 1, h), np.zeros(n - 2)
        else:
            m_diag, m_off = np.full(n - 1, 2.0 * h / 3.0), np.full(n - 2, h / 6.0)
        self._m_diag, self._m_off = m_diag, m_off
        ab = np.zeros((2, n - 1))
        ab[1] = m_diag + problem.dt_fine * k_diag
        ab[0, 1:] = m_off + problem.dt_fine * k_off
        self._cb = cholesky_banded(ab)  # SPD by construction

    # adaptive-integration stepper interface ------------------------------
    @property
    def dt_fine(self) -> float:
        return self.problem.dt_fine

    @property
    def u0(self) -> np.ndarray:
        return self.problem.u0.copy()

    def step(self, u: np.ndarray) -> np.ndarray:
        """One implicit step; boundaries re-pinned to zero."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.problem.n_elements + 1,):
            raise DataError(
                f"state must have {self.problem.n_elements + 1} nodal values, got {u.shape}"
            )
        ui = u[1:-1]
        rhs = self._m_diag * ui
        if not self.problem.lumped_mass:
            rhs[:-1] += self._m_off * ui[1:]
            rhs[1:] += self._m_off * ui[:-1]
        out = np.zeros_like(u)
        out[1:-1] = cho_solve_banded((self._cb, False), rhs)
        return out

    def constrain(self, u: np.ndarray) -> np.ndarray:
        """Project a proposed state onto the fine model's constraints."""
        u = np.asarray(u, dtype=float).copy()
        u[0] = u[-1] = 0.0
        return u


_SOLVERS: "weakref.WeakKeyDictionary[HeatProblem, HeatSolver]" = weakref.WeakKeyDictionary()


def _solver_for(problem: HeatProblem) -> HeatSolver:
    solver = _SOLVERS.get(problem)
    if solver is None:
        solver = _SOLVERS[problem] = HeatSolver(problem)
    return solver


def heat_step(state: np.ndarray, problem: HeatProblem) -> np.ndarray:
    """One backward-Euler step (factorization cached per problem instance)."""
    return _solver_for(problem).step(state)


def heat_trajectory(problem: HeatProblem, n_steps: int) -> np.ndarray:
    """States u_0..u_{n_steps} of the pure fine run, shape (n_steps+1, d)."""
    if n_steps < 0:
        raise ConfigError(f"n_steps must be >= 0, got {n_steps}")
    solver = _solver_for(problem)
    out = np.empty((n_steps + 1, problem.d))
    out[0] = problem.u0
    for t in range(n_steps):
        out[t + 1] = solver.step(out[t])
    return out
