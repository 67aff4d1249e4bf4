"""GP-SSM model definition, datasets and forward simulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .kernels import CovFunction, Hyperparameters, HyperPriors, MeanFunction

LOG_2PI = float(np.log(2 * np.pi))


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MeasurementModel:
    """Gaussian observation model with a known observation map.

    ``quadratic``: y = d * x**2 + e (elementwise, n_y = n_x), ``params`` is d.
    ``linear``: y = C x + e, ``params`` is C with shape (n_y, n_x).
    The noise variances r are hyperparameters and passed in per call.
    """

    kind: str
    params: np.ndarray

    def __post_init__(self):
        if self.kind not in ("quadratic", "linear"):
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        p = np.asarray(self.params, dtype=float)
        p = np.atleast_1d(p) if self.kind == "quadratic" else np.atleast_2d(p)
        object.__setattr__(self, "params", p)

    @property
    def obs_dim(self) -> int:
        return self.params.shape[0]

    @property
    def state_dim(self) -> int:
        return self.params.shape[0] if self.kind == "quadratic" else self.params.shape[1]

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "quadratic":
            return self.params * x**2
        return x @ self.params.T

    def loglik(self, y, x, r) -> np.ndarray:
        """log p(y | x) for a batch of states ``x`` with shape (..., n_x)."""
        r = np.asarray(r, dtype=float)
        if np.any(~(r > 0)):
            raise ValueError("measurement noise variance must be positive")
        resid = np.asarray(y, dtype=float) - self.predict(x)
        return -0.5 * np.sum(LOG_2PI + np.log(r) + resid**2 / r, axis=-1)

    def sample(self, x, r, rng) -> np.ndarray:
        mu = self.predict(x)
        return mu + np.sqrt(r) * rng.standard_normal(mu.shape)

    @property
    def is_even(self) -> bool:
        return self.kind == "quadratic"


def measurement_loglik(model: "GpSsmModel", y_t, x_t, r) -> float:
    """Exact Gaussian log-density of one observation."""
    return float(model.measurement.loglik(y_t, np.asarray(x_t, dtype=float), r))


@dataclass(frozen=True)
class GpSsmModel:
    """Structure of a GP state-space model and its hyperparameter priors.

    The transition is ``x_{t+1} = f(x_t, u_t) + v_t`` with ``f`` a GP over the
    concatenated input ``(x_t, u_t)``; ``x_0 ~ N(x0_mean, diag(x0_var))``.
    ``theta0`` holds the starting hyperparameters (prior medians unless given).
    """

    state_dim: int
    input_dim: int
    mean_fn: MeanFunction
    measurement: MeasurementModel
    priors: HyperPriors
    x0_mean: np.ndarray = None
    x0_var: np.ndarray = None
    theta0: Optional[Hyperparameters] = None

    def __post_init__(self):
        n_x = self.state_dim
        if n_x < 1 or self.input_dim < 0:
            raise ValueError("state_dim must be >= 1 and input_dim >= 0")
        if self.mean_fn.state_dim != n_x or self.mean_fn.input_dim != self.input_dim:
            raise ValueError("mean function dimensions do not match the model")
        if self.measurement.state_dim != n_x:
            raise ValueError("measurement model state dimension does not match")
        m0 = np.zeros(n_x) if self.x0_mean is None else np.asarray(self.x0_mean, float)
        v0 = np.ones(n_x) if self.x0_var is None else np.asarray(self.x0_var, float)
        m0 = np.broadcast_to(m0, (n_x,)).copy()
        v0 = np.broadcast_to(v0, (n_x,)).copy()
        if np.any(v0 <= 0):
            raise ValueError("initial state variance must be positive")
        object.__setattr__(self, "x0_mean", m0)
        object.__setattr__(self, "x0_var", v0)
        self.priors.check(Hyperparameters.layout(n_x, self.n_in, self.obs_dim))
        if self.theta0 is None:
            object.__setattr__(
                self, "theta0", self.priors.medians(n_x, self.n_in, self.obs_dim)
            )
        elif self.theta0.names() != Hyperparameters.layout(n_x, self.n_in, self.obs_dim):
            raise ValueError("theta0 layout does not match the model")

    @property
    def obs_dim(self) -> int:
        return self.measurement.obs_dim

    @property
    def n_in(self) -> int:
        return self.state_dim + self.input_dim

    @property
    def cov_fn(self) -> CovFunction:
        return self.theta0.cov()

    @property
    def process_noise(self) -> np.ndarray:
        return np.diag(self.theta0.q)

    def gp_inputs(self, x, inputs) -> np.ndarray:
        """Stack ``(x_t, u_t)`` rows for as many steps as ``x`` has."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        if self.input_dim == 0:
            return x.copy()
        u = np.asarray(inputs, dtype=float)[:n]
        return np.hstack([x, u.reshape(n, self.input_dim)])

    def log_p_x0(self, x0) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        z = (x0 - self.x0_mean) ** 2 / self.x0_var
        return -0.5 * np.sum(LOG_2PI + np.log(self.x0_var) + z, axis=-1)

    def sample_x0(self, n: int, rng) -> np.ndarray:
        return self.x0_mean + np.sqrt(self.x0_var) * rng.standard_normal((n, self.state_dim))

    @property
    def is_sign_symmetric(self) -> bool:
        """Posterior invariant under x -> -x for the whole trajectory."""
        return (
            self.mean_fn.is_odd
            and self.measurement.is_even
            and not np.any(self.x0_mean)
        )


@dataclass
class Dataset:
    """One trajectory's worth of data, indexed t = 0..T.

    ``inputs`` has T+1 rows for a rectangular file layout; the last row is
    never used by the dynamics. ``f_values`` holds f(x_t, u_t) when known.
    """

    inputs: np.ndarray
    observations: np.ndarray
    states: Optional[np.ndarray] = None
    f_values: Optional[np.ndarray] = None

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        n = self.observations.shape[0]
        inputs = np.asarray(self.inputs, dtype=float)
        self.inputs = inputs.reshape(n, -1) if inputs.size else np.zeros((n, 0))
        for name in ("states", "f_values"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                setattr(self, name, v.reshape(n, -1))
        arrays = [self.inputs, self.observations, self.states, self.f_values]
        for a in arrays:
            if a is not None and a.shape[0] != n:
                raise ValueError("dataset arrays have inconsistent lengths")
            if a is not None and not np.all(np.isfinite(a)):
                raise ValueError("dataset contains missing or non-finite entries")

    @property
    def T(self) -> int:
        return self.observations.shape[0] - 1


@dataclass(frozen=True)
class KnownSystem:
    """A state-space model with a fixed, known transition function."""

    transition: MeanFunction
    q: np.ndarray
    measurement: MeasurementModel
    r: np.ndarray
    x0_mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    x0_var: np.ndarray = field(default_factory=lambda: np.ones(1))
    input_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def inputs(self, T: int) -> np.ndarray:
        n_u = self.transition.input_dim
        if n_u == 0:
            return np.zeros((T + 1, 0))
        if self.input_fn is None:
            raise ValueError("system has inputs but no input law")
        return np.asarray(self.input_fn(np.arange(T + 1)), dtype=float).reshape(T + 1, n_u)

    def f(self, x, u) -> np.ndarray:
        return self.transition(x, u)


def simulate(system: KnownSystem, T: int, seed: int, inputs=None) -> Dataset:
    """Draw x_{0:T}, y_{0:T} from ``system`` with a dedicated RNG."""
    if T < 1:
        raise ValueError("T must be positive")
    rng = np.random.default_rng(seed)
    n_x = system.transition.state_dim
    u = system.inputs(T) if inputs is None else np.asarray(inputs, float).reshape(T + 1, -1)
    q = np.broadcast_to(np.asarray(system.q, float), (n_x,))
    r = np.broadcast_to(np.asarray(system.r, float), (system.measurement.obs_dim,))
    x0_mean = np.broadcast_to(np.asarray(system.x0_mean, float), (n_x,))
    x0_var = np.broadcast_to(np.asarray(system.x0_var, float), (n_x,))

    x = np.empty((T + 1, n_x))
    f = np.empty((T + 1, n_x))
    x[0] = x0_mean + np.sqrt(x0_var) * rng.standard_normal(n_x)
    for t in range(T + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            f[t] = system.f(x[t], u[t])
        if not np.all(np.isfinite(f[t])):
            raise SimulationError(f"non-finite state at t={t}: {x[t]}")
        if t < T:
            x[t + 1] = f[t] + np.sqrt(q) * rng.standard_normal(n_x)
    noise = rng.standard_normal((T + 1, system.measurement.obs_dim))
    y = system.measurement.predict(x) + np.sqrt(r) * noise
    return Dataset(inputs=u, observations=y, states=x, f_values=f)
