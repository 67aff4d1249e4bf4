"""Covariance and mean functions for the GP prior over the transition.

The multi-output GP is a stack of independent scalar GPs, one per state
dimension, each with its own SE-ARD hyperparameters over the joint
(state, input) space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JITTER = 1e-8

MEAN_KINDS = ("zero", "identity-linear", "benchmark-parametric")


@dataclass(frozen=True)
class CovFunction:
    """Squared-exponential ARD kernel, one per output dimension.

    Attributes:
        signal_var: (n_x,) signal variances.
        lengthscales: (n_x, n_in) lengthscales over the concatenated
            GP input ``(x, u)``.
    """

    signal_var: np.ndarray
    lengthscales: np.ndarray

    def __post_init__(self):
        sv = np.atleast_1d(np.asarray(self.signal_var, dtype=float))
        ell = np.atleast_2d(np.asarray(self.lengthscales, dtype=float))
        if ell.shape[0] != sv.shape[0]:
            raise ValueError(
                f"lengthscales rows ({ell.shape[0]}) != outputs ({sv.shape[0]})"
            )
        if np.any(sv <= 0) or np.any(ell <= 0):
            raise ValueError("signal variances and lengthscales must be positive")
        object.__setattr__(self, "signal_var", sv)
        object.__setattr__(self, "lengthscales", ell)

    @property
    def n_out(self) -> int:
        return self.signal_var.shape[0]

    @property
    def n_in(self) -> int:
        return self.lengthscales.shape[1]

    @property
    def jitter(self) -> np.ndarray:
        return JITTER * self.signal_var

    def __call__(self, Z1, Z2) -> np.ndarray:
        """Gram matrices, shape (n_x, n1, n2)."""
        Z1 = np.atleast_2d(np.asarray(Z1, dtype=float))
        Z2 = np.atleast_2d(np.asarray(Z2, dtype=float))
        if Z1.shape[1] != self.n_in or Z2.shape[1] != self.n_in:
            raise ValueError(
                f"expected inputs of width {self.n_in}, "
                f"got {Z1.shape[1]} and {Z2.shape[1]}"
            )
        out = np.empty((self.n_out, Z1.shape[0], Z2.shape[0]))
        for d in range(self.n_out):
            A = Z1 / self.lengthscales[d]
            B = Z2 / self.lengthscales[d]
            sq = (
                np.sum(A**2, 1)[:, None]
                + np.sum(B**2, 1)[None, :]
                - 2.0 * A @ B.T
            )
            np.maximum(sq, 0.0, out=sq)
            out[d] = self.signal_var[d] * np.exp(-0.5 * sq)
        return out

    def diag(self, Z) -> np.ndarray:
        """k(z, z) for each row, shape (n_x, n)."""
        n = np.atleast_2d(Z).shape[0]
        return np.repeat(self.signal_var[:, None], n, axis=1)


def cov_eval(cov: CovFunction, z_i, z_j) -> np.ndarray:
    """Diagonal (n_x, n_x) covariance block between two GP inputs."""
    z_i = np.asarray(z_i, dtype=float).ravel()
    z_j = np.asarray(z_j, dtype=float).ravel()
    if z_i.shape != z_j.shape:
        raise ValueError(f"dimension mismatch: {z_i.shape} vs {z_j.shape}")
    return np.diag(cov(z_i[None], z_j[None])[:, 0, 0])


@dataclass(frozen=True)
class MeanFunction:
    """Deterministic prior mean of the transition, (x, u) -> R^{n_x}.

    ``benchmark-parametric`` is ``a x + b x / (1 + x^2) + c u`` with
    ``params = (a, b, c)``; it needs a scalar state and at most one input.
    """

    kind: str
    state_dim: int
    input_dim: int = 0
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in MEAN_KINDS:
            raise ValueError(f"unknown mean kind {self.kind!r}")
        if self.kind == "benchmark-parametric":
            if len(self.params) != 3:
                raise ValueError("benchmark-parametric mean needs params (a, b, c)")
            if self.state_dim != 1 or self.input_dim > 1:
                raise ValueError(
                    "benchmark-parametric mean needs n_x = 1 and n_u <= 1"
                )
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def __call__(self, x, u=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.state_dim:
            raise ValueError(f"state has width {x.shape[-1]}, expected {self.state_dim}")
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "identity-linear":
            return x.copy()
        a, b, c = self.params
        out = a * x + b * x / (1.0 + x**2)
        if self.input_dim and c != 0.0:
            u = np.asarray(u, dtype=float)
            out = out + c * u[..., :1]
        return out

    def on_inputs(self, Z) -> np.ndarray:
        """Evaluate on concatenated GP inputs ``z = (x, u)``."""
        Z = np.asarray(Z, dtype=float)
        return self(Z[..., : self.state_dim], Z[..., self.state_dim :])

    @property
    def is_odd(self) -> bool:
        """True if m(-x, u) = -m(x, u) for all u."""
        if self.kind == "benchmark-parametric":
            return self.params[2] == 0.0 or self.input_dim == 0
        return True


def mean_eval(mean: MeanFunction, x, u=None) -> np.ndarray:
    """Evaluate the configured mean at a single (x, u)."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.zeros(0) if u is None else np.asarray(u, dtype=float).ravel()
    if u.shape[0] != mean.input_dim:
        raise ValueError(f"input has width {u.shape[0]}, expected {mean.input_dim}")
    return mean(x, u)


@dataclass(frozen=True)
class Hyperparameters:
    """Log-space hyperparameter vector.

    Layout of :meth:`pack`: log lengthscales (row-major over state dim,
    input coordinate), log signal variances, log process-noise variances,
    log measurement-noise variances.
    """

    log_lengthscales: np.ndarray
    log_signal_var: np.ndarray
    log_q: np.ndarray
    log_r: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("log_lengthscales", "log_signal_var", "log_q", "log_r"):
            v = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        object.__setattr__(
            self, "log_lengthscales", np.atleast_2d(self.log_lengthscales)
        )
        object.__setattr__(self, "log_r", np.atleast_1d(self.log_r))

    @property
    def n_x(self) -> int:
        return self.log_signal_var.shape[0]

    @property
    def n_in(self) -> int:
        return self.log_lengthscales.shape[1]

    @property
    def n_y(self) -> int:
        return self.log_r.shape[0]

    @property
    def q(self) -> np.ndarray:
        return np.exp(self.log_q)

    @property
    def r(self) -> np.ndarray:
        return np.exp(self.log_r)

    def cov(self) -> CovFunction:
        return CovFunction(np.exp(self.log_signal_var), np.exp(self.log_lengthscales))

    @staticmethod
    def layout(n_x: int, n_in: int, n_y: int) -> list[str]:
        names = [f"log_lengthscale[{d},{j}]" for d in range(n_x) for j in range(n_in)]
        names += [f"log_signal_var[{d}]" for d in range(n_x)]
        names += [f"log_q[{d}]" for d in range(n_x)]
        names += [f"log_r[{k}]" for k in range(n_y)]
        return names

    def names(self) -> list[str]:
        return self.layout(self.n_x, self.n_in, self.n_y)

    def pack(self) -> np.ndarray:
        return np.concatenate(
            [self.log_lengthscales.ravel(), self.log_signal_var, self.log_q, self.log_r]
        )

    @classmethod
    def unpack(cls, vec, n_x: int, n_in: int, n_y: int) -> "Hyperparameters":
        vec = np.asarray(vec, dtype=float)
        expected = n_x * n_in + 2 * n_x + n_y
        if vec.shape != (expected,):
            raise ValueError(f"expected {expected} values, got shape {vec.shape}")
        i = n_x * n_in
        return cls(
            vec[:i].reshape(n_x, n_in),
            vec[i : i + n_x],
            vec[i + n_x : i + 2 * n_x],
            vec[i + 2 * n_x :],
        )

    def to_dict(self) -> dict[str, float]:
        return dict(zip(self.names(), map(float, self.pack())))

    @classmethod
    def from_dict(cls, values: dict, n_x: int, n_in: int, n_y: int) -> "Hyperparameters":
        names = cls.layout(n_x, n_in, n_y)
        missing = [n for n in names if n not in values]
        if missing:
            raise KeyError(f"missing hyperparameters: {missing}")
        return cls.unpack([values[n] for n in names], n_x, n_in, n_y)

    def x_block(self, d: int) -> np.ndarray:
        """Indices into :meth:`pack` of the parameters of output ``d``."""
        n_x, n_in = self.n_x, self.n_in
        ls = [d * n_in + j for j in range(n_in)]
        return np.array(ls + [n_x * n_in + d, n_x * n_in + n_x + d])

    def y_block(self) -> np.ndarray:
        start = self.n_x * self.n_in + 2 * self.n_x
        return np.arange(start, start + self.n_y)

    def replace(self, **kw) -> "Hyperparameters":
        vals = dict(
            log_lengthscales=self.log_lengthscales,
            log_signal_var=self.log_signal_var,
            log_q=self.log_q,
            log_r=self.log_r,
        )
        vals.update(kw)
        return Hyperparameters(**vals)


@dataclass(frozen=True)
class LogNormalPrior:
    """Gaussian prior on a log-hyperparameter; ``log_sd == 0`` pins it."""

    median: float
    log_sd: float

    def __post_init__(self):
        if not self.median > 0:
            raise ValueError("log-normal median must be positive")
        if self.log_sd < 0:
            raise ValueError("log_sd must be nonnegative")

    @property
    def loc(self) -> float:
        return float(np.log(self.median))

    @property
    def fixed(self) -> bool:
        return self.log_sd == 0

    def logpdf(self, log_value: float) -> float:
        if self.fixed:
            return 0.0 if log_value == self.loc else -np.inf
        z = (log_value - self.loc) / self.log_sd
        return float(-0.5 * z * z - np.log(self.log_sd) - 0.5 * np.log(2 * np.pi))

    def sample(self, rng) -> float:
        return self.loc if self.fixed else self.loc + self.log_sd * rng.standard_normal()


class HyperPriors(dict):
    """Mapping from hyperparameter name to :class:`LogNormalPrior`."""

    def check(self, names) -> None:
        names = list(names)
        missing = [n for n in names if n not in self]
        extra = [n for n in self if n not in names]
        if missing or extra:
            raise ValueError(
                f"priors must cover each hyperparameter once; "
                f"missing={missing} unknown={extra}"
            )

    def logpdf(self, theta: Hyperparameters) -> float:
        return float(sum(self[n].logpdf(v) for n, v in zip(theta.names(), theta.pack())))

    def medians(self, n_x: int, n_in: int, n_y: int) -> Hyperparameters:
        names = Hyperparameters.layout(n_x, n_in, n_y)
        return Hyperparameters.unpack([self[n].loc for n in names], n_x, n_in, n_y)

    def sample(self, n_x: int, n_in: int, n_y: int, rng) -> Hyperparameters:
        names = Hyperparameters.layout(n_x, n_in, n_y)
        return Hyperparameters.unpack([self[n].sample(rng) for n in names], n_x, n_in, n_y)
