"""Marginal (f integrated out) prior over state trajectories.

Once f is integrated out the transitions x_{k+1} = f(z_k) + v_k form GP
regression data with inputs z_k = (x_k, u_k) and targets x_{k+1}. A
:class:`TrajectoryFactor` keeps, per state dimension, the Cholesky factor
of K + Q over its inputs together with the whitened residual
``alpha = L^{-1} (targets - means)``. Because Cholesky factors are nested,
row k of the factor yields the one-step predictive of target k given
points 0..k-1 and the log-density is a sum over rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from . import _linalg
from ._linalg import NumericalError
from .kernels import CovFunction, MeanFunction
from .model import LOG_2PI

log = logging.getLogger(__name__)

__all__ = [
    "NumericalError",
    "PredictiveMoments",
    "TrajectoryFactor",
    "one_step_predictive",
    "log_joint_prior",
    "extend",
    "replace_point",
    "sample_prior_trajectory",
]


@dataclass(frozen=True)
class PredictiveMoments:
    mu: np.ndarray
    var: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.diag(self.var)

    def logpdf(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(-0.5 * np.sum(LOG_2PI + np.log(self.var) + (x - self.mu) ** 2 / self.var))


class TrajectoryFactor:
    """Incrementally maintained GP factor over (input, target) pairs.

    Args:
        cov: kernel over the concatenated inputs.
        q: (n_x,) process-noise variances.
        mean_fn: prior mean, evaluated on the inputs.
        capacity: initial storage; grows on demand.
    """

    def __init__(self, cov: CovFunction, q, mean_fn: MeanFunction, capacity: int = 16):
        self.cov = cov
        self.mean_fn = mean_fn
        self.n_x = cov.n_out
        self.n_in = cov.n_in
        self.q = np.broadcast_to(np.asarray(q, dtype=float), (self.n_x,)).copy()
        if np.any(self.q <= 0):
            raise ValueError("process noise must be positive")
        self.diag_add = self.q + cov.jitter
        self._inv_ell = 1.0 / cov.lengthscales
        cap = max(int(capacity), 1)
        self.Z = np.zeros((cap, self.n_in))
        self.Y = np.zeros((cap, self.n_x))
        self.M = np.zeros((cap, self.n_x))
        self.L = np.zeros((self.n_x, cap, cap))
        self._alpha = np.zeros((self.n_x, cap))
        self._clean_to = 0
        self.n = 0
        self.refactor_count = 0

    # construction -------------------------------------------------------

    @classmethod
    def from_points(cls, cov, q, mean_fn, points, targets, capacity=None) -> "TrajectoryFactor":
        """Batch factorization of all points (the rebuild path)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        targets = np.asarray(targets, dtype=float).reshape(points.shape[0], -1)
        n = points.shape[0]
        fac = cls(cov, q, mean_fn, capacity=max(n, capacity or 0))
        fac.Z[:n] = points
        fac.Y[:n] = targets
        fac.M[:n] = mean_fn.on_inputs(points)
        fac.n = n
        fac._factorize()
        return fac

    @classmethod
    def from_trajectory(cls, cov, q, mean_fn, z) -> "TrajectoryFactor":
        """Factor for a trajectory given its T+1 GP inputs ``z_k = (x_k, u_k)``.

        Targets are the states ``x_{1:T}``; the final input row supplies only
        its state part.
        """
        z = np.atleast_2d(np.asarray(z, dtype=float))
        n_x = cov.n_out
        return cls.from_points(cov, q, mean_fn, z[:-1], z[1:, :n_x])

    def copy(self) -> "TrajectoryFactor":
        new = object.__new__(TrajectoryFactor)
        new.__dict__.update(self.__dict__)
        new.q = self.q
        new.Z = self.Z.copy()
        new.Y = self.Y.copy()
        new.M = self.M.copy()
        new.L = self.L.copy()
        new._alpha = self._alpha.copy()
        return new

    def _factorize(self) -> None:
        n = self.n
        if n == 0:
            return
        K = self.cov(self.Z[:n], self.Z[:n])
        for d in range(self.n_x):
            K[d].flat[:: n + 1] += self.diag_add[d]
            try:
                self.L[d, :n, :n] = cholesky(K[d], lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"kernel matrix not positive definite (dim {d})") from exc
        self._clean_to = 0

    def refactor(self) -> None:
        """Rebuild the factor from the stored points."""
        self.refactor_count += 1
        self._factorize()

    def _grow(self) -> None:
        cap = self.Z.shape[0]
        new = 2 * cap
        self.Z = np.vstack([self.Z, np.zeros((new - cap, self.n_in))])
        self.Y = np.vstack([self.Y, np.zeros((new - cap, self.n_x))])
        self.M = np.vstack([self.M, np.zeros((new - cap, self.n_x))])
        L = np.zeros((self.n_x, new, new))
        L[:, :cap, :cap] = self.L
        self.L = L
        alpha = np.zeros((self.n_x, new))
        alpha[:, :cap] = self._alpha
        self._alpha = alpha

    # cached solve -------------------------------------------------------

    @property
    def alpha(self) -> np.ndarray:
        """(n_x, n) whitened residuals ``L^{-1} (Y - M)``."""
        n = self.n
        if self._clean_to < n:
            start = self._clean_to
            R = self.Y[:n] - self.M[:n]
            for d in range(self.n_x):
                _linalg.forward_solve_from(self.L[d], R[:, d], self._alpha[d], start, n)
            self._clean_to = n
        return self._alpha[:, :n]

    @property
    def chol(self) -> np.ndarray:
        return self.L[:, : self.n, : self.n]

    def gram(self) -> np.ndarray:
        """K + Q (+ jitter) over the stored inputs, computed from scratch."""
        n = self.n
        K = self.cov(self.Z[:n], self.Z[:n])
        for d in range(self.n_x):
            K[d].flat[:: n + 1] += self.diag_add[d]
        return K

    # mutation -----------------------------------------------------------

    def extend(self, point, target) -> "TrajectoryFactor":
        """Append one (input, target) pair; O(n^2) per state dimension."""
        point = np.asarray(point, dtype=float).ravel()
        target = np.asarray(target, dtype=float).ravel()
        if point.shape[0] != self.n_in or target.shape[0] != self.n_x:
            raise ValueError("point/target dimensions do not match the factor")
        alpha = self.alpha
        n = self.n
        if n == self.Z.shape[0]:
            self._grow()
            alpha = self._alpha[:, :n]
        kvec = self.cov(self.Z[:n], point[None])[:, :, 0] if n else np.zeros((self.n_x, 0))
        m = self.mean_fn.on_inputs(point)
        for d in range(self.n_x):
            if n:
                l = solve_triangular(self.L[d, :n, :n], kvec[d], lower=True, check_finite=False)
            else:
                l = np.zeros(0)
            s = self.cov.signal_var[d] + self.diag_add[d] - l @ l
            if not s > 0:
                raise NumericalError(f"extend lost positive definiteness at n={n}")
            self.L[d, n, :n] = l
            self.L[d, n, n] = np.sqrt(s)
            self._alpha[d, n] = (target[d] - m[d] - l @ alpha[d]) / self.L[d, n, n]
        self.Z[n] = point
        self.Y[n] = target
        self.M[n] = m
        self.n = n + 1
        self._clean_to = self.n
        return self

    def replace_input(self, index: int, point) -> "TrajectoryFactor":
        """Swap the GP input at ``index``; targets are kept."""
        if not 0 <= index < self.n:
            raise IndexError(f"index {index} out of range for {self.n} points")
        point = np.asarray(point, dtype=float).ravel()
        ok = True
        for d in range(self.n_x):
            ok = _linalg.replace_row(
                self.L[d], self.Z, self.n, index, point,
                self._inv_ell[d], self.cov.signal_var[d], self.diag_add[d],
            )
            if not ok:
                break
        self.Z[index] = point
        self.M[index] = self.mean_fn.on_inputs(point)
        if not ok:
            log.warning("Cholesky downdate failed at index %d of %d; refactorizing", index, self.n)
            self.refactor()
        self._clean_to = min(self._clean_to, index)
        return self

    def replace_target(self, index: int, target) -> "TrajectoryFactor":
        if not 0 <= index < self.n:
            raise IndexError(f"index {index} out of range for {self.n} points")
        self.Y[index] = np.asarray(target, dtype=float).ravel()
        self._clean_to = min(self._clean_to, index)
        return self

    def replace_point(self, index: int, point, target) -> "TrajectoryFactor":
        """Swap the (input, target) pair at ``index`` in O(n^2)."""
        self.replace_input(index, point)
        return self.replace_target(index, target)

    # queries ------------------------------------------------------------

    def one_step_predictive(self, query) -> PredictiveMoments:
        """Predictive of the next target at ``query`` given all stored points."""
        query = np.asarray(query, dtype=float).ravel()
        if query.shape[0] != self.n_in:
            raise ValueError(f"query has width {query.shape[0]}, expected {self.n_in}")
        n = self.n
        m = self.mean_fn.on_inputs(query)
        base = self.cov.signal_var + self.diag_add
        if n == 0:
            return PredictiveMoments(m, base.copy())
        alpha = self.alpha
        kvec = self.cov(self.Z[:n], query[None])[:, :, 0]
        mu = np.empty(self.n_x)
        var = np.empty(self.n_x)
        for d in range(self.n_x):
            l = solve_triangular(self.L[d, :n, :n], kvec[d], lower=True, check_finite=False)
            mu[d] = m[d] + l @ alpha[d]
            var[d] = base[d] - l @ l
        return PredictiveMoments(mu, var)

    def prefix_predictive(self, k: int) -> PredictiveMoments:
        """Predictive of target ``k`` given stored points ``0..k-1``.

        Read directly off row ``k`` of the factor.
        """
        alpha = self.alpha
        mu = self.M[k] + np.einsum("dj,dj->d", self.L[:, k, :k], alpha[:, :k])
        var = self.L[:, k, k] ** 2
        return PredictiveMoments(mu, var)

    def suffix_log_density(self, k: int) -> float:
        """Sum of the chain-rule terms for targets ``k..n-1``."""
        alpha = self.alpha[:, k:]
        diag = np.diagonal(self.L, axis1=1, axis2=2)[:, k : self.n]
        return float(
            -0.5 * (alpha.size * LOG_2PI + 2.0 * np.sum(np.log(diag)) + np.sum(alpha**2))
        )

    def log_density_per_dim(self) -> np.ndarray:
        alpha = self.alpha
        diag = np.diagonal(self.L, axis1=1, axis2=2)[:, : self.n]
        return -0.5 * (self.n * LOG_2PI + 2.0 * np.sum(np.log(diag), 1) + np.sum(alpha**2, 1))

    def log_joint_prior(self) -> float:
        """log N(targets | means, K + Q) over all stored points."""
        if self.n == 0:
            raise ValueError("log_joint_prior of an empty factor")
        val = self.suffix_log_density(0)
        if not np.isfinite(val):
            raise NumericalError("non-finite log-density; degenerate factor")
        return val


def one_step_predictive(factor: TrajectoryFactor, query) -> PredictiveMoments:
    return factor.one_step_predictive(query)


def log_joint_prior(factor: TrajectoryFactor) -> float:
    return factor.log_joint_prior()


def extend(factor: TrajectoryFactor, new_point, new_target) -> TrajectoryFactor:
    """Return a copy of ``factor`` with one more point."""
    return factor.copy().extend(new_point, new_target)


def replace_point(factor: TrajectoryFactor, index, new_point, new_target) -> TrajectoryFactor:
    """Return a copy of ``factor`` with point ``index`` swapped."""
    return factor.copy().replace_point(index, new_point, new_target)


def sample_prior_trajectory(model, theta, inputs, T: int, rng, x0=None) -> np.ndarray:
    """Draw x_{0:T} from the marginal GP-SSM prior by sequential prediction."""
    x = np.empty((T + 1, model.state_dim))
    x[0] = model.sample_x0(1, rng)[0] if x0 is None else x0
    fac = TrajectoryFactor(theta.cov(), theta.q, model.mean_fn, capacity=T)
    for t in range(1, T + 1):
        z = model.gp_inputs(x[t - 1 : t], np.asarray(inputs)[t - 1 : t])[0]
        pm = fac.one_step_predictive(z)
        x[t] = pm.mu + np.sqrt(pm.var) * rng.standard_normal(model.state_dim)
        fac.extend(z, x[t])
    return x
