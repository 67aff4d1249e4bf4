"""Particle filters over the marginalized (non-Markovian) GP-SSM.

The sweep logic is shared between three trajectory priors, each wrapped in
a small "sweep" object exposing ``start / ancestor_logweights / resample /
predict / advance``:

* :class:`DenseSweep` - exact GP prior, one :class:`TrajectoryFactor` per
  particle over the concatenated path ``{x^i_{0:t-1}, ref_{t:T}}``;
* :class:`FicSweep` - FIC prior, batched prefix summaries plus shared
  suffix statistics of the reference;
* :class:`MarkovSweep` - a fixed parametric transition (used for the
  known-model baselines).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._linalg import NumericalError
from .fic import FicStates, InducingSet
from .gp_prior import TrajectoryFactor
from .kernels import Hyperparameters, MeanFunction
from .model import LOG_2PI, Dataset, GpSsmModel

log = logging.getLogger(__name__)


class DegeneracyError(RuntimeError):
    """All particle weights vanished."""


class SweepError(RuntimeError):
    def __init__(self, t: int, cause: Exception):
        super().__init__(f"sweep failed at t={t}: {cause}")
        self.t = t


@dataclass(frozen=True)
class MarkovTransition:
    """A known transition ``x_{t+1} ~ N(f(x_t, u_t), diag(q))``."""

    f: MeanFunction
    q: np.ndarray


@dataclass
class ParticleSystem:
    """Output of one sweep.

    Attributes:
        trajectories: (N, T+1, n_x) ancestor-spliced paths at the final time.
        cloud: (T+1, N, n_x) particles as generated at each step.
        ancestors: (T+1, N) ancestor indices (row 0 unused).
        log_weights: (N,) unnormalized final log-weights.
    """

    trajectories: np.ndarray
    cloud: np.ndarray
    ancestors: np.ndarray
    log_weights: np.ndarray
    reference: Optional[np.ndarray] = None

    @property
    def weights(self) -> np.ndarray:
        return normalize(self.log_weights)

    @property
    def N(self) -> int:
        return self.trajectories.shape[0]

    def lineage(self, i: int) -> np.ndarray:
        """Indices into ``cloud`` of particle ``i``'s ancestors, t = 0..T."""
        T = self.cloud.shape[0] - 1
        idx = np.empty(T + 1, dtype=int)
        idx[T] = i
        for t in range(T, 0, -1):
            idx[t - 1] = self.ancestors[t, idx[t]]
        return idx


def normalize(log_w) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w)
    if not np.isfinite(top):
        raise DegeneracyError("all weights are zero")
    w = np.exp(log_w - top)
    return w / w.sum()


def propose(mu, var, rng) -> np.ndarray:
    """Draw from N(mu, diag(var)), the one-step predictive."""
    mu = np.asarray(mu, dtype=float)
    return mu + np.sqrt(np.asarray(var, dtype=float)) * rng.standard_normal(mu.shape)


def reweight(model: GpSsmModel, y_t, x_t, r) -> tuple[np.ndarray, np.ndarray]:
    """Measurement log-weights and their normalization."""
    logw = model.measurement.loglik(y_t, x_t, r)
    logw = np.where(np.isnan(logw), -np.inf, logw)
    return logw, normalize(logw)


def resample_ancestors(weights, n: int, rng) -> np.ndarray:
    """Multinomial ancestor draws, P(a = j) = w_j."""
    w = np.asarray(weights, dtype=float)
    return rng.choice(w.shape[0], size=n, p=w / w.sum())


def ancestor_logits(log_w_prev, log_suffix) -> np.ndarray:
    """log w_{t-1}^i + log p(ref_{t:T} | x^i_{0:t-1}); non-finite terms drop out."""
    log_suffix = np.asarray(log_suffix, dtype=float)
    bad = ~np.isfinite(log_suffix)
    if np.any(bad):
        log.warning("dropping %d particles with non-finite ancestor weight", bad.sum())
        log_suffix = np.where(bad, -np.inf, log_suffix)
    return np.asarray(log_w_prev, dtype=float) + log_suffix


def ancestor_sample(log_w_prev, log_suffix, rng) -> int:
    """Draw the reference particle's ancestor index."""
    logits = ancestor_logits(log_w_prev, log_suffix)
    return int(rng.choice(logits.shape[0], p=normalize(logits)))


# trajectory-prior back-ends ---------------------------------------------


class _Sweep:
    def __init__(self, model: GpSsmModel, inputs, reference=None):
        self.model = model
        self.u = np.asarray(inputs, dtype=float)
        self.ref = None if reference is None else np.asarray(reference, dtype=float)

    def z(self, x, t) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.model.input_dim == 0:
            return x
        return np.hstack([x, np.broadcast_to(self.u[t], (x.shape[0], self.u.shape[1]))])


class DenseSweep(_Sweep):
    def __init__(self, model, theta: Hyperparameters, inputs, reference=None):
        super().__init__(model, inputs, reference)
        self.cov = theta.cov()
        self.q = theta.q

    def start(self, x0):
        N = x0.shape[0]
        if self.ref is None:
            T = self.u.shape[0]
            self.states = [
                TrajectoryFactor(self.cov, self.q, self.model.mean_fn, capacity=T)
                for _ in range(N)
            ]
            return
        T = self.ref.shape[0] - 1
        zref = np.vstack([self.z(self.ref[t], t) for t in range(T)] + [self.z(self.ref[T], T - 1)])
        base = TrajectoryFactor.from_trajectory(self.cov, self.q, self.model.mean_fn, zref)
        Z0 = self.z(x0, 0)
        self.states = []
        for i in range(N):
            fac = base.copy()
            if not np.array_equal(x0[i], self.ref[0]):
                fac.replace_input(0, Z0[i])
            self.states.append(fac)

    def ancestor_logweights(self, t, x_prev):
        return np.array([s.suffix_log_density(t - 1) for s in self.states])

    def resample(self, a):
        taken = set()
        new = []
        for i in a:
            s = self.states[i]
            new.append(s.copy() if i in taken else s)
            taken.add(i)
        self.states = new

    def predict(self, t, x_prev):
        if self.ref is not None:
            moments = [s.prefix_predictive(t - 1) for s in self.states]
        else:
            Z = self.z(x_prev, t - 1)
            moments = [s.one_step_predictive(Z[i]) for i, s in enumerate(self.states)]
        return np.array([m.mu for m in moments]), np.array([m.var for m in moments])

    def advance(self, t, x_prev, x_t, is_ref):
        if self.ref is None:
            Z = self.z(x_prev, t - 1)
            for i, s in enumerate(self.states):
                s.extend(Z[i], x_t[i])
            return
        T = self.ref.shape[0] - 1
        Zt = self.z(x_t, min(t, T - 1))
        for i, s in enumerate(self.states):
            if is_ref[i]:
                continue
            if t < T:
                s.replace_input(t, Zt[i])
            s.replace_target(t - 1, x_t[i])


class FicSweep(_Sweep):
    def __init__(self, model, theta: Hyperparameters, inputs, inducing: InducingSet, reference=None):
        super().__init__(model, inputs, reference)
        self.inducing = inducing
        self.q = theta.q

    def start(self, x0):
        self.states = FicStates(self.inducing, self.q, self.model.mean_fn, P=x0.shape[0])
        if self.ref is not None:
            T = self.ref.shape[0] - 1
            Zref = np.vstack([self.z(self.ref[t], t) for t in range(T)])
            self.suffix = self.states.suffix_stats(Zref, self.ref[1:])

    def ancestor_logweights(self, t, x_prev):
        joint = self.states.concat_log_density(self.z(x_prev, t - 1), self.ref[t], self.suffix, t)
        return joint - self.states.woodbury_log_density()

    def resample(self, a):
        self.states = self.states.take(a)

    def predict(self, t, x_prev):
        return self.states.predictive(self.z(x_prev, t - 1))

    def advance(self, t, x_prev, x_t, is_ref):
        self.states.extend(self.z(x_prev, t - 1), x_t)


class MarkovSweep(_Sweep):
    def __init__(self, model, transition: MarkovTransition, inputs, reference=None):
        super().__init__(model, inputs, reference)
        self.f = transition.f
        self.q = np.broadcast_to(np.asarray(transition.q, float), (model.state_dim,))

    def start(self, x0):
        pass

    def _mean(self, t, x_prev):
        return self.f(x_prev, np.broadcast_to(self.u[t - 1], (x_prev.shape[0], self.u.shape[1])))

    def ancestor_logweights(self, t, x_prev):
        mu = self._mean(t, x_prev)
        return -0.5 * np.sum(LOG_2PI + np.log(self.q) + (self.ref[t] - mu) ** 2 / self.q, 1)

    def resample(self, a):
        pass

    def predict(self, t, x_prev):
        return self._mean(t, x_prev), np.broadcast_to(self.q, x_prev.shape)

    def advance(self, t, x_prev, x_t, is_ref):
        pass


def make_sweep(model, theta, inputs, prior="dense", reference=None) -> _Sweep:
    """Back-end for ``prior``: ``"dense"``, an :class:`InducingSet` or a
    :class:`MarkovTransition`."""
    if prior is None or (isinstance(prior, str) and prior == "dense"):
        return DenseSweep(model, theta, inputs, reference)
    if isinstance(prior, InducingSet):
        return FicSweep(model, theta, inputs, prior, reference)
    if isinstance(prior, MarkovTransition):
        return MarkovSweep(model, prior, inputs, reference)
    raise ValueError(f"unknown trajectory prior {prior!r}")


# sweeps -------------------------------------------------------------------


def _run(model, theta, data: Dataset, N, rng, prior, reference, step_times=None):
    T = data.T
    r = theta.r
    y = data.observations
    sweep = make_sweep(model, theta, data.inputs, prior, reference)
    conditional = reference is not None
    x = np.empty((N, T + 1, model.state_dim))
    cloud = np.empty((T + 1, N, model.state_dim))
    anc = np.zeros((T + 1, N), dtype=int)
    is_ref = np.zeros(N, dtype=bool)
    if conditional:
        is_ref[N - 1] = True

    t = 0
    try:
        x[:, 0] = model.sample_x0(N, rng)
        if conditional:
            x[N - 1, 0] = reference[0]
        sweep.start(x[:, 0])
        logw, w = reweight(model, y[0], x[:, 0], r)
        cloud[0] = x[:, 0]
        for t in range(1, T + 1):
            t0 = time.perf_counter()
            if conditional:
                a = np.empty(N, dtype=int)
                a[: N - 1] = resample_ancestors(w, N - 1, rng)
                a[N - 1] = ancestor_sample(logw, sweep.ancestor_logweights(t, x[:, t - 1]), rng)
            else:
                a = resample_ancestors(w, N, rng)
            anc[t] = a
            x[:, :t] = x[a, :t]
            sweep.resample(a)
            mu, var = sweep.predict(t, x[:, t - 1])
            x[:, t] = propose(mu, var, rng)
            if conditional:
                x[N - 1, t] = reference[t]
            sweep.advance(t, x[:, t - 1], x[:, t], is_ref)
            cloud[t] = x[:, t]
            logw, w = reweight(model, y[t], x[:, t], r)
            if step_times is not None:
                step_times.append(time.perf_counter() - t0)
    except (NumericalError, DegeneracyError, np.linalg.LinAlgError) as exc:
        raise SweepError(t, exc) from exc

    system = ParticleSystem(x, cloud, anc, logw, reference)
    k = rng.choice(N, p=w)
    return system, x[k].copy()


def cpf_as_sweep(model: GpSsmModel, theta: Hyperparameters, data: Dataset, reference,
                 n_particles: int, rng, prior="dense", step_times=None):
    """Conditional particle filter with ancestor sampling.

    The last particle is pinned to ``reference``; its ancestor at each step
    is drawn with weights ``w_{t-1}^i p(ref_{t:T} | x^i_{0:t-1})``.
    If ``step_times`` is a list, the wall time of each step t = 1..T is
    appended to it.

    Returns:
        (ParticleSystem, trajectory drawn with P(k = i) = w_T^i)
    """
    if n_particles < 2:
        raise ValueError("conditional sweep needs at least 2 particles")
    reference = np.asarray(reference, dtype=float).reshape(data.T + 1, model.state_dim)
    return _run(model, theta, data, n_particles, rng, prior, reference, step_times)


def bootstrap_pf(model: GpSsmModel, theta: Hyperparameters, data: Dataset,
                 n_particles: int, rng, prior="dense", return_system=False):
    """Plain bootstrap particle filter; returns one weighted-draw trajectory."""
    if n_particles < 1:
        raise ValueError("need at least one particle")
    system, traj = _run(model, theta, data, n_particles, rng, prior, None)
    return (system, traj) if return_system else traj
