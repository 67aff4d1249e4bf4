"""Predictive distributions and evaluation metrics from PGAS chains.

Every retained chain sample is treated as a GP regression data set: its
inputs ``(x_t, u_t)`` for t < T and its targets ``x_{t+1}``. The predictive
over the function value at a test input is the equally weighted mixture of
the per-sample GP predictives.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from ._linalg import NumericalError
from .fic import FicStates, InducingSet
from .gp_prior import TrajectoryFactor
from .model import LOG_2PI, GpSsmModel

log = logging.getLogger(__name__)


@dataclass
class MixturePredictive:
    """Equally weighted Gaussian mixture; ``mu``/``var`` have shape (L, n, n_x)."""

    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.var = np.asarray(self.var, dtype=float)
        if self.mu.ndim != 3 or self.mu.shape != self.var.shape:
            raise ValueError("mu and var must share shape (L, n_points, n_x)")
        if self.mu.shape[0] < 1:
            raise ValueError("mixture needs at least one component")
        if np.any(self.var <= 0):
            raise ValueError("component variances must be positive")

    @property
    def L(self) -> int:
        return self.mu.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.L, 1.0 / self.L)

    def logpdf(self, f) -> np.ndarray:
        """Mixture log-density at ``f`` of shape (n, n_x); returns (n,)."""
        f = np.asarray(f, dtype=float)
        comp = -0.5 * np.sum(LOG_2PI + np.log(self.var) + (f - self.mu) ** 2 / self.var, axis=2)
        top = comp.max(0)
        return top + np.log(np.mean(np.exp(comp - top), axis=0))

    def component_logpdf(self, l: int, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        return -0.5 * np.sum(LOG_2PI + np.log(self.var[l]) + (f - self.mu[l]) ** 2 / self.var[l], 1)


def _dense_component(model, sample, inputs, Zs):
    theta, x = sample.theta, sample.trajectory
    cov = theta.cov()
    Z = model.gp_inputs(x[:-1], inputs)
    fac = TrajectoryFactor.from_points(cov, theta.q, model.mean_fn, Z, x[1:])
    m = model.mean_fn.on_inputs(Zs)
    Ks = cov(Z, Zs)
    alpha = fac.alpha
    mu = np.empty_like(m)
    var = np.empty_like(m)
    for d in range(cov.n_out):
        W = solve_triangular(fac.chol[d], Ks[d], lower=True, check_finite=False)
        mu[:, d] = m[:, d] + W.T @ alpha[d]
        var[:, d] = cov.signal_var[d] - np.sum(W**2, 0)
    return mu, var


def _fic_component(model, sample, inputs, Zs):
    theta, x = sample.theta, sample.trajectory
    cov = theta.cov()
    U = InducingSet(sample.inducing, cov)
    Z = model.gp_inputs(x[:-1], inputs)
    st = FicStates.from_points(U, theta.q, model.mean_fn, Z, x[1:])
    m = model.mean_fn.on_inputs(Zs)
    Ku = U.kuf(Zs)
    lam = cov.signal_var[:, None] - U.q_diag(Zs)
    mu = np.empty_like(m)
    var = np.empty_like(m)
    for d in range(cov.n_out):
        W = solve_triangular(st.LA[d, 0], Ku[d], lower=True, check_finite=False)
        mu[:, d] = m[:, d] + W.T @ st.c[d, 0]
        var[:, d] = lam[d] + np.sum(W**2, 0)
    return mu, var


def predictive_mixture(model: GpSsmModel, chain, inputs, x_star, u_star=None,
                       include_noise: bool = False) -> MixturePredictive:
    """Per-sample GP predictives of f at the test inputs.

    Args:
        model: the GP-SSM the chain was drawn under.
        chain: post-burn-in samples.
        inputs: the known training input sequence the chain was drawn with.
        x_star: (n, n_x) test states.
        u_star: (n, n_u) test inputs, if the model has inputs.
        include_noise: add the sample's process noise (next-state predictive).

    Samples whose factorization fails are skipped with a warning.
    """
    chain = list(chain)
    if not chain:
        raise ValueError("empty chain")
    x_star = np.asarray(x_star, dtype=float).reshape(-1, model.state_dim)
    Zs = model.gp_inputs(x_star, u_star)
    mus, vars_ = [], []
    for s in chain:
        comp = _fic_component if s.inducing is not None else _dense_component
        try:
            mu, var = comp(model, s, inputs, Zs)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            log.warning("skipping chain sample %d in predictive: %s", s.iteration, exc)
            continue
        var = np.maximum(var, s.theta.cov().jitter)
        if include_noise:
            var = var + s.theta.q
        mus.append(mu)
        vars_.append(var)
    if not mus:
        raise NumericalError("every chain sample failed to factorize")
    return MixturePredictive(np.array(mus), np.array(vars_))


def mixture_moments(mix: MixturePredictive):
    """Mean and variance of the mixture (law of total variance)."""
    mean = mix.mu.mean(0)
    var = mix.var.mean(0) + np.mean(mix.mu**2, 0) - mean**2
    return mean, np.maximum(var, 0.0)


def thin_chain(chain, keep: int, seed=None):
    """Random sub-sample of ``keep`` samples without replacement, order kept."""
    chain = list(chain)
    if not 1 <= keep <= len(chain):
        raise ValueError(f"keep must be in [1, {len(chain)}]")
    idx = np.sort(np.random.default_rng(seed).choice(len(chain), keep, replace=False))
    return [chain[i] for i in idx]


def sample_latent_f(model: GpSsmModel, sample, inputs, rng) -> np.ndarray:
    """Joint draw of f_{0:T-1} at the trajectory's own inputs.

    With the jittered prior covariance K and C = K + Q, the posterior of f
    given x_{t+1} = f_t + v_t has mean ``x - Q C^{-1} (x - m)`` and
    covariance ``Q - Q C^{-1} Q`` (both equal to the textbook
    ``K C^{-1}`` forms but free of cancellation as Q -> 0).
    """
    theta, x = sample.theta, sample.trajectory
    cov = theta.cov()
    Z = model.gp_inputs(x[:-1], inputs)
    n = Z.shape[0]
    K = cov(Z, Z)
    m = model.mean_fn.on_inputs(Z)
    out = np.empty((n, cov.n_out))
    for d in range(cov.n_out):
        q = theta.q[d]
        C = K[d].copy()
        C.flat[:: n + 1] += cov.jitter[d] + q
        Lc = np.linalg.cholesky(C)
        Ci = solve_triangular(Lc, np.eye(n), lower=True)
        Ci = Ci.T @ Ci
        mean = x[1:, d] - q * (Ci @ (x[1:, d] - m[:, d]))
        S = q * (np.eye(n) - q * Ci)
        # eigh tolerates the near-singular posterior when Q is tiny
        vals, vecs = np.linalg.eigh((S + S.T) / 2)
        out[:, d] = mean + vecs @ (np.sqrt(np.clip(vals, 0, None)) * rng.standard_normal(n))
    return out


def rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def rmse_prediction(model: GpSsmModel, chain, inputs, test) -> float:
    """RMSE of the mixture mean of f against the true f on a test set."""
    if test.states is None or test.f_values is None:
        raise ValueError("test set needs ground-truth states and f values")
    mix = predictive_mixture(model, chain, inputs, test.states, test.inputs)
    mean, _ = mixture_moments(mix)
    return rmse(mean, test.f_values)


def smoothing_mean(chain) -> np.ndarray:
    return np.mean([s.trajectory for s in chain], axis=0)


def rmse_smoothing(chain, states) -> float:
    """RMSE of the per-time posterior-mean state against ground truth."""
    return rmse(smoothing_mean(chain), states)


def mode_fractions(chain) -> np.ndarray:
    """Per time step, the smaller of the fractions of samples with x_t > 0 and x_t < 0."""
    X = np.array([s.trajectory[:, 0] for s in chain])
    pos = np.mean(X > 0, 0)
    neg = np.mean(X < 0, 0)
    return np.minimum(pos, neg)


def write_predictions_csv(path, x_star, u_star, mix: MixturePredictive, components=False):
    mean, var = mixture_moments(mix)
    x_star = np.atleast_2d(x_star)
    u_star = np.zeros((x_star.shape[0], 0)) if u_star is None else np.atleast_2d(u_star)
    n_x = mean.shape[1]
    header = [f"x_{i}" for i in range(x_star.shape[1])] + [f"u_{i}" for i in range(u_star.shape[1])]
    header += [f"mean_{d}" for d in range(n_x)] + [f"var_{d}" for d in range(n_x)]
    if components:
        for l in range(mix.L):
            header += [f"mu{l}_{d}" for d in range(n_x)] + [f"var{l}_{d}" for d in range(n_x)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(x_star.shape[0]):
            row = list(x_star[i]) + list(u_star[i]) + list(mean[i]) + list(var[i])
            if components:
                for l in range(mix.L):
                    row += list(mix.mu[l, i]) + list(mix.var[l, i])
            w.writerow([repr(float(v)) for v in row])


def align_sign(chain, states):
    """Map each sample to the sign gauge closest to ``states``.

    Only meaningful for sign-symmetric models, where x -> -x of the whole
    trajectory leaves the posterior unchanged; the flipped sample (with
    mirrored inducing inputs) describes the same model. Used for
    evaluation against ground truth, never inside the sampler.
    """
    states = np.asarray(states, dtype=float)
    out = []
    for s in chain:
        if np.sum(s.trajectory * states) >= 0:
            out.append(s)
            continue
        n_x = s.trajectory.shape[1]
        inducing = None
        if s.inducing is not None:
            inducing = np.array(s.inducing, dtype=float)
            inducing[:, :n_x] *= -1
        out.append(dataclasses.replace(s, trajectory=-s.trajectory, inducing=inducing))
    return out
