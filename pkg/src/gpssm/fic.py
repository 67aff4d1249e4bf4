"""Fully independent conditional (FIC) sparse prior over trajectories.

Under FIC the transition targets have covariance ``Q_ff + Lambda`` with
``Q_ff = K_fu Kuu^{-1} K_uf`` and a diagonal ``Lambda = diag(K + Q - Q_ff)``.
Everything the one-step predictive and the joint density need is a sum of
per-point terms in the inducing space:

    A = Kuu + sum_k k_u(z_k) k_u(z_k)^T / lambda_k
    b = sum_k k_u(z_k) r_k / lambda_k

so a trajectory prefix is summarized by O(M^2) numbers and each new point
costs one rank-one update of chol(A). States are batched over particles
(leading axis ``P``); arrays are stored per state dimension first.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import solve_triangular

from . import _linalg
from ._linalg import NumericalError
from .gp_prior import PredictiveMoments
from .kernels import CovFunction, MeanFunction
from .model import LOG_2PI

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InducingSet:
    """Inducing inputs and the per-dimension factor of ``Kuu`` (+ jitter)."""

    inputs: np.ndarray
    cov: CovFunction
    kuu: np.ndarray = field(init=False, repr=False)
    kuu_chol: np.ndarray = field(init=False, repr=False)
    logdet_kuu: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if U.shape[0] < 1 or U.shape[1] != self.cov.n_in:
            raise ValueError(f"inducing inputs must have shape (M, {self.cov.n_in})")
        if not np.all(np.isfinite(U)):
            raise ValueError("inducing inputs must be finite")
        M = U.shape[0]
        K = self.cov(U, U)
        for d in range(self.cov.n_out):
            K[d].flat[:: M + 1] += self.cov.jitter[d]
        try:
            Lu = np.linalg.cholesky(K)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("Kuu not positive definite after jitter") from exc
        object.__setattr__(self, "inputs", U)
        object.__setattr__(self, "kuu", K)
        object.__setattr__(self, "kuu_chol", Lu)
        object.__setattr__(
            self, "logdet_kuu", 2 * np.sum(np.log(np.diagonal(Lu, axis1=1, axis2=2)), 1)
        )

    @property
    def M(self) -> int:
        return self.inputs.shape[0]

    def kuf(self, Z) -> np.ndarray:
        """(n_x, M, n) cross-covariances."""
        return self.cov(self.inputs, Z)

    def q_diag(self, Z) -> np.ndarray:
        """(n_x, n) diagonal of ``Q_ff`` at the rows of ``Z``."""
        Ku = self.kuf(Z)
        out = np.empty((self.cov.n_out, Ku.shape[2]))
        for d in range(self.cov.n_out):
            V = solve_triangular(self.kuu_chol[d], Ku[d], lower=True, check_finite=False)
            out[d] = np.sum(V**2, 0)
        return out

    def q_ff(self, Z1, Z2) -> np.ndarray:
        """(n_x, n1, n2) low-rank covariance ``K_1u Kuu^{-1} K_u2``."""
        A, B = self.kuf(Z1), self.kuf(Z2)
        out = np.empty((self.cov.n_out, A.shape[2], B.shape[2]))
        for d in range(self.cov.n_out):
            VA = solve_triangular(self.kuu_chol[d], A[d], lower=True, check_finite=False)
            VB = solve_triangular(self.kuu_chol[d], B[d], lower=True, check_finite=False)
            out[d] = VA.T @ VB
        return out


def fic_cov(cov: CovFunction, inducing: InducingSet, z_i, z_j, same=None) -> np.ndarray:
    """FIC covariance block between two GP inputs.

    ``same`` marks the Kronecker delta (same data index); by default two
    identical inputs are treated as the same point.
    """
    z_i = np.asarray(z_i, dtype=float).ravel()
    z_j = np.asarray(z_j, dtype=float).ravel()
    if z_i.shape != z_j.shape or z_i.shape[0] != cov.n_in:
        raise ValueError("dimension mismatch")
    if same is None:
        same = bool(np.array_equal(z_i, z_j))
    if same:
        return np.diag(cov(z_i[None], z_j[None])[:, 0, 0])
    return np.diag(inducing.q_ff(z_i[None], z_j[None])[:, 0, 0])


@dataclass
class SuffixStats:
    """Reverse-cumulative inducing-space statistics of a fixed trajectory.

    Index ``t`` holds the sum over points ``k >= t``; index ``n`` is empty.
    """

    G: np.ndarray  # (n+1, n_x, M, M)
    bv: np.ndarray  # (n+1, n_x, M)
    loglam: np.ndarray  # (n+1, n_x)
    r2: np.ndarray  # (n+1, n_x)
    count: np.ndarray  # (n+1,)


class FicStates:
    """A batch of FIC prefix summaries, one per particle.

    Args:
        inducing: shared inducing set.
        q: (n_x,) process-noise variances.
        mean_fn: prior mean on GP inputs.
        P: batch size.
    """

    def __init__(self, inducing: InducingSet, q, mean_fn: MeanFunction, P: int = 1):
        self.inducing = inducing
        self.cov = inducing.cov
        self.mean_fn = mean_fn
        n_x, M = self.cov.n_out, inducing.M
        self.n_x = n_x
        self.q = np.broadcast_to(np.asarray(q, dtype=float), (n_x,)).copy()
        self.diag_add = self.q + self.cov.jitter
        self.A = np.repeat(inducing.kuu[:, None], P, axis=1)
        self.LA = np.repeat(inducing.kuu_chol[:, None], P, axis=1)
        self.b = np.zeros((n_x, P, M))
        self.c = np.zeros((n_x, P, M))
        self.sum_loglam = np.zeros((n_x, P))
        self.sum_r2 = np.zeros((n_x, P))
        self.log_joint = np.zeros(P)
        self.n = 0
        self.refactor_count = 0

    @property
    def P(self) -> int:
        return self.log_joint.shape[0]

    def take(self, idx) -> "FicStates":
        """New batch made of copies of the states at ``idx``."""
        idx = np.asarray(idx)
        new = object.__new__(FicStates)
        new.__dict__.update(self.__dict__)
        new.A = self.A[:, idx]
        new.LA = self.LA[:, idx]
        new.b = self.b[:, idx]
        new.c = self.c[:, idx]
        new.sum_loglam = self.sum_loglam[:, idx]
        new.sum_r2 = self.sum_r2[:, idx]
        new.log_joint = self.log_joint[idx]
        return new

    def copy(self) -> "FicStates":
        return self.take(np.arange(self.P))

    def point_stats(self, Zq):
        """Mean, cross-covariances (n_x, P, M) and Lambda entries (n_x, P)."""
        Zq = np.atleast_2d(np.asarray(Zq, dtype=float))
        m = self.mean_fn.on_inputs(Zq)
        Ku = np.ascontiguousarray(np.swapaxes(self.inducing.kuf(Zq), 1, 2))
        s = self.inducing.q_diag(Zq)
        lam = self.cov.signal_var[:, None] + self.diag_add[:, None] - s
        return m, Ku, lam

    def predictive(self, Zq, stats=None):
        """Batched one-step predictive at one query per particle."""
        m, Ku, lam = self.point_stats(Zq) if stats is None else stats
        mu = np.empty_like(m)
        var = np.empty_like(m)
        for d in range(self.n_x):
            W = _linalg.batch_forward_solve(self.LA[d], Ku[d])
            mu[:, d] = m[:, d] + np.sum(W * self.c[d], 1)
            var[:, d] = lam[d] + np.sum(W**2, 1)
        return mu, var

    def extend(self, Zq, Y) -> "FicStates":
        """Append one (input, target) pair to every state; O(M^2) each."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        stats = self.point_stats(Zq)
        mu, var = self.predictive(Zq, stats)
        self.log_joint += -0.5 * np.sum(LOG_2PI + np.log(var) + (Y - mu) ** 2 / var, 1)
        m, Ku, lam = stats
        for d in range(self.n_x):
            r = Y[:, d] - m[:, d]
            g = Ku[d] / np.sqrt(lam[d])[:, None]
            self.A[d] += g[:, :, None] * g[:, None, :]
            _linalg.batch_chol_update(self.LA[d], g.copy())
            self.b[d] += Ku[d] * (r / lam[d])[:, None]
            self.c[d] = _linalg.batch_forward_solve(self.LA[d], self.b[d])
            self.sum_loglam[d] += np.log(lam[d])
            self.sum_r2[d] += r**2 / lam[d]
        self.n += 1
        return self

    def replace_point(self, p: int, old_point, old_target, new_point, new_target) -> "FicStates":
        """Swap one stored point of state ``p``; downdate then update.

        The chain-rule accumulator is reset to the closed-form density.
        """
        for sign, z, y in ((-1.0, old_point, old_target), (1.0, new_point, new_target)):
            m, Ku, lam = self.point_stats(np.asarray(z, dtype=float)[None])
            y = np.asarray(y, dtype=float).ravel()
            for d in range(self.n_x):
                r = y[d] - m[0, d]
                g = Ku[d, 0] / np.sqrt(lam[d, 0])
                self.A[d, p] += sign * np.outer(g, g)
                Lp = self.LA[d, p : p + 1]
                if sign > 0:
                    _linalg.batch_chol_update(Lp, g[None].copy())
                elif not _linalg.batch_chol_downdate(Lp, g[None].copy())[0]:
                    log.warning("FIC downdate failed; refactorizing")
                    self.refactor_count += 1
                    Lp[0] = np.linalg.cholesky(self.A[d, p])
                self.b[d, p] += sign * Ku[d, 0] * r / lam[d, 0]
                self.sum_loglam[d, p] += sign * np.log(lam[d, 0])
                self.sum_r2[d, p] += sign * r**2 / lam[d, 0]
        for d in range(self.n_x):
            self.c[d, p] = solve_triangular(self.LA[d, p], self.b[d, p], lower=True)
        self.log_joint[p] = self.woodbury_log_density()[p]
        return self

    def woodbury_log_density(self, per_dim: bool = False) -> np.ndarray:
        """Closed-form log-density of each stored prefix, shape (P,)."""
        logdet_A = 2 * np.sum(np.log(np.diagonal(self.LA, axis1=2, axis2=3)), 2)
        val = -0.5 * (
            self.n * LOG_2PI
            + self.sum_loglam
            + logdet_A
            - self.inducing.logdet_kuu[:, None]
            + self.sum_r2
            - np.sum(self.c**2, 2)
        )
        return val if per_dim else val.sum(0)

    @classmethod
    def from_points(cls, inducing, q, mean_fn, Z, Y) -> "FicStates":
        """Single state over all points at once (batch path, O(n M^2))."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        Y = np.asarray(Y, dtype=float).reshape(Z.shape[0], -1)
        st = cls(inducing, q, mean_fn, P=1)
        m, Ku, lam = st.point_stats(Z)
        for d in range(st.n_x):
            r = Y[:, d] - m[:, d]
            G = Ku[d] / np.sqrt(lam[d])[:, None]
            st.A[d, 0] = inducing.kuu[d] + G.T @ G
            try:
                st.LA[d, 0] = np.linalg.cholesky(st.A[d, 0])
            except np.linalg.LinAlgError as exc:
                raise NumericalError("FIC inducing-space matrix not positive definite") from exc
            st.b[d, 0] = Ku[d].T @ (r / lam[d])
            st.c[d, 0] = solve_triangular(st.LA[d, 0], st.b[d, 0], lower=True)
            st.sum_loglam[d, 0] = np.sum(np.log(lam[d]))
            st.sum_r2[d, 0] = np.sum(r**2 / lam[d])
        st.n = Z.shape[0]
        st.log_joint[:] = st.woodbury_log_density()
        return st

    def suffix_stats(self, Z, Y) -> SuffixStats:
        """Reverse-cumulative statistics of a fixed run of points."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        Y = np.asarray(Y, dtype=float).reshape(Z.shape[0], -1)
        n, M = Z.shape[0], self.inducing.M
        m, Ku, lam = self.point_stats(Z)
        G = np.zeros((n + 1, self.n_x, M, M))
        bv = np.zeros((n + 1, self.n_x, M))
        loglam = np.zeros((n + 1, self.n_x))
        r2 = np.zeros((n + 1, self.n_x))
        for d in range(self.n_x):
            r = Y[:, d] - m[:, d]
            g = Ku[d] / np.sqrt(lam[d])[:, None]
            outer = g[:, :, None] * g[:, None, :]
            G[:n, d] = np.cumsum(outer[::-1], 0)[::-1]
            bv[:n, d] = np.cumsum((Ku[d] * (r / lam[d])[:, None])[::-1], 0)[::-1]
            loglam[:n, d] = np.cumsum(np.log(lam[d])[::-1])[::-1]
            r2[:n, d] = np.cumsum((r**2 / lam[d])[::-1])[::-1]
        count = np.arange(n, -1, -1)
        return SuffixStats(G, bv, loglam, r2, count)

    def concat_log_density(self, Zq, y, suffix: SuffixStats, t: int) -> np.ndarray:
        """log p of each prefix, then point ``(Zq[p], y)``, then ``suffix[t:]``.

        One M x M factorization per particle and state dimension.
        """
        m, Ku, lam = self.point_stats(Zq)
        y = np.asarray(y, dtype=float).ravel()
        out = np.zeros(self.P)
        n_tot = self.n + 1 + suffix.count[t]
        for d in range(self.n_x):
            r = y[d] - m[:, d]
            g = Ku[d] / np.sqrt(lam[d])[:, None]
            A = self.A[d] + g[:, :, None] * g[:, None, :] + suffix.G[t, d]
            try:
                LA = np.linalg.cholesky(A)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("FIC concatenated factor not positive definite") from exc
            b = self.b[d] + Ku[d] * (r / lam[d])[:, None] + suffix.bv[t, d]
            c = _linalg.batch_forward_solve(LA, b)
            logdet_A = 2 * np.sum(np.log(np.diagonal(LA, axis1=1, axis2=2)), 1)
            out += -0.5 * (
                n_tot * LOG_2PI
                + self.sum_loglam[d] + np.log(lam[d]) + suffix.loglam[t, d]
                + logdet_A
                - self.inducing.logdet_kuu[d]
                + self.sum_r2[d] + r**2 / lam[d] + suffix.r2[t, d]
                - np.sum(c**2, 1)
            )
        return out


def fic_one_step_predictive(state: FicStates, query) -> PredictiveMoments:
    """Predictive of the next state for a single-particle FIC state."""
    if state.P != 1:
        raise ValueError("expected a single state")
    mu, var = state.predictive(np.asarray(query, dtype=float)[None])
    return PredictiveMoments(mu[0], var[0])


def fic_log_joint_prior(state: FicStates) -> float:
    """Chain-rule accumulated log-density of a single-particle FIC state."""
    if state.P != 1 or state.n == 0:
        raise ValueError("expected a single nonempty state")
    val = float(state.log_joint[0])
    if not np.isfinite(val):
        raise NumericalError("non-finite FIC log-density")
    return val


def fic_log_marginal(inducing, q, mean_fn, Z, Y, per_dim=False):
    """Closed-form FIC log-density of targets ``Y`` at inputs ``Z``."""
    st = FicStates.from_points(inducing, q, mean_fn, Z, Y)
    val = st.woodbury_log_density(per_dim=per_dim)
    return val[:, 0] if per_dim else float(val[0])


# inducing-input selection ------------------------------------------------


def _factorizations(M: int, k: int):
    if k == 1:
        yield (M,)
        return
    for f in range(1, M + 1):
        if M % f == 0:
            for rest in _factorizations(M // f, k - 1):
                yield (f,) + rest


def grid_counts(M: int, ratios) -> tuple:
    """Points per axis with product exactly M, spread in proportion to ``ratios``."""
    ratios = np.asarray(ratios, dtype=float)
    k = ratios.shape[0]
    ideal = np.log(ratios) + (np.log(M) - np.sum(np.log(ratios))) / k
    best = min(_factorizations(M, k), key=lambda c: np.sum((np.log(c) - ideal) ** 2))
    return best


def select_inducing(candidates, M: int, strategy: str = "grid", seed=None,
                    bounds=None, lengthscales=None) -> np.ndarray:
    """Choose M inducing inputs.

    Args:
        candidates: (n, n_in) GP inputs the inducing set should cover.
        M: number of inducing inputs.
        strategy: ``grid`` (tensor grid over ``bounds``, default the
            candidates' bounding box; axis counts follow range/lengthscale),
            ``subsample`` (random rows of ``candidates``) or ``kmeans``.
        seed: seed or Generator for the random strategies.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    n, n_in = candidates.shape
    if M < 1:
        raise ValueError("M must be positive")
    rng = np.random.default_rng(seed)
    if strategy == "grid":
        if bounds is None:
            bounds = np.stack([candidates.min(0), candidates.max(0)], 1)
        bounds = np.asarray(bounds, dtype=float).reshape(n_in, 2)
        span = np.maximum(bounds[:, 1] - bounds[:, 0], 1e-12)
        ell = np.ones(n_in) if lengthscales is None else np.asarray(lengthscales, float)
        counts = grid_counts(M, span / ell)
        axes = [
            np.linspace(lo, hi, c) if c > 1 else np.array([(lo + hi) / 2])
            for (lo, hi), c in zip(bounds, counts)
        ]
        return np.array(list(itertools.product(*axes)))
    if strategy == "subsample":
        if M > n:
            raise ValueError(f"cannot subsample {M} of {n} candidates")
        return candidates[np.sort(rng.choice(n, M, replace=False))]
    if strategy == "kmeans":
        if len(np.unique(candidates, axis=0)) < M:
            raise ValueError("kmeans needs at least M distinct candidates")
        scale = candidates.std(0)
        scale[scale == 0] = 1.0
        centers, _ = kmeans2(candidates / scale, M, minit="++", seed=rng)
        return centers * scale
    raise ValueError(f"unknown inducing strategy {strategy!r}")
