import numpy as np
import pytest

from gpssm.benchmark import BenchmarkSpec, benchmark_model
from gpssm.fic import InducingSet, select_inducing
from gpssm.kernels import MeanFunction
from gpssm.model import Dataset
from gpssm.pgas import trajectory_log_prior
from gpssm.smc import (
    DegeneracyError,
    MarkovTransition,
    ancestor_logits,
    bootstrap_pf,
    cpf_as_sweep,
    make_sweep,
    normalize,
    resample_ancestors,
)

from conftest import batch_means_se, linear_dataset, rts_smoother, tiny_model


def test_normalize_is_shift_invariant():
    w = normalize([1000.0, 1001.0, -np.inf])
    np.testing.assert_allclose(w, [1 / (1 + np.e), np.e / (1 + np.e), 0.0])


def test_normalize_all_zero_raises():
    with pytest.raises(DegeneracyError):
        normalize([-np.inf, -np.inf])


def test_ancestor_logits_drop_nan():
    out = ancestor_logits([0.0, 0.0, 0.0], [1.0, np.nan, np.inf])
    assert out[0] == 1.0 and out[1] == -np.inf and out[2] == -np.inf


def test_multinomial_resampling_frequencies():
    rng = np.random.default_rng(3)
    a = resample_ancestors([0.2, 0.5, 0.3], 100_000, rng)
    np.testing.assert_allclose(np.bincount(a) / 1e5, [0.2, 0.5, 0.3], atol=0.01)


def _ancestor_weight_error(prior_of):
    spec = BenchmarkSpec(T_train=15)
    model = benchmark_model(spec)
    train, _ = spec.datasets(0)
    theta = model.theta0
    prior, U = prior_of(theta)
    rng = np.random.default_rng(1)
    ref, N, T = train.states, 5, train.T
    sw = make_sweep(model, theta, train.inputs, prior, ref)
    x = np.empty((N, T + 1, 1))
    x[:, 0] = 3 * rng.normal(size=(N, 1))
    x[-1, 0] = ref[0]
    is_ref = np.arange(N) == N - 1
    sw.start(x[:, 0])
    worst = 0.0
    for t in range(1, T + 1):
        lw = sw.ancestor_logweights(t, x[:, t - 1])
        for i in range(N):
            full = np.vstack([x[i, :t], ref[t:]])
            pre = trajectory_log_prior(model, theta, x[i, :t], train.inputs, U) if t > 1 else 0.0
            brute = trajectory_log_prior(model, theta, full, train.inputs, U) - pre
            worst = max(worst, abs(brute - lw[i]))
        a = rng.integers(0, N, N)
        x[:, :t] = x[a, :t]
        sw.resample(a)
        mu, var = sw.predict(t, x[:, t - 1])
        x[:, t] = mu + np.sqrt(var) * rng.normal(size=mu.shape)
        x[-1, t] = ref[t]
        sw.advance(t, x[:, t - 1], x[:, t], is_ref)
    return worst


def test_dense_ancestor_weights_match_brute_force_ratio():
    assert _ancestor_weight_error(lambda th: ("dense", None)) <= 1e-9


def test_fic_ancestor_weights_match_brute_force_ratio():
    def prior(th):
        U = select_inducing(np.zeros((1, 2)), 12, "grid", bounds=[[-20, 20], [-1, 1]])
        return InducingSet(U, th.cov()), U

    assert _ancestor_weight_error(prior) <= 1e-9


def test_reference_is_kept_in_last_slot(rng):
    model = tiny_model()
    data = linear_dataset(10, rng)
    ref = data.states
    system, _ = cpf_as_sweep(model, model.theta0, data, ref, 4, rng)
    np.testing.assert_array_equal(system.cloud[:, -1], ref)
    lin = system.lineage(2)
    np.testing.assert_array_equal(system.cloud[np.arange(11), lin], system.trajectories[2])


def test_conditional_sweep_needs_two_particles(rng):
    model = tiny_model()
    data = linear_dataset(3, rng)
    with pytest.raises(ValueError):
        cpf_as_sweep(model, model.theta0, data, data.states, 1, rng)


def test_bootstrap_is_reproducible():
    model = tiny_model()
    data = linear_dataset(8, np.random.default_rng(0))
    a = bootstrap_pf(model, model.theta0, data, 10, np.random.default_rng(5))
    b = bootstrap_pf(model, model.theta0, data, 10, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (9, 1)


def test_make_sweep_rejects_unknown_prior():
    model = tiny_model()
    with pytest.raises(ValueError):
        make_sweep(model, model.theta0, np.zeros((3, 0)), "sparse")


def test_cpf_as_leaves_exact_smoother_invariant():
    """Known linear-Gaussian transition: the chain's state means match RTS."""
    model = tiny_model()
    theta = model.theta0
    q, r = float(theta.q[0]), float(theta.r[0])
    y = np.array([[0.4], [1.1], [0.2], [-0.5], [0.3]])
    data = Dataset(np.zeros((5, 0)), y)
    trans = MarkovTransition(MeanFunction("identity-linear", 1, 0), theta.q)
    ms, ps = rts_smoother(y[:, 0], q, r, 0.0, 1.0)
    rng = np.random.default_rng(7)
    x = np.zeros((5, 1))
    draws = []
    for _ in range(6000):
        _, x = cpf_as_sweep(model, theta, data, x, 3, rng, prior=trans)
        draws.append(x[:, 0])
    draws = np.array(draws[500:])
    se = batch_means_se(draws)
    assert np.all(np.abs(draws.mean(0) - ms) < 4 * se)
    np.testing.assert_allclose(draws.var(0), ps, rtol=0.15)


def test_propose_limits_and_moments():
    from gpssm.smc import propose

    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(propose([1.5], [0.0], rng), [1.5])
    draws = propose(np.full(100_000, 0.7), np.full(100_000, 2.0), rng)
    se = np.sqrt(2.0 / 1e5)
    assert abs(draws.mean() - 0.7) < 4 * se
    assert abs(draws.var() - 2.0) < 4 * 2.0 * np.sqrt(2 / 1e5)
    a = propose([0.0], [1.0], np.random.default_rng(9))
    assert a == propose([0.0], [1.0], np.random.default_rng(9))


def test_reweight_cases():
    from scipy.stats import norm

    from gpssm.model import MeasurementModel
    from gpssm.smc import reweight

    model = tiny_model(measurement=MeasurementModel("quadratic", [0.05]))
    _, w = reweight(model, np.array([1.0]), np.full((4, 1), 2.0), np.array([1.0]))
    np.testing.assert_allclose(w, 0.25)
    x = np.array([[0.0], [3.0], [-7.0]])
    lw, w = reweight(model, np.array([0.4]), x, np.array([0.8]))
    ref = norm(0.05 * x[:, 0] ** 2, np.sqrt(0.8)).pdf(0.4)
    np.testing.assert_allclose(w, ref / ref.sum(), rtol=1e-12)
    np.testing.assert_allclose(normalize(np.log([3.0, 1.0])), [0.75, 0.25])


def test_resampling_edge_cases():
    rng = np.random.default_rng(1)
    assert np.all(resample_ancestors([0.0, 1.0, 0.0], 50, rng) == 1)
    a = resample_ancestors(np.full(4, 0.25), 100_000, rng)
    freq = np.bincount(a, minlength=4) / 1e5
    assert np.all(np.abs(freq - 0.25) < 4 * np.sqrt(0.25 * 0.75 / 1e5))
    np.testing.assert_array_equal(resample_ancestors([0.5, 0.5], 10, np.random.default_rng(2)),
                                  resample_ancestors([0.5, 0.5], 10, np.random.default_rng(2)))


def test_ancestor_probabilities_reduce_to_weights():
    from gpssm.smc import ancestor_sample

    lw = np.log([0.1, 0.6, 0.3])
    np.testing.assert_allclose(normalize(ancestor_logits(lw, np.zeros(3))), [0.1, 0.6, 0.3])
    # particles identical to the reference prefix share the same suffix density
    model = tiny_model()
    ref = np.array([[0.0], [0.5], [0.2], [0.9]])
    sw = make_sweep(model, model.theta0, np.zeros((4, 0)), "dense", ref)
    x = np.repeat(ref[None], 3, 0)
    sw.start(x[:, 0])
    lw_suffix = sw.ancestor_logweights(1, x[:, 0])
    np.testing.assert_allclose(normalize(ancestor_logits(np.zeros(3), lw_suffix)), 1 / 3)
    counts = np.bincount([ancestor_sample(np.zeros(3), lw_suffix, np.random.default_rng(i))
                          for i in range(3000)], minlength=3)
    assert counts.min() > 900


def test_two_particle_four_step_ancestor_weights():
    model = tiny_model()
    theta = model.theta0
    rng = np.random.default_rng(11)
    ref = rng.normal(size=(5, 1))
    x = rng.normal(size=(2, 5, 1))
    inputs = np.zeros((5, 0))
    for t in range(1, 5):
        sw = make_sweep(model, theta, inputs, "dense", ref)
        sw.start(x[:, 0])
        for s in range(1, t):
            sw.resample(np.arange(2))
            sw.advance(s, x[:, s - 1], x[:, s], np.array([False, False]))
        lw = sw.ancestor_logweights(t, x[:, t - 1])
        for i in range(2):
            full = trajectory_log_prior(model, theta, np.vstack([x[i, :t], ref[t:]]), inputs)
            pre = trajectory_log_prior(model, theta, x[i, :t], inputs) if t > 1 else 0.0
            assert lw[i] == pytest.approx(full - pre, abs=1e-10)


def test_near_deterministic_reference_is_tracked():
    from gpssm.kernels import HyperPriors, LogNormalPrior

    names = ["log_lengthscale[0,0]", "log_signal_var[0]", "log_q[0]", "log_r[0]"]
    model = tiny_model(priors=HyperPriors({n: LogNormalPrior(m, 0.0)
                                           for n, m in zip(names, [1.0, 1e-8, 1e-4, 1e-4])}))
    ref = np.linspace(0, 1, 11)[:, None]
    data = Dataset(np.zeros((11, 0)), ref.copy())
    _, x = cpf_as_sweep(model, model.theta0, data, ref, 2, np.random.default_rng(0))
    assert np.abs(x - ref).max() < 0.1


def test_bootstrap_tracks_magnitude_with_precise_observations():
    from gpssm.model import KnownSystem, MeasurementModel, simulate

    quad = MeasurementModel("quadratic", [1.0])
    system = KnownSystem(MeanFunction("identity-linear", 1, 0), np.array([0.1]), quad, np.array([1e-4]))
    data = simulate(system, 30, seed=2)
    model = tiny_model(measurement=quad)
    theta = model.theta0.replace(log_r=np.log([1e-4]))
    x = bootstrap_pf(model, theta, data, 500, np.random.default_rng(0))
    assert np.median(np.abs(np.abs(x) - np.abs(data.states))) < 0.05
    assert bootstrap_pf(tiny_model(), tiny_model().theta0, linear_dataset(3, np.random.default_rng(0)),
                        1, np.random.default_rng(0)).shape == (4, 1)


def test_mixing_improves_with_particle_count():
    spec = BenchmarkSpec(T_train=100)
    train, _ = spec.datasets(3)
    model = benchmark_model(spec)
    theta = model.theta0.replace(log_q=np.log([10.0]), log_r=np.log([1.0]))
    rates = []
    for N in (2, 5, 20):
        rng = np.random.default_rng(N)
        x = train.states.copy()
        moved = 0
        for _ in range(30):
            _, new = cpf_as_sweep(model, theta, train, x, N, rng)
            moved += new[50, 0] != x[50, 0]
            x = new
        rates.append(moved / 30)
    assert rates[0] <= rates[1] <= rates[2], rates
    assert rates[2] > 0.5
