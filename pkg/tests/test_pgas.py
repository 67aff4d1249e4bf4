import json

import numpy as np
import pytest

from gpssm.fic import FicStates, InducingSet, fic_one_step_predictive
from gpssm.gp_prior import sample_prior_trajectory
from gpssm.kernels import HyperPriors, LogNormalPrior
from gpssm.model import Dataset
from gpssm.pgas import (
    ChainSample,
    PgasConfig,
    PgasError,
    autocorrelation,
    chain_diagnostics,
    log_joint,
    read_chain,
    run_pgas,
    update_rate,
    write_chain,
)

from conftest import batch_means_se, linear_dataset, rts_smoother, tiny_model, tiny_priors

T = 5
INPUTS = np.zeros((T + 1, 0))


def _stats(theta, x, y):
    return np.array([x[0, 0], x[-1, 0], x[-1, 0] ** 2, x[2, 0] * x[3, 0], y[:, 0].mean(), *theta.pack()])


def _fic_prior_trajectory(model, theta, U, rng):
    x = np.empty((T + 1, 1))
    x[0] = model.sample_x0(1, rng)[0]
    st = FicStates(InducingSet(U, theta.cov()), theta.q, model.mean_fn)
    for t in range(1, T + 1):
        pm = fic_one_step_predictive(st, x[t - 1])
        x[t] = pm.mu + np.sqrt(pm.var) * rng.standard_normal(1)
        st.extend(x[t - 1][None], x[t][None])
    return x


def geweke(model, config, n_rounds, seed, U=None):
    """Marginal-conditional vs successive-conditional draws of (theta, x, y).

    Returns z-scores of the difference in means of each test statistic.
    """
    rng = np.random.default_rng(seed)
    n_x, n_in, n_y = 1, 1, 1

    def forward():
        th = model.priors.sample(n_x, n_in, n_y, rng)
        if U is None:
            x = sample_prior_trajectory(model, th, INPUTS, T, rng)
        else:
            x = _fic_prior_trajectory(model, th, U, rng)
        return th, x, x + np.sqrt(th.r) * rng.standard_normal(x.shape)

    marginal = np.array([_stats(*forward()) for _ in range(n_rounds)])
    th, x, y = forward()
    successive = []
    for _ in range(n_rounds):
        s = run_pgas(model, Dataset(INPUTS, y), config, rng, theta0=th, x_init=x)[-1]
        th, x = s.theta, s.trajectory
        y = x + np.sqrt(th.r) * rng.standard_normal(x.shape)
        successive.append(_stats(th, x, y))
    successive = np.array(successive)
    se = np.sqrt(marginal.var(0) / n_rounds + batch_means_se(successive) ** 2)
    ok = se > 0
    return (successive.mean(0)[ok] - marginal.mean(0)[ok]) / se[ok]


def one_step(**kw):
    return PgasConfig(n_particles=3, n_iterations=1, burn_in=0, **kw)


def test_geweke_fixed_hyperparameters():
    model = tiny_model(priors=tiny_priors(fixed=True))
    z = geweke(model, one_step(), 20_000, 1)
    assert np.all(np.abs(z) < 4), z


def test_geweke_sampled_hyperparameters_reversed_order():
    # the "xy" order runs in the acceptance suite
    model = tiny_model()
    z = geweke(model, one_step(theta_order="yx"), 20_000, 2)
    assert np.all(np.abs(z) < 4), z


def test_geweke_fic_prior():
    model = tiny_model(priors=tiny_priors(fixed=True))
    config = one_step(prior="fic", n_inducing=4, inducing_bounds=[[-3.0, 3.0]])
    data = Dataset(INPUTS, np.zeros((T + 1, 1)))
    U = run_pgas(model, data, config, np.random.default_rng(0), x_init=np.zeros(T + 1))[0].inducing
    np.testing.assert_allclose(U[:, 0], [-3, -1, 1, 3])
    z = geweke(model, config, 15_000, 3, U=U)
    assert np.all(np.abs(z) < 4), z


def collapse_check(n_iterations=4000, seed=4):
    """Vanishing GP signal variance with a random-walk mean is a Kalman model.

    Returns the chain's state means, the exact smoother means and the
    chain's Monte Carlo standard errors, plus both variance vectors.
    """
    names = ["log_lengthscale[0,0]", "log_signal_var[0]", "log_q[0]", "log_r[0]"]
    meds = [1.0, 1e-10, 0.3, 0.5]
    model = tiny_model(priors=HyperPriors({n: LogNormalPrior(m, 0.0) for n, m in zip(names, meds)}))
    y = np.array([[0.5], [1.4], [0.9], [-0.2], [0.1], [0.8]])
    chain = run_pgas(model, Dataset(INPUTS, y), PgasConfig(5, n_iterations, 200, seed=seed))
    X = np.array([s.trajectory[:, 0] for s in chain[200:]])
    ms, ps = rts_smoother(y[:, 0], 0.3, 0.5, 0.0, 1.0)
    return X.mean(0), ms, batch_means_se(X), X.var(0), ps


def test_linear_gaussian_collapse_matches_rts():
    mean, ms, se, var, ps = collapse_check()
    assert np.all(np.abs(mean - ms) < 3 * se), (mean, ms, se)
    np.testing.assert_allclose(var, ps, rtol=0.15)


def test_chain_records_and_log_joint(tmp_path):
    model = tiny_model()
    data = linear_dataset(8, np.random.default_rng(0))
    path = tmp_path / "chain.jsonl"
    chain = run_pgas(model, data, PgasConfig(4, 5, 1, seed=3), chain_path=path)
    assert [s.iteration for s in chain] == [1, 2, 3, 4, 5]
    back = read_chain(path, model)
    for a, b in zip(chain, back):
        np.testing.assert_array_equal(a.trajectory, b.trajectory)
        np.testing.assert_array_equal(a.theta.pack(), b.theta.pack())
    s = chain[-1]
    assert s.log_joint == pytest.approx(log_joint(model, s.theta, s.trajectory, data))
    lines = path.read_text().splitlines()
    assert len(lines) == 5 and json.loads(lines[0])["iteration"] == 1


def test_resume_reproduces_uninterrupted_run(tmp_path):
    model = tiny_model()
    data = linear_dataset(8, np.random.default_rng(0))
    full = run_pgas(model, data, PgasConfig(4, 6, 0, seed=9))
    path = tmp_path / "c.jsonl"
    run_pgas(model, data, PgasConfig(4, 3, 0, seed=9), chain_path=path)
    resumed = run_pgas(model, data, PgasConfig(4, 6, 0, seed=9), resume=read_chain(path, model),
                       chain_path=path)
    assert len(resumed) == 6 and len(read_chain(path, model)) == 6
    for a, b in zip(full, resumed):
        np.testing.assert_array_equal(a.trajectory, b.trajectory)


def test_write_chain_roundtrip_with_inducing(tmp_path):
    model = tiny_model()
    data = linear_dataset(6, np.random.default_rng(1))
    chain = run_pgas(model, data, PgasConfig(3, 2, 0, prior="fic", n_inducing=3,
                                             inducing_strategy="subsample"))
    write_chain(chain, tmp_path / "c.jsonl")
    back = read_chain(tmp_path / "c.jsonl", model)
    np.testing.assert_array_equal(back[1].inducing, chain[1].inducing)
    assert back[1].inducing.shape == (3, 1)


def test_callback_sees_every_sample():
    seen = []
    model = tiny_model()
    run_pgas(model, linear_dataset(4, np.random.default_rng(2)), PgasConfig(3, 4, 0), callback=seen.append)
    assert [s.iteration for s in seen] == [1, 2, 3, 4]
    assert all(isinstance(s, ChainSample) for s in seen)


def test_failure_is_wrapped_with_iteration_and_partial_chain(monkeypatch):
    import gpssm.pgas as pg

    real = pg.cpf_as_sweep
    calls = []

    def flaky(*args, **kw):
        calls.append(1)
        if len(calls) == 3:
            raise FloatingPointError("injected")
        return real(*args, **kw)

    monkeypatch.setattr(pg, "cpf_as_sweep", flaky)
    model = tiny_model()
    with pytest.raises(PgasError) as err:
        run_pgas(model, linear_dataset(4, np.random.default_rng(2)), PgasConfig(3, 5, 0))
    assert err.value.iteration == 3 and len(err.value.chain) == 2
    assert isinstance(err.value.__cause__, FloatingPointError)


@pytest.mark.parametrize("kw", [
    {"n_particles": 1}, {"n_iterations": 0}, {"burn_in": 50}, {"prior": "sparse"},
    {"inducing_strategy": "random"}, {"theta_order": "zz"}, {"slice_width": 0.0},
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        PgasConfig(**kw)


def test_diagnostics():
    assert autocorrelation([1, 2, 3, 4, 5, 6]) > 0.4
    assert autocorrelation([1, 1, 1]) == 0.0
    model = tiny_model()
    chain = run_pgas(model, linear_dataset(6, np.random.default_rng(3)), PgasConfig(4, 6, 2))
    d = chain_diagnostics(chain, 2)
    assert d["n_samples"] == 4 and len(d["update_rate"]) == 7
    assert set(d["theta"]) == set(chain[0].theta.names())
    assert np.all((update_rate(chain) >= 0) & (update_rate(chain) <= 1))


def test_single_iteration_with_fixed_theta_is_one_sweep():
    from gpssm.smc import cpf_as_sweep

    model = tiny_model(priors=tiny_priors(fixed=True))
    data = linear_dataset(6, np.random.default_rng(0))
    x0 = data.states
    chain = run_pgas(model, data, PgasConfig(4, 1, 0), np.random.default_rng(5), x_init=x0)
    _, x = cpf_as_sweep(model, model.theta0, data, x0, 4, np.random.default_rng(5))
    np.testing.assert_array_equal(chain[0].trajectory, x)
    np.testing.assert_array_equal(chain[0].theta.pack(), model.theta0.pack())


def _lengthscale_only_model(log_sd=0.7):
    names = ["log_lengthscale[0,0]", "log_signal_var[0]", "log_q[0]", "log_r[0]"]
    sds = [log_sd, 0.0, 0.0, 0.0]
    return tiny_model(priors=HyperPriors({n: LogNormalPrior(1.3, s) for n, s in zip(names, sds)}))


def test_flat_likelihood_recovers_prior():
    """With one transition the lengthscale does not enter the likelihood."""
    from scipy import stats

    from gpssm.pgas import sample_theta_x

    model = _lengthscale_only_model()
    x = np.array([[0.2], [5.0]])
    rng = np.random.default_rng(0)
    theta = model.theta0
    draws = []
    for _ in range(5000):
        theta = sample_theta_x(model, x, np.zeros((2, 0)), theta, rng)
        draws.append(theta.log_lengthscales[0, 0])
    draws = np.array(draws)
    prior = stats.norm(np.log(1.3), 0.7)
    for p in (0.1, 0.5, 0.9):
        assert abs(np.mean(draws < prior.ppf(p)) - p) < 0.04


def test_theta_x_scan_preserves_its_conditional():
    """theta ~ prior, x ~ p(x | theta), one scan: theta' must still follow the prior."""
    from scipy import stats

    from gpssm.pgas import sample_theta_x

    model = tiny_model()
    rng = np.random.default_rng(1)
    n = 3000
    before, after = [], []
    for _ in range(n):
        th = model.priors.sample(1, 1, 1, rng)
        x = sample_prior_trajectory(model, th, INPUTS, T, rng)
        new = sample_theta_x(model, x, INPUTS, th, rng)
        before.append(th.pack()[:3])
        after.append(new.pack()[:3])
    before, after = np.array(before), np.array(after)
    for j in range(3):
        assert stats.ks_2samp(before[:, j], after[:, j]).pvalue > 0.001


def test_measurement_noise_concentrates():
    from gpssm.pgas import sample_theta_y

    rng = np.random.default_rng(2)
    model = tiny_model()
    x = np.cumsum(rng.normal(size=(201, 1)), 0)
    data = Dataset(np.zeros((201, 0)), x + np.sqrt(0.5) * rng.normal(size=x.shape))
    theta = model.theta0
    rs = []
    for _ in range(500):
        theta = sample_theta_y(model, x, data, theta, rng)
        rs.append(theta.r[0])
    assert abs(np.mean(rs) / 0.5 - 1) < 0.2
    seeded = [sample_theta_y(model, x, data, model.theta0, np.random.default_rng(4)).r for _ in range(2)]
    assert seeded[0] == seeded[1]


def test_single_observation_stays_in_prior_support():
    from gpssm.pgas import sample_theta_y

    model = tiny_model()
    rng = np.random.default_rng(3)
    data = Dataset(np.zeros((1, 0)), np.array([[0.4]]))
    theta = model.theta0
    for _ in range(200):
        theta = sample_theta_y(model, np.zeros((1, 1)), data, theta, rng)
        assert np.isfinite(theta.log_r[0]) and theta.r[0] > 0


def test_update_rate_and_autocorrelation_edge_cases():
    th = tiny_model().theta0
    const = [ChainSample(i, th, np.ones((4, 1)), 0.0) for i in range(5)]
    np.testing.assert_array_equal(update_rate(const), 0.0)
    iid = np.random.default_rng(0).normal(size=20_000)
    assert abs(autocorrelation(iid)) < 4 / np.sqrt(20_000)


def test_unbounded_grid_follows_the_reference():
    model = tiny_model()
    data = linear_dataset(10, np.random.default_rng(5))
    chain = run_pgas(model, data, PgasConfig(4, 4, 0, prior="fic", n_inducing=5))
    for prev, cur in zip(chain, chain[1:]):
        x = prev.trajectory[:-1, 0]
        assert cur.inducing[:, 0].min() == x.min() and cur.inducing[:, 0].max() == x.max()
    fixed = run_pgas(model, data, PgasConfig(4, 3, 0, prior="fic", n_inducing=5,
                                             inducing_bounds=[[-1.0, 1.0]]))
    assert all(np.array_equal(s.inducing, fixed[0].inducing) for s in fixed)
