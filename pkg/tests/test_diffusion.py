import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from procreate_lab.diffusion import (
    GaussianMixture,
    ddim_step,
    ddpm_step,
    epsilon_gmm,
    make_linear_schedule,
    predict_x0_one_step,
    ring_mixture,
    rollout_batch,
    run_sampler,
    timestep_grid,
)
from procreate_lab.errors import ParameterError

SCHEDULE = make_linear_schedule(1000, 1e-4, 0.02)


def log_q_oracle(x, t, schedule, mixture):
    """log density of the noised mixture, assembled from scipy's Gaussian logpdf."""
    a = schedule.alpha_bar[t]
    terms = []
    for w, mu, sd in zip(mixture.weights, mixture.means, mixture.component_std):
        cov = (a * sd**2 + 1 - a) * np.eye(mixture.dim)
        terms.append(np.log(w) + multivariate_normal(np.sqrt(a) * mu, cov).logpdf(x))
    return logsumexp(terms)


def fd_score(x, t, schedule, mixture, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (log_q_oracle(x + e, t, schedule, mixture) - log_q_oracle(x - e, t, schedule, mixture)) / (2 * h)
    return g


def random_mixture(rng, K=None, D=None, point_masses=False):
    K = K or int(rng.integers(1, 6))
    D = D or int(rng.integers(1, 5))
    sd = np.zeros(K) if point_masses else rng.uniform(0.0, 1.5, K)
    return GaussianMixture(rng.dirichlet(np.ones(K)), rng.normal(scale=2.0, size=(K, D)), sd)


# -- schedule -----------------------------------------------------------------

def test_schedule_first_entry():
    assert SCHEDULE.alpha_bar[0] == 1.0
    assert SCHEDULE.alpha_bar[1] == pytest.approx(0.9999, abs=1e-15)


def test_schedule_single_step():
    s = make_linear_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.alpha_bar, [1.0, 0.5])


def test_schedule_matches_bruteforce_product():
    prod = 1.0
    for u in range(1, 1001):
        beta = 1e-4 + (0.02 - 1e-4) * (u - 1) / 999
        prod *= 1.0 - beta
    assert SCHEDULE.alpha_bar[1000] == pytest.approx(prod, rel=1e-12)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_parameters(args):
    with pytest.raises(ParameterError):
        make_linear_schedule(*args)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 2000), lo=st.floats(1e-6, 0.5), span=st.floats(0.0, 0.49))
def test_schedule_strictly_decreasing(T, lo, span):
    try:
        s = make_linear_schedule(T, lo, min(lo + span, 0.999))
    except ParameterError:
        # only legitimate when the running product underflows
        assert np.prod(1.0 - np.linspace(lo, min(lo + span, 0.999), T)) < 1e-307
        return
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))


# -- epsilon ------------------------------------------------------------------

def test_epsilon_zero_at_noised_mean():
    mix = GaussianMixture([1.0], [[1.0, -2.0]], [0.0])
    t = 300
    x = np.sqrt(SCHEDULE.alpha_bar[t]) * mix.means[0]
    np.testing.assert_allclose(epsilon_gmm(x, t, SCHEDULE, mix), 0.0, atol=1e-14)


def test_epsilon_point_mass_closed_form():
    rng = np.random.default_rng(1)
    mix = GaussianMixture([1.0], [[0.5, 1.5, -1.0]], [0.0])
    for t in (1, 17, 500, 1000):
        x = rng.normal(size=3)
        a = SCHEDULE.alpha_bar[t]
        expected = (x - np.sqrt(a) * mix.means[0]) / np.sqrt(1 - a)
        np.testing.assert_allclose(epsilon_gmm(x, t, SCHEDULE, mix), expected, rtol=1e-10, atol=1e-12)


def test_epsilon_symmetric_pair_at_origin():
    mix = GaussianMixture([0.5, 0.5], [[2.0, 1.0], [-2.0, -1.0]], [0.0, 0.0])
    np.testing.assert_allclose(epsilon_gmm(np.zeros(2), 250, SCHEDULE, mix), 0.0, atol=1e-15)


def test_epsilon_matches_finite_difference_score():
    rng = np.random.default_rng(7)
    for _ in range(100):
        mix = random_mixture(rng)
        t = int(rng.integers(1, 1001))
        a = SCHEDULE.alpha_bar[t]
        x = np.sqrt(a) * mix.means[rng.integers(mix.n_components)] + rng.normal(size=mix.dim)
        expected = -np.sqrt(1 - a) * fd_score(x, t, SCHEDULE, mix)
        got = epsilon_gmm(x, t, SCHEDULE, mix)
        rel = np.linalg.norm(got - expected) / max(np.linalg.norm(expected), 1e-8)
        assert rel < 1e-5


def test_epsilon_rejects_t0():
    mix = ring_mixture(4, 0.1)
    with pytest.raises(ParameterError):
        epsilon_gmm(np.zeros(2), 0, SCHEDULE, mix)


def test_epsilon_far_from_all_components_is_finite():
    mix = ring_mixture(8, 0.0)
    eps = epsilon_gmm(np.array([400.0, -300.0]), 1, SCHEDULE, mix)
    assert np.all(np.isfinite(eps))


def test_epsilon_batches():
    rng = np.random.default_rng(3)
    mix = random_mixture(rng, K=3, D=2)
    X = rng.normal(size=(5, 2))
    batched = epsilon_gmm(X, 400, SCHEDULE, mix)
    for i in range(5):
        np.testing.assert_allclose(batched[i], epsilon_gmm(X[i], 400, SCHEDULE, mix), rtol=1e-13)


# -- one-step prediction and steps --------------------------------------------

def test_predict_x0_zero_eps():
    x = np.array([0.3, -1.2])
    t = 123
    np.testing.assert_array_equal(predict_x0_one_step(x, np.zeros(2), t, SCHEDULE), x / np.sqrt(SCHEDULE.alpha_bar[t]))


def test_predict_x0_identity_when_alpha_is_one():
    s = make_linear_schedule(3, 1e-300, 1e-300)
    assert s.alpha_bar[1] == 1.0
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(predict_x0_one_step(x, np.array([5.0, -7.0]), 1, s), x)


def test_predict_x0_point_mass_recovers_mean():
    rng = np.random.default_rng(11)
    mix = GaussianMixture([1.0], [[1.5, -0.5, 2.0]], [0.0])
    for t in rng.integers(1, 1001, size=20):
        x = rng.normal(scale=3.0, size=3)
        x0 = predict_x0_one_step(x, epsilon_gmm(x, int(t), SCHEDULE, mix), int(t), SCHEDULE)
        np.testing.assert_allclose(x0, mix.means[0], atol=1e-10)


def test_ddim_to_t0_returns_prediction():
    rng = np.random.default_rng(0)
    x, eps = rng.normal(size=2), rng.normal(size=2)
    np.testing.assert_array_equal(ddim_step(x, eps, 40, 0, SCHEDULE), predict_x0_one_step(x, eps, 40, SCHEDULE))


def test_ddim_zero_eps_rescales():
    x = np.array([0.7, -0.1])
    out = ddim_step(x, np.zeros(2), 600, 580, SCHEDULE)
    np.testing.assert_allclose(out, np.sqrt(SCHEDULE.alpha_bar[580]) / np.sqrt(SCHEDULE.alpha_bar[600]) * x, rtol=1e-14)


def test_ddim_deterministic_and_ordered():
    rng = np.random.default_rng(4)
    x, eps = rng.normal(size=3), rng.normal(size=3)
    a = ddim_step(x, eps, 500, 480, SCHEDULE)
    b = ddim_step(x, eps, 500, 480, SCHEDULE)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ParameterError):
        ddim_step(x, eps, 480, 480, SCHEDULE)


def test_ddim_keeps_point_mass_prediction_on_mean():
    mix = GaussianMixture([1.0], [[0.25, -1.75]], [0.0])
    x = np.random.default_rng(5).normal(size=2)
    for t, t_next in zip(timestep_grid(1000, 50)[:-1], timestep_grid(1000, 50)[1:]):
        x = ddim_step(x, epsilon_gmm(x, t, SCHEDULE, mix), t, t_next, SCHEDULE)
        if t_next > 0:
            x0 = predict_x0_one_step(x, epsilon_gmm(x, t_next, SCHEDULE, mix), t_next, SCHEDULE)
            np.testing.assert_allclose(x0, mix.means[0], atol=1e-9)


def test_ddpm_final_step_equals_ddim():
    rng = np.random.default_rng(2)
    x, eps = rng.normal(size=2), rng.normal(size=2)
    np.testing.assert_array_equal(ddpm_step(x, eps, 1, SCHEDULE, rng_seed=9), ddim_step(x, eps, 1, 0, SCHEDULE))


def test_ddpm_seeded():
    x, eps = np.ones(2), np.zeros(2)
    assert ddpm_step(x, eps, 500, SCHEDULE, 3).tobytes() == ddpm_step(x, eps, 500, SCHEDULE, 3).tobytes()
    assert not np.array_equal(ddpm_step(x, eps, 500, SCHEDULE, 3), ddpm_step(x, eps, 500, SCHEDULE, 4))


def test_ddpm_point_mass_monte_carlo_mean():
    mix = GaussianMixture([1.0], [[1.0, -0.5]], [0.0])
    samples = rollout_batch("ddpm", 1000, SCHEDULE, mix, n=1000, rng_seed=0)
    se = np.maximum(samples.std(axis=0, ddof=1) / np.sqrt(1000), 1e-12)
    assert np.all(np.abs(samples.mean(axis=0) - mix.means[0]) <= 3 * se)


def test_ddpm_single_gaussian_moments():
    mix = GaussianMixture([1.0], [[1.0, -0.5]], [1.0])
    samples = rollout_batch("ddpm", 1000, SCHEDULE, mix, n=2000, rng_seed=1)
    se = samples.std(axis=0, ddof=1) / np.sqrt(2000)
    assert np.all(np.abs(samples.mean(axis=0) - mix.means[0]) <= 3 * se)
    np.testing.assert_allclose(samples.var(axis=0, ddof=1), 1.0, rtol=0.1)


# -- sampler ------------------------------------------------------------------

def test_timestep_grid_default():
    grid = timestep_grid(1000, 50)
    assert grid[0] == 1000 and grid[-1] == 0 and len(grid) == 51
    assert np.all(np.diff(grid) == -20)


def test_timestep_grid_dedupes_when_oversubscribed():
    grid = timestep_grid(3, 5)
    assert grid == [3, 2, 1, 0]


def test_run_sampler_reproducible_and_hook_identity():
    mix = ring_mixture(8, 0.15)
    a = run_sampler("ddim", 50, SCHEDULE, mix, rng_seed=42)
    b = run_sampler("ddim", 50, SCHEDULE, mix, rng_seed=42)
    c = run_sampler("ddim", 50, SCHEDULE, mix, guidance_hook=lambda x, t, tn, e: e, rng_seed=42)
    assert a.tobytes() == b.tobytes() == c.tobytes()


def test_run_sampler_rejects_too_many_steps():
    with pytest.raises(ParameterError):
        run_sampler("ddim", 1001, SCHEDULE, ring_mixture(2, 0.1))
    with pytest.raises(ParameterError):
        run_sampler("pndm", 10, SCHEDULE, ring_mixture(2, 0.1))


def test_run_sampler_ddpm_reproducible():
    mix = ring_mixture(4, 0.2)
    assert (run_sampler("ddpm", 25, SCHEDULE, mix, rng_seed=5).tobytes()
            == run_sampler("ddpm", 25, SCHEDULE, mix, rng_seed=5).tobytes())


def chain_gain(steps):
    # unit-variance data: each deterministic step scales the centred state by cos(dtheta)
    theta = np.arccos(np.sqrt(SCHEDULE.alpha_bar[timestep_grid(1000, steps)]))
    return np.prod(np.cos(np.diff(theta)))


def test_ddim_single_gaussian_moments():
    mix = GaussianMixture([1.0], [[2.0, -1.0]], [1.0])
    samples = np.array([run_sampler("ddim", 50, SCHEDULE, mix, rng_seed=s) for s in range(1000)])
    se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    assert np.all(np.abs(samples.mean(axis=0) - mix.means[0]) <= 3 * se)
    np.testing.assert_allclose(samples.var(axis=0, ddof=1), chain_gain(50) ** 2, rtol=0.1)


def test_ddim_variance_matches_discrete_chain():
    mix = GaussianMixture([1.0], [[0.0, 0.0]], [1.0])
    n = 20000
    for steps in (10, 50):
        var = rollout_batch("ddim", steps, SCHEDULE, mix, n, rng_seed=steps).var(axis=0, ddof=1)
        target = chain_gain(steps) ** 2
        assert np.all(np.abs(var - target) < 4 * target * np.sqrt(2 / (n - 1)))
    # the shrinkage vanishes as the grid is refined
    assert chain_gain(10) < chain_gain(50) < chain_gain(1000) < 1.0
    assert chain_gain(1000) > 0.99


def test_mixture_validation():
    with pytest.raises(ParameterError):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [1.0, 1.0])
    with pytest.raises(ParameterError):
        GaussianMixture([1.0], [[np.inf]], [1.0])
    with pytest.raises(ParameterError):
        GaussianMixture([1.0], [[0.0]], [-1.0])
