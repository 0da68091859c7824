import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import oracles
from elgm.errors import InnerNonConvergenceError
from elgm.inference import (
    FitConfig,
    LaplaceObjective,
    fit,
    inner_solve,
    joint_density,
    laplace_objective,
    latent_summaries,
    log_joint_density,
    mixture_moments,
    sample_posterior,
    sample_theta,
    theta_marginal,
    theta_summaries,
)
from elgm.models import ElgmModel, IndexSets, Transform, bernoulli_glmm, conjugate_gaussian, gaussian_scale, grad_w
from elgm.simulate import build_model, rng_for, simulate_bernoulli_glmm, simulate_poisson_aggregate

LOG_2PI = math.log(2 * math.pi)

# frozen from oracles.conjugate_log_evidence([1, 1, 1, 1]) at 50 digits
CONJ_LOG_EVIDENCE = -4.8804730890357412
# frozen from oracles.gamma_laplace_log(5)
GAMMA_LOG = 3.1614091391581244
# frozen from oracles.gaussian_scale_moments on Philox(25) standard normals, n = 25
GS_LOGZ, GS_MEAN, GS_VAR = -36.082005076321586, -0.016303211689056116, 0.07654781455508858


def test_oracles_reproduce_frozen_values():
    assert float(oracles.conjugate_log_evidence([1, 1, 1, 1])) == pytest.approx(CONJ_LOG_EVIDENCE, abs=1e-15)
    assert float(oracles.gamma_laplace_log(5)) == pytest.approx(GAMMA_LOG, abs=1e-15)
    z, mean, var = oracles.gaussian_scale_moments(rng_for(25).standard_normal(25))
    assert (z, mean, var) == pytest.approx((GS_LOGZ, GS_MEAN, GS_VAR), rel=1e-10)


@pytest.fixture(scope="module")
def conj_fit():
    return fit(conjugate_gaussian([1.0, 1.0, 1.0, 1.0]))


@pytest.fixture(scope="module")
def gs_fit():
    return fit(gaussian_scale(rng_for(25).standard_normal(25)), k=7)


def test_inner_solve_conjugate():
    sol = inner_solve(conjugate_gaussian([1.0, 1.0, 1.0, 1.0]), np.zeros(0))
    assert sol.w_hat[0] == pytest.approx(0.8, abs=1e-12)
    assert sol.hessian_factor.L[0, 0] ** 2 == pytest.approx(5.0, rel=1e-14)
    assert sol.log_laplace == pytest.approx(CONJ_LOG_EVIDENCE, abs=1e-12)


def test_inner_solve_without_observations_returns_prior_mode():
    m = bernoulli_glmm(np.zeros(0, dtype=int), np.zeros((0, 2)), [], [], 3, 4)
    theta = np.array([0.3, -0.2])
    sol = inner_solve(m, theta)
    assert np.all(sol.w_hat == 0)
    L = sol.hessian_factor.L
    np.testing.assert_allclose(L @ L.T, m.prior_precision(theta).toarray(), rtol=1e-14)


def test_inner_solve_glmm_gradient_small():
    model = build_model("bernoulli-glmm", simulate_bernoulli_glmm(3, 200, 5, 12, [-0.5, 0.5], 0.5, 0.5).table)
    theta = np.array([-0.7, -0.7])
    sol = inner_solve(model, theta)
    assert np.max(np.abs(grad_w(model, sol.w_hat, theta))) <= 1e-8


def _gamma_toy(a=5.0, shift=0.0):
    # log pi(w) = a w - e^w once the unit normal prior is added back
    def log_lik(eta, theta):
        e = np.asarray(eta)[..., 0]
        return a * e - np.exp(e) + 0.5 * e * e + 0.5 * LOG_2PI + shift

    return ElgmModel(
        name="gamma-toy",
        design=sp.csr_matrix(np.ones((1, 1))),
        index_sets=IndexSets.singletons(1),
        log_lik=log_lik,
        log_lik_grad=lambda eta, theta: a - np.exp(eta) + eta,
        curvature=lambda eta, theta: np.exp(eta) - 1.0,
        prior_precision=lambda theta: sp.identity(1, format="csr"),
    )


def test_gamma_constant():
    val = laplace_objective(_gamma_toy(), np.zeros(0))
    assert val == pytest.approx(GAMMA_LOG, abs=1e-10)
    assert math.exp(val) == pytest.approx(23.6038, abs=1e-4)
    assert abs(math.exp(val) / 24 - 1) <= 0.017


@pytest.mark.parametrize("c", [-1e3, -2.5, 0.0, 7.0, 123.456])
def test_objective_shifts_by_likelihood_constant(c):
    base = laplace_objective(_gamma_toy(), np.zeros(0))
    assert laplace_objective(_gamma_toy(shift=c), np.zeros(0)) - base == pytest.approx(c, abs=1e-9 * max(1, abs(c)))


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.lists(st.floats(-4, 4), min_size=1, max_size=6))
def test_laplace_exact_for_quadratic_log_joint(theta, y):
    # y_i ~ N(w, e^theta), w ~ N(0, 1): the marginal is N(0, e^theta I + 1 1^T)
    y = np.array(y)
    n = y.size
    Z = np.ones((n, 1))
    model = gaussian_scale(y, design=Z)
    val = laplace_objective(model, np.array([theta]))
    S = math.exp(theta) * np.eye(n) + np.ones((n, n))
    exact = stats.multivariate_normal(np.zeros(n), S).logpdf(y)
    exact += model.log_prior(np.exp([theta])) + theta
    assert val == pytest.approx(exact, abs=1e-8)


def test_objective_cache_reuses_solutions():
    model = gaussian_scale(np.array([0.5, -1.0, 2.0]), design=np.ones((3, 1)))
    cache = LaplaceObjective(model)
    a = cache(np.array([0.1]))
    b = cache(np.array([0.1]))
    cache(np.array([0.2]))
    assert a == b and cache.evaluations == 2


def test_inner_nonconvergence_carries_context():
    model = build_model("bernoulli-glmm", simulate_bernoulli_glmm(0, 50, 3, 5, [0.0], 1.0, 1.0).table)
    with pytest.raises(InnerNonConvergenceError) as info:
        inner_solve(model, np.array([4.0, 4.0]), max_iter=1)
    assert info.value.iterations == 1
    assert info.value.theta.tolist() == [4.0, 4.0]
    assert info.value.grad_norm > 0


def test_fit_conjugate(conj_fit):
    assert len(conj_fit.grid.nodes) == 1
    assert conj_fit.lam.tolist() == [1.0]
    assert conj_fit.log_evidence == pytest.approx(CONJ_LOG_EVIDENCE, abs=1e-8)


def test_joint_density_conjugate_pointwise(conj_fit):
    w = np.linspace(-2, 3.5, 57)
    exact = stats.norm(0.8, math.sqrt(0.2)).pdf(w)
    got = np.array([joint_density(conj_fit, np.array([x])) for x in w])
    assert np.max(np.abs(got - exact)) <= 1e-10
    batched = joint_density(conj_fit, w[:, None])
    np.testing.assert_allclose(batched, got, rtol=1e-14)


def test_gaussian_scale_evidence_and_summaries(gs_fit):
    assert gs_fit.log_evidence == pytest.approx(GS_LOGZ, abs=1e-4)
    rows = {r["name"]: r for r in theta_summaries(gs_fit)}
    unc = rows["log_variance"]
    assert unc["scale"] == "unconstrained" and unc["available"]
    assert abs(unc["mean"] - GS_MEAN) <= 0.02
    assert abs(unc["sd"] ** 2 - GS_VAR) / GS_VAR <= 0.05
    q = unc["quantiles"]
    assert q[0] < q[1] < q[2]
    # natural scale e^theta, oracle moments of the pushed-forward density
    grid = np.linspace(-6, 6, 40001)
    logp = np.array([oracles.gaussian_scale_log_post(t, rng_for(25).standard_normal(25)) for t in grid])
    p = np.exp(logp - logp.max())
    p /= np.trapezoid(p, grid)
    nat_mean = np.trapezoid(p * np.exp(grid), grid)
    nat_sd = math.sqrt(np.trapezoid(p * (np.exp(grid) - nat_mean) ** 2, grid))
    nat = rows["variance"]
    assert nat["scale"] == "natural"
    assert abs(nat["sd"] / nat_sd - 1) <= 0.05
    assert abs(nat["mean"] / nat_mean - 1) <= 0.02


def test_k1_reduces_to_laplace():
    model = gaussian_scale(rng_for(25).standard_normal(25))
    f1 = fit(model, k=1)
    assert len(f1.grid.nodes) == 1
    np.testing.assert_array_equal(f1.grid.nodes[0], f1.theta_hat)
    lap = f1.inner[0].log_laplace
    expected = lap + 0.5 * LOG_2PI + math.log(f1.cholesky_out[0, 0])
    assert f1.log_evidence == pytest.approx(expected, abs=1e-12)
    rows = theta_summaries(f1)
    assert all(not r["available"] and math.isnan(r["sd"]) and np.all(np.isnan(r["quantiles"])) for r in rows)


def test_quadratic_objective_gives_mode_as_mean():
    # theta enters only through a Gaussian prior when the likelihood ignores it
    model = ElgmModel(
        name="flat",
        design=sp.csr_matrix(np.ones((1, 1))),
        index_sets=IndexSets.singletons(1),
        log_lik=lambda eta, theta: -0.5 * (np.asarray(eta)[..., 0] - 1.0) ** 2,
        log_lik_grad=lambda eta, theta: 1.0 - eta,
        curvature=lambda eta, theta: np.ones(1),
        prior_precision=lambda theta: sp.identity(1, format="csr"),
        log_prior=lambda nat: -0.5 * (nat[0] - 0.3) ** 2 / 0.04,
        transform=Transform(("identity",)),
        theta_names=("t",),
    )
    f = fit(model, k=5)
    mean = theta_summaries(f)[0]["mean"]
    assert mean == pytest.approx(f.theta_hat[0], abs=1e-10)
    assert f.theta_hat[0] == pytest.approx(0.3, abs=1e-5)


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_grid_contains_mode_for_odd_k(gs_fit, k):
    f = gs_fit if k == 7 else fit(gs_fit.model, k=k)
    mode = f.grid.mode_index
    np.testing.assert_array_equal(f.grid.nodes[mode], f.theta_hat)
    assert f.grid.log_values[mode] == np.max(f.grid.log_values)


def test_grid_containment_two_hyperparameters():
    model = build_model("bernoulli-glmm", simulate_bernoulli_glmm(1, 400, 5, 15, [-0.5, 0.5], 0.8, 0.8).table)
    f = fit(model, k=3)
    mode = f.grid.mode_index
    np.testing.assert_array_equal(f.grid.nodes[mode], f.theta_hat)
    assert f.grid.log_values[mode] == np.max(f.grid.log_values)


def test_sampler_is_deterministic(gs_fit):
    model = gaussian_scale(rng_for(4).standard_normal(20), design=np.ones((20, 1)))
    f = fit(model, k=5)
    a, b = sample_posterior(f, 500, 42), sample_posterior(f, 500, 42)
    assert a.draws.tobytes() == b.draws.tobytes()
    assert a.node_choice.tobytes() == b.node_choice.tobytes()
    c = sample_posterior(f, 500, 43)
    assert c.draws.tobytes() != a.draws.tobytes()
    assert sample_theta(gs_fit, 100, 5).tobytes() == sample_theta(gs_fit, 100, 5).tobytes()


def test_sampler_k1_single_node():
    model = gaussian_scale(rng_for(4).standard_normal(20), design=np.ones((20, 1)))
    f = fit(model, k=1)
    batch = sample_posterior(f, 100_000, 0)
    assert np.all(batch.node_choice == 0)
    sd = math.sqrt(f.inner[0].hessian_factor.inverse()[0, 0])
    assert abs(batch.draws.mean() - f.inner[0].w_hat[0]) <= 4 * sd / math.sqrt(1e5)


def test_sampler_conjugate_moments(conj_fit):
    B = 100_000
    x = sample_posterior(conj_fit, B, 1).draws[:, 0]
    assert abs(x.mean() - 0.8) <= 3 * math.sqrt(0.2 / B)
    # var of the sample variance for a normal is 2 sigma^4 / (B - 1)
    assert abs(x.var(ddof=1) - 0.2) <= 3 * math.sqrt(2 * 0.2**2 / (B - 1))


@pytest.fixture(scope="module")
def mix_fit():
    t = simulate_poisson_aggregate(2, 12, 2, [], 0.5, n_cells=3, population=(5.0, 15.0))
    return fit(build_model("poisson-aggregate", t.table), k=7)


def test_sampler_node_frequencies(mix_fit):
    B = 100_000
    batch = sample_posterior(mix_fit, B, 9)
    lam = mix_fit.lam
    counts = np.bincount(batch.node_choice, minlength=lam.size)
    keep = lam * B >= 5
    expected = lam[keep] * B
    observed = counts[keep]
    # lump the sparse tail into one cell
    expected = np.append(expected, B - expected.sum())
    observed = np.append(observed, B - observed.sum())
    if expected[-1] < 5:
        expected, observed = expected[:-1], observed[:-1]
        observed = observed * expected.sum() / observed.sum()
    p = stats.chisquare(observed, expected).pvalue
    assert p > 1e-3


def test_mixture_moments_match_samples(mix_fit):
    B = 100_000
    draws = sample_posterior(mix_fit, B, 3).draws
    mean, cov = mixture_moments(mix_fit)
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(draws.mean(axis=0) - mean) <= 3 * sd / math.sqrt(B) + 1e-12)


def test_joint_density_normalizes_and_bounds(mix_fit):
    f = fit(gaussian_scale(rng_for(4).standard_normal(20), design=np.ones((20, 1))), k=5)
    mean, cov = mixture_moments(f)
    sd = math.sqrt(cov[0, 0])
    w = np.linspace(mean[0] - 12 * sd, mean[0] + 12 * sd, 20001)
    dens = joint_density(f, w[:, None])
    assert np.trapezoid(dens, w) == pytest.approx(1.0, abs=1e-4)
    assert np.trapezoid(w * dens, w) == pytest.approx(f.lam @ f.node_means[:, 0], abs=1e-6)

    top = int(np.argmax(mix_fit.lam))
    sol = mix_fit.inner[top]
    bound = mix_fit.lam[top] * (2 * math.pi) ** (-mix_fit.m / 2) * math.exp(0.5 * sol.hessian_factor.log_det)
    assert joint_density(mix_fit, sol.w_hat) >= bound
    assert log_joint_density(mix_fit, sol.w_hat) >= math.log(bound)


def test_latent_summaries_agree_with_moments(mix_fit):
    rows = latent_summaries(mix_fit)
    mean, cov = mixture_moments(mix_fit)
    for i, r in enumerate(rows):
        assert r["mean"] == pytest.approx(mean[i], abs=1e-12)
        assert r["sd"] == pytest.approx(math.sqrt(cov[i, i]), rel=1e-10)
        assert r["quantiles"][0] < r["quantiles"][1] < r["quantiles"][2]


def test_theta_marginal_is_a_distribution(gs_fit):
    marg = theta_marginal(gs_fit)
    assert np.all(np.diff(marg.cdf) >= 0)
    assert marg.cdf[0] == 0.0 and marg.cdf[-1] == pytest.approx(1.0, abs=1e-15)
    mean = np.trapezoid(marg.theta * marg.density, marg.theta)
    assert mean == pytest.approx(GS_MEAN, abs=0.01)


def test_thread_count_invariance():
    model = build_model("bernoulli-glmm", simulate_bernoulli_glmm(5, 300, 4, 10, [0.2], 0.7, 0.7).table)
    a = fit(model, FitConfig(k=3, threads=1))
    b = fit(model, FitConfig(k=3, threads=4))
    np.testing.assert_allclose(a.lam, b.lam, atol=1e-12, rtol=0)
    np.testing.assert_allclose(a.node_means, b.node_means, atol=1e-12, rtol=0)
    assert abs(a.log_evidence - b.log_evidence) <= 1e-12


def test_theta_marginal_ignores_global_random_state(gs_fit):
    np.random.seed(1)
    a = theta_marginal(gs_fit).density
    np.random.seed(2)
    b = theta_marginal(gs_fit).density
    assert a.tobytes() == b.tobytes()
