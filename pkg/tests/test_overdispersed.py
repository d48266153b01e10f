import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import gammaln

from nsum.bayes.mcmc import MCMCConfig, ModelError, PosteriorDraws, posterior_size
from nsum.bayes.overdispersed import fit_overdispersed, lgamma_ratio, loglik, nb_logpmf, renormalize_betas
from nsum.simulate import BiasConfig, DegreeModel, SubpopSpec, WorldConfig, simulate

QUICK = MCMCConfig(chains=2, burnin=500, keep=500, seed=3)


@pytest.mark.parametrize("r", [1e-6, 0.3, 9.99, 10.01, 57.0, 1e4, 1e9])
@pytest.mark.parametrize("y", [0, 1, 7, 60])
def test_lgamma_ratio_accuracy(r, y):
    import mpmath

    with mpmath.workdps(50):
        exact = float(mpmath.loggamma(mpmath.mpf(r) + y) - mpmath.loggamma(mpmath.mpf(r)))
    assert lgamma_ratio(r, y) == pytest.approx(exact, rel=1e-10, abs=1e-9)


@pytest.mark.parametrize("mean,omega", [(0.5, 1.2), (4.0, 3.0), (30.0, 1.01)])
def test_nb_logpmf_matches_scipy(mean, omega):
    y = np.arange(0, 200)
    z = math.log(omega - 1)
    ref = stats.nbinom.logpmf(y, mean / (omega - 1), 1 / omega)
    np.testing.assert_allclose(nb_logpmf(y, math.log(mean), z), ref, rtol=1e-9, atol=1e-9)
    p = np.exp(nb_logpmf(y, math.log(mean), z))
    assert p.sum() == pytest.approx(1.0, abs=1e-9)
    assert (y * p).sum() == pytest.approx(mean, rel=1e-6)
    assert ((y - mean) ** 2 * p).sum() == pytest.approx(omega * mean, rel=1e-6)


def test_nb_poisson_limit():
    # omega - 1 = e^-12: the remaining gap to Poisson is of that order times y^2
    y = np.arange(0, 40)
    np.testing.assert_allclose(nb_logpmf(y, math.log(5.0), -12.0), stats.poisson.logpmf(y, 5.0), atol=1e-2)
    np.testing.assert_allclose(nb_logpmf(y[:10], math.log(5.0), -12.0), stats.poisson.logpmf(y[:10], 5.0), atol=2e-4)


def world(n=300, omegas=(1.2, 3.0, 1.2, 3.0, 1.2, 3.0), seed=0):
    sizes = (800, 1200, 1600, 2000, 2500, 3000)
    subs = [SubpopSpec(f"k{j}", s) for j, s in enumerate(sizes)] + [SubpopSpec("u", 1500, False)]
    mixing = {f"k{j}": w for j, w in enumerate(omegas) if w > 1}
    cfg = WorldConfig(100_000, tuple(subs), DegreeModel("lognormal", mu=5.5, sigma=0.5), mixing=mixing,
                      respondents=n, seed=seed)
    return simulate(cfg, BiasConfig())


def test_shift_nonidentifiable():
    s = world().survey
    rng = np.random.default_rng(0)
    alpha, beta = rng.normal(5, 0.5, s.n), rng.normal(-4, 0.5, s.K)
    omega = rng.uniform(1.1, 3, s.K)
    for c in (-2.0, 0.7, 3.0):
        assert loglik(s, alpha + c, beta - c, omega) == pytest.approx(loglik(s, alpha, beta, omega), abs=1e-8)


def fake_draws(beta, alpha=None, known=None, N=1000):
    C, T, K = beta.shape
    alpha = np.zeros((C, T, 3)) if alpha is None else alpha
    return PosteriorDraws(
        {"alpha": alpha, "beta": beta},
        {"beta": [f"c{k}" for k in range(K)], "alpha": ["1", "2", "3"]},
        0, 0, 1,
        metadata={"population_total": N, "known_sizes": known or {"c0": 10, "c1": 30}},
    )


def test_renormalize_fixed_point():
    beta = np.broadcast_to(np.log([0.01, 0.03, 0.2]), (2, 5, 3)).copy()
    out = renormalize_betas(fake_draws(beta), ["c0", "c1"])
    np.testing.assert_allclose(out.params["renormalization_shift"], 0.0, atol=1e-14)
    np.testing.assert_allclose(out.params["beta"], beta, atol=1e-14)
    np.testing.assert_allclose(out.params["size"][..., 0], 200.0, rtol=1e-12)


def test_renormalize_recovers_log2():
    beta = np.broadcast_to(np.log([0.01, 0.03, 0.2]), (2, 5, 3)) + math.log(2)
    out = renormalize_betas(fake_draws(beta), ["c0", "c1"])
    np.testing.assert_allclose(out.params["renormalization_shift"], math.log(2), atol=1e-12)


def test_renormalize_requires_proportions():
    beta = np.zeros((1, 2, 3))
    with pytest.raises(ModelError):
        renormalize_betas(fake_draws(beta), ["c2"])
    with pytest.raises(ModelError):
        renormalize_betas(fake_draws(beta), [])


@pytest.fixture(scope="module")
def fitted():
    w = world(seed=11)
    draws = fit_overdispersed(w.survey, QUICK)
    return w, draws, renormalize_betas(draws, w.survey.known_columns)


def test_renormalize_preserves_likelihood(fitted):
    w, raw, ren = fitted
    s = w.survey
    for c, t in [(0, 0), (1, 17), (0, 499)]:
        a = loglik(s, raw.params["alpha"][c, t], raw.params["beta"][c, t], raw.params["omega"][c, t])
        b = loglik(s, ren.params["alpha"][c, t], ren.params["beta"][c, t], ren.params["omega"][c, t])
        assert abs(a - b) < 1e-8


def test_degrees_correlate_with_truth(fitted):
    w, _, ren = fitted
    est = np.exp(ren.params["alpha"]).mean(axis=(0, 1))
    true = w.degrees[w.respondents]
    assert np.corrcoef(est, true)[0, 1] > 0.8


def test_fit_recovers_size_and_omega_order(fitted):
    w, _, ren = fitted
    e = posterior_size(ren, "u")
    assert e.point == pytest.approx(1500, rel=0.25)
    om = np.median(ren.params["omega"], axis=(0, 1))[:6]
    assert om[1::2].min() > om[0::2].max()


@pytest.mark.filterwarnings("ignore:chains did not converge")
def test_seed_determinism():
    s = world(n=60).survey
    cfg = MCMCConfig(chains=2, burnin=30, keep=30, seed=8)
    a = fit_overdispersed(s, cfg)
    b = fit_overdispersed(s, MCMCConfig(chains=2, burnin=30, keep=30, seed=8, threads=2))
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_needs_two_columns():
    from conftest import make_survey

    with pytest.raises(ModelError):
        fit_overdispersed(make_survey([[1], [2]], {"c0": 5}), QUICK)
