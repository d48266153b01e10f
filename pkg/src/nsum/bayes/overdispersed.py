"""Overdispersed (negative-binomial) ARD model and rare-name renormalization.

y_ik ~ NegBin(mean exp(alpha_i + beta_k), variance omega_k * mean), i.e. a
Poisson mixed over a gamma with mean 1 and shape exp(alpha_i + beta_k) /
(omega_k - 1). Priors: alpha_i ~ N(mu_a, sigma_a^2), beta_k ~ N(mu_b,
sigma_b^2), flat mu_a, sigma_a, sigma_b, mu_b ~ N(0, 10^2), 1/omega_k ~
U(0, 1). omega_k is sampled as z_k = log(omega_k - 1), which makes the
prior on z_k standard logistic.

alpha and beta are identified only up to a common shift; the sampler draws
that shift exactly from its conditional each sweep, and
:func:`renormalize_betas` pins it using columns with trusted proportions.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
from scipy.special import gammaln

from ..survey import ArdSurvey
from .mcmc import MCMCConfig, ModelError, PosteriorDraws, Proposal, Recorder, finalize, mh_accept, run_chains

MU_BETA_SD = 10.0
Z_MIN = -12.0  # omega - 1 >= 6e-6; numerically Poisson below this
Z_MAX = 8.0


def _stirling_tail(x):
    inv = 1.0 / x
    inv2 = inv * inv
    return inv * (1 / 12 - inv2 * (1 / 360 - inv2 * (1 / 1260 - inv2 / 1680)))


def lgamma_ratio(r, y):
    """log Gamma(r + y) - log Gamma(r), accurate when r is huge relative to y."""
    r = np.asarray(r, dtype=float)
    y = np.asarray(y, dtype=float)
    r, y = np.broadcast_arrays(r, y)
    out = np.empty(r.shape)
    big = r > 10.0
    small = ~big
    out[small] = gammaln(r[small] + y[small]) - gammaln(r[small])
    rb, yb = r[big], y[big]
    out[big] = (
        (rb - 0.5) * np.log1p(yb / rb)
        + yb * np.log(rb + yb)
        - yb
        + _stirling_tail(rb + yb)
        - _stirling_tail(rb)
    )
    return out


def nb_logpmf(y, log_mu, z):
    """Negative-binomial log pmf with mean exp(log_mu) and variance (1 + e^z) * mean."""
    mu = np.exp(log_mu)
    e = np.exp(z)
    sp = np.log1p(e)
    return lgamma_ratio(mu / e, y) - gammaln(y + 1.0) - mu * (sp / e) + y * (z - sp)


def loglik(survey: ArdSurvey, alpha, beta, omega) -> float:
    """Total log-likelihood of the survey at one parameter value."""
    y = survey.responses.astype(float)
    obs = survey.observed()
    z = np.log(np.asarray(omega, dtype=float) - 1.0)
    ll = nb_logpmf(y, np.add.outer(alpha, beta), z[None, :])
    return float(np.sum(np.where(obs, ll, 0.0)))


def fit_overdispersed(survey: ArdSurvey, config: MCMCConfig | None = None) -> PosteriorDraws:
    config = config or MCMCConfig()
    n, K = survey.n, survey.K
    if n < 2 or K < 2:
        raise ModelError("overdispersed model needs n >= 2 respondents and K >= 2 columns")
    y = survey.responses.astype(float)
    obs = survey.observed()
    y = np.where(obs, y, 0.0)
    lgy = gammaln(y + 1.0)
    n_obs_col = obs.sum(axis=0)
    if np.any(n_obs_col == 0):
        raise ModelError("every column needs at least one observed response")
    col_mean = (y * obs).sum(axis=0) / n_obs_col
    row_rate = ((y * obs).sum(axis=1) + 0.5) / ((col_mean[None, :] + 0.1) * obs).sum(axis=1).clip(1e-9)

    def ll_matrix(alpha, beta, z):
        log_mu = alpha[:, None] + beta[None, :]
        mu = np.exp(log_mu)
        e = np.exp(z)[None, :]
        sp = np.log1p(e)
        ll = lgamma_ratio(mu / e, y) - lgy - mu * (sp / e) + y * (np.log(e) - sp)
        return np.where(obs, ll, 0.0)

    def chain(rng: np.random.Generator, c: int):
        beta = np.log(col_mean + 0.1) + 0.1 * rng.standard_normal(K)
        alpha = np.log(row_rate) + 0.1 * rng.standard_normal(n)
        z = np.clip(rng.normal(0.0, 0.5, K), Z_MIN, Z_MAX)
        mu_a, sig_a = alpha.mean(), max(alpha.std(), 0.1)
        mu_b, sig_b = beta.mean(), max(beta.std(), 0.1)
        LL = ll_matrix(alpha, beta, z)
        p_alpha = Proposal(n, 0.3, config)
        p_beta = Proposal(K, 0.05, config)
        p_z = Proposal(K, 0.5, config)
        rec = Recorder(config)
        for adapting, keep in rec.iterations():
            # respondent effects
            prop = alpha + p_alpha.draw(rng)
            LLp = ll_matrix(prop, beta, z)
            d = LLp.sum(1) - LL.sum(1) - ((prop - mu_a) ** 2 - (alpha - mu_a) ** 2) / (2 * sig_a**2)
            acc = mh_accept(d, rng)
            alpha = np.where(acc, prop, alpha)
            LL[acc] = LLp[acc]
            p_alpha.record(acc, adapting)
            # subpopulation effects
            prop = beta + p_beta.draw(rng)
            LLp = ll_matrix(alpha, prop, z)
            d = LLp.sum(0) - LL.sum(0) - ((prop - mu_b) ** 2 - (beta - mu_b) ** 2) / (2 * sig_b**2)
            acc = mh_accept(d, rng)
            beta = np.where(acc, prop, beta)
            LL[:, acc] = LLp[:, acc]
            p_beta.record(acc, adapting)
            # overdispersion, logistic prior on z
            prop = z + p_z.draw(rng)
            inside = (prop >= Z_MIN) & (prop <= Z_MAX)
            prop_c = np.where(inside, prop, z)
            LLp = ll_matrix(alpha, beta, prop_c)
            lp = lambda v: v - 2.0 * np.log1p(np.exp(v))  # noqa: E731
            d = np.where(inside, LLp.sum(0) - LL.sum(0) + lp(prop_c) - lp(z), -np.inf)
            acc = mh_accept(d, rng)
            z = np.where(acc, prop_c, z)
            LL[:, acc] = LLp[:, acc]
            p_z.record(acc, adapting)
            # hyperparameters (flat on sigma => InvGamma((m-1)/2, SS/2) on sigma^2)
            mu_a = rng.normal(alpha.mean(), sig_a / math.sqrt(n))
            ss = np.sum((alpha - mu_a) ** 2)
            sig_a = math.sqrt(ss / 2 / rng.gamma((n - 1) / 2))
            prec = K / sig_b**2 + 1 / MU_BETA_SD**2
            mu_b = rng.normal((beta.sum() / sig_b**2) / prec, 1 / math.sqrt(prec))
            ss = np.sum((beta - mu_b) ** 2)
            sig_b = math.sqrt(ss / 2 / rng.gamma((K - 1) / 2)) if K > 1 else sig_b
            # exact draw along the nonidentified direction
            new_mu_b = rng.normal(0.0, MU_BETA_SD)
            shift = mu_b - new_mu_b
            alpha = alpha + shift
            mu_a += shift
            beta = beta - shift
            mu_b = new_mu_b
            if keep:
                rec.save(
                    alpha=alpha,
                    beta=beta,
                    omega=1.0 + np.exp(z),
                    mu_alpha=mu_a,
                    sigma_alpha=sig_a,
                    mu_beta=mu_b,
                    sigma_beta=sig_b,
                )
        acc = {"alpha": p_alpha.acceptance(), "beta": p_beta.acceptance(), "omega": p_z.acceptance()}
        return rec.arrays(), acc

    params, acceptance = run_chains(chain, config)
    return finalize(
        params,
        {
            "alpha": list(survey.respondent_ids),
            "beta": list(survey.columns),
            "omega": list(survey.columns),
        },
        acceptance,
        config,
        {
            "model": "overdispersed",
            "method": "zheng",
            "population_total": int(survey.population_total),
            "known_sizes": dict(survey.known_sizes),
            "columns": list(survey.columns),
            "decisions": [
                "negative binomial with Var = omega * mean (gamma shape = mean/(omega-1))",
                "omega sampled on log(omega - 1); 1/omega ~ U(0,1)",
                "alpha/beta shift drawn exactly each sweep; renormalize before interpreting",
            ],
        },
    )


def renormalize_betas(
    draws: PosteriorDraws,
    rare_columns,
    rare_proportions: dict | None = None,
) -> PosteriorDraws:
    """Shift alpha up and beta down, per draw, so that sum over rare k of exp(beta_k)
    equals the sum of their true proportions N_k / N.

    Adds ``size`` draws N * exp(beta_u) for every column without a known size.
    The applied per-draw shifts are kept as the ``renormalization_shift`` parameter.
    """
    rare = list(rare_columns)
    if not rare:
        raise ModelError("renormalization needs at least one rare column")
    cols = draws.labels["beta"]
    N = draws.metadata.get("population_total")
    known = draws.metadata.get("known_sizes", {})
    if rare_proportions is None:
        missing = [c for c in rare if c not in known]
        if missing or N is None:
            raise ModelError(f"no trusted proportion for column(s) {missing}")
        rare_proportions = {c: known[c] / N for c in rare}
    for c in rare:
        if c not in cols:
            raise ModelError(f"rare column {c!r} is not in the fit")
        if c not in rare_proportions:
            raise ModelError(f"no proportion given for rare column {c!r}")
    idx = [cols.index(c) for c in rare]
    target = math.log(sum(rare_proportions[c] for c in rare))
    beta = draws.params["beta"]
    bmax = beta[:, :, idx].max(axis=2, keepdims=True)
    lse = bmax[..., 0] + np.log(np.exp(beta[:, :, idx] - bmax).sum(axis=2))
    shift = lse - target
    params = dict(draws.params)
    params["alpha"] = draws.params["alpha"] + shift[:, :, None]
    params["beta"] = beta - shift[:, :, None]
    if "mu_alpha" in params:
        params["mu_alpha"] = params["mu_alpha"] + shift
        params["mu_beta"] = params["mu_beta"] - shift
    labels = dict(draws.labels)
    unknown = [c for c in cols if c not in known]
    if unknown and N is not None:
        params["size"] = N * np.exp(params["beta"][:, :, [cols.index(c) for c in unknown]])
        labels["size"] = unknown
    meta = dict(draws.metadata)
    params["renormalization_shift"] = shift
    meta["rare_columns"] = rare
    meta["decisions"] = [
        *meta.get("decisions", []),
        "renormalized so sum of exp(beta) over rare columns equals their true proportion sum",
    ]
    return replace(draws, params=params, labels=labels, metadata=meta)
