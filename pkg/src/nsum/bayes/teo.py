"""Poisson ARD models with Likert transmission terms and covariate barrier terms.

    y_ik ~ Poisson(lambda * alpha_i * exp(beta_k (x_ik - U_k)) * exp(z_i . gamma_k) * N_k)

x_ik is respondent i's Likert answer about subpopulation k on a 1..U_k scale;
z is a column-centered covariate matrix (barrier variant only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc, gammaincinv

from ..survey import ArdSurvey
from .mcmc import MCMCConfig, ModelError, PosteriorDraws, Proposal, Recorder, finalize, mh_accept, run_chains

VARIANTS = ("transmission", "transmission_barrier")


@dataclass(frozen=True)
class TeoPriors:
    """Weakly informative defaults.

    log alpha_i ~ N(0, sigma_alpha^2), sigma_alpha^2 ~ InvGamma(1, 1),
    lambda ~ Gamma(1e-3, 1e-3), beta_k and gamma_jk ~ N(0, sd^2), N_u ~ U(0, N).
    """

    beta_sd: float = 2.0
    gamma_sd: float = 2.0
    lambda_shape: float = 1e-3
    lambda_rate: float = 1e-3
    sigma2_shape: float = 1.0
    sigma2_scale: float = 1.0
    size_upper: float | None = None


def _truncated_gamma(shape, rate, upper, rng):
    """Draw from Gamma(shape, rate) restricted to (0, upper] by inversion."""
    top = gammainc(shape, rate * upper)
    u = rng.random(np.shape(shape)) * top
    u = np.maximum(u, np.finfo(float).tiny)
    return np.minimum(gammaincinv(shape, u) / rate, upper)


def fit_teo(
    survey: ArdSurvey,
    variant: str = "transmission",
    config: MCMCConfig | None = None,
    priors: TeoPriors | None = None,
) -> PosteriorDraws:
    """Fit the Likert transmission model, optionally with covariate barrier effects.

    Raises
    ------
    ModelError
        Missing Likert responses or scale bounds, or missing covariates for
        the barrier variant.
    """
    if variant not in VARIANTS:
        raise ModelError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    config = config or MCMCConfig()
    priors = priors or TeoPriors()
    barrier = variant == "transmission_barrier"
    if survey.likert is None or survey.likert_upper is None:
        raise ModelError("Likert responses and their scale upper bounds are required")
    missing_u = [c for c in survey.columns if c not in survey.likert_upper]
    if missing_u:
        raise ModelError(f"no Likert upper bound for column(s) {missing_u}")
    x = np.asarray(survey.likert, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ModelError("Likert responses must be complete")
    if barrier:
        if survey.covariates is None:
            raise ModelError("the barrier variant needs respondent covariates")
        z = np.asarray(survey.covariates, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        z = z - z.mean(axis=0)
    else:
        z = np.zeros((survey.n, 0))
    unknown = survey.unknown_columns
    if not unknown:
        raise ModelError("no unknown subpopulation to estimate")
    if not survey.known_columns:
        raise ModelError("need at least one known subpopulation")

    n, K, p = survey.n, survey.K, z.shape[1]
    N = float(survey.population_total)
    size_upper = float(priors.size_upper or N)
    uidx = [survey.index(c) for c in unknown]
    kidx = [survey.index(c) for c in survey.known_columns]
    obs = survey.observed()
    y = np.where(obs, survey.responses, 0).astype(float)
    upper = np.array([survey.likert_upper[c] for c in survey.columns], dtype=float)
    dx = x - upper[None, :]
    col_y = y.sum(axis=0)
    known_log = np.zeros(K)
    known_log[kidx] = np.log([survey.known_sizes[c] for c in survey.known_columns])
    dx_bar = np.array([dx[obs[:, k], k].mean() if obs[:, k].any() else 0.0 for k in range(K)])

    def chain(rng: np.random.Generator, c: int):
        log_size = known_log.copy()
        # crude moment start: rate per unit size from known columns
        rate0 = y[:, kidx].sum() / (obs[:, kidx] * np.exp(known_log[kidx])).sum()
        for k in uidx:
            guess = col_y[k] / max(rate0 * obs[:, k].sum(), 1e-12)
            log_size[k] = math.log(min(max(guess, 1e-3 * N), 0.5 * size_upper))
        log_size[uidx] += 0.1 * rng.standard_normal(len(uidx))
        log_lam = math.log(max(rate0, 1e-300)) + 0.1 * rng.standard_normal()
        a = 0.1 * rng.standard_normal(n)
        sig2 = 0.25
        beta = 0.1 * rng.standard_normal(K)
        gamma = np.zeros((p, K))

        def eta_of(log_lam, a, beta, gamma, log_size):
            return log_lam + a[:, None] + beta[None, :] * dx + z @ gamma + log_size[None, :]

        def cell_ll(eta):
            return np.where(obs, y * eta - np.exp(eta), 0.0)

        eta = eta_of(log_lam, a, beta, gamma, log_size)
        LL = cell_ll(eta)
        p_a = Proposal(n, 0.3, config)
        p_beta = Proposal(K, 0.05, config)
        p_gamma = Proposal((p, K), 0.05, config)
        p_shift = Proposal((), 0.1, config)
        rec = Recorder(config)
        for adapting, keep in rec.iterations():
            # respondent effects
            step = p_a.draw(rng)
            etap = eta + step[:, None]
            LLp = cell_ll(etap)
            ap = a + step
            lr = LLp.sum(1) - LL.sum(1) - (ap**2 - a**2) / (2 * sig2)
            acc = mh_accept(lr, rng)
            a = np.where(acc, ap, a)
            eta[acc], LL[acc] = etap[acc], LLp[acc]
            p_a.record(acc, adapting)
            sig2 = (priors.sigma2_scale + 0.5 * np.sum(a**2)) / rng.gamma(priors.sigma2_shape + n / 2)

            # lambda: conjugate gamma
            base = np.where(obs, np.exp(eta - log_lam), 0.0).sum()
            lam = rng.gamma(priors.lambda_shape + y.sum()) / (priors.lambda_rate + base)
            eta += math.log(lam) - log_lam
            log_lam = math.log(lam)
            LL = cell_ll(eta)

            # shift between lambda and alpha leaves the likelihood unchanged
            cs = float(p_shift.draw(rng))
            lp = lambda ll_, a_: (priors.lambda_shape * ll_ - priors.lambda_rate * math.exp(ll_)  # noqa: E731
                                  - np.sum(a_**2) / (2 * sig2))
            lr = lp(log_lam - cs, a + cs) - lp(log_lam, a)
            acc = bool(mh_accept(lr, rng))
            if acc:
                log_lam -= cs
                a = a + cs
            p_shift.record(acc, adapting)

            # transmission slopes; unknown columns move along beta with
            # log N_u compensating at the column's mean Likert offset
            step = p_beta.draw(rng)
            bp = beta + step
            dls = np.zeros(K)
            dls[uidx] = -step[uidx] * dx_bar[uidx]
            lsp = log_size + dls
            ok = lsp <= math.log(size_upper)
            etap = eta + step[None, :] * dx + dls[None, :]
            LLp = cell_ll(etap)
            lr = LLp.sum(0) - LL.sum(0) - (bp**2 - beta**2) / (2 * priors.beta_sd**2) + dls
            acc = mh_accept(np.where(ok, lr, -np.inf), rng)
            beta = np.where(acc, bp, beta)
            log_size = np.where(acc, lsp, log_size)
            eta[:, acc], LL[:, acc] = etap[:, acc], LLp[:, acc]
            p_beta.record(acc, adapting)

            # barrier coefficients, one covariate at a time for all columns
            if p:
                steps = p_gamma.draw(rng)
                accs = np.zeros((p, K), dtype=bool)
                for j in range(p):
                    gp = gamma[j] + steps[j]
                    etap = eta + z[:, j][:, None] * steps[j][None, :]
                    LLp = cell_ll(etap)
                    lr = LLp.sum(0) - LL.sum(0) - (gp**2 - gamma[j] ** 2) / (2 * priors.gamma_sd**2)
                    acc = mh_accept(lr, rng)
                    gamma[j] = np.where(acc, gp, gamma[j])
                    eta[:, acc], LL[:, acc] = etap[:, acc], LLp[:, acc]
                    accs[j] = acc
                p_gamma.record(accs, adapting)

            # unknown sizes: truncated gamma under a uniform prior
            rate = np.where(obs[:, uidx], np.exp(eta[:, uidx] - log_size[uidx][None, :]), 0.0).sum(0)
            new = _truncated_gamma(col_y[uidx] + 1.0, rate, size_upper, rng)
            new_log = np.log(np.maximum(new, 1e-300))
            eta[:, uidx] += (new_log - log_size[uidx])[None, :]
            log_size[uidx] = new_log
            LL[:, uidx] = cell_ll(eta)[:, uidx]

            if keep:
                out = dict(
                    **{"lambda": math.exp(log_lam)},
                    alpha=np.exp(a),
                    sigma_alpha=math.sqrt(sig2),
                    beta=beta,
                    size=np.exp(log_size[uidx]),
                )
                if p:
                    out["gamma"] = gamma.ravel()
                rec.save(**out)
        acc = {"alpha": p_a.acceptance(), "beta": p_beta.acceptance(), "shift": p_shift.acceptance()}
        if p:
            acc["gamma"] = p_gamma.acceptance()
        return rec.arrays(), acc

    params, acceptance = run_chains(chain, config)
    labels = {
        "alpha": list(survey.respondent_ids),
        "beta": list(survey.columns),
        "size": list(unknown),
    }
    if p:
        labels["gamma"] = [f"{j}:{c}" for j in range(p) for c in survey.columns]
    return finalize(
        params,
        labels,
        acceptance,
        config,
        {
            "model": "teo",
            "variant": variant,
            "method": "teo-barrier" if barrier else "teo",
            "population_total": int(N),
            "known_sizes": dict(survey.known_sizes),
            "decisions": [
                "log alpha_i ~ N(0, sigma_alpha^2), sigma_alpha^2 ~ InvGamma(1, 1)",
                "lambda ~ Gamma(1e-3, 1e-3); beta, gamma ~ N(0, 2^2); N_u ~ U(0, N)",
                "covariates column-centered before fitting",
            ],
        },
    )
