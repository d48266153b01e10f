"""Binomial ARD models with random degrees, barrier and transmission effects.

    y_ik ~ Binom(d_i, tau_k q_ik),   log d_i ~ N(mu, sigma^2)
    q_ik ~ Beta(mean m_k, dispersion rho_k)   (barrier variants; else q_ik = m_k)
    tau_k ~ Beta(mean eta_k, dispersion nu_k) (transmission variants; 1 for known k)

m_k = N_k / N for known columns and N_u / N for unknown ones, with N_u
uniform on [0, N]. Degrees are continuous; the binomial coefficient uses
gamma functions and requires d_i >= max_k y_ik. Beta(mean m, dispersion
rho) means shapes (m (1-rho)/rho, (1-m)(1-rho)/rho).

q is integrated out (beta-binomial) wherever tau = 1. In the combined
variant the unknown columns keep explicit q_iu, sampled on the logit scale
together with joint moves that carry q along when N_u or rho_u change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import betaln, gammaln

from ..classic import pimle_degrees
from ..survey import ArdSurvey
from .mcmc import MCMCConfig, ModelError, PosteriorDraws, Proposal, Recorder, finalize, mh_accept, run_chains

VARIANTS = ("random_degree", "barrier", "transmission", "combined")


@dataclass(frozen=True)
class MaltielPriors:
    """Hyperparameters. Defaults are weakly informative.

    mu ~ N(mu_mean, mu_sd^2); sigma^2 ~ InvGamma(sigma2_shape, sigma2_scale);
    rho_k ~ U(0, 1) unless ``rho_fixed`` is set.
    """

    mu_mean: float = 0.0
    mu_sd: float = 10.0
    sigma2_shape: float = 1.0
    sigma2_scale: float = 1.0
    rho_fixed: float | None = None
    size_upper: float | None = None

    def __post_init__(self) -> None:
        if self.rho_fixed is not None and not 0 < self.rho_fixed < 1:
            raise ModelError("rho_fixed must lie in (0, 1)")


def beta_shapes(mean, dispersion):
    mean = np.asarray(mean, dtype=float)
    conc = (1.0 - dispersion) / dispersion
    return mean * conc, (1.0 - mean) * conc


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _expit(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class _Data:
    y: np.ndarray
    obs: np.ndarray
    lgy: np.ndarray
    ymax: np.ndarray
    N: float
    m_known: np.ndarray
    known_idx: list[int]
    unknown_idx: list[int]
    unknown: list[str]
    extra: dict = field(default_factory=dict)


def _binom_terms(d, y):
    """log C(d, y) for continuous d >= y (without the -log y! part)."""
    return gammaln(d + 1.0)[:, None] - gammaln(d[:, None] - y + 1.0)


def fit_maltiel(
    survey: ArdSurvey,
    variant: str = "random_degree",
    priors: MaltielPriors | None = None,
    transmission_prior: Mapping[str, tuple[float, float]] | None = None,
    config: MCMCConfig | None = None,
) -> PosteriorDraws:
    """Gibbs-Metropolis fit; returns draws of degrees, mu, sigma, sizes and active bias terms.

    ``transmission_prior`` maps each unknown column to (eta, nu), the mean and
    dispersion of its visibility tau. A prior with nu == 0 or eta == 1 fixes tau.
    """
    if variant not in VARIANTS:
        raise ModelError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    priors = priors or MaltielPriors()
    config = config or MCMCConfig()
    barrier = variant in ("barrier", "combined")
    transmission = variant in ("transmission", "combined")

    known = survey.known_columns
    unknown = survey.unknown_columns
    if not known:
        raise ModelError("need at least one known subpopulation")
    if not unknown:
        raise ModelError("no unknown subpopulation to estimate")
    N = float(survey.population_total)
    size_upper = float(priors.size_upper or N)
    kidx = [survey.index(c) for c in known]
    uidx = [survey.index(c) for c in unknown]
    U = len(uidx)
    obs = survey.observed()
    y = np.where(obs, survey.responses, 0).astype(float)
    lgy = gammaln(y + 1.0)
    ymax = y.max(axis=1)
    m_known = np.array([survey.known_sizes[c] / N for c in known])
    n = survey.n
    K = survey.K

    tau_fixed = np.ones(U)
    tau_active = np.zeros(U, dtype=bool)
    tau_a = np.ones(U)
    tau_b = np.ones(U)
    if transmission:
        tp = dict(transmission_prior or {})
        for j, c in enumerate(unknown):
            if c not in tp:
                raise ModelError(
                    f"transmission variant needs a visibility prior (eta, nu) for {c!r}; "
                    "estimate it from additional data such as a game of contacts"
                )
            eta, nu = (float(v) for v in tp[c])
            if not (0 < eta <= 1 and 0 <= nu < 1):
                raise ModelError(f"visibility prior for {c!r} needs 0 < eta <= 1 and 0 <= nu < 1")
            if nu == 0 or eta == 1:
                tau_fixed[j] = eta
            else:
                tau_active[j] = True
                tau_a[j], tau_b[j] = beta_shapes(eta, nu)
                tau_fixed[j] = eta
    explicit_q = barrier and transmission
    rho_fixed = priors.rho_fixed

    d0 = pimle_degrees(survey).degrees
    pos = d0[d0 > 0]
    d0 = np.where(d0 > 0, d0, np.median(pos) if len(pos) else 10.0)
    d0 = np.maximum(d0, ymax + 1.0)
    size0 = np.empty(U)
    for j, k in enumerate(uidx):
        tot = float(np.sum(d0[obs[:, k]]))
        val = N * y[:, k].sum() / tot / tau_fixed[j] if tot > 0 else 0.0
        size0[j] = min(max(val, 1e-3 * N), 0.5 * size_upper)

    def col_ll(k_cols, d, G, p=None, a=None, b=None):
        """LL for a set of columns: binomial if p given, else beta-binomial(a, b)."""
        yy = y[:, k_cols]
        base = G[:, k_cols] - lgy[:, k_cols]
        if p is not None:
            ll = base + yy * np.log(p) + (d[:, None] - yy) * np.log1p(-p)
        else:
            ll = base + betaln(yy + a, d[:, None] - yy + b) - betaln(a, b)
        return np.where(obs[:, k_cols], ll, 0.0)

    def chain(rng: np.random.Generator, c: int):
        logd = np.log(d0) + 0.1 * rng.standard_normal(n)
        logd = np.maximum(logd, np.log(np.maximum(ymax, 1e-12)))
        d = np.exp(logd)
        mu = float(logd.mean())
        sig2 = float(max(logd.var(), 0.05))
        size = np.minimum(size0 * np.exp(0.1 * rng.standard_normal(U)), 0.9 * size_upper)
        tau = np.where(tau_active, np.clip(tau_fixed * np.exp(0.05 * rng.standard_normal(U)), 0.02, 0.98), tau_fixed)
        rho = np.full(K, rho_fixed if rho_fixed is not None else 0.05)
        m_u = size / N
        if explicit_q:
            a0, b0 = beta_shapes(m_u, rho[uidx])
            q = np.clip(rng.beta(a0, b0, size=(n, U)), 1e-12, 1 - 1e-12)
            lq = _logit(q)

        def full_ll(d, G):
            LL = np.empty((n, K))
            if barrier:
                a, b = beta_shapes(m_known, rho[kidx])
                LL[:, kidx] = col_ll(kidx, d, G, a=a, b=b)
            else:
                LL[:, kidx] = col_ll(kidx, d, G, p=m_known[None, :])
            LL[:, uidx] = unknown_ll(d, G, size, tau, rho, lq if explicit_q else None)
            return LL

        def unknown_ll(d, G, size, tau, rho, lq):
            m = size / N
            if explicit_q:
                return col_ll(uidx, d, G, p=tau[None, :] * _expit(lq))
            if barrier:
                a, b = beta_shapes(m, rho[uidx])
                return col_ll(uidx, d, G, a=a, b=b)
            return col_ll(uidx, d, G, p=(tau * m)[None, :])

        def q_prior(lq, size, rho):
            # log Beta(q; a, b) + log q(1-q): density of logit q
            a, b = beta_shapes(size / N, rho[uidx])
            return (a * -np.log1p(np.exp(-lq)) + b * -np.log1p(np.exp(lq))) - betaln(a, b)

        def tau_prior(tau):
            return np.where(tau_active, tau_a * np.log(tau) + tau_b * np.log1p(-tau), 0.0)

        G = _binom_terms(d, y)
        LL = full_ll(d, G)
        p_d = Proposal(n, 0.2, config)
        p_size = Proposal(U, 0.05, config)
        p_tau = Proposal(U, 0.2, config)
        p_ridge = Proposal(U, 0.1, config)
        p_rho = Proposal(K, 0.3, config)
        p_q = Proposal((n, U), 0.3, config) if explicit_q else None
        rec = Recorder(config)
        for adapting, keep in rec.iterations():
            # degrees
            prop = logd + p_d.draw(rng)
            dp = np.exp(prop)
            ok = dp >= ymax
            dp = np.where(ok, dp, d)
            Gp = _binom_terms(dp, y)
            LLp = full_ll(dp, Gp)
            lr = LLp.sum(1) - LL.sum(1) - ((prop - mu) ** 2 - (logd - mu) ** 2) / (2 * sig2)
            acc = mh_accept(np.where(ok, lr, -np.inf), rng)
            logd = np.where(acc, prop, logd)
            d = np.exp(logd)
            G[acc] = Gp[acc]
            LL[acc] = LLp[acc]
            p_d.record(acc, adapting)

            # lognormal hyperparameters
            prec = n / sig2 + 1 / priors.mu_sd**2
            mu = rng.normal((logd.sum() / sig2 + priors.mu_mean / priors.mu_sd**2) / prec, 1 / math.sqrt(prec))
            ss = float(np.sum((logd - mu) ** 2))
            sig2 = (priors.sigma2_scale + ss / 2) / rng.gamma(priors.sigma2_shape + n / 2)

            # unknown sizes (log scale, uniform prior => + log size)
            step = p_size.draw(rng)
            sp = size * np.exp(step)
            ok = sp < size_upper
            sp = np.where(ok, sp, size)
            lqp = lq + (_logit(sp / N) - _logit(size / N))[None, :] if explicit_q else None
            LLu = unknown_ll(d, G, sp, tau, rho, lqp)
            lr = LLu.sum(0) - LL[:, uidx].sum(0) + step
            if explicit_q:
                lr = lr + (q_prior(lqp, sp, rho) - q_prior(lq, size, rho)).sum(0)
            acc = mh_accept(np.where(ok, lr, -np.inf), rng)
            size = np.where(acc, sp, size)
            if explicit_q:
                lq = np.where(acc[None, :], lqp, lq)
            LL[:, uidx] = np.where(acc[None, :], LLu, LL[:, uidx])
            p_size.record(acc, adapting)

            if tau_active.any():
                # visibility on the logit scale
                lt = _logit(tau)
                ltp = lt + p_tau.draw(rng)
                tp_ = np.where(tau_active, _expit(ltp), tau)
                LLu = unknown_ll(d, G, size, tp_, rho, lq if explicit_q else None)
                jac = lambda t: np.log(t) + np.log1p(-t)  # noqa: E731
                lr = LLu.sum(0) - LL[:, uidx].sum(0) + tau_prior(tp_) - tau_prior(tau) + jac(tp_) - jac(tau)
                acc = mh_accept(np.where(tau_active, lr, -np.inf), rng)
                tau = np.where(acc, tp_, tau)
                LL[:, uidx] = np.where(acc[None, :], LLu, LL[:, uidx])
                p_tau.record(acc, adapting)

                # joint move along tau * N_u = const (log coordinates)
                cstep = p_ridge.draw(rng)
                tp_ = tau * np.exp(cstep)
                sp = size * np.exp(-cstep)
                ok = tau_active & (tp_ < 1) & (sp < size_upper)
                tp_ = np.where(ok, tp_, tau)
                sp = np.where(ok, sp, size)
                lqp = lq + (_logit(sp / N) - _logit(size / N))[None, :] if explicit_q else None
                LLu = unknown_ll(d, G, sp, tp_, rho, lqp)
                lr = (
                    LLu.sum(0) - LL[:, uidx].sum(0)
                    + tau_prior(tp_) - tau_prior(tau)
                    + np.log(tp_) - np.log(tau)
                    + np.log(sp) - np.log(size)
                )
                if explicit_q:
                    lr = lr + (q_prior(lqp, sp, rho) - q_prior(lq, size, rho)).sum(0)
                acc = mh_accept(np.where(ok, lr, -np.inf), rng)
                tau = np.where(acc, tp_, tau)
                size = np.where(acc, sp, size)
                if explicit_q:
                    lq = np.where(acc[None, :], lqp, lq)
                LL[:, uidx] = np.where(acc[None, :], LLu, LL[:, uidx])
                p_ridge.record(acc, adapting)

            if explicit_q:
                # respondent-level q for unknown columns
                lqp = lq + p_q.draw(rng)
                LLu = unknown_ll(d, G, size, tau, rho, lqp)
                lr = LLu - LL[:, uidx] + q_prior(lqp, size, rho) - q_prior(lq, size, rho)
                acc = mh_accept(lr, rng)
                lq = np.where(acc, lqp, lq)
                LL[:, uidx] = np.where(acc, LLu, LL[:, uidx])
                p_q.record(acc, adapting)

            if barrier and rho_fixed is None:
                lr_rho = _logit(rho)
                rp = _expit(lr_rho + p_rho.draw(rng))
                rp = np.clip(rp, 1e-9, 1 - 1e-9)
                jac = np.log(rp) + np.log1p(-rp) - np.log(rho) - np.log1p(-rho)
                lr = np.zeros(K)
                a, b = beta_shapes(m_known, rp[kidx])
                LLk = col_ll(kidx, d, G, a=a, b=b)
                lr[kidx] = LLk.sum(0) - LL[:, kidx].sum(0)
                if explicit_q:
                    # rescale logit-q deviations by sqrt(rho'/rho) around logit m
                    lm = _logit(size / N)[None, :]
                    s = np.sqrt(rp[uidx] / rho[uidx])
                    lqp = lm + s[None, :] * (lq - lm)
                    LLu = unknown_ll(d, G, size, tau, rp, lqp)
                    lr[uidx] = (
                        LLu.sum(0) - LL[:, uidx].sum(0)
                        + (q_prior(lqp, size, rp) - q_prior(lq, size, rho)).sum(0)
                        + n * np.log(s)
                    )
                else:
                    LLu = unknown_ll(d, G, size, tau, rp, None)
                    lr[uidx] = LLu.sum(0) - LL[:, uidx].sum(0)
                acc = mh_accept(lr + jac, rng)
                rho = np.where(acc, rp, rho)
                LL[:, kidx] = np.where(acc[kidx][None, :], LLk, LL[:, kidx])
                LL[:, uidx] = np.where(acc[uidx][None, :], LLu, LL[:, uidx])
                if explicit_q:
                    lq = np.where(acc[uidx][None, :], lqp, lq)
                p_rho.record(acc, adapting)

            if keep:
                out = dict(degree=d, mu=mu, sigma=math.sqrt(sig2), size=size)
                if tau_active.any():
                    out["tau"] = tau[tau_active]
                if barrier and rho_fixed is None:
                    out["rho"] = rho
                if explicit_q:
                    out["q"] = _expit(lq).T
                rec.save(**out)
        acc = {"degree": p_d.acceptance(), "size": p_size.acceptance()}
        if tau_active.any():
            acc["tau"] = p_tau.acceptance()
            acc["tau_size_joint"] = p_ridge.acceptance()
        if barrier and rho_fixed is None:
            acc["rho"] = p_rho.acceptance()
        if explicit_q:
            acc["q"] = p_q.acceptance()
        return rec.arrays(), acc

    params, acceptance = run_chains(chain, config)
    labels = {"degree": list(survey.respondent_ids), "size": unknown}
    if "tau" in params:
        labels["tau"] = [c for c, a in zip(unknown, tau_active) if a]
    if "rho" in params:
        labels["rho"] = list(survey.columns)
    if "q" in params:
        C, T = params["q"].shape[:2]
        params["q"] = params["q"].reshape(C, T, -1)
        labels["q"] = [f"{c}:{rid}" for c in unknown for rid in survey.respondent_ids]
    return finalize(
        params,
        labels,
        acceptance,
        config,
        {
            "model": "maltiel",
            "variant": variant,
            "method": f"maltiel-{variant.replace('_degree', '')}",
            "population_total": int(N),
            "known_sizes": dict(survey.known_sizes),
            "tau_fixed": {c: float(t) for c, t, a in zip(unknown, tau_fixed, tau_active) if not a},
            "rho_fixed": rho_fixed,
            "decisions": [
                "recall handled post hoc (no r_k term)",
                "degrees continuous with d_i >= max_k y_ik",
                "N_u ~ U(0, size_upper)",
                "Beta(mean m, dispersion r) -> shapes (m(1-r)/r, (1-m)(1-r)/r)",
            ],
        },
    )
