"""Post hoc corrections: visibility scaling, leave-one-out audits, recall curves."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .classic import EstimationError, get_estimator
from .survey import ArdSurvey, SizeEstimate


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class VisibilityFactor:
    value: float
    source: str = "unspecified"

    def __post_init__(self) -> None:
        if not 0 < self.value <= 1:
            raise CalibrationError(f"visibility factor must lie in (0, 1], got {self.value}")


def scale_by_visibility(estimate: SizeEstimate, tau: VisibilityFactor | float) -> SizeEstimate:
    """Divide a crude size estimate (point, SE and interval) by the visibility factor."""
    if not isinstance(tau, VisibilityFactor):
        tau = VisibilityFactor(float(tau))
    t = tau.value
    meta = dict(estimate.metadata)
    meta.setdefault("visibility_factors", [])
    meta["visibility_factors"] = [*meta["visibility_factors"], {"value": t, "source": tau.source}]
    return replace(
        estimate,
        point=estimate.point / t,
        std_error=None if estimate.std_error is None else estimate.std_error / t,
        interval=None if estimate.interval is None else tuple(v / t for v in estimate.interval),
        calibrations_applied=(*estimate.calibrations_applied, f"visibility:{t:g}"),
        metadata=meta,
    )


# ---------------------------------------------------------------------------
# leave-one-out back-estimation and trimming


@dataclass(frozen=True)
class LooRow:
    subpop: str
    known_size: int
    backestimate: float
    ratio: float
    log_ratio: float
    log_var: float | None = None

    def as_dict(self) -> dict:
        return {
            "subpop": self.subpop,
            "known_size": self.known_size,
            "backestimate": self.backestimate,
            "ratio": self.ratio,
            "log_ratio": self.log_ratio,
        }


class FoldError(EstimationError):
    def __init__(self, fold: str, cause: Exception):
        self.fold = fold
        super().__init__(f"fold {fold!r}: {cause}")


def loo_backestimates(
    survey: ArdSurvey,
    estimator: str | Callable = "mle",
    bootstrap: int = 0,
    seed: int = 0,
) -> list[LooRow]:
    """Treat each known column as unknown in turn and re-estimate it.

    With ``bootstrap > 0`` each fold also gets the resampling variance of
    log(backestimate) over respondents (needed by :func:`fit_eiv`).
    """
    est = get_estimator(estimator)
    known = survey.known_columns
    if len(known) < 2:
        raise EstimationError("leave-one-out needs at least two known subpopulations")
    rng = np.random.default_rng(seed)
    boot_rows = [rng.integers(0, survey.n, survey.n) for _ in range(bootstrap)]
    rows = []
    for name in known:
        fold = survey.with_known({c: v for c, v in survey.known_sizes.items() if c != name})
        try:
            point = est(fold, name).point
        except Exception as exc:
            raise FoldError(name, exc) from exc
        size = survey.known_sizes[name]
        ratio = point / size
        log_var = None
        if bootstrap:
            logs = []
            for idx in boot_rows:
                try:
                    b = est(fold.take(idx), name).point
                except EstimationError:
                    continue
                if b > 0:
                    logs.append(math.log(b))
            log_var = float(np.var(logs, ddof=1)) if len(logs) > 1 else None
        rows.append(
            LooRow(
                subpop=name,
                known_size=int(size),
                backestimate=float(point),
                ratio=float(ratio),
                log_ratio=math.log(ratio) if ratio > 0 else -math.inf,
                log_var=log_var,
            )
        )
    return rows


def write_loo_table(rows: Sequence[LooRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subpop", "known_size", "backestimate", "ratio", "log_ratio"])
        for r in rows:
            w.writerow([r.subpop, r.known_size, repr(r.backestimate), repr(r.ratio), repr(r.log_ratio)])


@dataclass
class TrimResult:
    survey: ArdSurvey
    removed: list[str] = field(default_factory=list)
    rounds: list[dict] = field(default_factory=list)

    def log_json(self) -> str:
        return json.dumps({"removed": self.removed, "rounds": self.rounds}, indent=2) + "\n"


def trim_stepwise(
    survey: ArdSurvey,
    estimator: str | Callable = "mle",
    tolerance: float = 0.25,
    max_removals: int | None = None,
) -> TrimResult:
    """Drop the worst known column, one at a time, until every |log ratio| <= tolerance.

    Every round recomputes all folds on the current panel. Never trims below
    two known columns.
    """
    current = survey
    limit = len(survey.known_columns) - 2
    if max_removals is not None:
        limit = min(limit, max_removals)
    result = TrimResult(survey)
    while True:
        table = loo_backestimates(current, estimator)
        snapshot = [r.as_dict() for r in table]
        worst = max(table, key=lambda r: abs(r.log_ratio))
        done = abs(worst.log_ratio) <= tolerance or len(result.removed) >= limit
        result.rounds.append(
            {"round": len(result.rounds), "table": snapshot, "removed": None if done else worst.subpop}
        )
        if done:
            break
        result.removed.append(worst.subpop)
        current = current.without_columns([worst.subpop])
    result.survey = current
    return result


# ---------------------------------------------------------------------------
# recall calibration curve


def curve(beta, a: float, b: float):
    """Recalled log-proportion for a true log-proportion ``beta``.

    f(beta) = b + (beta - b)/2 + (1 - exp(-a (beta - b))) / (2a); f(b) = b and
    f'(beta) = 1/2 + exp(-a (beta - b))/2 > 0.
    """
    x = np.asarray(beta, dtype=float) - b
    with np.errstate(over="ignore"):
        out = b + 0.5 * x - np.expm1(-a * x) / (2.0 * a)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class CalibrationCurve:
    a: float
    b: float
    fitted_on: tuple[str, ...] = ()
    scale: str = "beta"
    log_population: float = 0.0
    residual_ss: float = 0.0

    def __post_init__(self) -> None:
        if not self.a > 0:
            raise CalibrationError("calibration curve rate a must be positive")
        if self.scale not in ("beta", "log_size"):
            raise CalibrationError(f"unknown curve scale {self.scale!r}")

    def __call__(self, beta):
        return curve(beta, self.a, self.b)


def fit_calibration_curve(
    beta_known: Sequence[float],
    beta_recalled: Sequence[float],
    labels: Sequence[str] = (),
    scale: str = "beta",
    population_total: int | None = None,
) -> CalibrationCurve:
    """Least-squares fit of (a, b) so that f(beta_known) matches beta_recalled.

    ``scale="log_size"`` accepts log sizes (log N_k and log N-hat_k) instead of
    log-proportions; they are shifted by log N before fitting.
    """
    x = np.asarray(beta_known, dtype=float)
    y = np.asarray(beta_recalled, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise CalibrationError("beta_known and beta_recalled must be equal-length vectors")
    if len(x) < 3:
        raise CalibrationError("need at least three subpopulations to fit the curve")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise CalibrationError("non-finite inputs to calibration curve fit")
    shift = 0.0
    if scale == "log_size":
        if population_total is None:
            raise CalibrationError("log_size scale needs population_total")
        shift = math.log(population_total)
    x, y = x - shift, y - shift

    def resid(theta):
        return curve(x, math.exp(theta[0]), theta[1]) - y

    best = None
    spread = max(np.ptp(x), 1e-3)
    for log_a in (math.log(0.1 / spread), 0.0, math.log(10.0 / spread)):
        for b0 in np.quantile(x, [0.1, 0.5, 0.9]):
            with np.errstate(over="ignore", invalid="ignore"):
                r0 = resid([log_a, b0])
            if not np.all(np.isfinite(r0)):
                continue
            fit = optimize.least_squares(
                resid, [log_a, b0], method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15
            )
            if np.all(np.isfinite(fit.fun)) and (best is None or fit.cost < best.cost):
                best = fit
    if best is None or not best.success:
        ss = None if best is None else float(2 * best.cost)
        raise CalibrationError(f"calibration curve fit did not converge (residual SS={ss})")
    return CalibrationCurve(
        a=math.exp(best.x[0]),
        b=float(best.x[1]),
        fitted_on=tuple(labels),
        scale=scale,
        log_population=shift,
        residual_ss=float(2 * best.cost),
    )


def apply_calibration_curve(cal: CalibrationCurve, beta_recalled: float) -> float:
    """Invert the curve: the true value whose recalled value is ``beta_recalled``."""
    target = float(beta_recalled) - cal.log_population
    a, b = cal.a, cal.b

    def g(v):
        return curve(v, a, b) - target

    if g(b) == 0:
        return b + cal.log_population
    # f(v) <= v everywhere, so the root lies above target; f grows at least at rate 1/2
    lo = min(target, b)
    step = 1.0
    while g(lo) > 0:
        lo -= step
        step *= 2
    hi = max(target, b)
    step = 1.0
    while g(hi) < 0:
        hi += step
        step *= 2
    root = optimize.brentq(g, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    return root + cal.log_population


# ---------------------------------------------------------------------------
# errors-in-variables recall adjustment


@dataclass(frozen=True)
class EivFit:
    """log N-hat_k = a + b log N_k + delta_k + eps_k, delta_k ~ N(0, s_k^2), eps_k ~ N(0, sigma^2)."""

    a: float
    b: float
    sigma_eps: float
    s_k: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.b == 0:
            raise CalibrationError("EIV slope b must be nonzero")
        if self.sigma_eps < 0 or any(s < 0 for s in self.s_k):
            raise CalibrationError("EIV standard deviations must be nonnegative")


def _eiv_profile(x, y, s2, sig2):
    v = s2 + sig2
    w = 1.0 / v
    X = np.column_stack([np.ones_like(x), x])
    coef = np.linalg.solve(X.T @ (X * w[:, None]), X.T @ (w * y))
    r = y - X @ coef
    nll = 0.5 * np.sum(np.log(v) + r * r / v)
    return nll, coef


def fit_eiv(
    known_sizes: Sequence[float],
    backestimates: Sequence[float],
    s2: Sequence[float] | float,
) -> EivFit:
    """Maximum likelihood fit of the recall regression with known per-fold variances ``s2``."""
    x = np.log(np.asarray(known_sizes, dtype=float))
    y_raw = np.asarray(backestimates, dtype=float)
    if len(x) < 3:
        raise CalibrationError("EIV fit needs at least three known subpopulations")
    if np.any(~(y_raw > 0)) or np.any(~np.isfinite(y_raw)):
        raise CalibrationError("EIV fit needs finite positive back-estimates")
    y = np.log(y_raw)
    s2 = np.broadcast_to(np.asarray(s2, dtype=float), x.shape).copy()
    if np.any(s2 < 0):
        raise CalibrationError("variances must be nonnegative")
    ols_resid = y - np.polyval(np.polyfit(x, y, 1), x)
    hi = math.log(max(10.0 * np.var(ols_resid), 1e-8) + s2.max())
    candidates = []
    if np.all(s2 > 0):
        candidates.append((0.0, *_eiv_profile(x, y, s2, 0.0)))
    res = optimize.minimize_scalar(
        lambda t: _eiv_profile(x, y, s2, math.exp(t))[0],
        bounds=(-40.0, hi),
        method="bounded",
        options={"xatol": 1e-10},
    )
    sig2 = math.exp(res.x)
    candidates.append((sig2, *_eiv_profile(x, y, s2, sig2)))
    sig2, _, coef = min(candidates, key=lambda c: c[1])
    a, b = float(coef[0]), float(coef[1])
    if abs(b) < 1e-6:
        raise CalibrationError("degenerate recall slope")
    return EivFit(a=a, b=b, sigma_eps=math.sqrt(sig2), s_k=tuple(np.sqrt(s2).tolist()))


def eiv_transform(fit: EivFit, log_size_draws, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Map posterior draws of log(N_u) through (Y - a)/b + Z, Z ~ N(0, sigma^2/b^2)."""
    if abs(fit.b) < 1e-6:
        raise CalibrationError("degenerate recall slope")
    y = np.asarray(log_size_draws, dtype=float)
    out = (y - fit.a) / fit.b
    if fit.sigma_eps > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        out = out + rng.normal(0.0, fit.sigma_eps / abs(fit.b), size=y.shape)
    return out


def eiv_recall_adjust(
    loo_table: Sequence[LooRow],
    log_size_draws,
    seed: int = 0,
    s2: Sequence[float] | float | None = None,
) -> tuple[np.ndarray, EivFit]:
    """Fit the recall regression on a leave-one-out table and adjust log-size draws.

    Per-fold variances default to the table's bootstrap ``log_var`` column.
    """
    rows = [r for r in loo_table if math.isfinite(r.log_ratio)]
    if len(rows) < 3:
        raise CalibrationError("need at least three known subpopulations with finite back-estimates")
    if s2 is None:
        if any(r.log_var is None for r in rows):
            raise CalibrationError(
                "back-estimate variances missing; rerun leave-one-out with bootstrap > 0 "
                "or pass s2 explicitly"
            )
        s2 = [r.log_var for r in rows]
    fit = fit_eiv([r.known_size for r in rows], [r.backestimate for r in rows], s2)
    return eiv_transform(fit, log_size_draws, seed), fit
