"""Closed-form and design-based scale-up estimators.

All estimators take an :class:`~nsum.survey.ArdSurvey` plus the name (or
index) of the column whose size is wanted. Degrees are estimated from the
known columns only; missing cells are skipped per cell.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .survey import ArdSurvey, DegreeEstimates, EnrichedArd, SizeEstimate

Z95 = 1.959963984540054

#: Known sizes below this fraction of N trigger a MoS variance warning.
MOS_SMALL_FRACTION = 1e-3


class EstimationError(ValueError):
    """An estimator is undefined for the supplied data."""


class JohnsenOrderingError(EstimationError):
    def __init__(self, smaller: tuple[str, float], larger: tuple[str, float]):
        self.pair = (smaller[0], larger[0])
        super().__init__(
            "zero-proportions are not decreasing in size: "
            f"{smaller[0]!r} has P(W)={smaller[1]:.4g} but larger {larger[0]!r} has "
            f"P(W)={larger[1]:.4g}"
        )


class SmallSubpopulationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class JohnsenBracket:
    """Bracket for an unknown size from ordered zero-proportions.

    Uses the approximation P(W_k) ~ sum_m (1 - N_k/N)^m P(m): the slack
    term ``g`` of the exact form is small relative to N and not estimated.
    ``ordering_position`` is the number of known columns (sorted by size)
    whose zero-proportion exceeds that of the unknown column.
    """

    lower: int
    upper: int
    ordering_position: int
    p_unknown: float
    p_known: dict

    def contains(self, size: float) -> bool:
        return self.lower <= size <= self.upper


@dataclass(frozen=True)
class GnsumComponents:
    numerator: float
    denominator: float

    def __post_init__(self) -> None:
        if not self.denominator > 0:
            raise EstimationError("estimated visibility is zero")


def _unknown_index(survey: ArdSurvey, unknown) -> int:
    k = survey.index(unknown)
    if survey.columns[k] in survey.known_sizes:
        raise EstimationError(f"column {survey.columns[k]!r} has a known size")
    return k


def _require_known(survey: ArdSurvey) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y, sizes, obs = survey.known_block()
    if len(sizes) == 0:
        raise EstimationError("no known subpopulations to estimate degrees from")
    return y, sizes, obs


def pimle_degrees(survey: ArdSurvey) -> DegreeEstimates:
    """d_i = N * sum_k y_ik / sum_k N_k over the respondent's observed known cells."""
    y, sizes, obs = _require_known(survey)
    num = np.where(obs, y, 0.0).sum(axis=1)
    den = np.where(obs, sizes, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(den > 0, survey.population_total * num / den, 0.0)
    return DegreeEstimates(d, "pimle")


def mos_degrees(survey: ArdSurvey) -> DegreeEstimates:
    """d_i = (N / L) * sum_k y_ik / N_k, L counting the observed known cells."""
    y, sizes, obs = _require_known(survey)
    ratios = np.where(obs, y / sizes, 0.0).sum(axis=1)
    L = obs.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(L > 0, survey.population_total * ratios / L, 0.0)
    return DegreeEstimates(d, "mos")


def _warn_small(survey: ArdSurvey, threshold: float) -> list[str]:
    small = [
        c for c in survey.known_columns
        if survey.known_sizes[c] < threshold * survey.population_total
    ]
    if small:
        warnings.warn(
            f"known subpopulation(s) {', '.join(small)} are below {threshold:g}*N; "
            "mean-of-sums estimates will have very large variance",
            SmallSubpopulationWarning,
            stacklevel=3,
        )
    return small


def _backestimate(
    survey: ArdSurvey,
    unknown,
    degrees: DegreeEstimates,
    method: str,
    weights: np.ndarray | None = None,
) -> SizeEstimate:
    k = _unknown_index(survey, unknown)
    yu = survey.responses[:, k].astype(float)
    usable = survey.observed()[:, k] & (degrees.degrees > 0)
    n_zero = int(np.sum(degrees.degrees == 0))
    if not usable.any():
        raise EstimationError("every respondent has an estimated degree of zero")
    w = np.ones(survey.n) if weights is None else weights
    terms = survey.population_total * yu[usable] * w[usable] / degrees.degrees[usable]
    point = float(terms.sum() / usable.sum())
    return SizeEstimate(
        point=point,
        method=method,
        metadata={
            "excluded_respondents": int(survey.n - usable.sum()),
            "zero_degree_respondents": n_zero,
            "decisions": ["zero-degree respondents excluded from the average"],
        },
    )


def pimle(survey: ArdSurvey, unknown) -> SizeEstimate:
    """Plug-in MLE: mean over respondents of N * y_iu / d_i.

    No standard error is defined for this estimator.
    """
    return _backestimate(survey, unknown, pimle_degrees(survey), "pimle")


def mos(survey: ArdSurvey, unknown, small_fraction: float = MOS_SMALL_FRACTION) -> SizeEstimate:
    """Mean-of-sums back-estimate, (N/n) * sum_i y_iu / d_i with MoS degrees."""
    small = _warn_small(survey, small_fraction)
    est = _backestimate(survey, unknown, mos_degrees(survey), "mos")
    if small:
        est.metadata["small_known_subpops"] = small
    return est


def _weights(survey: ArdSurvey) -> np.ndarray:
    if survey.weights is None:
        raise EstimationError("survey has no respondent weights")
    return survey.weights


def weighted_mos(
    survey: ArdSurvey, unknown, small_fraction: float = MOS_SMALL_FRACTION
) -> SizeEstimate:
    w = _weights(survey)
    _warn_small(survey, small_fraction)
    return _backestimate(survey, unknown, mos_degrees(survey), "wmos", weights=w)


def _mle_parts(survey: ArdSurvey, unknown, weights=None) -> tuple[float, float, int]:
    k = _unknown_index(survey, unknown)
    d = pimle_degrees(survey).degrees
    obs = survey.observed()[:, k]
    yu = survey.responses[obs, k].astype(float)
    if weights is not None:
        yu = yu * weights[obs]
    total_degree = float(d[obs].sum())
    if not total_degree > 0:
        raise EstimationError("sum of estimated degrees is zero")
    return float(yu.sum()), total_degree, int(survey.n - obs.sum())


def mle(survey: ArdSurvey, unknown) -> SizeEstimate:
    """Killworth MLE, N * sum_i y_iu / sum_i d_i, with its binomial standard error.

    The interval is the normal approximation point +/- 1.96 SE clipped to [0, N].
    """
    N = survey.population_total
    y_total, total_degree, dropped = _mle_parts(survey, unknown)
    point = N * y_total / total_degree
    se = math.sqrt(N * point / total_degree)
    lo = max(0.0, point - Z95 * se)
    hi = min(float(N), point + Z95 * se)
    return SizeEstimate(
        point=point,
        method="mle",
        std_error=se,
        interval=(min(lo, point), max(hi, point)),
        metadata={
            "excluded_respondents": dropped,
            "sum_degrees": total_degree,
            "decisions": ["normal-approximation interval truncated to [0, N]"],
        },
    )


def weighted_mle(survey: ArdSurvey, unknown) -> SizeEstimate:
    """N * sum_i y_iu w_i / sum_i d_i. Weights are used as given (not renormalized)."""
    w = _weights(survey)
    y_total, total_degree, dropped = _mle_parts(survey, unknown, weights=w)
    return SizeEstimate(
        point=survey.population_total * y_total / total_degree,
        method="wmle",
        metadata={"excluded_respondents": dropped, "decisions": ["weights not renormalized"]},
    )


def johnsen_bounds(survey: ArdSurvey, unknown) -> JohnsenBracket:
    k = _unknown_index(survey, unknown)
    obs = survey.observed()
    known = sorted(survey.known_columns, key=lambda c: survey.known_sizes[c])
    if len(known) < 2:
        raise EstimationError("need at least two known subpopulations")
    sizes = [survey.known_sizes[c] for c in known]
    if len(set(sizes)) != len(sizes):
        raise EstimationError("known subpopulation sizes must be distinct")

    def zero_prop(j: int) -> float:
        col = survey.responses[obs[:, j], j]
        if len(col) == 0:
            raise EstimationError(f"column {survey.columns[j]!r} has no responses")
        return float(np.mean(col == 0))

    p = [zero_prop(survey.index(c)) for c in known]
    for a in range(len(known) - 1):
        if not p[a] > p[a + 1]:
            raise JohnsenOrderingError((known[a], p[a]), (known[a + 1], p[a + 1]))
    pu = zero_prop(k)
    pos = sum(1 for v in p if v > pu)
    lower = 0 if pos == 0 else sizes[pos - 1]
    upper = survey.population_total if pos == len(sizes) else sizes[pos]
    return JohnsenBracket(int(lower), int(upper), pos, pu, dict(zip(known, p)))


def gnsum(
    enriched: EnrichedArd,
    frame_survey: ArdSurvey,
    unknown,
    frame_inclusion: Sequence[float] | np.ndarray | None = None,
) -> tuple[SizeEstimate, GnsumComponents]:
    """Generalized scale-up estimate, numerator / mean visibility.

    Numerator: Horvitz-Thompson total of out-reports over the frame sample.
    Denominator: ratio-of-totals mean of ``aware_counts`` over the hidden
    sample, weighted by the inverse of ``enriched.inclusion_probs`` (treated
    as relative inclusion probabilities).
    """
    k = frame_survey.index(unknown)
    if not frame_survey.observed()[:, k].all():
        raise EstimationError("GNSUM needs every frame respondent's out-report")
    pi = np.ones(frame_survey.n) if frame_inclusion is None else np.asarray(frame_inclusion, float)
    if pi.shape != (frame_survey.n,) or np.any(~(pi > 0)) or np.any(pi > 1):
        raise EstimationError("frame inclusion probabilities must lie in (0, 1], one per respondent")
    yu = frame_survey.responses[:, k].astype(float)
    numerator = float(np.sum(yu / pi))
    inv = 1.0 / enriched.inclusion_probs
    weight_total = float(inv.sum())
    aware_total = float(np.sum(enriched.aware_counts * inv))
    if not aware_total > 0:
        raise EstimationError("estimated visibility is zero")
    comps = GnsumComponents(numerator, aware_total / weight_total)
    # numerator * W / A rather than numerator / (A / W): exact when all inputs are integers
    point = numerator * weight_total / aware_total
    est = SizeEstimate(
        point=point,
        method="gnsum",
        metadata={
            "numerator": comps.numerator,
            "denominator": comps.denominator,
            "hidden_sample_size": enriched.hidden_sample_size,
            "decisions": [
                "visibility mean = sum(aware/pi') / sum(1/pi') over the hidden sample"
            ],
        },
    )
    return est, comps


ESTIMATORS: dict[str, Callable[[ArdSurvey, object], SizeEstimate]] = {
    "pimle": pimle,
    "mle": mle,
    "mos": mos,
    "wmle": weighted_mle,
    "wmos": weighted_mos,
}


def get_estimator(method: str | Callable) -> Callable[[ArdSurvey, object], SizeEstimate]:
    if callable(method):
        return method
    try:
        return ESTIMATORS[method]
    except KeyError:
        raise EstimationError(
            f"unknown estimator {method!r}; choose from {', '.join(ESTIMATORS)}"
        ) from None
