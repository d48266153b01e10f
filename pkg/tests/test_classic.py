import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from nsum.classic import (
    EstimationError,
    JohnsenOrderingError,
    SmallSubpopulationWarning,
    gnsum,
    johnsen_bounds,
    mle,
    mos,
    mos_degrees,
    pimle,
    pimle_degrees,
    weighted_mle,
    weighted_mos,
)
from nsum.survey import EnrichedArd

from conftest import make_survey


# -- closed-form fixtures ----------------------------------------------------


def test_pimle_degrees_closed_form(fixture_survey):
    assert pimle_degrees(fixture_survey).degrees.tolist() == [100.0, 200.0]


def test_zero_responses_give_zero_degree():
    s = make_survey([[0, 0, 0], [10, 10, 1]], {"c0": 100, "c1": 100})
    assert pimle_degrees(s).degrees[0] == 0
    assert mos_degrees(s).degrees[0] == 0


def test_mos_degrees_closed_form(fixture_survey):
    assert mos_degrees(fixture_survey).degrees.tolist() == [100.0, 200.0]


def test_pimle_fixture(fixture_survey):
    assert pimle(fixture_survey, "u").point == 30


def test_mle_fixture(fixture_survey):
    e = mle(fixture_survey, "u")
    assert e.point == 30
    assert e.std_error == 10
    assert e.interval == pytest.approx((30 - 19.6, 30 + 19.6), abs=1e-3)


def test_mos_fixture(fixture_survey):
    assert mos(fixture_survey, "u").point == 30


def test_weighted_fixtures(fixture_survey):
    s = fixture_survey.replace(weights=[2.0, 1.0])
    assert weighted_mle(s, "u").point == 40
    assert weighted_mos(s, "u").point == 45


def test_unit_weights_reduce_to_unweighted(fixture_survey):
    s = fixture_survey.replace(weights=[1.0, 1.0])
    assert weighted_mle(s, "u").point == mle(s, "u").point
    assert weighted_mos(s, "u").point == mos(s, "u").point


def test_constant_weights_scale_point(fixture_survey):
    s = fixture_survey.replace(weights=[3.0, 3.0])
    assert weighted_mle(s, "u").point == pytest.approx(3 * 30)


def test_zero_unknown_column_gives_zero(fixture_survey):
    s = make_survey([[10, 10, 0], [20, 20, 0]], {"a": 100, "b": 100}, ["a", "b", "u"])
    assert pimle(s, "u").point == 0
    assert mle(s, "u").point == 0
    assert mos(s, "u").point == 0


def test_mle_saturates_at_population():
    s = make_survey([[10, 10, 100]], {"a": 100, "b": 100}, ["a", "b", "u"])
    assert mle(s, "u").point == pytest.approx(1000)


def test_zero_degree_respondents_excluded_from_pimle():
    s = make_survey([[10, 10, 3], [0, 0, 5]], {"a": 100, "b": 100}, ["a", "b", "u"])
    e = pimle(s, "u")
    assert e.point == 30
    assert e.metadata["excluded_respondents"] == 1


def test_mos_warns_on_tiny_known_subpopulation():
    s = make_survey([[1, 10, 3], [0, 20, 6]], {"a": 2, "b": 100}, ["a", "b", "u"], N=10_000)
    with pytest.warns(SmallSubpopulationWarning):
        e = mos(s, "u")
    assert e.metadata["small_known_subpops"] == ["a"]


def test_missing_cells_excluded_per_cell():
    y = [[10, 99, 3], [20, 20, 6]]
    miss = [[False, True, False], [False, False, False]]
    s = make_survey(y, {"a": 100, "b": 100}, ["a", "b", "u"], missing=miss)
    assert pimle_degrees(s).degrees.tolist() == [100.0, 200.0]


def test_weighted_without_weights_errors(fixture_survey):
    with pytest.raises(EstimationError, match="weights"):
        weighted_mle(fixture_survey, "u")


# -- Johnsen bracket ---------------------------------------------------------


def zero_column(n, zeros):
    return np.array([0] * zeros + [1] * (n - zeros))


def johnsen_survey(p_known, p_u, sizes=(100, 300), n=20):
    cols = [zero_column(n, round(p * n)) for p in (*p_known, p_u)]
    known = {f"k{j}": s for j, s in enumerate(sizes)}
    return make_survey(np.column_stack(cols), known, [*known, "u"])


def test_johnsen_interior():
    b = johnsen_bounds(johnsen_survey((0.9, 0.6), 0.75), "u")
    assert (b.lower, b.upper) == (100, 300)
    assert b.contains(150)


def test_johnsen_extreme_low():
    b = johnsen_bounds(johnsen_survey((0.9, 0.6), 0.95), "u")
    assert (b.lower, b.upper) == (0, 100)


def test_johnsen_extreme_high():
    b = johnsen_bounds(johnsen_survey((0.9, 0.6), 0.1), "u")
    assert (b.lower, b.upper) == (300, 1000)


def test_johnsen_ordering_violation():
    with pytest.raises(JohnsenOrderingError):
        johnsen_bounds(johnsen_survey((0.5, 0.6), 0.55), "u")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 20), st.integers(0, 20))
def test_johnsen_monotone_in_zero_proportion(z1, z2):
    lo, hi = sorted((z1, z2))
    # more zeros in the unknown column -> smaller group -> position never rises
    b_many = johnsen_bounds(johnsen_survey((0.95, 0.7, 0.4), hi / 20, sizes=(50, 200, 600)), "u")
    b_few = johnsen_bounds(johnsen_survey((0.95, 0.7, 0.4), lo / 20, sizes=(50, 200, 600)), "u")
    assert b_many.ordering_position <= b_few.ordering_position


def test_johnsen_brackets_truth_in_er_world():
    from nsum.simulate import DegreeModel, SubpopSpec, WorldConfig, simulate

    subs = [SubpopSpec(f"k{s}", s, True) for s in (50, 100, 200, 400)] + [SubpopSpec("u", 150, False)]
    hits = 0
    reps = 200
    for r in range(reps):
        cfg = WorldConfig(2000, tuple(subs), DegreeModel("constant", value=20), graph="explicit",
                          respondents=300, seed=r)
        w = simulate(cfg)
        try:
            hits += johnsen_bounds(w.survey, "u").contains(150)
        except JohnsenOrderingError:
            pass
    assert hits / reps >= 0.9


# -- GNSUM -------------------------------------------------------------------


def test_gnsum_halving_awareness_doubles_point():
    frame = make_survey([[10, 2], [20, 4], [5, 0]], {"a": 100}, ["a", "u"])
    e = EnrichedArd([30, 40, 50], [20, 20, 30], [0.5, 0.5, 0.5], 1000)
    half = EnrichedArd([30, 40, 50], [10, 10, 15], [0.5, 0.5, 0.5], 1000)
    p1 = gnsum(e, frame, "u")[0].point
    p2 = gnsum(half, frame, "u")[0].point
    assert p2 == pytest.approx(2 * p1)


def test_gnsum_components():
    frame = make_survey([[10, 2], [20, 4]], {"a": 100}, ["a", "u"])
    e = EnrichedArd([30, 40], [10, 30], [1.0, 1.0], 1000)
    est, comps = gnsum(e, frame, "u", [0.5, 0.5])
    assert comps.numerator == 12
    assert comps.denominator == 20
    assert est.point == pytest.approx(0.6)


# -- properties --------------------------------------------------------------


@st.composite
def surveys(draw, min_n=1, max_n=12):
    n = draw(st.integers(min_n, max_n))
    L = draw(st.integers(1, 4))
    N = draw(st.integers(1000, 100_000))
    sizes = draw(st.lists(st.integers(1, N // 10), min_size=L, max_size=L))
    y = draw(
        st.lists(st.lists(st.integers(0, 60), min_size=L + 1, max_size=L + 1), min_size=n, max_size=n)
    )
    y = np.array(y)
    assume(y[:, :L].sum() > 0)
    known = {f"k{j}": s for j, s in enumerate(sizes)}
    return make_survey(y, known, [*known, "u"], N=N)


@settings(max_examples=200, deadline=None)
@given(surveys())
def test_mle_two_forms_agree(s):
    y = s.responses.astype(float)
    L = len(s.known_columns)
    alt = y[:, -1].sum() * sum(s.known_sizes.values()) / y[:, :L].sum()
    assert mle(s, "u").point == pytest.approx(alt, rel=1e-10, abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(surveys(), st.integers(2, 7))
def test_scaling_population_scales_sizes_not_degrees(s, c):
    big = s.replace(population_total=c * s.population_total,
                    known_sizes={k: c * v for k, v in s.known_sizes.items()})
    np.testing.assert_allclose(pimle_degrees(big).degrees, pimle_degrees(s).degrees, rtol=1e-12)
    np.testing.assert_allclose(mos_degrees(big).degrees, mos_degrees(s).degrees, rtol=1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for f in (mle, pimle, mos):
            assert f(big, "u").point == pytest.approx(c * f(s, "u").point, rel=1e-12, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(surveys(min_n=2), st.randoms(use_true_random=False))
def test_row_permutation_invariance(s, rnd):
    perm = list(range(s.n))
    rnd.shuffle(perm)
    t = s.take(perm)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for f in (mle, pimle, mos):
            assert f(t, "u").point == pytest.approx(f(s, "u").point, rel=1e-12, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 50), st.integers(1, 6), st.lists(st.integers(0, 30), min_size=1, max_size=10))
def test_pimle_equals_mle_when_degrees_equal(base, L, yu):
    n = len(yu)
    y = np.column_stack([np.full((n, L), base), yu])
    known = {f"k{j}": 100 for j in range(L)}
    s = make_survey(y, known, [*known, "u"], N=10_000)
    assert pimle(s, "u").point == pytest.approx(mle(s, "u").point, rel=1e-12)


def test_mle_interval_clipped_to_population():
    s = make_survey([[1, 1, 1]], {"a": 400, "b": 400}, ["a", "b", "u"], N=1000)
    e = mle(s, "u")
    assert 0 <= e.interval[0] and e.interval[1] <= 1000
    assert math.isclose(e.point, 400)
