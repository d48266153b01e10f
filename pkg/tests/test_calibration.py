import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsum import calibration as cal
from nsum.classic import mle
from nsum.simulate import DegreeModel, SubpopSpec, WorldConfig, simulate
from nsum.survey import SizeEstimate

from conftest import make_survey


def est(point, se=None, ci=None):
    return SizeEstimate(point, "mle", se, ci)


def test_visibility_examples():
    assert cal.scale_by_visibility(est(50), 0.5).point == 100
    assert cal.scale_by_visibility(est(4900), 0.49).point == pytest.approx(10000)
    same = cal.scale_by_visibility(est(50, 5, (40, 60)), 1.0)
    assert (same.point, same.std_error, same.interval) == (50, 5, (40, 60))


def test_visibility_records_calibration():
    e = cal.scale_by_visibility(est(50), cal.VisibilityFactor(0.5, "game-of-contacts"))
    assert e.calibrations_applied == ("visibility:0.5",)
    assert e.metadata["visibility_factors"][0]["source"] == "game-of-contacts"


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
def test_visibility_out_of_range(bad):
    with pytest.raises(cal.CalibrationError):
        cal.VisibilityFactor(bad)


@settings(max_examples=100)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.floats(0.0, 1e6))
def test_visibility_composes(t1, t2, p):
    twice = cal.scale_by_visibility(cal.scale_by_visibility(est(p), t1), t2)
    once = cal.scale_by_visibility(est(p), t1 * t2)
    assert twice.point == pytest.approx(once.point, rel=1e-12)


# -- leave-one-out and trimming ------------------------------------------------


def unbiased_world(seed=0, n=500, sizes=(500, 1000, 1500, 2000, 3000)):
    subs = [SubpopSpec(f"k{j}", s, True) for j, s in enumerate(sizes)] + [SubpopSpec("u", 2000, False)]
    cfg = WorldConfig(100_000, tuple(subs), DegreeModel("lognormal", mu=5.0, sigma=0.5), respondents=n, seed=seed)
    return simulate(cfg)


def test_loo_unbiased_ratios_near_one():
    rows = cal.loo_backestimates(unbiased_world().survey, "mle")
    assert all(0.8 <= r.ratio <= 1.25 for r in rows)


def test_loo_duplicate_column_ratio_near_one():
    s = unbiased_world().survey
    y = np.column_stack([s.responses, s.responses[:, 0]])
    dup = make_survey(y, {**s.known_sizes, "dup": s.known_sizes["k0"]}, [*s.columns, "dup"], N=s.population_total)
    rows = {r.subpop: r for r in cal.loo_backestimates(dup, "mle")}
    assert rows["dup"].ratio == pytest.approx(1.0, abs=0.25)


def inflate(s, column, factor):
    y = s.responses.copy()
    y[:, s.index(column)] *= factor
    return s.replace(responses=y)


def test_loo_doubled_column_ratio_near_two():
    s = inflate(unbiased_world().survey, "k2", 2)
    rows = {r.subpop: r for r in cal.loo_backestimates(s, "mle")}
    assert rows["k2"].ratio == pytest.approx(2.0, rel=0.25)


def test_loo_bootstrap_variances():
    rows = cal.loo_backestimates(unbiased_world(n=200).survey, "mle", bootstrap=30, seed=1)
    assert all(r.log_var is not None and r.log_var > 0 for r in rows)


def test_trim_nothing_to_do():
    res = cal.trim_stepwise(unbiased_world().survey, "mle", tolerance=0.25)
    assert res.removed == []
    assert len(res.rounds) == 1


def test_trim_removes_poisoned_column_first():
    w = unbiased_world(seed=4)
    s = inflate(w.survey, "k1", 3)
    res = cal.trim_stepwise(s, "mle")
    assert res.removed[0] == "k1"
    truth = w.truth("u")
    assert abs(mle(res.survey, "u").point - truth) < abs(mle(s, "u").point - truth)


def test_trim_keeps_two_known_columns():
    s = unbiased_world(sizes=(500, 1000, 1500)).survey
    res = cal.trim_stepwise(s, "mle", tolerance=0.0)
    assert len(res.survey.known_columns) == 2


def test_trim_only_removes_out_of_tolerance_columns():
    s = inflate(unbiased_world(seed=2).survey, "k3", 3)
    res = cal.trim_stepwise(s, "mle", tolerance=0.25)
    for rnd in res.rounds:
        if rnd["removed"] is not None:
            row = next(r for r in rnd["table"] if r["subpop"] == rnd["removed"])
            assert abs(row["log_ratio"]) > 0.25


# -- calibration curve -------------------------------------------------------


def test_curve_fixed_point_and_value():
    for b in (-3.0, 0.0, 1.7):
        assert cal.curve(b, 0.7, b) == b
    assert cal.curve(2.0, 1.0, 0.0) == pytest.approx(1 + 0.5 * (1 - math.exp(-2)), abs=1e-9)
    assert cal.curve(2.0, 1.0, 0.0) == pytest.approx(1.4323, abs=1e-4)


@settings(max_examples=100)
@given(st.floats(0.01, 5), st.floats(-5, 5), st.floats(-8, 8), st.floats(0.001, 3))
def test_curve_increasing_and_below_identity(a, b, x, h):
    assert cal.curve(x + h, a, b) > cal.curve(x, a, b)
    assert cal.curve(x, a, b) <= x + 1e-12


def test_curve_fit_recovers_noiseless_parameters():
    beta = np.linspace(-7, -2, 8)
    fit = cal.fit_calibration_curve(beta, cal.curve(beta, 1.0, -4.0), [f"k{j}" for j in range(8)])
    assert fit.a == pytest.approx(1.0, abs=1e-3)
    assert fit.b == pytest.approx(-4.0, abs=1e-3)
    for x in beta:
        assert cal.apply_calibration_curve(fit, float(cal.curve(x, fit.a, fit.b))) == pytest.approx(x, abs=1e-6)


def test_curve_fit_on_log_size_scale():
    N = 1e6
    beta = np.linspace(-7, -2, 8)
    fit = cal.fit_calibration_curve(beta + math.log(N), cal.curve(beta, 0.5, -5.0) + math.log(N),
                                    scale="log_size", population_total=N)
    assert (fit.a, fit.b) == pytest.approx((0.5, -5.0), abs=1e-3)


def test_curve_inverse_examples():
    c = cal.CalibrationCurve(1.0, 0.0)
    for x in (-2.0, 0.0, 3.0):
        assert cal.apply_calibration_curve(c, float(c(x))) == pytest.approx(x, abs=1e-9)
    assert cal.apply_calibration_curve(c, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert cal.apply_calibration_curve(c, 1.4323) == pytest.approx(2.0, abs=1e-3)


def test_curve_needs_three_points():
    with pytest.raises(cal.CalibrationError):
        cal.fit_calibration_curve([1.0, 2.0], [1.0, 2.0])


# -- errors in variables -----------------------------------------------------


def test_eiv_identity_and_shift():
    draws = np.random.default_rng(0).normal(7, 0.3, size=(2, 50))
    np.testing.assert_array_equal(cal.eiv_transform(cal.EivFit(0.0, 1.0, 0.0), draws), draws)
    halved = cal.eiv_transform(cal.EivFit(math.log(2), 1.0, 0.0), draws)
    np.testing.assert_allclose(halved, draws - math.log(2), atol=1e-15)


@settings(max_examples=50)
@given(st.floats(-2, 2), st.floats(0.2, 3), st.floats(-10, 10), st.floats(-10, 10))
def test_eiv_zero_noise_is_affine(a, b, x1, x2):
    fit = cal.EivFit(a, b, 0.0)
    out = cal.eiv_transform(fit, np.array([x1, x2, 0.5 * (x1 + x2)]))
    assert out[2] == pytest.approx(0.5 * (out[0] + out[1]), abs=1e-9)


def test_eiv_fit_recovers_recall_distortion():
    rng = np.random.default_rng(11)
    logN = np.linspace(math.log(300), math.log(30000), 15)
    s2 = np.full(15, 0.02**2)
    y = 0.3 + 0.9 * logN + rng.normal(0, np.sqrt(s2)) + rng.normal(0, 0.02, 15)
    fit = cal.fit_eiv(np.exp(logN), np.exp(y), s2)
    assert fit.a == pytest.approx(0.3, abs=0.1)
    assert fit.b == pytest.approx(0.9, abs=0.05)


def test_eiv_adjust_needs_variances():
    rows = cal.loo_backestimates(unbiased_world(n=200).survey, "mle")
    with pytest.raises(cal.CalibrationError, match="variances"):
        cal.eiv_recall_adjust(rows, np.zeros(5))
    out, fit = cal.eiv_recall_adjust(rows, np.full(5, 7.0), s2=0.01)
    assert out.shape == (5,)
