"""Least-squares engine and the lifetime / reflectivity / delay fits."""

import json
import math

import numpy as np
import pytest

from remotehom.units_core import Rate
from remotehom.spectral_noise import DelayVisibilitySeries, visibility_vs_delay
from remotehom.estimation import (
    FitModel,
    FitResult,
    LifetimeModel,
    LifetimeTrace,
    RankDeficiencyError,
    delay_visibility_model,
    finite_difference_jacobian,
    fit_delay_visibility,
    fit_lifetime,
    fit_reflectivity,
    fss_beating_model,
    least_squares,
    lorentzian_dip_model,
    mono_exp_model,
    read_reflectivity_csv,
)

HBAR_UEV_PS = 658.2119


def linear_model() -> FitModel:
    return FitModel(("a",), lambda p, x: p[0] * x,
                    lambda p, x: np.asarray(x)[:, None].copy())


def affine_model() -> FitModel:
    def jac(p, x):
        x = np.asarray(x)
        return np.stack([x, np.ones_like(x)], axis=1)
    return FitModel(("a", "b"), lambda p, x: p[0] * x + p[1], jac)


# --- engine basics ----------------------------------------------------------

def test_exact_linear_fit():
    x = np.linspace(0, 10, 50)
    res = least_squares(linear_model(), x, 2.0 * x, [0.5])
    assert res.converged
    assert res.params["a"] == pytest.approx(2.0, abs=1e-9)
    assert res.residual_norm == pytest.approx(0.0, abs=1e-9)


def test_quadratic_surface_converges_fast():
    # linear-in-parameters model: the residual surface is exactly
    # quadratic, so the damped Gauss-Newton step is exact
    x = np.linspace(-3, 7, 40)
    y = 1.7 * x - 4.2
    res = least_squares(affine_model(), x, y, [10.0, 10.0])
    assert res.converged
    assert res.n_iter <= 3
    assert res.params["a"] == pytest.approx(1.7, abs=1e-9)
    assert res.params["b"] == pytest.approx(-4.2, abs=1e-9)


def test_weighted_fit_respects_sigmas():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    y = np.array([0.0, 1.0, 2.0, 9.0])  # last point is off the line
    loose = least_squares(affine_model(), x, y, [1.0, 0.0],
                          sigma=np.array([0.1, 0.1, 0.1, 100.0]))
    assert loose.params["a"] == pytest.approx(1.0, abs=1e-3)
    tight = least_squares(affine_model(), x, y, [1.0, 0.0],
                          sigma=np.array([0.1, 0.1, 0.1, 0.1]))
    assert tight.params["a"] > 1.5


def test_rank_deficiency_raises():
    def jac(p, x):
        x = np.asarray(x)
        return np.stack([x, x], axis=1)  # duplicated columns
    model = FitModel(("a", "b"), lambda p, x: (p[0] + p[1]) * x, jac)
    with pytest.raises(RankDeficiencyError):
        least_squares(model, np.linspace(1, 5, 20), 2.0 * np.linspace(1, 5, 20),
                      [1.0, 1.0])


def test_bounds_are_respected():
    x = np.linspace(0, 10, 30)
    y = -1.0 * x
    res = least_squares(linear_model(), x, y, [0.5], bounds=[(0.0, np.inf)])
    assert res.converged
    assert res.params["a"] == 0.0


def test_fit_invariant_under_data_reordering():
    rng = np.random.default_rng(41)
    x = np.linspace(0, 5, 60)
    y = 3.0 * x + 1.0 + rng.normal(0, 0.05, size=60)
    res1 = least_squares(affine_model(), x, y, [1.0, 0.0])
    order = rng.permutation(60)
    res2 = least_squares(affine_model(), x[order], y[order], [1.0, 0.0])
    assert res1.params["a"] == pytest.approx(res2.params["a"], rel=1e-9)
    assert res1.params["b"] == pytest.approx(res2.params["b"], rel=1e-9)


def test_covariance_matches_analytic_for_line():
    # unweighted straight line: cov = (J^T J)^-1 * ssr/dof
    rng = np.random.default_rng(42)
    x = np.linspace(0, 1, 100)
    y = 2.0 * x + rng.normal(0, 0.1, size=100)
    res = least_squares(linear_model(), x, y, [1.0])
    ssr = res.residual_norm**2
    expected_var = ssr / (100 - 1) / np.sum(x * x)
    assert res.sigmas["a"] == pytest.approx(math.sqrt(expected_var), rel=1e-9)


# --- Jacobians vs finite differences ----------------------------------------

def col_scaled_error(J: np.ndarray, F: np.ndarray) -> float:
    scale = np.maximum(np.abs(J), np.max(np.abs(J), axis=0, keepdims=True) * 1e-3)
    return float(np.max(np.abs(J - F) / scale))


def test_mono_exp_jacobian_matches_fd():
    t = np.linspace(0, 2000, 400)
    p = np.array([5000.0, 162.0, 10.0])
    model = mono_exp_model()
    F = finite_difference_jacobian(model.fn, p, t, rel_step=1e-6)
    assert col_scaled_error(model.jac(p, t), F) < 1e-5


def test_fss_beating_jacobian_matches_fd():
    t = np.linspace(0, 2000, 400)
    p = np.array([5000.0, 128.0, 6.7, 30.0, 10.0])
    model = fss_beating_model()
    F = finite_difference_jacobian(model.fn, p, t, rel_step=1e-6)
    assert col_scaled_error(model.jac(p, t), F) < 1e-5


def test_lorentzian_dip_jacobian_matches_fd():
    # the center parameter (~925) dwarfs the linewidth (~0.3), so the
    # finite-difference step must be small against their ratio
    wl = np.linspace(924.4, 925.1, 300)
    p = np.array([924.734, 0.319, 0.6, 0.95])
    model = lorentzian_dip_model()
    F = finite_difference_jacobian(model.fn, p, wl, rel_step=3e-8)
    assert col_scaled_error(model.jac(p, wl), F) < 1e-5


def test_delay_visibility_jacobian_matches_fd():
    delays = np.array([12.2, 50.0, 200.0, 525.0] * 2)
    is_filt = np.array([True] * 4 + [False] * 4)
    p = np.array([0.17, 4.6, 4.7, 1400.0])
    model = delay_visibility_model(Rate(6.173))
    F = finite_difference_jacobian(model.fn, p, (delays, is_filt), rel_step=1e-6)
    assert col_scaled_error(model.jac(p, (delays, is_filt)), F) < 1e-5


# --- noiseless round trips ---------------------------------------------------

def test_mono_exp_noiseless_round_trip():
    t = np.linspace(0, 1500, 300)
    truth = np.array([8000.0, 162.0, 40.0])
    y = mono_exp_model().fn(truth, t)
    res = least_squares(mono_exp_model(), t, y, truth * 1.2)
    assert res.converged
    for name, val in zip(("amplitude", "t1_ps", "background"), truth):
        assert res.params[name] == pytest.approx(val, rel=1e-6)


def test_fss_beating_noiseless_round_trip():
    t = np.linspace(0, 1500, 400)
    truth = np.array([9000.0, 128.0, 6.7, 25.0, 30.0])
    y = fss_beating_model().fn(truth, t)
    res = least_squares(fss_beating_model(), t, y, truth * np.array([0.8, 1.2, 1.1, 1.2, 0.8]))
    assert res.converged
    for name, val in zip(("amplitude", "t1_ps", "fss_uev", "t0_ps", "background"), truth):
        assert res.params[name] == pytest.approx(val, rel=1e-6)


def test_lorentzian_dip_noiseless_round_trip():
    wl = np.linspace(924.2, 925.3, 400)
    truth = np.array([924.734, 0.3189, 0.62, 0.97])
    y = lorentzian_dip_model().fn(truth, wl)
    init = truth * np.array([1.0001, 1.2, 0.8, 1.02])
    res = least_squares(lorentzian_dip_model(), wl, y, init)
    assert res.converged
    for name, val in zip(("center_nm", "fwhm_nm", "depth", "baseline"), truth):
        assert res.params[name] == pytest.approx(val, rel=1e-6)


def test_delay_visibility_noiseless_round_trip():
    delays = np.array([12.2, 40.0, 120.0, 300.0, 525.0, 1200.0, 3000.0] * 2)
    is_filt = np.array([True] * 7 + [False] * 7)
    truth = np.array([0.17, 4.6, 4.7, 1400.0])
    model = delay_visibility_model(Rate(6.173))
    y = model.fn(truth, (delays, is_filt))
    res = least_squares(model, (delays, is_filt), y, truth * 1.2)
    assert res.converged
    for name, val in zip(model.names, truth):
        assert res.params[name] == pytest.approx(val, rel=1e-6)


# --- lifetime fits ----------------------------------------------------------

def make_trace(model_fn, truth, n=350, span_ps=1600.0, peak=1e4, seed=0):
    t = np.linspace(0, span_ps, n)
    expected = model_fn(truth, t)
    rng = np.random.default_rng(seed)
    counts = rng.poisson(np.clip(expected, 0, None)).astype(float)
    return LifetimeTrace(time_ps=t, counts=counts)


def test_fit_lifetime_mono_with_poisson_noise():
    truth = np.array([1e4, 162.0, 20.0])
    trace = make_trace(mono_exp_model().fn, truth, seed=7)
    res = fit_lifetime(trace, LifetimeModel.MONO_EXP)
    assert res.converged
    assert abs(res.params["t1_ps"] - 162.0) <= 2.0 * max(res.sigmas["t1_ps"], 3.5)
    assert res.sigmas["t1_ps"] < 7.0


def test_fit_lifetime_beating_with_poisson_noise():
    truth = np.array([3e4, 128.0, 6.7, 15.0, 20.0])
    trace = make_trace(fss_beating_model().fn, truth, seed=8)
    res = fit_lifetime(trace, LifetimeModel.FSS_BEATING)
    assert res.converged
    assert abs(res.params["t1_ps"] - 128.0) <= 2.0 * max(res.sigmas["t1_ps"], 3.0)
    assert abs(res.params["fss_uev"] - 6.7) <= 2.0 * max(res.sigmas["fss_uev"], 0.1)


def test_fit_lifetime_noiseless_exact():
    truth = np.array([1e4, 240.0, 12.0])
    t = np.linspace(0, 2400, 300)
    trace = LifetimeTrace(time_ps=t, counts=mono_exp_model().fn(truth, t))
    res = fit_lifetime(trace, LifetimeModel.MONO_EXP)
    assert res.params["t1_ps"] == pytest.approx(240.0, rel=1e-6)


def test_fit_lifetime_rejects_sparse_or_short_traces():
    t_short = np.linspace(0, 200, 150)  # < 3 lifetimes of ~160 ps
    counts = 1e4 * np.exp(-t_short / 162.0)
    # explicit background: a trace this truncated defeats the
    # percentile-based background guess that feeds the span check
    with pytest.raises(ValueError):
        fit_lifetime(LifetimeTrace(time_ps=t_short, counts=counts, background=1.0),
                     LifetimeModel.MONO_EXP)
    t_few = np.linspace(0, 1600, 50)  # < 100 points
    with pytest.raises(ValueError):
        fit_lifetime(LifetimeTrace(time_ps=t_few, counts=1e4 * np.exp(-t_few / 162.0)),
                     LifetimeModel.MONO_EXP)


def test_lifetime_trace_from_csv(tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text("time_ps,counts\n0,100\n10,90\n20,82\n")
    trace = LifetimeTrace.from_csv(path, background=2.0)
    np.testing.assert_array_equal(trace.time_ps, [0.0, 10.0, 20.0])
    assert trace.background == 2.0


# --- reflectivity fits ------------------------------------------------------

def synthetic_reflectivity(center, q, depth=0.62, baseline=0.97,
                           noise=0.01, seed=0, span_widths=6.0, n=400):
    fwhm = center / q
    wl = np.linspace(center - span_widths * fwhm, center + span_widths * fwhm, n)
    y = lorentzian_dip_model().fn(np.array([center, fwhm, depth, baseline]), wl)
    if noise:
        y = y + np.random.default_rng(seed).normal(0, noise * baseline, size=n)
    return wl, y


def test_fit_reflectivity_high_q_cavity():
    wl, y = synthetic_reflectivity(924.734, 2900.0, seed=1)
    res = fit_reflectivity(wl, y)
    assert res.converged
    assert res.params["q"] == pytest.approx(2900.0, rel=0.05)
    assert res.params["center_nm"] == pytest.approx(924.734, abs=0.005)
    assert res.sigmas["q"] > 0


def test_fit_reflectivity_low_q_cavity():
    wl, y = synthetic_reflectivity(924.817, 1700.0, seed=2)
    res = fit_reflectivity(wl, y)
    assert res.converged
    assert res.params["q"] == pytest.approx(1700.0, rel=0.05)


def test_fit_reflectivity_noiseless_exact():
    wl, y = synthetic_reflectivity(924.734, 2900.0, noise=0.0)
    res = fit_reflectivity(wl, y)
    assert res.params["center_nm"] == pytest.approx(924.734, rel=1e-6)
    assert res.params["fwhm_nm"] == pytest.approx(924.734 / 2900.0, rel=1e-6)
    assert res.params["q"] == pytest.approx(2900.0, rel=1e-6)


def test_fit_reflectivity_rejects_narrow_span():
    wl, y = synthetic_reflectivity(924.734, 2900.0, noise=0.0, span_widths=1.0)
    with pytest.raises(ValueError):
        fit_reflectivity(wl, y)


def test_read_reflectivity_csv(tmp_path):
    path = tmp_path / "spec.csv"
    path.write_text("wavelength_nm,reflectivity\n924.6,0.97\n924.7,0.4\n924.8,0.96\n")
    wl, r = read_reflectivity_csv(path)
    np.testing.assert_array_equal(wl, [924.6, 924.7, 924.8])
    np.testing.assert_array_equal(r, [0.97, 0.4, 0.96])
    bad = tmp_path / "bad.csv"
    bad.write_text("wl,r\n924.6,0.97\n")
    with pytest.raises(ValueError):
        read_reflectivity_csv(bad)


# --- delay-visibility joint fits --------------------------------------------

GAMMA_IA = Rate(1000.0 / 162.0)


def synthetic_delay_series(gs, dw_f, dw_u, tau_c, noise=0.01, seed=0):
    delays = np.array([12.2, 40.0, 120.0, 300.0, 525.0, 1200.0, 3000.0])
    g = GAMMA_IA.value
    v0 = g / (g + gs)
    rng = np.random.default_rng(seed)
    out = []
    for dw, filtered in ((dw_f, True), (dw_u, False)):
        v = np.array([visibility_vs_delay(v0, dw / (g + gs), tau_c, d) for d in delays])
        v_noisy = np.clip(v * (1.0 + rng.normal(0, noise, size=v.size)), 0.0, 1.0)
        out.append(DelayVisibilitySeries(delays, v_noisy, noise * v,
                                         filtered=filtered))
    return out[0], out[1]


def test_delay_fit_round_trip_with_noise():
    filt, unfilt = synthetic_delay_series(0.17, 4.6, 4.7, 1400.0, seed=3)
    res = fit_delay_visibility(filt, unfilt, GAMMA_IA)
    assert res.converged
    assert res.params["gamma_star"] == pytest.approx(0.17, rel=0.10)
    assert res.params["delta_omega_filtered"] == pytest.approx(4.6, rel=0.10)
    assert res.params["delta_omega_unfiltered"] == pytest.approx(4.7, rel=0.10)
    assert res.params["tau_c_ns"] == pytest.approx(1400.0, rel=0.30)


def test_delay_fit_shared_zero_delay_value():
    filt, unfilt = synthetic_delay_series(0.17, 4.6, 4.7, 1400.0, seed=4)
    res = fit_delay_visibility(filt, unfilt, GAMMA_IA)
    model = delay_visibility_model(GAMMA_IA)
    p = np.array([res.params[n] for n in model.names])
    v0_f = model.fn(p, (np.array([0.0]), np.array([True])))[0]
    v0_u = model.fn(p, (np.array([0.0]), np.array([False])))[0]
    assert v0_f == pytest.approx(v0_u, rel=1e-12)
    assert res.params["v0"] == pytest.approx(v0_f, rel=1e-12)


def test_delay_fit_flat_series_pins_wandering_to_zero():
    delays = np.array([12.2, 100.0, 525.0, 2000.0])
    v = np.full(4, 0.91)
    filt = DelayVisibilitySeries(delays, v, np.full(4, 0.005), filtered=True)
    unfilt = DelayVisibilitySeries(delays, v, np.full(4, 0.005), filtered=False)
    res = fit_delay_visibility(filt, unfilt, GAMMA_IA)
    assert res.converged
    assert res.params["delta_omega_filtered"] == pytest.approx(0.0, abs=1e-6)
    assert res.params["delta_omega_unfiltered"] == pytest.approx(0.0, abs=1e-6)
    assert res.params["v0"] == pytest.approx(0.91, abs=1e-6)


def test_delay_fit_requires_three_points_per_series():
    delays = np.array([12.2, 525.0])
    s = DelayVisibilitySeries(delays, np.array([0.9, 0.7]), np.array([0.01, 0.01]))
    with pytest.raises(ValueError):
        fit_delay_visibility(s, s, GAMMA_IA)


def test_delay_fit_outlier_inflation_changes_weight():
    filt, unfilt = synthetic_delay_series(0.17, 4.6, 4.7, 1400.0, seed=5)
    # corrupt the first unfiltered point downward
    v = unfilt.visibility.copy()
    v[0] *= 0.9
    corrupted = DelayVisibilitySeries(unfilt.delay_ns, v, unfilt.sigma_v,
                                      filtered=False)
    plain = fit_delay_visibility(filt, corrupted, GAMMA_IA)
    inflated = fit_delay_visibility(filt, corrupted, GAMMA_IA,
                                    sigma_overrides=[("unfiltered", 12.2, 0.1)])
    # de-weighting the corrupted point must move the fit back toward truth
    err_plain = abs(plain.params["delta_omega_unfiltered"] - 4.7)
    err_inflated = abs(inflated.params["delta_omega_unfiltered"] - 4.7)
    assert err_inflated < err_plain


def test_delay_fit_rejects_mixed_zero_sigmas():
    delays = np.array([12.2, 100.0, 525.0])
    filt = DelayVisibilitySeries(delays, np.array([0.9, 0.85, 0.8]),
                                 np.array([0.0, 0.01, 0.01]), filtered=True)
    unfilt = DelayVisibilitySeries(delays, np.array([0.88, 0.8, 0.75]),
                                   np.full(3, 0.01), filtered=False)
    with pytest.raises(ValueError):
        fit_delay_visibility(filt, unfilt, GAMMA_IA)


# --- result serialization ---------------------------------------------------

def test_fit_result_to_json(tmp_path):
    x = np.linspace(0, 10, 50)
    res = least_squares(affine_model(), x, 2.0 * x + 1.0, [1.0, 0.0])
    path = tmp_path / "fit.json"
    res.to_json(path)
    payload = json.loads(path.read_text())
    assert set(payload) == {"params", "sigmas", "residual_norm", "converged", "n_iter"}
    assert payload["converged"] is True
    assert payload["params"]["a"] == pytest.approx(2.0)
