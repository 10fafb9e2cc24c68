import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popgrid.dynamic import (
    EventSpec,
    MultivariateParams,
    activity_level,
    compare_models,
    dynamic_density_values,
    estimate_attendance,
    estimate_dynamic,
    fit_lambda_lines,
    proportional_ceiling_gap,
    xu_estimate,
    zscore,
)
from popgrid.errors import DegenerateDataError, InputError, InsufficientDataError
from popgrid.grid import PopulationDensityMap
from popgrid.metadata import EVENT_KINDS, PresenceSeries, VolumeSeries, presence_density
from popgrid.regress import PowerLawFit, ransac_powerlaw_fit
from popgrid.timebase import SECONDS_PER_DAY, day_of_date

from conftest import unit_grid

REFERENCE_PARAMS = MultivariateParams(a_alpha=2.90, b_alpha=1.07, a_beta=-0.30, b_beta=0.98)
MONDAY = dt.date(2015, 3, 2)
MONDAY_S = day_of_date(MONDAY) * SECONDS_PER_DAY


def empty_series(grid, n_slots, start_s=MONDAY_S):
    slot_starts = start_s + 900 * np.arange(n_slots, dtype=np.int64)
    counts = np.zeros((len(grid), n_slots))
    missing = np.zeros_like(counts, dtype=bool)
    presence = presence_density(
        PresenceSeries(grid.ids(), 900, slot_starts, counts, missing), grid
    )
    volumes = VolumeSeries(
        grid.ids(), 900, slot_starts.copy(), {k: np.zeros((len(grid), n_slots)) for k in EVENT_KINDS}
    )
    return presence, volumes


class TestActivityLevel:
    def test_scalar_example(self, grid_2x2):
        presence, volumes = empty_series(grid_2x2, 1)
        presence.counts[0, 0] = 100.0
        presence = presence_density(presence, grid_2x2)
        volumes.values["call_in"][0, 0] = 5.0
        volumes.values["call_out"][0, 0] = 7.0
        level = activity_level(volumes, presence, "call")
        assert level.lam[0, 0] == pytest.approx(0.12)

    def test_zero_volume_zero_lambda(self, grid_2x2):
        presence, volumes = empty_series(grid_2x2, 1)
        presence.counts[:, 0] = 50.0
        presence = presence_density(presence, grid_2x2)
        level = activity_level(volumes, presence, "call")
        assert np.all(level.lam[:, 0] == 0.0)

    def test_zero_presence_undefined_not_division(self, grid_2x2):
        presence, volumes = empty_series(grid_2x2, 1)
        presence.counts[0, 0] = 10.0
        presence = presence_density(presence, grid_2x2)
        volumes.values["call_in"][:, 0] = 3.0
        level = activity_level(volumes, presence, "call")
        assert np.isnan(level.lam[1, 0])
        # the city mean only averages the defined cell
        assert level.city_mean[0] == pytest.approx(0.3)

    def test_sms_kind(self, grid_2x2):
        presence, volumes = empty_series(grid_2x2, 1)
        presence.counts[0, 0] = 10.0
        presence = presence_density(presence, grid_2x2)
        volumes.values["sms_in"][0, 0] = 1.0
        volumes.values["sms_out"][0, 0] = 2.0
        volumes.values["call_in"][0, 0] = 50.0
        level = activity_level(volumes, presence, "sms")
        assert level.lam[0, 0] == pytest.approx(0.3)


class TestLambdaLines:
    def test_exact_recovery_of_reference_lines(self):
        lam = np.linspace(0.01, 0.20, 12)
        pairs = []
        for i, l in enumerate(lam):
            fit = PowerLawFit(
                alpha=float(np.exp(REFERENCE_PARAMS.a_alpha * l + REFERENCE_PARAMS.b_alpha)),
                beta=float(REFERENCE_PARAMS.a_beta * l + REFERENCE_PARAMS.b_beta),
                seed=i,
                inlier_mask=np.ones(10, dtype=bool),
            )
            pairs.append((float(l), fit))
        params = fit_lambda_lines(pairs)
        assert params.a_alpha == pytest.approx(2.90, abs=1e-12)
        assert params.b_alpha == pytest.approx(1.07, abs=1e-12)
        assert params.a_beta == pytest.approx(-0.30, abs=1e-12)
        assert params.b_beta == pytest.approx(0.98, abs=1e-12)

    def test_two_points_interpolate(self):
        mk = lambda a, b: PowerLawFit(alpha=a, beta=b, seed=0, inlier_mask=np.ones(3, dtype=bool))
        params = fit_lambda_lines([(0.0, mk(np.exp(1.0), 1.0)), (0.1, mk(np.exp(1.5), 0.9))])
        assert params.a_alpha == pytest.approx(5.0)
        assert params.b_alpha == pytest.approx(1.0)
        assert params.a_beta == pytest.approx(-1.0)
        assert params.b_beta == pytest.approx(1.0)

    def test_identical_lambdas_degenerate(self):
        mk = lambda: PowerLawFit(alpha=2.0, beta=1.0, seed=0, inlier_mask=np.ones(3, dtype=bool))
        with pytest.raises(DegenerateDataError):
            fit_lambda_lines([(0.1, mk()), (0.1, mk()), (0.1, mk())])

    def test_noisy_recovery_within_bootstrap_interval(self):
        # repeated simulation: a percentile bootstrap over the pairs should
        # cover the generating line parameters in at least 90% of trials
        hits = 0
        trials = 60
        for t in range(trials):
            rng = np.random.default_rng(5000 + t)
            lam = rng.uniform(0.01, 0.2, size=40)
            pairs = []
            for i, l in enumerate(lam):
                fit = PowerLawFit(
                    alpha=float(np.exp(2.9 * l + 1.07 + rng.normal(0, 0.05))),
                    beta=float(-0.3 * l + 0.98 + rng.normal(0, 0.02)),
                    seed=i,
                    inlier_mask=np.ones(4, dtype=bool),
                )
                pairs.append((float(l), fit))
            boots = []
            for _ in range(200):
                idx = rng.integers(0, len(pairs), len(pairs))
                if np.ptp(lam[idx]) == 0:
                    continue
                boots.append(fit_lambda_lines([pairs[i] for i in idx]).a_alpha)
            lo, hi = np.percentile(boots, [2.5, 97.5])
            hits += lo <= 2.9 <= hi
        assert hits >= 54  # 90% of 60


class TestEstimateDynamic:
    def test_reference_point_value(self):
        values, _ = dynamic_density_values(np.array([100.0]), np.array([0.1]), REFERENCE_PARAMS)
        assert values[0] == pytest.approx(309.5, abs=0.1)

    def test_lambda_zero_reduces_to_static(self):
        sigma = np.linspace(1, 400, 57)
        values, _ = dynamic_density_values(sigma, np.zeros_like(sigma), REFERENCE_PARAMS)
        static = np.exp(REFERENCE_PARAMS.b_alpha) * sigma**REFERENCE_PARAMS.b_beta
        assert np.allclose(values, static, rtol=1e-12)

    def test_zero_sigma_zero_estimate(self):
        values, _ = dynamic_density_values(np.array([0.0]), np.array([0.1]), REFERENCE_PARAMS)
        assert values[0] == 0.0

    def test_negative_sigma_rejected(self):
        with pytest.raises(InputError):
            dynamic_density_values(np.array([-1.0]), np.array([0.1]), REFERENCE_PARAMS)

    def test_nan_lambda_falls_back_to_city_mean(self):
        sigma = np.array([10.0, 10.0, 10.0])
        lam = np.array([0.1, np.nan, 0.3])
        values, fallback = dynamic_density_values(sigma, lam, REFERENCE_PARAMS)
        direct, _ = dynamic_density_values(np.array([10.0]), np.array([0.2]), REFERENCE_PARAMS)
        assert values[1] == pytest.approx(direct[0])
        assert fallback.tolist() == [False, True, False]

    def test_map_wrapper(self, grid_2x2):
        density = estimate_dynamic(
            {cid: 100.0 for cid in grid_2x2.ids()},
            {cid: 0.1 for cid in grid_2x2.ids()},
            REFERENCE_PARAMS,
            timestamp=123.0,
        )
        assert density.timestamp == 123.0
        assert density.values["c0000"] == pytest.approx(309.5, abs=0.1)

    def test_monotone_in_sigma_above_baseline(self):
        lam = 0.12
        sigma = np.linspace(1, 1000, 500)
        values, _ = dynamic_density_values(sigma, np.full_like(sigma, lam), REFERENCE_PARAMS)
        assert np.all(np.diff(values) > 0)


class TestZscore:
    def test_constructed_normalization(self, rng):
        series = rng.uniform(0, 100, size=(8, 50))
        z, constant = zscore(series)
        assert not constant.any()
        assert np.allclose(z.mean(axis=1), 0.0, atol=1e-12)
        assert np.allclose(z.std(axis=1), 1.0, atol=1e-12)

    def test_hand_computed(self):
        z, _ = zscore(np.array([[1.0, 2.0, 3.0]]))
        assert z[0, 2] == pytest.approx((3 - 2) / np.sqrt(2.0 / 3.0))
        assert z[0, 2] == pytest.approx(1.2247, abs=1e-4)

    def test_constant_cell_flagged_zero(self):
        z, constant = zscore(np.array([[5.0, 5.0, 5.0], [1.0, 2.0, 3.0]]))
        assert constant.tolist() == [True, False]
        assert np.all(z[0] == 0.0)

    def test_nan_slots_ignored(self):
        z, constant = zscore(np.array([[1.0, np.nan, 2.0, 3.0]]))
        assert np.isnan(z[0, 1])
        finite = z[0, np.isfinite(z[0])]
        assert finite.mean() == pytest.approx(0.0, abs=1e-12)


def _attendance_fixture(uplift=400.0, n_venue_devices=None):
    """Four Mondays of flat presence; the last has a venue bump at 21:00."""
    grid = unit_grid(3, 3)
    n_days = 22  # Mon..Mon spans four Mondays
    n_slots = n_days * 96
    slot_starts = MONDAY_S + 900 * np.arange(n_slots, dtype=np.int64)
    counts = np.full((len(grid), n_slots), 30.0)
    missing = np.zeros_like(counts, dtype=bool)
    volumes = VolumeSeries(
        grid.ids(), 900, slot_starts.copy(), {k: np.zeros((len(grid), n_slots)) for k in EVENT_KINDS}
    )
    volumes.values["call_in"][:] = 1.5
    volumes.values["call_out"][:] = 1.5
    event_day_offset = 21
    kick = MONDAY_S + event_day_offset * SECONDS_PER_DAY + 21 * 3600
    peak_slot = (event_day_offset * SECONDS_PER_DAY + 21 * 3600 + 1800) // 900
    venue = "c0004"  # center cell; neighbors are 1,3,5,7
    ci = 4
    counts[ci, peak_slot] += uplift
    volumes.values["call_in"][ci, peak_slot] += uplift * 0.06
    volumes.values["call_out"][ci, peak_slot] += uplift * 0.06
    presence = presence_density(
        PresenceSeries(grid.ids(), 900, slot_starts, counts, missing), grid
    )
    event = EventSpec(
        event_id="m0",
        venue_cells=(venue,),
        date=MONDAY + dt.timedelta(days=event_day_offset),
        start_s=kick - 900,
        end_s=kick + 105 * 60 + 900,
    )
    return grid, presence, volumes, event, peak_slot


class TestAttendance:
    def test_no_uplift_gives_zero(self):
        grid, presence, volumes, event, _ = _attendance_fixture(uplift=0.0)
        est = estimate_attendance(event, presence, volumes, REFERENCE_PARAMS, grid)
        assert est.no_crowd
        assert est.gamma_hat == 0.0
        assert est.sigma_match == pytest.approx(est.sigma_norm)

    def test_scalar_pipeline_against_hand_computation(self):
        grid, presence, volumes, event, peak_slot = _attendance_fixture(uplift=400.0)
        est = estimate_attendance(event, presence, volumes, REFERENCE_PARAMS, grid)
        # neighborhood: venue + 4 side neighbors, all 1 km² cells
        assert len(est.cells) == 5
        assert est.t_peak == presence.slot_starts[peak_slot]
        # surface-weighted densities: baseline 30 everywhere; match adds 400/5
        assert est.sigma_norm == pytest.approx(30.0)
        assert est.sigma_match == pytest.approx(30.0 + 400.0 / 5.0)
        lam = est.lambda_tilde
        expected = (
            np.exp(REFERENCE_PARAMS.a_alpha * lam + REFERENCE_PARAMS.b_alpha)
            * (est.sigma_match - est.sigma_norm) ** (REFERENCE_PARAMS.a_beta * lam + REFERENCE_PARAMS.b_beta)
            * 5.0
        )
        assert est.gamma_hat == pytest.approx(expected, rel=1e-12)

    def test_gamma_monotone_in_uplift(self):
        gammas = []
        for uplift in (100.0, 200.0, 400.0, 800.0):
            grid, presence, volumes, event, _ = _attendance_fixture(uplift=uplift)
            gammas.append(estimate_attendance(event, presence, volumes, REFERENCE_PARAMS, grid).gamma_hat)
        assert all(a < b for a, b in zip(gammas, gammas[1:]))

    def test_insufficient_baseline_days(self):
        grid, presence, volumes, event, _ = _attendance_fixture()
        other_mondays = {MONDAY, MONDAY + dt.timedelta(days=7), MONDAY + dt.timedelta(days=14)}
        spec = EventSpec(
            event_id=event.event_id,
            venue_cells=event.venue_cells,
            date=event.date,
            start_s=event.start_s,
            end_s=event.end_s,
            exclude_dates=frozenset(other_mondays),
        )
        with pytest.raises(InsufficientDataError):
            estimate_attendance(spec, presence, volumes, REFERENCE_PARAMS, grid)

    def test_literal_alpha_switch(self):
        grid, presence, volumes, event, _ = _attendance_fixture(uplift=400.0)
        exp_form = estimate_attendance(event, presence, volumes, REFERENCE_PARAMS, grid)
        lit_form = estimate_attendance(
            event, presence, volumes, REFERENCE_PARAMS, grid, literal_alpha=True
        )
        lam = exp_form.lambda_tilde
        ratio = np.exp(REFERENCE_PARAMS.a_alpha * lam + REFERENCE_PARAMS.b_alpha) / (
            REFERENCE_PARAMS.a_alpha * lam + REFERENCE_PARAMS.b_alpha
        )
        assert exp_form.gamma_hat / lit_form.gamma_hat == pytest.approx(ratio, rel=1e-12)


class TestXu:
    def test_total_population_conserved(self, rng):
        grid = unit_grid(4, 4)
        ids = grid.ids()
        census = PopulationDensityMap(dict(zip(ids, rng.uniform(100, 3000, len(ids)))))
        labels = {cid: ("residential" if i % 2 else "office") for i, cid in enumerate(ids)}
        fits = {"residential": (3.0, 0.95), "office": (1.5, 1.05)}
        sigma = rng.uniform(1, 500, len(ids))
        est = xu_estimate(sigma, fits, labels, census, grid)
        surfaces = grid.surfaces()
        assert np.dot(est.to_array(ids), surfaces) == pytest.approx(
            np.dot(census.to_array(ids), surfaces), rel=1e-12
        )

    def test_proportional_single_landuse_exact(self, rng):
        grid = unit_grid(3, 3)
        ids = grid.ids()
        rho = rng.uniform(100, 2000, len(ids))
        census = PopulationDensityMap(dict(zip(ids, rho)))
        labels = {cid: "residential" for cid in ids}
        sigma = 0.35 * rho
        est = xu_estimate(sigma, {"residential": (1.0, 1.0)}, labels, census, grid)
        assert np.allclose(est.to_array(ids), rho, rtol=1e-12)

    def test_two_cell_hand_oracle(self):
        grid = unit_grid(2, 1)
        ids = grid.ids()
        census = PopulationDensityMap({ids[0]: 1000.0, ids[1]: 500.0})
        labels = {ids[0]: "residential", ids[1]: "office"}
        fits = {"residential": (2.0, 1.0), "office": (4.0, 0.5)}
        sigma = np.array([100.0, 25.0])
        raw = np.array([2.0 * 100.0, 4.0 * np.sqrt(25.0)])  # 200, 20
        r_t = (1000.0 + 500.0) / (200.0 + 20.0)
        est = xu_estimate(sigma, fits, labels, census, grid)
        assert est.to_array(ids) == pytest.approx(r_t * raw, rel=1e-12)

    def test_all_zero_sigma_degenerate(self, grid_2x2):
        ids = grid_2x2.ids()
        census = PopulationDensityMap({cid: 100.0 for cid in ids})
        labels = {cid: "residential" for cid in ids}
        with pytest.raises(DegenerateDataError):
            xu_estimate(np.zeros(4), {"residential": (2.0, 1.0)}, labels, census, grid_2x2)

    def test_missing_label_rejected(self, grid_2x2):
        ids = grid_2x2.ids()
        census = PopulationDensityMap({cid: 100.0 for cid in ids})
        labels = {cid: "residential" for cid in ids[:2]}
        with pytest.raises(InputError):
            xu_estimate(np.ones(4), {"residential": (2.0, 1.0)}, labels, census, grid_2x2)


class TestCompareModels:
    def test_identical_estimates(self):
        truth = {"e0": 100.0, "e1": 200.0, "e2": 300.0}
        est = {"e0": 110.0, "e1": 190.0, "e2": 330.0}
        cmp = compare_models(truth, est, dict(est))
        assert cmp.median_ratio == 1.0
        assert cmp.p_value > 0.9

    def test_biased_baseline_detected(self, rng):
        truth = {f"e{i}": 1000.0 for i in range(8)}
        good = {f"e{i}": 1000.0 * (1 + rng.normal(0, 0.03)) for i in range(8)}
        bad = {f"e{i}": 1000.0 * (1 + rng.normal(-0.5, 0.05)) for i in range(8)}
        cmp = compare_models(truth, good, bad)
        assert cmp.median_ratio > 1.0
        assert cmp.p_value < 0.01
        assert cmp.percentiles["xu"][50] > cmp.percentiles["multivariate"][50]

    def test_needs_three_events(self):
        with pytest.raises(InsufficientDataError):
            compare_models({"e0": 1.0, "e1": 2.0}, {"e0": 1.0, "e1": 2.0}, {"e0": 1.0, "e1": 2.0})


class TestProportionalCeiling:
    def test_literal_model_stays_below_ceiling(self):
        # reference-parameter check on the observed (sigma, lambda) ranges
        sigma = np.linspace(1.0, 400.0, 400)
        lams = np.array([0.01, 0.05, 0.10, 0.14, 0.20])
        gaps = proportional_ceiling_gap(REFERENCE_PARAMS, 0.35, sigma, lams)
        assert np.all(gaps > 0.0)

    def test_gap_shrinks_with_activity(self):
        sigma = np.linspace(1.0, 400.0, 400)
        lams = np.array([0.01, 0.05, 0.10, 0.14, 0.20])
        gaps = proportional_ceiling_gap(REFERENCE_PARAMS, 0.35, sigma, lams)
        assert np.all(np.diff(gaps, axis=0) < 0.0)

    def test_exp_convention_exceeds_ceiling(self):
        # the log-space factor crosses the proportional line in-range, which
        # is why the diagnostic pins the literal form
        values, _ = dynamic_density_values(np.array([100.0]), np.array([0.1]), REFERENCE_PARAMS)
        assert values[0] > 100.0 / 0.35
