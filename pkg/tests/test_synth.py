import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popgrid.errors import InputError
from popgrid.grid import census_to_grid, validate_tessellation
from popgrid.metadata import EVENT_KINDS, aggregate_volumes, infer_presence
from popgrid.regress import pearson
from popgrid.synth import (
    InjectedEvent,
    ScenarioConfig,
    generate_city,
    inject_event,
    load_scenario_config,
    occupancy_reference,
    operator_presence,
    sanitize,
    simulate_events,
    write_scenario_config,
)
from popgrid.timebase import SECONDS_PER_DAY, day_of_date


def small_config(**overrides):
    base = dict(
        grid_nx=5,
        grid_ny=5,
        cell_min_km=1.0,
        cell_max_km=1.0,
        population_total=2000,
        market_share=1.0,
        pop_sigma=0.3,
        days=2,
        seed=7,
        template="uniform",
    )
    base.update(overrides)
    return ScenarioConfig(**base)


class TestGenerateCity:
    def test_uniform_grid_equal_surfaces(self):
        scenario = generate_city(ScenarioConfig(grid_nx=10, grid_ny=10, cell_min_km=1.0, cell_max_km=1.0))
        assert len(scenario.grid) == 100
        assert np.allclose(scenario.grid.surfaces(), 1.0)
        assert validate_tessellation(scenario.grid).ok

    def test_population_total_exact(self):
        scenario = generate_city(ScenarioConfig(population_total=800_000, grid_nx=12, grid_ny=12))
        assert scenario.populations.sum() == 800_000
        assert sum(a.population for a in scenario.areas) == 800_000

    def test_same_seed_identical(self):
        a = generate_city(small_config())
        b = generate_city(small_config())
        assert a.grid.ids() == b.grid.ids()
        assert np.array_equal(a.populations, b.populations)
        assert np.array_equal(a.home_cell, b.home_cell)
        assert np.array_equal(a.depart_slot, b.depart_slot)
        assert a.land_use == b.land_use

    def test_admin_blocks_partition_population(self):
        scenario = generate_city(small_config(admin_block=2))
        density = census_to_grid(scenario.grid, scenario.areas)
        total = sum(density.values[c.id] * c.surface_km2 for c in scenario.grid.cells)
        assert total == pytest.approx(2000, rel=1e-9)

    def test_zone_template_has_all_land_uses(self):
        scenario = generate_city(ScenarioConfig(grid_nx=20, grid_ny=20, template="zones"))
        assert set(scenario.land_use.values()) == {
            "residential",
            "office",
            "touristic",
            "university",
            "shopping",
        }


class TestSimulateEvents:
    def test_zero_rates_empty_stream(self):
        scenario = generate_city(small_config(rate_scale=0.0))
        stream, record = simulate_events(scenario)
        assert len(stream) == 0
        assert record.true_counts.sum() > 0  # schedules exist even without chatter

    def test_deterministic_streams(self):
        scenario = generate_city(small_config())
        s1, r1 = simulate_events(scenario)
        s2, r2 = simulate_events(scenario)
        assert np.array_equal(s1.times, s2.times)
        assert np.array_equal(s1.devices, s2.devices)
        assert np.array_equal(s1.cells, s2.cells)
        assert np.array_equal(s1.kinds, s2.kinds)
        assert np.array_equal(r1.true_counts, r2.true_counts)

    def test_sorted_stream(self):
        scenario = generate_city(small_config())
        stream, _ = simulate_events(scenario)
        stream.check_sorted()

    def test_event_count_within_three_sigma(self):
        # constant per-hour rate r for every kind: expected count is
        # r * users * hours * kinds; Poisson variance equals the mean
        scenario = generate_city(small_config(days=2))
        from popgrid import synth as synth_mod

        rate = 0.05
        saved = {k: synth_mod._RATE_TABLE[k].copy() for k in EVENT_KINDS}
        try:
            for k in EVENT_KINDS:
                synth_mod._RATE_TABLE[k][:] = rate
            stream, _ = simulate_events(scenario)
        finally:
            for k in EVENT_KINDS:
                synth_mod._RATE_TABLE[k][:] = saved[k]
        expected = rate * scenario.n_devices * 24 * 2 * len(EVENT_KINDS)
        assert abs(len(stream) - expected) <= 3 * np.sqrt(expected)

    def test_true_counts_partition_devices(self):
        scenario = generate_city(small_config(days=1))
        _, record = simulate_events(scenario)
        assert np.all(record.true_counts.sum(axis=0) == scenario.n_devices)

    def test_overnight_presence_tracks_population(self):
        # overnight, presence density should be proportional to the
        # ground-truth density: the premise of the static estimator
        scenario = generate_city(
            small_config(grid_nx=8, grid_ny=8, population_total=40_000, days=2, seed=3)
        )
        stream, record = simulate_events(scenario)
        presence = infer_presence(stream, scenario.grid, 900, span=record.span)
        # 04:00-05:00 of day 2
        cols = slice(96 + 16, 96 + 20)
        sigma = np.nanmean(presence.densities[:, cols], axis=1)
        rho = scenario.populations / scenario.grid.surfaces()
        ok = (sigma > 0) & (rho > 0)
        assert ok.sum() > 50
        assert pearson(np.log(sigma[ok]), np.log(rho[ok])) > 0.98

    def test_activity_level_range_matches_observed_band(self):
        # the default diurnal profiles keep the citywide call activity level
        # between roughly 0.01 (night) and 0.20 (busy hours) per slot
        from popgrid.dynamic import activity_level
        from popgrid.metadata import aggregate_volumes, infer_presence

        scenario = generate_city(
            small_config(grid_nx=8, grid_ny=8, population_total=30_000, days=3, seed=6)
        )
        stream, record = simulate_events(scenario)
        presence = infer_presence(stream, scenario.grid, 900, span=record.span)
        volumes = aggregate_volumes(stream, scenario.grid, 900, span=record.span)
        level = activity_level(volumes, presence, "call")
        day2 = slice(96, 192)  # skip the cold-start day
        city = level.city_mean[day2]
        assert 0.005 <= np.nanmin(city) <= 0.02
        assert 0.08 <= np.nanmax(city) <= 0.21

    def test_weekend_reduces_volume(self):
        config = small_config(days=7, weekend_factor=0.3, population_total=5000)
        scenario = generate_city(config)
        stream, record = simulate_events(scenario)
        vol = aggregate_volumes(stream, scenario.grid, 900, span=record.span)
        total = sum(vol.values[k] for k in EVENT_KINDS).sum(axis=0)
        by_day = total.reshape(7, 96).sum(axis=1)
        weekday_mean = by_day[:5].mean()
        weekend_mean = by_day[5:].mean()
        assert weekend_mean < 0.45 * weekday_mean


class TestRoundTrip:
    def test_presence_matches_simulator_bookkeeping(self):
        scenario = generate_city(small_config(days=2, population_total=3000))
        stream, record = simulate_events(scenario)
        inferred = infer_presence(stream, scenario.grid, 900, span=record.span)
        reference = occupancy_reference(stream, scenario.grid, 900, record.span)
        assert np.array_equal(inferred.counts, reference)


class TestInjectEvent:
    def _scenario(self, attendees=0):
        return generate_city(
            ScenarioConfig(
                grid_nx=10,
                grid_ny=10,
                template="zones",
                population_total=20_000,
                market_share=0.35,
                days=3,
                seed=5,
            )
        )

    def _event(self, scenario, attendees):
        kick_day = day_of_date(scenario.config.start_date) + 1
        return InjectedEvent(
            event_id="ev",
            event_index=0,
            venue_cells=scenario.venue_cells or (scenario.grid.ids()[42],),
            date=scenario.config.start_date + dt.timedelta(days=1),
            kickoff_s=kick_day * SECONDS_PER_DAY + 20 * 3600,
            duration_s=6300,
            attendees=attendees,
            gateway_cell=scenario.grid.ids()[0],
        )

    def test_zero_attendees_stream_unchanged(self):
        scenario = self._scenario()
        stream, _ = simulate_events(scenario)
        augmented, truth = inject_event(stream, scenario, self._event(scenario, 0))
        assert len(augmented) == len(stream)
        assert truth.n_devices == 0

    def test_device_injection_scale(self):
        scenario = self._scenario()
        stream, _ = simulate_events(scenario)
        event = self._event(scenario, 40_000)
        augmented, truth = inject_event(stream, scenario, event)
        assert truth.n_devices == 14_000  # 40k attendees at 35% market share
        assert len(augmented) > len(stream)
        augmented.check_sorted()
        # at the peak the venue hosts every injected device, visible in the
        # inferred presence as a crowd of the right order
        day0 = day_of_date(scenario.config.start_date)
        span = (day0 * SECONDS_PER_DAY, 3 * 96)
        presence = infer_presence(augmented, scenario.grid, 900, span=span)
        venue_row = scenario.grid.index_of(event.venue_cells[0])
        peak = np.nanmax(presence.counts[venue_row])
        assert peak > 0.8 * 14_000

    def test_attendance_range_magnitude(self):
        config = ScenarioConfig(
            grid_nx=10,
            grid_ny=10,
            template="zones",
            population_total=20_000,
            days=22,
            event_count=2,
            event_weekdays=(6,),
            event_attendance_min=25_000,
            event_attendance_max=75_000,
            seed=11,
        )
        scenario = generate_city(config)
        assert [e.attendees for e in scenario.events] == [25_000, 75_000]


class TestSanitize:
    def _presence(self, grid_2x2):
        from popgrid.metadata import PresenceSeries, presence_density

        counts = np.array([[0.0, 5.0], [1.0, 1.0], [3.0, 0.0], [10.0, 10.0]])
        missing = np.zeros_like(counts, dtype=bool)
        slot_starts = np.array([0, 900], dtype=np.int64)
        return presence_density(PresenceSeries(grid_2x2.ids(), 900, slot_starts, counts, missing), grid_2x2)

    def test_k1_identity_on_nonempty(self, grid_2x2):
        out = sanitize(self._presence(grid_2x2), 1)
        assert not out.missing[1].any()
        assert out.missing[0, 0]  # zero-count entry is below k=1
        assert out.counts[3, 0] == 10.0

    def test_all_below_k_everything_missing(self, grid_2x2):
        out = sanitize(self._presence(grid_2x2), 100)
        assert out.missing.all()

    @settings(max_examples=20, deadline=None)
    @given(k1=st.integers(1, 12), k2=st.integers(1, 12))
    def test_monotone_in_k(self, k1, k2):
        from popgrid.metadata import PresenceSeries, presence_density
        from conftest import unit_grid

        grid = unit_grid(2, 2)
        rng = np.random.default_rng(k1 * 100 + k2)
        counts = rng.integers(0, 12, size=(4, 6)).astype(float)
        series = presence_density(
            PresenceSeries(grid.ids(), 900, 900 * np.arange(6, dtype=np.int64), counts, np.zeros((4, 6), bool)),
            grid,
        )
        lo, hi = sorted((k1, k2))
        m_lo = sanitize(series, lo).missing
        m_hi = sanitize(series, hi).missing
        assert np.all(m_hi | ~m_lo == m_hi | np.logical_not(m_lo))
        assert np.all(m_lo <= m_hi)


class TestOperatorPresence:
    def test_daily_reset_misses_quiet_devices(self):
        scenario = generate_city(small_config(days=2, population_total=5000, seed=9))
        stream, record = simulate_events(scenario)
        plain = infer_presence(stream, scenario.grid, 900, span=record.span)
        daily = operator_presence(stream, scenario.grid, 900, record.span, k=1)
        # early-morning slots of day 2: the daily batch has seen only devices
        # active since midnight, the cumulative view almost everyone
        col = 96 + 18
        assert np.nansum(daily.counts[:, col]) < 0.7 * np.nansum(plain.counts[:, col])

    def test_needs_day_aligned_span(self):
        scenario = generate_city(small_config(days=1))
        stream, record = simulate_events(scenario)
        with pytest.raises(InputError):
            operator_presence(stream, scenario.grid, 900, (record.start_s + 900, 95), k=1)


def test_scenario_config_roundtrip(tmp_path):
    config = ScenarioConfig(
        grid_nx=12,
        grid_ny=9,
        template="zones",
        population_total=60_000,
        tourist_share=0.05,
        weekend_factor=0.3,
        holiday_dates=(dt.date(2015, 3, 11),),
        days=14,
        event_count=2,
        event_weekdays=(2, 6),
        seed=42,
    )
    path = tmp_path / "scenario.cfg"
    write_scenario_config(str(path), config)
    assert load_scenario_config(str(path)) == config
