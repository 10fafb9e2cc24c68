"""Synthetic-city oracle: ground-truth populations, subscriber behavior,
event injection and operator-style sanitization.

The simulator instantiates only the subscriber share of the population
(``market_share``); ground-truth dynamic density therefore divides scheduled
occupancy counts by the market share. Every random draw hangs off a seed
sequence derived from the scenario seed, so identical (config, seed) produce
bit-identical streams.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace

import numpy as np
from shapely.geometry import box

from .errors import InputError
from .grid import AdminArea, Cell, GridTessellation
from .landuse import LAND_USES
from .metadata import (
    EVENT_KINDS,
    EventStream,
    PresenceSeries,
    infer_presence,
    presence_density,
)
from .timebase import SECONDS_PER_DAY, day_of_date, parse_date, parse_time_of_day

# Diurnal event rates per subscriber per hour, by land use of the occupied
# cell. "call"/"sms" are in+out totals (split evenly); "net" is session starts.
# Shapes: night minima, work-hour plateaus, and an active evening in the
# touristic zone, which hosts venues.
_CALL = {
    "residential": [0.20, 0.10, 0.06, 0.045, 0.04, 0.06, 0.15, 0.40, 0.55, 0.60, 0.60, 0.60,
                    0.55, 0.55, 0.60, 0.60, 0.60, 0.65, 0.70, 0.65, 0.55, 0.45, 0.35, 0.28],
    "office": [0.03, 0.02, 0.015, 0.012, 0.012, 0.02, 0.08, 0.35, 0.60, 0.70, 0.70, 0.65,
               0.55, 0.60, 0.70, 0.70, 0.65, 0.55, 0.35, 0.15, 0.08, 0.06, 0.05, 0.04],
    "touristic": [0.28, 0.20, 0.12, 0.08, 0.06, 0.08, 0.15, 0.35, 0.60, 0.70, 0.65, 0.60,
                  0.55, 0.50, 0.55, 0.60, 0.60, 0.65, 0.70, 0.72, 0.70, 0.60, 0.50, 0.38],
    "university": [0.015, 0.01, 0.008, 0.008, 0.008, 0.01, 0.05, 0.25, 0.55, 0.70, 0.75, 0.70,
                   0.60, 0.65, 0.70, 0.70, 0.60, 0.45, 0.25, 0.10, 0.05, 0.03, 0.02, 0.018],
    "shopping": [0.03, 0.02, 0.012, 0.01, 0.01, 0.015, 0.05, 0.15, 0.35, 0.55, 0.65, 0.70,
                 0.65, 0.60, 0.65, 0.70, 0.70, 0.65, 0.55, 0.40, 0.25, 0.12, 0.06, 0.04],
}

_LU_INDEX = {name: i for i, name in enumerate(LAND_USES)}

# per-kind rate tables, shape (n_land_uses, 24)
_RATE_TABLE: dict[str, np.ndarray] = {}


def _build_rate_tables() -> None:
    call = np.array([_CALL[lu] for lu in LAND_USES])
    sms = 0.5 * call
    net = 0.5 * call + 0.04  # background data sessions keep phones visible
    _RATE_TABLE.update(
        {
            "call_in": call / 2.0,
            "call_out": call / 2.0,
            "sms_in": sms / 2.0,
            "sms_out": sms / 2.0,
            "net": net,
        }
    )


_build_rate_tables()

# population weight and workplace attraction per land use
_POP_WEIGHT = {"residential": 1.0, "office": 0.12, "touristic": 0.25, "university": 0.10, "shopping": 0.20}
_WORK_WEIGHT = {"residential": 0.25, "office": 8.0, "touristic": 1.2, "university": 5.0, "shopping": 3.5}

# zone template anchors in normalized grid coordinates
_ZONES = (
    ("office", (0.50, 0.50), 0.18),
    ("university", (0.80, 0.80), 0.15),
    ("shopping", (0.20, 0.72), 0.15),
    ("touristic", (0.75, 0.20), 0.15),
)
_VENUE_ANCHOR = (0.75, 0.20)


@dataclass(frozen=True)
class ScenarioConfig:
    grid_nx: int = 10
    grid_ny: int = 10
    cell_min_km: float = 0.5
    cell_max_km: float = 1.5
    admin_block: int = 1
    template: str = "zones"  # or "uniform" (all residential)
    population_total: int = 50000
    pop_sigma: float = 0.5
    tourist_share: float = 0.0  # non-census people homed in touristic cells
    student_share: float = 0.0  # non-census people homed in university cells
    market_share: float = 0.35
    commuter_share: float = 0.7
    depart_mean_s: int = 8 * 3600 + 15 * 60
    return_mean_s: int = 18 * 3600
    commute_jitter_s: int = 2700
    rate_scale: float = 1.0
    weekend_factor: float = 1.0
    holiday_dates: tuple[dt.date, ...] = ()
    rate_noise_sigma: float = 0.0
    sanitize_k: int = 1
    start_date: dt.date = dt.date(2015, 3, 2)  # a Monday
    days: int = 7
    slot_s: int = 900
    seed: int = 1
    event_count: int = 0
    event_weekdays: tuple[int, ...] = (6,)
    event_kickoff_s: int = 20 * 3600 + 45 * 60
    event_duration_s: int = 105 * 60
    event_attendance_min: int = 25000
    event_attendance_max: int = 75000
    event_arrival_ramp_s: int = 7200
    event_departure_ramp_s: int = 1800

    def __post_init__(self):
        if self.grid_nx < 1 or self.grid_ny < 1:
            raise InputError("grid dimensions must be positive")
        if not (0 < self.cell_min_km <= self.cell_max_km):
            raise InputError("cell size bounds must satisfy 0 < min <= max")
        if self.admin_block < 1:
            raise InputError("admin block must be a positive cell count")
        if not (0.0 < self.market_share <= 1.0):
            raise InputError("market share must lie in (0, 1]")
        if self.template not in ("zones", "uniform"):
            raise InputError(f"unknown city template {self.template!r}")
        if self.days < 1:
            raise InputError("scenario needs at least one day")
        if SECONDS_PER_DAY % self.slot_s != 0:
            raise InputError("slot duration must divide one day")


@dataclass(frozen=True)
class InjectedEvent:
    event_id: str
    event_index: int
    venue_cells: tuple[str, ...]
    date: dt.date
    kickoff_s: int  # absolute epoch seconds
    duration_s: int
    attendees: int
    arrival_ramp_s: int = 7200
    departure_ramp_s: int = 1800
    gateway_cell: str | None = None

    @property
    def span_start_s(self) -> int:
        return self.kickoff_s - 900

    @property
    def span_end_s(self) -> int:
        return self.kickoff_s + self.duration_s + 900


@dataclass(frozen=True)
class AttendanceTruth:
    event_id: str
    attendees: int
    n_devices: int
    venue_cells: tuple[str, ...]
    date: dt.date
    span_start_s: int
    span_end_s: int


@dataclass
class SyntheticScenario:
    config: ScenarioConfig
    grid: GridTessellation
    areas: list[AdminArea]
    land_use: dict[str, str]
    populations: np.ndarray  # census persons per cell, sums to population_total
    device_ids: tuple[str, ...]
    home_cell: np.ndarray
    work_cell: np.ndarray  # -1 for non-commuters
    depart_slot: np.ndarray  # slot of day
    return_slot: np.ndarray
    events: tuple[InjectedEvent, ...]
    venue_cells: tuple[str, ...]
    gateway_cell: str | None

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def market_share(self) -> float:
        return self.config.market_share

    @property
    def n_devices(self) -> int:
        return len(self.device_ids)

    def admin_populations(self) -> dict[str, float]:
        return {a.id: a.population for a in self.areas}


@dataclass
class SimulationRecord:
    """Ground truth kept alongside the emitted stream."""

    start_s: int
    slot_s: int
    n_slots: int
    true_counts: np.ndarray  # scheduled device positions, (n_cells, n_slots)
    attendance: list[AttendanceTruth] = field(default_factory=list)

    @property
    def span(self) -> tuple[int, int]:
        return (self.start_s, self.n_slots)

    def true_density(self, grid: GridTessellation, market_share: float) -> np.ndarray:
        return self.true_counts / market_share / grid.surfaces()[:, None]


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights``."""
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise InputError("population weights must be non-negative with a positive sum")
    raw = total * weights / weights.sum()
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def _assign_land_use(nx: int, ny: int, template: str) -> list[str]:
    if template == "uniform":
        return ["residential"] * (nx * ny)
    labels = []
    for iy in range(ny):
        for ix in range(nx):
            u = (ix + 0.5) / nx
            v = (iy + 0.5) / ny
            label = "residential"
            for name, (zu, zv), radius in _ZONES:
                if (u - zu) ** 2 + (v - zv) ** 2 < radius**2:
                    label = name
                    break
            labels.append(label)
    return labels


def _schedule_events(config: ScenarioConfig, venue: tuple[str, ...], gateway: str | None) -> tuple[InjectedEvent, ...]:
    if config.event_count == 0:
        return ()
    if not venue:
        raise InputError("event schedule requires a touristic venue cell in the template")
    weekdays = config.event_weekdays
    start_day = day_of_date(config.start_date)
    events: list[InjectedEvent] = []
    if config.event_count == 1:
        attendances = [int(round(0.5 * (config.event_attendance_min + config.event_attendance_max)))]
    else:
        attendances = [
            int(round(a))
            for a in np.linspace(config.event_attendance_min, config.event_attendance_max, config.event_count)
        ]
    for e in range(config.event_count):
        weekday = weekdays[e % len(weekdays)]
        week = e // len(weekdays)
        offset = (weekday - (start_day + 3) % 7) % 7 + 7 * week
        if offset >= config.days:
            raise InputError(
                f"scenario of {config.days} days cannot host {config.event_count} events "
                f"on weekdays {list(weekdays)}"
            )
        day = start_day + offset
        date = config.start_date + dt.timedelta(days=offset)
        events.append(
            InjectedEvent(
                event_id=f"e{e:02d}",
                event_index=e,
                venue_cells=venue,
                date=date,
                kickoff_s=day * SECONDS_PER_DAY + config.event_kickoff_s,
                duration_s=config.event_duration_s,
                attendees=attendances[e],
                arrival_ramp_s=config.event_arrival_ramp_s,
                departure_ramp_s=config.event_departure_ramp_s,
                gateway_cell=gateway,
            )
        )
    return tuple(events)


def generate_city(config: ScenarioConfig, seed: int | None = None) -> SyntheticScenario:
    """Deterministically build grid, census, land uses and subscriber roster."""
    if seed is not None:
        config = replace(config, seed=seed)
    rng_geo = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    rng_pop = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    rng_beh = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))

    nx, ny = config.grid_nx, config.grid_ny
    widths_km = rng_geo.uniform(config.cell_min_km, config.cell_max_km, size=nx)
    heights_km = rng_geo.uniform(config.cell_min_km, config.cell_max_km, size=ny)
    x_edges = np.concatenate([[0.0], np.cumsum(widths_km)]) * 1000.0
    y_edges = np.concatenate([[0.0], np.cumsum(heights_km)]) * 1000.0

    land_use_list = _assign_land_use(nx, ny, config.template)
    cells: list[Cell] = []
    for iy in range(ny):
        for ix in range(nx):
            idx = iy * nx + ix
            poly = box(x_edges[ix], y_edges[iy], x_edges[ix + 1], y_edges[iy + 1])
            cells.append(Cell(id=f"c{idx:04d}", polygon=poly, surface_km2=float(widths_km[ix] * heights_km[iy])))
    grid = GridTessellation(cells)
    surfaces = grid.surfaces()

    weights = np.array(
        [_POP_WEIGHT[lu] for lu in land_use_list]
    ) * surfaces * np.exp(rng_pop.normal(0.0, config.pop_sigma, size=len(cells)))
    populations = _largest_remainder(config.population_total, weights).astype(float)

    b = config.admin_block
    areas: list[AdminArea] = []
    n_bx = (nx + b - 1) // b
    n_by = (ny + b - 1) // b
    for by in range(n_by):
        for bx in range(n_bx):
            ix0, ix1 = bx * b, min((bx + 1) * b, nx)
            iy0, iy1 = by * b, min((by + 1) * b, ny)
            members = [iy * nx + ix for iy in range(iy0, iy1) for ix in range(ix0, ix1)]
            poly = box(x_edges[ix0], y_edges[iy0], x_edges[ix1], y_edges[iy1])
            areas.append(
                AdminArea(
                    id=f"a{by * n_bx + bx:04d}",
                    polygon=poly,
                    surface_km2=float(sum(surfaces[m] for m in members)),
                    population=float(sum(populations[m] for m in members)),
                )
            )

    # subscriber roster: residents apportioned to cells proportionally to the
    # census (uniform market share across cells), plus off-census tourists and
    # students homed in their zones
    n_res = int(round(config.market_share * config.population_total))
    home_blocks: list[np.ndarray] = []
    if n_res > 0:
        quotas = _largest_remainder(n_res, populations)
        home_blocks.append(np.repeat(np.arange(len(cells), dtype=np.int64), quotas))
    for share, zone in ((config.tourist_share, "touristic"), (config.student_share, "university")):
        n_extra = int(round(config.market_share * share * config.population_total))
        if n_extra == 0:
            continue
        zone_cells = np.array([i for i, lu in enumerate(land_use_list) if lu == zone])
        if len(zone_cells) == 0:
            raise InputError(f"config requests {zone} dwellers but the template has no {zone} cells")
        # hotel/dorm capacity tracks the local census, so the off-census
        # dwellers inflate presence by a near-uniform factor inside the zone
        zone_w = populations[zone_cells]
        if zone_w.sum() <= 0:
            zone_w = surfaces[zone_cells]
        zone_quotas = _largest_remainder(n_extra, zone_w)
        home_blocks.append(np.repeat(zone_cells.astype(np.int64), zone_quotas))
    home_cell = np.concatenate(home_blocks) if home_blocks else np.empty(0, dtype=np.int64)
    home_cell = home_cell.astype(np.int64)
    n_dev = len(home_cell)

    device_ids = tuple(f"u{i:07d}" for i in range(n_dev))

    commuter = np.zeros(n_dev, dtype=bool)
    commuter[:n_res] = rng_beh.random(n_res) < config.commuter_share
    work_weights = np.array([_WORK_WEIGHT[lu] for lu in land_use_list]) * surfaces
    work_cell = np.full(n_dev, -1, dtype=np.int64)
    n_comm = int(commuter.sum())
    if n_comm:
        work_cell[commuter] = rng_beh.choice(len(cells), size=n_comm, p=work_weights / work_weights.sum())
    slot_s = config.slot_s
    slots_per_day = SECONDS_PER_DAY // slot_s
    depart = rng_beh.normal(config.depart_mean_s, config.commute_jitter_s, size=n_dev)
    ret = rng_beh.normal(config.return_mean_s, config.commute_jitter_s, size=n_dev)
    depart_slot = np.clip(np.round(depart / slot_s), 5 * 3600 // slot_s, 12 * 3600 // slot_s).astype(np.int64)
    return_slot = np.clip(np.round(ret / slot_s), 13 * 3600 // slot_s, slots_per_day - 1).astype(np.int64)
    depart_slot[~commuter] = -1
    return_slot[~commuter] = -1

    land_use = {cells[i].id: land_use_list[i] for i in range(len(cells))}
    venue: tuple[str, ...] = ()
    gateway: str | None = None
    if config.event_count > 0:
        tour_cells = [i for i, lu in enumerate(land_use_list) if lu == "touristic"]
        if tour_cells:
            centers = np.array(
                [[(i % nx + 0.5) / nx, (i // nx + 0.5) / ny] for i in tour_cells]
            )
            anchor = np.array(_VENUE_ANCHOR)
            venue = (cells[tour_cells[int(np.argmin(((centers - anchor) ** 2).sum(axis=1)))]].id,)
        gateway = cells[0].id

    events = _schedule_events(config, venue, gateway)
    return SyntheticScenario(
        config=config,
        grid=grid,
        areas=areas,
        land_use=land_use,
        populations=populations,
        device_ids=device_ids,
        home_cell=home_cell,
        work_cell=work_cell,
        depart_slot=depart_slot,
        return_slot=return_slot,
        events=events,
        venue_cells=venue,
        gateway_cell=gateway,
    )


def _is_offday(config: ScenarioConfig, date: dt.date) -> bool:
    return date.weekday() >= 5 or date in config.holiday_dates


def _day_events(
    scenario: SyntheticScenario,
    day_offset: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One day of resident events: (times, devices, cells, kinds)."""
    cfg = scenario.config
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 10, day_offset]))
    date = cfg.start_date + dt.timedelta(days=day_offset)
    day_start = (day_of_date(cfg.start_date) + day_offset) * SECONDS_PER_DAY
    offday = _is_offday(cfg, date)

    lu_codes = np.array([_LU_INDEX[scenario.land_use[c.id]] for c in scenario.grid.cells], dtype=np.int64)
    n_dev = scenario.n_devices
    if n_dev == 0:
        empty = np.empty(0)
        return empty, empty.astype(np.int64), empty.astype(np.int64), empty.astype(np.int8)

    commuting = (scenario.work_cell >= 0) & (not offday)
    hours = np.arange(24)
    hour_slot = hours * (3600 // cfg.slot_s)
    at_work = commuting[:, None] & (hour_slot[None, :] >= scenario.depart_slot[:, None]) & (
        hour_slot[None, :] < scenario.return_slot[:, None]
    )
    cell_at_hour = np.where(at_work, scenario.work_cell[:, None], scenario.home_cell[:, None])
    lu_at_hour = lu_codes[cell_at_hour]

    scale = cfg.rate_scale * (cfg.weekend_factor if offday else 1.0)
    if cfg.rate_noise_sigma > 0:
        noise = np.exp(
            rng.normal(-0.5 * cfg.rate_noise_sigma**2, cfg.rate_noise_sigma, size=n_dev)
        )[:, None]
    else:
        noise = 1.0

    all_times: list[np.ndarray] = []
    all_dev: list[np.ndarray] = []
    all_cell: list[np.ndarray] = []
    all_kind: list[np.ndarray] = []
    for kind_idx, kind in enumerate(EVENT_KINDS):
        rates = _RATE_TABLE[kind][lu_at_hour, hours[None, :]] * scale * noise
        counts = rng.poisson(rates)
        total = int(counts.sum())
        if total == 0:
            continue
        flat = counts.ravel()
        reps = np.repeat(np.arange(flat.size), flat)
        dev = (reps // 24).astype(np.int64)
        hour = reps % 24
        times = day_start + hour * 3600 + np.floor(rng.random(total) * 3_600_000.0) / 1000.0
        slot = ((times - day_start) // cfg.slot_s).astype(np.int64)
        work_now = commuting[dev] & (slot >= scenario.depart_slot[dev]) & (slot < scenario.return_slot[dev])
        cell = np.where(work_now, scenario.work_cell[dev], scenario.home_cell[dev])
        all_times.append(times)
        all_dev.append(dev)
        all_cell.append(cell)
        all_kind.append(np.full(total, kind_idx, dtype=np.int8))
    if not all_times:
        empty = np.empty(0)
        return empty, empty.astype(np.int64), empty.astype(np.int64), empty.astype(np.int8)
    return (
        np.concatenate(all_times),
        np.concatenate(all_dev),
        np.concatenate(all_cell),
        np.concatenate(all_kind),
    )


def _true_count_deltas(
    scenario: SyntheticScenario,
    day_offset: int,
    delta: np.ndarray,
    slots_per_day: int,
) -> None:
    """Scheduled positions of home-based devices for one day, as slot deltas."""
    cfg = scenario.config
    date = cfg.start_date + dt.timedelta(days=day_offset)
    offday = _is_offday(cfg, date)
    base = day_offset * slots_per_day
    np.add.at(delta, (scenario.home_cell, base), 1)
    np.add.at(delta, (scenario.home_cell, base + slots_per_day), -1)
    commuting = (scenario.work_cell >= 0) & (not offday)
    if np.any(commuting):
        home = scenario.home_cell[commuting]
        work = scenario.work_cell[commuting]
        ds = base + scenario.depart_slot[commuting]
        rs = base + scenario.return_slot[commuting]
        np.add.at(delta, (home, ds), -1)
        np.add.at(delta, (work, ds), 1)
        np.add.at(delta, (work, rs), -1)
        np.add.at(delta, (home, rs), 1)


def _visitor_stream(
    scenario: SyntheticScenario,
    event: InjectedEvent,
) -> tuple[tuple[str, ...], np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Visitor device ids and their raw event columns for one injected event.

    The trailing elements give, per visitor, the scheduled venue cell and the
    [arrival_slot, departure_slot) presence window in absolute slot indices.
    """
    cfg = scenario.config
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 20, event.event_index]))
    n_dev = int(round(cfg.market_share * event.attendees))
    prefix = f"v{event.event_index:03d}"
    ids = tuple(f"{prefix}_{i:06d}" for i in range(n_dev))
    if n_dev == 0:
        empty = np.empty(0)
        return (
            ids,
            empty,
            empty.astype(np.int64),
            empty.astype(np.int64),
            empty.astype(np.int8),
            empty.astype(np.int64),
            np.empty((0, 2), dtype=np.int64),
        )

    slot_s = cfg.slot_s
    venue_idx = np.array([scenario.grid.index_of(c) for c in event.venue_cells], dtype=np.int64)
    venue_w = scenario.grid.surfaces()[venue_idx]
    my_cell = venue_idx[rng.choice(len(venue_idx), size=n_dev, p=venue_w / venue_w.sum())]

    arrive = event.kickoff_s - event.arrival_ramp_s + rng.random(n_dev) * event.arrival_ramp_s
    leave_base = event.kickoff_s + event.duration_s
    depart = leave_base + rng.random(n_dev) * event.departure_ramp_s
    arrive_slot = (arrive // slot_s).astype(np.int64)
    depart_slot = np.maximum((depart // slot_s).astype(np.int64), arrive_slot + 1)

    lu = _LU_INDEX[scenario.land_use[event.venue_cells[0]]]
    offday = _is_offday(cfg, event.date)
    scale = cfg.rate_scale * (cfg.weekend_factor if offday else 1.0)

    all_times: list[np.ndarray] = []
    all_dev: list[np.ndarray] = []
    all_cell: list[np.ndarray] = []
    all_kind: list[np.ndarray] = []
    lo = int(arrive_slot.min())
    hi = int(depart_slot.max())
    for s in range(lo, hi):
        here = (arrive_slot <= s) & (s < depart_slot)
        n_here = int(here.sum())
        if n_here == 0:
            continue
        hour = (s * slot_s // 3600) % 24
        for kind_idx, kind in enumerate(EVENT_KINDS):
            rate = _RATE_TABLE[kind][lu, hour] * scale * (slot_s / 3600.0)
            counts = rng.poisson(rate, size=n_here)
            total = int(counts.sum())
            if total == 0:
                continue
            dev_local = np.flatnonzero(here)[np.repeat(np.arange(n_here), counts)]
            times = s * slot_s + np.floor(rng.random(total) * slot_s * 1000.0) / 1000.0
            all_times.append(times)
            all_dev.append(dev_local)
            all_cell.append(my_cell[dev_local])
            all_kind.append(np.full(total, kind_idx, dtype=np.int8))

    # one farewell data session at the gateway moves presence off the venue
    if event.gateway_cell is not None:
        gateway_idx = scenario.grid.index_of(event.gateway_cell)
        times = np.floor((depart + 300.0 + rng.random(n_dev) * 900.0) * 1000.0) / 1000.0
        all_times.append(times)
        all_dev.append(np.arange(n_dev, dtype=np.int64))
        all_cell.append(np.full(n_dev, gateway_idx, dtype=np.int64))
        all_kind.append(np.full(n_dev, EVENT_KINDS.index("net"), dtype=np.int8))

    presence_span = np.stack([arrive_slot, depart_slot], axis=1)
    if not all_times:
        empty = np.empty(0)
        return ids, empty, empty.astype(np.int64), empty.astype(np.int64), empty.astype(np.int8), my_cell, presence_span
    return (
        ids,
        np.concatenate(all_times),
        np.concatenate(all_dev),
        np.concatenate(all_cell),
        np.concatenate(all_kind),
        my_cell,
        presence_span,
    )


def _assemble_stream(
    grid: GridTessellation,
    device_ids: tuple[str, ...],
    times: np.ndarray,
    devices: np.ndarray,
    cells: np.ndarray,
    kinds: np.ndarray,
) -> EventStream:
    order = np.lexsort((kinds, devices, times))
    return EventStream(
        device_ids=device_ids,
        cell_ids=grid.ids(),
        times=times[order],
        devices=devices[order],
        cells=cells[order],
        kinds=kinds[order],
    )


def simulate_events(scenario: SyntheticScenario, days: int | None = None) -> tuple[EventStream, SimulationRecord]:
    """Emit the scenario's event stream plus its ground-truth record."""
    cfg = scenario.config
    n_days = cfg.days if days is None else days
    slots_per_day = SECONDS_PER_DAY // cfg.slot_s
    n_slots = n_days * slots_per_day
    start_s = day_of_date(cfg.start_date) * SECONDS_PER_DAY
    n_cells = len(scenario.grid)

    delta = np.zeros((n_cells, n_slots + 1), dtype=np.int64)
    times_parts: list[np.ndarray] = []
    dev_parts: list[np.ndarray] = []
    cell_parts: list[np.ndarray] = []
    kind_parts: list[np.ndarray] = []
    for d in range(n_days):
        t, dv, cl, kn = _day_events(scenario, d)
        times_parts.append(t)
        dev_parts.append(dv)
        cell_parts.append(cl)
        kind_parts.append(kn)
        _true_count_deltas(scenario, d, delta, slots_per_day)

    device_ids = list(scenario.device_ids)
    attendance: list[AttendanceTruth] = []
    start_slot = start_s // cfg.slot_s
    for event in scenario.events:
        if day_of_date(event.date) * SECONDS_PER_DAY + SECONDS_PER_DAY > start_s + n_days * SECONDS_PER_DAY:
            continue  # event beyond the simulated horizon
        ids, t, dv, cl, kn, visitor_cell, spans = _visitor_stream(scenario, event)
        offset = len(device_ids)
        device_ids.extend(ids)
        times_parts.append(t)
        dev_parts.append(dv + offset)
        cell_parts.append(cl)
        kind_parts.append(kn)
        n_devices = len(ids)
        if n_devices:
            # visitors at the venue per scheduled slot (clamped to the horizon)
            a = np.clip(spans[:, 0] - start_slot, 0, n_slots)
            b = np.clip(spans[:, 1] - start_slot, 0, n_slots)
            present = b > a
            np.add.at(delta, (visitor_cell[present], a[present]), 1)
            np.add.at(delta, (visitor_cell[present], b[present]), -1)
        attendance.append(
            AttendanceTruth(
                event_id=event.event_id,
                attendees=event.attendees,
                n_devices=n_devices,
                venue_cells=event.venue_cells,
                date=event.date,
                span_start_s=event.span_start_s,
                span_end_s=event.span_end_s,
            )
        )

    stream = _assemble_stream(
        scenario.grid,
        tuple(device_ids),
        np.concatenate(times_parts) if times_parts else np.empty(0),
        np.concatenate(dev_parts) if dev_parts else np.empty(0, dtype=np.int64),
        np.concatenate(cell_parts) if cell_parts else np.empty(0, dtype=np.int64),
        np.concatenate(kind_parts) if kind_parts else np.empty(0, dtype=np.int8),
    )
    record = SimulationRecord(
        start_s=start_s,
        slot_s=cfg.slot_s,
        n_slots=n_slots,
        true_counts=np.cumsum(delta[:, :-1], axis=1),
        attendance=attendance,
    )
    return stream, record


def inject_event(
    stream: EventStream,
    scenario: SyntheticScenario,
    event: InjectedEvent,
) -> tuple[EventStream, AttendanceTruth]:
    """Add one event's visitor crowd to an existing stream.

    Visitor devices relocate to the venue over the arrival ramp, emit events
    at the venue land-use rates while present, and leave via a farewell data
    session at the gateway cell.
    """
    ids, t, dv, cl, kn, _, _ = _visitor_stream(scenario, event)
    truth = AttendanceTruth(
        event_id=event.event_id,
        attendees=event.attendees,
        n_devices=len(ids),
        venue_cells=event.venue_cells,
        date=event.date,
        span_start_s=event.span_start_s,
        span_end_s=event.span_end_s,
    )
    if len(ids) == 0:
        return stream, truth
    if stream.cell_ids != scenario.grid.ids():
        raise InputError("stream cell vocabulary does not match the scenario grid")
    combined_ids = tuple(list(stream.device_ids) + list(ids))
    if tuple(sorted(combined_ids)) != combined_ids:
        raise InputError("visitor device ids must sort after existing device ids")
    # visitor cells are grid indices already; stream cells index stream.cell_ids
    # which equals grid order here
    times = np.concatenate([stream.times, t])
    devices = np.concatenate([stream.devices, dv + len(stream.device_ids)])
    cells = np.concatenate([stream.cells, cl])
    kinds = np.concatenate([stream.kinds, kn])
    return _assemble_stream(scenario.grid, combined_ids, times, devices, cells, kinds), truth


def sanitize(presence: PresenceSeries, k: int) -> PresenceSeries:
    """Operator-style suppression: entries with fewer than k subscribers
    become missing; everything else is untouched."""
    if k < 1:
        raise InputError("sanitization threshold must be at least 1")
    missing = presence.missing | (presence.counts < k)
    counts = presence.counts.copy()
    counts[missing] = np.nan
    densities = None
    if presence.densities is not None:
        densities = presence.densities.copy()
        densities[missing] = np.nan
    return PresenceSeries(
        cell_ids=presence.cell_ids,
        slot_s=presence.slot_s,
        slot_starts=presence.slot_starts.copy(),
        counts=counts,
        missing=missing,
        densities=densities,
    )


def operator_presence(
    stream: EventStream,
    grid: GridTessellation,
    slot_s: int,
    span: tuple[int, int],
    k: int = 1,
    daily_reset: bool = True,
) -> PresenceSeries:
    """Presence the way an operator's daily batch would compute it.

    With ``daily_reset`` each day is inferred from that day's events alone, so
    devices quiet since midnight are simply not seen yet; low-count entries are
    then suppressed. Without it this is plain inference plus sanitization.
    """
    if not daily_reset:
        return sanitize(infer_presence(stream, grid, slot_s, span=span), k)
    start_s, n_slots = span
    slots_per_day = SECONDS_PER_DAY // slot_s
    if start_s % SECONDS_PER_DAY != 0 or n_slots % slots_per_day != 0:
        raise InputError("daily-reset presence needs a day-aligned span")
    n_days = n_slots // slots_per_day
    pieces: list[PresenceSeries] = []
    for d in range(n_days):
        lo = start_s + d * SECONDS_PER_DAY
        hi = lo + SECONDS_PER_DAY
        a, b = np.searchsorted(stream.times, [lo, hi])
        sub = EventStream(
            device_ids=stream.device_ids,
            cell_ids=stream.cell_ids,
            times=stream.times[a:b],
            devices=stream.devices[a:b],
            cells=stream.cells[a:b],
            kinds=stream.kinds[a:b],
        )
        pieces.append(infer_presence(sub, grid, slot_s, span=(lo, slots_per_day)))
    counts = np.concatenate([p.counts for p in pieces], axis=1)
    missing = np.concatenate([p.missing for p in pieces], axis=1)
    slot_starts = start_s + slot_s * np.arange(n_slots, dtype=np.int64)
    merged = PresenceSeries(grid.ids(), slot_s, slot_starts, counts, missing)
    return sanitize(presence_density(merged, grid), k)


def occupancy_reference(
    stream: EventStream,
    grid: GridTessellation,
    slot_s: int,
    span: tuple[int, int],
) -> np.ndarray:
    """Per-device replay of the last-event rule; the simulator's bookkeeping
    oracle for round-trip checks. Independent of the aggregation pipeline."""
    start_s, n_slots = span
    n_cells = len(grid)
    counts = np.zeros((n_cells, n_slots), dtype=np.int64)
    if len(stream) == 0:
        return counts
    cell_map = np.array([grid.index_of(c) for c in stream.cell_ids], dtype=np.int64)
    order = np.lexsort((stream.kinds, stream.times, stream.devices))
    dev = stream.devices[order]
    t = stream.times[order]
    cell = cell_map[stream.cells[order]]
    boundaries = np.flatnonzero(np.diff(dev)) + 1
    slots = np.arange(n_slots)
    for lo, hi in zip(np.concatenate([[0], boundaries]), np.concatenate([boundaries, [len(dev)]])):
        k_eff = np.maximum(((t[lo:hi] - start_s) // slot_s).astype(np.int64), 0)
        keep = k_eff < n_slots
        k_eff = k_eff[keep]
        cells_d = cell[lo:hi][keep]
        if len(k_eff) == 0:
            continue
        pos = np.searchsorted(k_eff, slots, side="right") - 1
        valid = pos >= 0
        counts[cells_d[pos[valid]], slots[valid]] += 1
    return counts


# ---------------------------------------------------------------------------
# scenario file interface

def load_scenario_config(path: str) -> ScenarioConfig:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InputError(f"{path}: expected 'key = value', got {line!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    kwargs: dict = {}
    int_keys = {
        "grid_nx", "grid_ny", "admin_block", "population_total", "sanitize_k", "days",
        "slot_s", "seed", "event_count", "event_duration_s", "event_attendance_min",
        "event_attendance_max", "event_arrival_ramp_s", "event_departure_ramp_s",
        "commute_jitter_s",
    }
    float_keys = {
        "cell_min_km", "cell_max_km", "pop_sigma", "tourist_share", "student_share",
        "market_share", "commuter_share", "rate_scale", "weekend_factor", "rate_noise_sigma",
    }
    for key, val in values.items():
        if key in int_keys:
            kwargs[key] = int(val)
        elif key in float_keys:
            kwargs[key] = float(val)
        elif key == "template":
            kwargs[key] = val
        elif key == "start_date":
            kwargs[key] = parse_date(val)
        elif key in ("depart_mean", "return_mean", "event_kickoff"):
            kwargs[{"depart_mean": "depart_mean_s", "return_mean": "return_mean_s",
                    "event_kickoff": "event_kickoff_s"}[key]] = parse_time_of_day(val)
        elif key == "holiday_dates":
            kwargs[key] = tuple(parse_date(t) for t in val.split(",") if t.strip())
        elif key == "event_weekdays":
            kwargs[key] = tuple(int(t) for t in val.split(",") if t.strip())
        else:
            raise InputError(f"{path}: unknown scenario key {key!r}")
    return ScenarioConfig(**kwargs)


def write_scenario_config(path: str, config: ScenarioConfig) -> None:
    from .timebase import format_time_of_day

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"grid_nx = {config.grid_nx}\n")
        fh.write(f"grid_ny = {config.grid_ny}\n")
        fh.write(f"cell_min_km = {config.cell_min_km}\n")
        fh.write(f"cell_max_km = {config.cell_max_km}\n")
        fh.write(f"admin_block = {config.admin_block}\n")
        fh.write(f"template = {config.template}\n")
        fh.write(f"population_total = {config.population_total}\n")
        fh.write(f"pop_sigma = {config.pop_sigma}\n")
        fh.write(f"tourist_share = {config.tourist_share}\n")
        fh.write(f"student_share = {config.student_share}\n")
        fh.write(f"market_share = {config.market_share}\n")
        fh.write(f"commuter_share = {config.commuter_share}\n")
        fh.write(f"depart_mean = {format_time_of_day(config.depart_mean_s)}\n")
        fh.write(f"return_mean = {format_time_of_day(config.return_mean_s)}\n")
        fh.write(f"commute_jitter_s = {config.commute_jitter_s}\n")
        fh.write(f"rate_scale = {config.rate_scale}\n")
        fh.write(f"weekend_factor = {config.weekend_factor}\n")
        if config.holiday_dates:
            fh.write(f"holiday_dates = {','.join(d.isoformat() for d in config.holiday_dates)}\n")
        fh.write(f"rate_noise_sigma = {config.rate_noise_sigma}\n")
        fh.write(f"sanitize_k = {config.sanitize_k}\n")
        fh.write(f"start_date = {config.start_date.isoformat()}\n")
        fh.write(f"days = {config.days}\n")
        fh.write(f"slot_s = {config.slot_s}\n")
        fh.write(f"seed = {config.seed}\n")
        fh.write(f"event_count = {config.event_count}\n")
        if config.event_count:
            fh.write(f"event_weekdays = {','.join(str(w) for w in config.event_weekdays)}\n")
            fh.write(f"event_kickoff = {format_time_of_day(config.event_kickoff_s)}\n")
            fh.write(f"event_duration_s = {config.event_duration_s}\n")
            fh.write(f"event_attendance_min = {config.event_attendance_min}\n")
            fh.write(f"event_attendance_max = {config.event_attendance_max}\n")
            fh.write(f"event_arrival_ramp_s = {config.event_arrival_ramp_s}\n")
            fh.write(f"event_departure_ramp_s = {config.event_departure_ramp_s}\n")
