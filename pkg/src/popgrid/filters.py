"""Metadata filter stack: class ranking, daily time window, day exclusion."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import InputError, InsufficientDataError
from .grid import GridTessellation, PopulationDensityMap
from .metadata import EVENT_KINDS, PresenceSeries, VolumeSeries
from .regress import pearson
from .timebase import (
    day_index,
    date_of_day,
    format_time_of_day,
    parse_date,
    parse_time_of_day,
    second_of_day,
    weekday_of_day,
)

WEEKDAY_NAMES = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


@dataclass(frozen=True)
class FilterConfig:
    window_start_s: int = 4 * 3600
    window_end_s: int = 5 * 3600
    excluded_weekdays: frozenset[int] = frozenset({5, 6})
    holidays: frozenset[dt.date] = field(default_factory=frozenset)
    missing_threshold: float = 0.5

    def __post_init__(self):
        if not (0 <= self.window_start_s < self.window_end_s <= 86400):
            raise InputError("filter window must be non-empty and within one day")
        if not (0.0 <= self.missing_threshold <= 1.0):
            raise InputError("missing-fraction threshold must lie in [0, 1]")
        if any(w < 0 or w > 6 for w in self.excluded_weekdays):
            raise InputError("weekday indices must lie in 0..6 (Monday = 0)")

    @property
    def window(self) -> tuple[int, int]:
        return (self.window_start_s, self.window_end_s)


def load_filter_config(path: str) -> FilterConfig:
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
    if "window_start" in values:
        kwargs["window_start_s"] = parse_time_of_day(values.pop("window_start"))
    if "window_end" in values:
        kwargs["window_end_s"] = parse_time_of_day(values.pop("window_end"))
    if "excluded_weekdays" in values:
        names = [w.strip().lower() for w in values.pop("excluded_weekdays").split(",") if w.strip()]
        try:
            kwargs["excluded_weekdays"] = frozenset(WEEKDAY_NAMES.index(n) for n in names)
        except ValueError:
            raise InputError(f"{path}: unknown weekday name in {names}") from None
    if "holidays" in values:
        text = values.pop("holidays")
        days = [parse_date(t) for t in text.split(",") if t.strip()]
        kwargs["holidays"] = frozenset(days)
    if "missing_threshold" in values:
        kwargs["missing_threshold"] = float(values.pop("missing_threshold"))
    if values:
        raise InputError(f"{path}: unknown keys {sorted(values)}")
    return FilterConfig(**kwargs)


def write_filter_config(path: str, config: FilterConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"window_start = {format_time_of_day(config.window_start_s)}\n")
        fh.write(f"window_end = {format_time_of_day(config.window_end_s)}\n")
        names = ",".join(WEEKDAY_NAMES[w] for w in sorted(config.excluded_weekdays))
        fh.write(f"excluded_weekdays = {names}\n")
        fh.write(f"holidays = {','.join(d.isoformat() for d in sorted(config.holidays))}\n")
        fh.write(f"missing_threshold = {config.missing_threshold}\n")


def apply_time_filter(series, config: FilterConfig):
    """Keep only slots whose start second-of-day falls inside the daily window."""
    sod = second_of_day(series.slot_starts)
    mask = (sod >= config.window_start_s) & (sod < config.window_end_s)
    return series.take_slots(mask)


@dataclass(frozen=True)
class DayExclusion:
    date: dt.date
    reasons: tuple[str, ...]


def apply_day_filter(
    series,
    config: FilterConfig,
    missing_by_day: Mapping[dt.date, float] | None = None,
):
    """Drop whole days that are weekends, listed holidays, or whose missing
    fraction exceeds the configured threshold; returns (series, exclusion log)."""
    days = day_index(series.slot_starts)
    exclusions: list[DayExclusion] = []
    excluded_days: set[int] = set()
    for day in np.unique(days):
        date = date_of_day(int(day))
        reasons: list[str] = []
        if int(weekday_of_day(day)) in config.excluded_weekdays:
            reasons.append("weekend")
        if date in config.holidays:
            reasons.append("holiday")
        if missing_by_day is not None:
            frac = missing_by_day.get(date)
            if frac is not None and frac > config.missing_threshold:
                reasons.append(f"missing_fraction {frac:.3f} > {config.missing_threshold}")
        if reasons:
            excluded_days.add(int(day))
            exclusions.append(DayExclusion(date=date, reasons=tuple(reasons)))
    mask = ~np.isin(days, sorted(excluded_days))
    return series.take_slots(mask), exclusions


def rank_metadata_classes(
    volumes: VolumeSeries,
    presence: PresenceSeries,
    census: PopulationDensityMap,
    grid: GridTessellation,
) -> list[tuple[str, float]]:
    """Pearson correlation of log activity density vs log census density per
    metadata class, aggregated over the whole period; sorted best first.

    Zero-valued cells are excluded before the log transform.
    """
    if volumes.cell_ids != grid.ids() or presence.cell_ids != grid.ids():
        raise InputError("series cell order does not match the tessellation")
    surfaces = grid.surfaces()
    rho = census.to_array(grid.ids())

    def _log_corr(class_name: str, density: np.ndarray) -> float:
        ok = (density > 0) & (rho > 0) & np.isfinite(density)
        if int(np.count_nonzero(ok)) < 3:
            raise InsufficientDataError(
                f"class {class_name!r}: fewer than 3 cells with positive values"
            )
        return pearson(np.log(density[ok]), np.log(rho[ok]))

    ranked: list[tuple[str, float]] = []
    for kind in EVENT_KINDS:
        total = volumes.values[kind].sum(axis=1) / surfaces
        ranked.append((kind, _log_corr(kind, total)))
    with np.errstate(invalid="ignore"):
        mean_presence = np.nanmean(presence.counts, axis=1) / surfaces
    mean_presence = np.where(np.isnan(mean_presence), 0.0, mean_presence)
    ranked.append(("presence", _log_corr("presence", mean_presence)))
    ranked.sort(key=lambda item: item[1], reverse=True)
    return ranked
