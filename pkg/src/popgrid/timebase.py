"""Calendar and slot arithmetic on plain epoch seconds.

Timestamps are naive local seconds; a day is exactly 86400 s starting at
midnight, so day indices and seconds-of-day are pure integer arithmetic.
"""

from __future__ import annotations

import datetime as dt

import numpy as np

SECONDS_PER_DAY = 86400
SECONDS_PER_HOUR = 3600
DEFAULT_SLOT_S = 900

_EPOCH = dt.date(1970, 1, 1)


def day_index(ts) -> np.ndarray:
    """Day number since the epoch for an epoch-seconds value or array."""
    return np.asarray(ts, dtype=np.int64) // SECONDS_PER_DAY


def date_of_day(day: int) -> dt.date:
    return _EPOCH + dt.timedelta(days=int(day))


def day_of_date(d: dt.date) -> int:
    return (d - _EPOCH).days


def weekday_of_day(day) -> np.ndarray:
    # epoch day 0 is a Thursday, i.e. weekday 3 (Monday = 0)
    return (np.asarray(day, dtype=np.int64) + 3) % 7


def second_of_day(ts) -> np.ndarray:
    return np.asarray(ts, dtype=np.int64) % SECONDS_PER_DAY


def hour_of_week(ts) -> np.ndarray:
    """Hour index in 0..167, Monday 00:00 being hour 0."""
    ts = np.asarray(ts, dtype=np.int64)
    return weekday_of_day(day_index(ts)) * 24 + second_of_day(ts) // SECONDS_PER_HOUR


def week_index(ts) -> np.ndarray:
    """Index of the Monday-aligned week containing each timestamp."""
    day = day_index(ts)
    return (day - weekday_of_day(day)) // 7


def parse_time_of_day(text: str) -> int:
    """Parse 'HH:MM' or 'HH:MM:SS' into seconds of day."""
    parts = text.strip().split(":")
    if len(parts) not in (2, 3) or not all(p.isdigit() for p in parts):
        raise ValueError(f"cannot parse time of day: {text!r}")
    h, m = int(parts[0]), int(parts[1])
    s = int(parts[2]) if len(parts) == 3 else 0
    if not (0 <= h <= 24 and 0 <= m < 60 and 0 <= s < 60):
        raise ValueError(f"time of day out of range: {text!r}")
    return h * SECONDS_PER_HOUR + m * 60 + s


def format_time_of_day(sod: int) -> str:
    h, rem = divmod(int(sod), SECONDS_PER_HOUR)
    m, s = divmod(rem, 60)
    if s:
        return f"{h:02d}:{m:02d}:{s:02d}"
    return f"{h:02d}:{m:02d}"


def parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def slot_span(t_min: float, t_max: float, slot_s: int = DEFAULT_SLOT_S) -> tuple[int, int]:
    """Slot-aligned (start_s, n_slots) covering the half-open time range."""
    start = int(np.floor(t_min / slot_s)) * slot_s
    last = int(np.floor(t_max / slot_s)) * slot_s
    return start, (last - start) // slot_s + 1
