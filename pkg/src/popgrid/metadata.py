"""Event-stream ingestion and per-slot presence/volume aggregation.

A device occupies the cell of its most recent network event; slots are
half-open ``[start, start + slot_s)`` so an event falling exactly on a slot
boundary belongs to the next slot and becomes visible there. Counts that were
genuinely computed are zeros; ``missing`` marks entries suppressed by
sanitization or absent from an ingested aggregate file.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .grid import GridTessellation
from .timebase import DEFAULT_SLOT_S, slot_span

EVENT_KINDS = ("call_in", "call_out", "sms_in", "sms_out", "net")
KIND_INDEX = {k: i for i, k in enumerate(EVENT_KINDS)}

EVENTS_HEADER = ("device_id", "timestamp_s", "cell_id", "kind")
PRESENCE_HEADER = ("cell_id", "slot_start_s", "count")
VOLUMES_HEADER = ("cell_id", "slot_start_s", "kind", "count")


@dataclass(frozen=True)
class NetworkEvent:
    device: str
    time: float
    cell: str
    kind: str


@dataclass
class EventStream:
    """Column-oriented event stream sorted by (time, device id, kind).

    ``devices`` and ``cells`` index into the id vocabularies; device codes are
    assigned in lexicographic id order so tie-order checks stay integer-only.
    """

    device_ids: tuple[str, ...]
    cell_ids: tuple[str, ...]
    times: np.ndarray  # float64 epoch seconds
    devices: np.ndarray  # int64 codes
    cells: np.ndarray  # int64 codes
    kinds: np.ndarray  # int8 codes into EVENT_KINDS

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self):
        for i in range(len(self.times)):
            yield NetworkEvent(
                device=self.device_ids[self.devices[i]],
                time=float(self.times[i]),
                cell=self.cell_ids[self.cells[i]],
                kind=EVENT_KINDS[self.kinds[i]],
            )

    def check_sorted(self) -> None:
        t, d, k = self.times, self.devices, self.kinds
        if len(t) < 2:
            return
        dt = np.diff(t)
        if np.any(dt < 0):
            raise InputError("event stream is not sorted by time")
        tie = dt == 0
        if np.any(tie):
            dd = np.diff(d)[tie]
            if np.any(dd < 0):
                raise InputError("event stream has time ties not ordered by device id")
            same_dev = tie.copy()
            same_dev[tie] = dd == 0
            if np.any(np.diff(k.astype(np.int64))[same_dev] < 0):
                raise InputError("event stream has device ties not ordered by kind")

    @staticmethod
    def from_events(events: Iterable[NetworkEvent]) -> "EventStream":
        rows = list(events)
        device_ids = tuple(sorted({e.device for e in rows}))
        cell_ids = tuple(sorted({e.cell for e in rows}))
        dcode = {d: i for i, d in enumerate(device_ids)}
        ccode = {c: i for i, c in enumerate(cell_ids)}
        times = np.array([e.time for e in rows], dtype=np.float64)
        devices = np.array([dcode[e.device] for e in rows], dtype=np.int64)
        cells = np.array([ccode[e.cell] for e in rows], dtype=np.int64)
        try:
            kinds = np.array([KIND_INDEX[e.kind] for e in rows], dtype=np.int8)
        except KeyError as exc:
            raise InputError(f"unknown event kind {exc.args[0]!r}") from exc
        order = np.lexsort((kinds, devices, times))
        return EventStream(device_ids, cell_ids, times[order], devices[order], cells[order], kinds[order])


@dataclass
class PresenceSeries:
    """Per-(cell, slot) subscriber tallies with densities in subscribers/km².

    ``counts`` and ``densities`` hold NaN wherever ``missing`` is set.
    """

    cell_ids: tuple[str, ...]
    slot_s: int
    slot_starts: np.ndarray  # (n_slots,) int64, strictly increasing
    counts: np.ndarray  # (n_cells, n_slots) float64
    missing: np.ndarray  # (n_cells, n_slots) bool
    densities: np.ndarray | None = None

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def n_slots(self) -> int:
        return len(self.slot_starts)

    def take_slots(self, mask: np.ndarray) -> "PresenceSeries":
        return PresenceSeries(
            cell_ids=self.cell_ids,
            slot_s=self.slot_s,
            slot_starts=self.slot_starts[mask],
            counts=self.counts[:, mask],
            missing=self.missing[:, mask],
            densities=None if self.densities is None else self.densities[:, mask],
        )

    def slot_index(self, slot_start: int) -> int:
        i = int(np.searchsorted(self.slot_starts, slot_start))
        if i >= self.n_slots or self.slot_starts[i] != slot_start:
            raise InputError(f"slot start {slot_start} not present in series")
        return i


@dataclass
class VolumeSeries:
    """Per-(cell, slot, kind) event counts."""

    cell_ids: tuple[str, ...]
    slot_s: int
    slot_starts: np.ndarray
    values: dict[str, np.ndarray]  # kind -> (n_cells, n_slots) float64

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def n_slots(self) -> int:
        return len(self.slot_starts)

    def take_slots(self, mask: np.ndarray) -> "VolumeSeries":
        return VolumeSeries(
            cell_ids=self.cell_ids,
            slot_s=self.slot_s,
            slot_starts=self.slot_starts[mask],
            values={k: v[:, mask] for k, v in self.values.items()},
        )

    def total(self, kinds: Sequence[str]) -> np.ndarray:
        out = np.zeros((self.n_cells, self.n_slots), dtype=float)
        for k in kinds:
            out += self.values[k]
        return out


def _map_stream_cells(stream: EventStream, grid: GridTessellation) -> np.ndarray:
    """Translate stream cell codes into grid cell order; unknown ids are input errors."""
    lookup = np.empty(len(stream.cell_ids), dtype=np.int64)
    for code, cid in enumerate(stream.cell_ids):
        lookup[code] = grid.index_of(cid)
    return lookup[stream.cells]


def _resolve_span(stream: EventStream, slot_s: int, span: tuple[int, int] | None) -> tuple[int, int]:
    if span is not None:
        start, n_slots = span
        if n_slots <= 0:
            raise InputError("span must contain at least one slot")
        return int(start), int(n_slots)
    if len(stream) == 0:
        raise InputError("cannot infer a slot span from an empty stream")
    return slot_span(float(stream.times[0]), float(stream.times[-1]), slot_s)


def infer_presence(
    stream: EventStream,
    grid: GridTessellation,
    slot_s: int = DEFAULT_SLOT_S,
    span: tuple[int, int] | None = None,
) -> PresenceSeries:
    """Tally, per slot, the devices whose latest event lies in each cell.

    A device enters the tally with its first event and then persists in its
    last-event cell indefinitely. With an empty stream nothing was observed,
    so every entry is marked missing rather than zero.
    """
    stream.check_sorted()
    n_cells = len(grid)

    if len(stream) == 0:
        if span is None:
            raise InputError("cannot infer a slot span from an empty stream")
        start, n_slots = span
        slot_starts = start + slot_s * np.arange(n_slots, dtype=np.int64)
        counts = np.full((n_cells, n_slots), np.nan)
        missing = np.ones((n_cells, n_slots), dtype=bool)
        return presence_density(
            PresenceSeries(grid.ids(), slot_s, slot_starts, counts, missing), grid
        )

    start, n_slots = _resolve_span(stream, slot_s, span)
    cells = _map_stream_cells(stream, grid)

    # Effective slot of each event: the slot containing it, clamped so that
    # pre-span events define the state at span start.
    k = np.floor((stream.times - start) / slot_s).astype(np.int64)
    keep = k < n_slots
    k = np.maximum(k[keep], 0)
    dev = stream.devices[keep]
    cell = cells[keep]

    delta = np.zeros((n_cells, n_slots + 1), dtype=np.int64)
    if len(k):
        # Last event per (device, slot): stream order is chronological with
        # deterministic tie-breaks, so the final row of each group wins.
        key_dev, key_slot = dev, k
        order = np.lexsort((key_slot, key_dev))
        d_s, k_s, c_s = key_dev[order], key_slot[order], cell[order]
        last_of_group = np.ones(len(d_s), dtype=bool)
        last_of_group[:-1] = (d_s[1:] != d_s[:-1]) | (k_s[1:] != k_s[:-1])
        d_s, k_s, c_s = d_s[last_of_group], k_s[last_of_group], c_s[last_of_group]

        # Within each device, drop slots where the cell did not change.
        first_of_dev = np.ones(len(d_s), dtype=bool)
        first_of_dev[1:] = d_s[1:] != d_s[:-1]
        changed = first_of_dev.copy()
        changed[1:] |= c_s[1:] != c_s[:-1]
        d_s, k_s, c_s = d_s[changed], k_s[changed], c_s[changed]

        prev_cell = np.roll(c_s, 1)
        is_first = np.ones(len(d_s), dtype=bool)
        is_first[1:] = d_s[1:] != d_s[:-1]

        np.add.at(delta, (c_s, k_s), 1)
        np.add.at(delta, (prev_cell[~is_first], k_s[~is_first]), -1)

    counts = np.cumsum(delta[:, :-1], axis=1).astype(float)
    missing = np.zeros_like(counts, dtype=bool)
    slot_starts = start + slot_s * np.arange(n_slots, dtype=np.int64)
    series = PresenceSeries(grid.ids(), slot_s, slot_starts, counts, missing)
    return presence_density(series, grid)


def aggregate_volumes(
    stream: EventStream,
    grid: GridTessellation,
    slot_s: int = DEFAULT_SLOT_S,
    span: tuple[int, int] | None = None,
) -> VolumeSeries:
    """Count events of each kind per (cell, slot); events outside the span are dropped."""
    stream.check_sorted()
    start, n_slots = _resolve_span(stream, slot_s, span)
    values = {k: np.zeros((len(grid), n_slots), dtype=float) for k in EVENT_KINDS}
    if len(stream):
        cells = _map_stream_cells(stream, grid)
        k = np.floor((stream.times - start) / slot_s).astype(np.int64)
        keep = (k >= 0) & (k < n_slots)
        for kind_idx, kind in enumerate(EVENT_KINDS):
            sel = keep & (stream.kinds == kind_idx)
            np.add.at(values[kind], (cells[sel], k[sel]), 1.0)
    slot_starts = start + slot_s * np.arange(n_slots, dtype=np.int64)
    return VolumeSeries(grid.ids(), slot_s, slot_starts, values)


def presence_density(series: PresenceSeries, grid: GridTessellation) -> PresenceSeries:
    """Fill the subscribers/km² field as count over cell surface."""
    if series.cell_ids != grid.ids():
        raise InputError("presence series cell order does not match the tessellation")
    surfaces = grid.surfaces()
    counts = series.counts.copy()
    counts[series.missing] = np.nan
    series.counts = counts
    series.densities = counts / surfaces[:, None]
    return series


def missing_cell_fraction(
    series: PresenceSeries,
    window: tuple[int, int],
    day,
) -> float:
    """Fraction of cells with no usable presence during the whole daily window.

    ``window`` is (start, end) in seconds of day, half-open; ``day`` is a date.
    """
    from .timebase import day_of_date, second_of_day, day_index

    ws, we = window
    if we <= ws:
        raise InputError("empty time window")
    target_day = day_of_date(day)
    sod = second_of_day(series.slot_starts)
    mask = (day_index(series.slot_starts) == target_day) & (sod >= ws) & (sod < we)
    if not np.any(mask):
        raise InputError(f"window has no slots on {day.isoformat()}")
    return float(np.mean(np.all(series.missing[:, mask], axis=1)))


# ---------------------------------------------------------------------------
# CSV interfaces

def write_events_csv(path: str, stream: EventStream) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENTS_HEADER)
        for i in range(len(stream)):
            writer.writerow(
                [
                    stream.device_ids[stream.devices[i]],
                    format(float(stream.times[i]), ".3f"),
                    stream.cell_ids[stream.cells[i]],
                    EVENT_KINDS[stream.kinds[i]],
                ]
            )


def load_events_csv(path: str) -> EventStream:
    devices: list[str] = []
    times: list[float] = []
    cells: list[str] = []
    kinds: list[int] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != EVENTS_HEADER:
            raise InputError(f"{path}: expected header {','.join(EVENTS_HEADER)}")
        for row in reader:
            if len(row) != 4:
                raise InputError(f"{path}: malformed row {row!r}")
            devices.append(row[0])
            times.append(float(row[1]))
            cells.append(row[2])
            kind = row[3]
            if kind not in KIND_INDEX:
                raise InputError(f"{path}: unknown event kind {kind!r}")
            kinds.append(KIND_INDEX[kind])

    device_ids = tuple(sorted(set(devices)))
    cell_ids = tuple(sorted(set(cells)))
    dcode = {d: i for i, d in enumerate(device_ids)}
    ccode = {c: i for i, c in enumerate(cell_ids)}
    stream = EventStream(
        device_ids=device_ids,
        cell_ids=cell_ids,
        times=np.array(times, dtype=np.float64),
        devices=np.array([dcode[d] for d in devices], dtype=np.int64),
        cells=np.array([ccode[c] for c in cells], dtype=np.int64),
        kinds=np.array(kinds, dtype=np.int8),
    )
    stream.check_sorted()
    return stream


def write_presence_csv(path: str, series: PresenceSeries) -> None:
    """Rows are emitted only for non-missing entries; absent rows mean missing."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PRESENCE_HEADER)
        for ci, cid in enumerate(series.cell_ids):
            for si in range(series.n_slots):
                if not series.missing[ci, si]:
                    writer.writerow([cid, int(series.slot_starts[si]), int(series.counts[ci, si])])


def load_presence_csv(path: str, grid: GridTessellation, slot_s: int = DEFAULT_SLOT_S) -> PresenceSeries:
    entries: list[tuple[int, int, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PRESENCE_HEADER:
            raise InputError(f"{path}: expected header {','.join(PRESENCE_HEADER)}")
        for row in reader:
            entries.append((grid.index_of(row[0]), int(row[1]), float(row[2])))
    if not entries:
        raise InputError(f"{path}: presence file has no rows")
    starts = sorted({e[1] for e in entries})
    start, last = starts[0], starts[-1]
    n_slots = (last - start) // slot_s + 1
    slot_starts = start + slot_s * np.arange(n_slots, dtype=np.int64)
    counts = np.full((len(grid), n_slots), np.nan)
    missing = np.ones((len(grid), n_slots), dtype=bool)
    for ci, s, v in entries:
        si = (s - start) // slot_s
        counts[ci, si] = v
        missing[ci, si] = False
    series = PresenceSeries(grid.ids(), slot_s, slot_starts, counts, missing)
    return presence_density(series, grid)


def write_volumes_csv(path: str, series: VolumeSeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(VOLUMES_HEADER)
        for ci, cid in enumerate(series.cell_ids):
            for si in range(series.n_slots):
                for kind in EVENT_KINDS:
                    v = series.values[kind][ci, si]
                    if v != 0:
                        writer.writerow([cid, int(series.slot_starts[si]), kind, int(v)])


def load_volumes_csv(path: str, grid: GridTessellation, slot_s: int = DEFAULT_SLOT_S) -> VolumeSeries:
    entries: list[tuple[int, int, str, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != VOLUMES_HEADER:
            raise InputError(f"{path}: expected header {','.join(VOLUMES_HEADER)}")
        for row in reader:
            if row[2] not in KIND_INDEX:
                raise InputError(f"{path}: unknown event kind {row[2]!r}")
            entries.append((grid.index_of(row[0]), int(row[1]), row[2], float(row[3])))
    if not entries:
        raise InputError(f"{path}: volumes file has no rows")
    starts = sorted({e[1] for e in entries})
    start, last = starts[0], starts[-1]
    n_slots = (last - start) // slot_s + 1
    slot_starts = start + slot_s * np.arange(n_slots, dtype=np.int64)
    values = {k: np.zeros((len(grid), n_slots), dtype=float) for k in EVENT_KINDS}
    for ci, s, kind, v in entries:
        values[kind][ci, (s - start) // slot_s] = v
    return VolumeSeries(grid.ids(), slot_s, slot_starts, values)
