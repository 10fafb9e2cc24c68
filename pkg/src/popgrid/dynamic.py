"""Dynamic estimation: activity levels, the activity-linear parameter laws,
the multivariate density model, z-score maps, event attendance, and the
rescaled per-land-use baseline.

Convention note: the multivariate model multiplies ``exp(a_alpha * lam +
b_alpha)`` into the power law, i.e. the regressed alpha-line lives in log
space. The attendance estimator follows the same convention by default; the
``literal_alpha`` switch restores the plain linear factor for side-by-side
experiments, and the one-over-market-share diagnostic uses that literal form
(the log-space factor does not remain below the proportional ceiling).
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import mannwhitneyu

from .errors import DegenerateDataError, InputError, InsufficientDataError
from .grid import GridTessellation, PopulationDensityMap
from .metadata import PresenceSeries, VolumeSeries
from .regress import PowerLawFit, _ols_line
from .timebase import day_index, day_of_date, second_of_day

ACTIVITY_KINDS = {"call": ("call_in", "call_out"), "sms": ("sms_in", "sms_out")}


@dataclass
class ActivityLevel:
    """Per-cell events per present subscriber per slot; NaN where undefined."""

    kind: str
    cell_ids: tuple[str, ...]
    slot_s: int
    slot_starts: np.ndarray
    lam: np.ndarray  # (n_cells, n_slots), NaN where presence is zero/missing
    city_mean: np.ndarray  # (n_slots,), mean over defined cells


@dataclass(frozen=True)
class MultivariateParams:
    a_alpha: float
    b_alpha: float
    a_beta: float
    b_beta: float
    kind: str = "call"

    def alpha_at(self, lam: float, literal_alpha: bool = False) -> float:
        line = self.a_alpha * lam + self.b_alpha
        return line if literal_alpha else float(np.exp(line))

    def beta_at(self, lam: float) -> float:
        return self.a_beta * lam + self.b_beta


@dataclass(frozen=True)
class EventSpec:
    """One large-scale event: where, when, and how to build its baseline."""

    event_id: str
    venue_cells: tuple[str, ...]  # cells covering the venue (adjacents added on top)
    date: dt.date
    start_s: int  # timespan start, e.g. 15 min before kickoff
    end_s: int  # timespan end, e.g. 15 min after the final whistle
    exclude_dates: frozenset[dt.date] = field(default_factory=frozenset)
    min_baseline_days: int = 3


@dataclass
class AttendanceEstimate:
    event_id: str
    gamma_hat: float
    t_peak: int  # slot start (epoch seconds) of the presence peak
    sigma_norm: float
    sigma_match: float
    lambda_tilde: float
    cells: tuple[str, ...]  # the neighborhood the estimate integrates over
    baseline_days: int
    no_crowd: bool = False


def activity_level(volumes: VolumeSeries, presence: PresenceSeries, kind: str = "call") -> ActivityLevel:
    """In+out volume of one kind over the presence count, per cell and slot.

    Entries with zero or missing presence are undefined (NaN), never a
    division by zero; the city mean averages the defined cells only.
    """
    if kind not in ACTIVITY_KINDS:
        raise InputError(f"unknown activity kind {kind!r}; expected one of {sorted(ACTIVITY_KINDS)}")
    if volumes.cell_ids != presence.cell_ids or not np.array_equal(volumes.slot_starts, presence.slot_starts):
        raise InputError("volumes and presence must cover the same cells and slots")
    vol = volumes.total(ACTIVITY_KINDS[kind])
    counts = presence.counts
    defined = ~presence.missing & np.isfinite(counts) & (counts > 0)
    lam = np.full(counts.shape, np.nan)
    lam[defined] = vol[defined] / counts[defined]
    with np.errstate(invalid="ignore"):
        city_mean = np.nanmean(lam, axis=0)
    return ActivityLevel(
        kind=kind,
        cell_ids=volumes.cell_ids,
        slot_s=volumes.slot_s,
        slot_starts=volumes.slot_starts,
        lam=lam,
        city_mean=city_mean,
    )


def fit_lambda_lines(
    pairs: Sequence[tuple[float, PowerLawFit]],
    kind: str = "call",
) -> MultivariateParams:
    """Least-squares lines through (lambda, log alpha) and (lambda, beta).

    Two distinct activity levels suffice for an interpolating line; the
    production pipeline feeds many overnight hourly fits.
    """
    if len(pairs) < 2:
        raise InsufficientDataError("need at least 2 (lambda, fit) pairs")
    lam = np.array([p[0] for p in pairs], dtype=float)
    log_alpha = np.log(np.array([p[1].alpha for p in pairs], dtype=float))
    beta = np.array([p[1].beta for p in pairs], dtype=float)
    if np.ptp(lam) == 0.0:
        raise DegenerateDataError("all activity levels identical; lines undetermined")
    a_alpha, b_alpha = _ols_line(lam, log_alpha)
    a_beta, b_beta = _ols_line(lam, beta)
    return MultivariateParams(a_alpha=a_alpha, b_alpha=b_alpha, a_beta=a_beta, b_beta=b_beta, kind=kind)


def dynamic_density_values(
    sigma: np.ndarray,
    lam: np.ndarray,
    params: MultivariateParams,
    *,
    literal_alpha: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Multivariate estimate per cell; NaN activity falls back to the mean
    of the defined cells (flagged in the returned mask). Zero presence maps
    to zero density."""
    sigma = np.asarray(sigma, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if sigma.shape != lam.shape:
        raise InputError("sigma and lambda must have equal shape")
    if np.any(sigma < 0):
        raise InputError("presence density cannot be negative")
    fallback = ~np.isfinite(lam)
    if np.all(fallback):
        lam_fill = np.zeros_like(lam)
    else:
        lam_fill = np.where(fallback, np.nanmean(lam), lam)
    alpha_line = params.a_alpha * lam_fill + params.b_alpha
    alpha = alpha_line if literal_alpha else np.exp(alpha_line)
    beta = params.a_beta * lam_fill + params.b_beta
    out = np.zeros_like(sigma)
    pos = sigma > 0
    out[pos] = alpha[pos] * np.power(sigma[pos], beta[pos])
    return out, fallback


def estimate_dynamic(
    sigma: Mapping[str, float] | np.ndarray,
    lam: Mapping[str, float] | np.ndarray,
    params: MultivariateParams,
    *,
    cell_ids: Sequence[str] | None = None,
    timestamp: float | None = None,
    literal_alpha: bool = False,
) -> PopulationDensityMap:
    """One time slot of the multivariate model as a density map."""
    if isinstance(sigma, Mapping):
        cell_ids = tuple(sigma.keys())
        sigma_arr = np.array([sigma[c] for c in cell_ids], dtype=float)
        lam_arr = np.array([lam[c] if isinstance(lam, Mapping) else lam for c in cell_ids], dtype=float)
    else:
        if cell_ids is None:
            raise InputError("cell_ids required with array inputs")
        sigma_arr = np.asarray(sigma, dtype=float)
        lam_arr = np.asarray(lam, dtype=float)
    values, _ = dynamic_density_values(sigma_arr, lam_arr, params, literal_alpha=literal_alpha)
    return PopulationDensityMap(values=dict(zip(cell_ids, values.tolist())), timestamp=timestamp)


def zscore(series: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Standardize each cell's density series by its own mean and population
    standard deviation over the full period.

    Returns (z, constant_mask); constant cells get z = 0 and are flagged.
    NaN entries (missing slots) are left out of the reference statistics and
    stay NaN in the output.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim != 2 or series.shape[1] < 2:
        raise InputError("z-scores need a (cells, slots) matrix with at least 2 slots")
    defined = np.isfinite(series)
    with np.errstate(invalid="ignore"):
        mu = np.where(defined.any(axis=1), np.nanmean(np.where(defined, series, np.nan), axis=1), 0.0)
        delta = np.where(defined.any(axis=1), np.nanstd(np.where(defined, series, np.nan), axis=1), 0.0)
    constant = delta == 0.0  # includes all-missing cells
    safe = np.where(constant, 1.0, delta)
    z = (series - mu[:, None]) / safe[:, None]
    z[constant, :] = np.where(defined[constant, :], 0.0, np.nan)
    return z, constant


def _neighborhood(grid: GridTessellation, venue_cells: Sequence[str]) -> tuple[str, ...]:
    """Venue cells plus every cell sharing a boundary of positive length."""
    adjacency = grid.adjacency()
    picked: set[int] = set()
    for cid in venue_cells:
        i = grid.index_of(cid)
        picked.add(i)
        picked.update(adjacency[i])
    return tuple(grid.cells[i].id for i in sorted(picked))


def baseline_days_for(event: EventSpec, presence: PresenceSeries) -> list[int]:
    """Days usable as the event's baseline: same weekday, no event played."""
    days = day_index(presence.slot_starts)
    event_day = day_of_date(event.date)
    excluded = {day_of_date(d) for d in event.exclude_dates} | {event_day}
    weekday = (event_day + 3) % 7
    out = sorted(
        int(d)
        for d in np.unique(days)
        if int(d) not in excluded and (int(d) + 3) % 7 == weekday
    )
    if len(out) < event.min_baseline_days:
        raise InsufficientDataError(
            f"event {event.event_id!r}: only {len(out)} baseline days, "
            f"need {event.min_baseline_days}"
        )
    return out


def baseline_median_column(
    presence: PresenceSeries,
    baseline_days: Sequence[int],
    sod_s: int,
) -> np.ndarray:
    """Per-cell median presence density over the given days at one second of
    day; NaN where a cell never carries data there."""
    sod = second_of_day(presence.slot_starts)
    days = day_index(presence.slot_starts)
    cols = np.flatnonzero((sod == sod_s) & np.isin(days, list(baseline_days)))
    if cols.size == 0:
        raise InputError(f"no slots at second-of-day {sod_s} on the baseline days")
    dens = presence.densities[:, cols]
    out = np.full(presence.n_cells, np.nan)
    has = np.isfinite(dens).any(axis=1)
    if np.any(has):
        out[has] = np.nanmedian(dens[has], axis=1)
    return out


def presence_peak_slot(
    presence: PresenceSeries,
    event: EventSpec,
    cell_rows: np.ndarray,
) -> int:
    """Slot index of the summed presence-density peak inside the event
    timespan over the given cells; ties break to the earliest slot."""
    sod = second_of_day(presence.slot_starts)
    days = day_index(presence.slot_starts)
    event_day = day_of_date(event.date)
    if event.end_s <= event.start_s:
        raise InputError(f"event {event.event_id!r}: empty timespan")
    span_mask = (days == event_day) & (sod >= event.start_s % 86400) & (sod < event.end_s % 86400)
    if not np.any(span_mask):
        raise InputError(f"event {event.event_id!r}: timespan not covered by the presence series")
    span_slots = np.flatnonzero(span_mask)
    window = presence.densities[cell_rows][:, span_slots]
    series = np.nansum(np.where(np.isnan(window), 0.0, window), axis=0)
    return int(span_slots[int(np.argmax(series))])


def estimate_attendance(
    event: EventSpec,
    presence: PresenceSeries,
    volumes: VolumeSeries,
    params: MultivariateParams,
    grid: GridTessellation,
    *,
    literal_alpha: bool = False,
) -> AttendanceEstimate:
    """Crowd size at an event from the presence uplift over a baseline.

    The baseline is the per-cell median presence density on same-weekday,
    non-event days at the same time of day; the peak slot is where the summed
    neighborhood presence density is highest inside the event timespan.
    """
    if presence.densities is None:
        raise InputError("presence series lacks densities; run presence_density first")
    cells = _neighborhood(grid, event.venue_cells)
    idx = np.array([grid.index_of(c) for c in cells])
    surfaces = grid.surfaces()[idx]

    baseline_days = baseline_days_for(event, presence)
    t_peak_slot = presence_peak_slot(presence, event, idx)
    t_peak = int(presence.slot_starts[t_peak_slot])
    peak_sod = int(second_of_day(np.array([t_peak]))[0])

    baseline_all = baseline_median_column(presence, baseline_days, peak_sod)
    baseline = baseline_all[idx]
    for row, cid in enumerate(cells):
        if not np.isfinite(baseline[row]):
            raise InsufficientDataError(
                f"event {event.event_id!r}: no baseline presence for cell {cid!r}"
            )

    dens = presence.densities
    weights = surfaces / surfaces.sum()
    current = dens[idx, t_peak_slot]
    current = np.where(np.isfinite(current), current, 0.0)
    sigma_norm = float(np.dot(weights, baseline))
    sigma_match = float(np.dot(weights, current))

    lam_cells = activity_level(volumes, presence, params.kind).lam[idx, t_peak_slot]
    defined = np.isfinite(lam_cells)
    if np.any(defined):
        lambda_tilde = float(np.mean(lam_cells[defined]))
    else:
        raise InsufficientDataError(
            f"event {event.event_id!r}: activity level undefined in every neighborhood cell"
        )

    total_surface = float(surfaces.sum())
    if sigma_match <= sigma_norm:
        return AttendanceEstimate(
            event_id=event.event_id,
            gamma_hat=0.0,
            t_peak=t_peak,
            sigma_norm=sigma_norm,
            sigma_match=sigma_match,
            lambda_tilde=lambda_tilde,
            cells=cells,
            baseline_days=len(baseline_days),
            no_crowd=True,
        )
    alpha = params.alpha_at(lambda_tilde, literal_alpha=literal_alpha)
    beta = params.beta_at(lambda_tilde)
    gamma_hat = alpha * (sigma_match - sigma_norm) ** beta * total_surface
    return AttendanceEstimate(
        event_id=event.event_id,
        gamma_hat=float(gamma_hat),
        t_peak=t_peak,
        sigma_norm=sigma_norm,
        sigma_match=sigma_match,
        lambda_tilde=lambda_tilde,
        cells=cells,
        baseline_days=len(baseline_days),
    )


def xu_estimate(
    sigma: Mapping[str, float] | np.ndarray,
    fits_by_landuse: Mapping[str, tuple[float, float] | PowerLawFit],
    labels: Mapping[str, str],
    census: PopulationDensityMap,
    grid: GridTessellation,
    *,
    timestamp: float | None = None,
) -> PopulationDensityMap:
    """Per-land-use power laws rescaled so the citywide total matches the
    static census population at every instant."""
    ids = grid.ids()
    if isinstance(sigma, Mapping):
        sigma_arr = np.array([sigma[c] for c in ids], dtype=float)
    else:
        sigma_arr = np.asarray(sigma, dtype=float)
        if sigma_arr.shape != (len(ids),):
            raise InputError("sigma array must align with the tessellation")
    alphas = np.empty(len(ids))
    betas = np.empty(len(ids))
    for i, cid in enumerate(ids):
        try:
            landuse = labels[cid]
        except KeyError:
            raise InputError(f"cell {cid!r} has no land-use label") from None
        try:
            fit = fits_by_landuse[landuse]
        except KeyError:
            raise InputError(f"no power-law fit for land use {landuse!r}") from None
        if isinstance(fit, PowerLawFit):
            alphas[i], betas[i] = fit.alpha, fit.beta
        else:
            alphas[i], betas[i] = fit

    surfaces = grid.surfaces()
    raw = np.zeros(len(ids))
    pos = sigma_arr > 0
    raw[pos] = alphas[pos] * np.power(sigma_arr[pos], betas[pos])
    denominator = float(np.dot(raw, surfaces))
    if denominator <= 0.0:
        raise DegenerateDataError("rescaling undefined: estimated total population is zero")
    rho = census.to_array(ids)
    r_t = float(np.dot(rho, surfaces)) / denominator
    values = r_t * raw
    return PopulationDensityMap(values=dict(zip(ids, values.tolist())), timestamp=timestamp)


@dataclass
class ModelComparison:
    event_ids: tuple[str, ...]
    relative_errors: dict[str, np.ndarray]  # signed, per model
    absolute_errors: dict[str, np.ndarray]
    percentiles: dict[str, dict[int, float]]  # of |relative error|
    median_ratio: float  # baseline median |rel err| over candidate median
    p_value: float

    PERCENTILES = (5, 25, 50, 75, 95)


def compare_models(
    truth: Mapping[str, float],
    candidate: Mapping[str, float],
    baseline: Mapping[str, float],
) -> ModelComparison:
    """Per-event error table for two attendance estimators plus a two-sided
    rank-based significance test on the error magnitudes."""
    ids = tuple(sorted(truth))
    if len(ids) < 3:
        raise InsufficientDataError("model comparison needs at least 3 events")
    for name, est in (("candidate", candidate), ("baseline", baseline)):
        missing = [e for e in ids if e not in est]
        if missing:
            raise InputError(f"{name} estimates missing events {missing}")
    gamma = np.array([truth[e] for e in ids], dtype=float)
    if np.any(gamma <= 0):
        raise InputError("ground-truth attendance must be positive")

    rel: dict[str, np.ndarray] = {}
    ab: dict[str, np.ndarray] = {}
    pct: dict[str, dict[int, float]] = {}
    for name, est in (("multivariate", candidate), ("xu", baseline)):
        g_hat = np.array([est[e] for e in ids], dtype=float)
        rel[name] = (g_hat - gamma) / gamma
        ab[name] = g_hat - gamma
        pct[name] = {
            p: float(np.percentile(np.abs(rel[name]), p)) for p in ModelComparison.PERCENTILES
        }

    mv_abs = np.abs(rel["multivariate"])
    xu_abs = np.abs(rel["xu"])
    mv_median = float(np.median(mv_abs))
    median_ratio = float(np.median(xu_abs) / mv_median) if mv_median > 0 else float("inf")
    if np.array_equal(mv_abs, xu_abs):
        p_value = 1.0
        median_ratio = 1.0
    else:
        p_value = float(mannwhitneyu(mv_abs, xu_abs, alternative="two-sided").pvalue)
    return ModelComparison(
        event_ids=ids,
        relative_errors=rel,
        absolute_errors=ab,
        percentiles=pct,
        median_ratio=median_ratio,
        p_value=p_value,
    )


def proportional_ceiling_gap(
    params: MultivariateParams,
    market_share: float,
    sigma_grid: np.ndarray,
    lam_grid: np.ndarray,
) -> np.ndarray:
    """Gap between the proportional line sigma/M and the literal-form model on
    a (lambda, sigma) grid; diagnostic only, never part of an estimate."""
    if not (0.0 < market_share <= 1.0):
        raise InputError("market share must lie in (0, 1]")
    gaps = np.empty((len(lam_grid), len(sigma_grid)))
    for i, lam in enumerate(lam_grid):
        values, _ = dynamic_density_values(
            np.asarray(sigma_grid, dtype=float),
            np.full(len(sigma_grid), lam),
            params,
            literal_alpha=True,
        )
        gaps[i] = np.asarray(sigma_grid) / market_share - values
    return gaps


# ---------------------------------------------------------------------------
# file interfaces

def write_params_file(path: str, params: MultivariateParams) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"a_alpha = {float(params.a_alpha)!r}\n")
        fh.write(f"b_alpha = {float(params.b_alpha)!r}\n")
        fh.write(f"a_beta = {float(params.a_beta)!r}\n")
        fh.write(f"b_beta = {float(params.b_beta)!r}\n")
        fh.write(f"kind = {params.kind}\n")


def load_params_file(path: str) -> MultivariateParams:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    try:
        return MultivariateParams(
            a_alpha=float(values["a_alpha"]),
            b_alpha=float(values["b_alpha"]),
            a_beta=float(values["a_beta"]),
            b_beta=float(values["b_beta"]),
            kind=values.get("kind", "call"),
        )
    except KeyError as exc:
        raise InputError(f"{path}: missing parameter {exc.args[0]!r}") from exc


def write_attendance_csv(path: str, estimates: Sequence[AttendanceEstimate]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["event_id", "t_peak_s", "sigma_norm", "sigma_match", "lambda_tilde", "gamma_hat"])
        for est in estimates:
            writer.writerow(
                [
                    est.event_id,
                    est.t_peak,
                    repr(float(est.sigma_norm)),
                    repr(float(est.sigma_match)),
                    repr(float(est.lambda_tilde)),
                    repr(float(est.gamma_hat)),
                ]
            )


def load_attendance_csv(path: str) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ("event_id", "t_peak_s", "sigma_norm", "sigma_match", "lambda_tilde", "gamma_hat")
        if reader.fieldnames is None or tuple(reader.fieldnames) != expected:
            raise InputError(f"{path}: expected attendance header {','.join(expected)}")
        for row in reader:
            out[row["event_id"]] = float(row["gamma_hat"])
    return out
