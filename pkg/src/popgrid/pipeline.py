"""End-to-end estimation chains shared by the CLI and the validation suite.

These build on the module operations without adding new modeling content:
window means feed the robust fits, persistent outliers are dropped from
training, folds are contiguous in time, and the activity-linear parameter
lines come from hourly overnight fits.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dynamic import (
    EventSpec,
    MultivariateParams,
    activity_level,
    baseline_days_for,
    baseline_median_column,
    dynamic_density_values,
    fit_lambda_lines,
    presence_peak_slot,
    xu_estimate,
    zscore,
)
from .errors import InputError, InsufficientDataError
from .filters import FilterConfig, apply_day_filter, apply_time_filter
from .grid import GridTessellation, PopulationDensityMap
from .metadata import PresenceSeries, VolumeSeries
from .regress import (
    BootstrapConfig,
    FitMetrics,
    PowerLawFit,
    RansacConfig,
    bootstrap_ci,
    evaluate_static,
    persistent_outlier_cells,
    ransac_powerlaw_fit,
)
from .timebase import SECONDS_PER_HOUR, day_index, second_of_day


def window_mean_density(
    presence: PresenceSeries,
    window: tuple[int, int],
    days: Sequence[int] | None = None,
) -> np.ndarray:
    """Per-cell mean presence density over the daily window, NaN where a cell
    has no usable slot."""
    sod = second_of_day(presence.slot_starts)
    mask = (sod >= window[0]) & (sod < window[1])
    if days is not None:
        mask &= np.isin(day_index(presence.slot_starts), list(days))
    if not np.any(mask):
        raise InputError("window selects no slots")
    with np.errstate(invalid="ignore"):
        return np.nanmean(presence.densities[:, mask], axis=1)


@dataclass
class FoldResult:
    fold: int
    fit: PowerLawFit
    train_metrics: FitMetrics
    test_metrics: FitMetrics
    test_days: tuple[int, ...]


@dataclass
class StaticFitResult:
    fit: PowerLawFit  # trained on all retained days
    metrics: FitMetrics  # of the full fit, on all cells
    folds: list[FoldResult]
    outlier_cells: frozenset[str]
    daily_fits: list[PowerLawFit] = field(default_factory=list)


def _fit_window(
    sigma: np.ndarray,
    rho: np.ndarray,
    cell_ids: tuple[str, ...],
    train_mask: np.ndarray,
    ransac_cfg: RansacConfig,
    seed: int,
) -> PowerLawFit:
    ids = tuple(np.asarray(cell_ids, dtype=object)[train_mask])
    sig = np.where(np.isfinite(sigma[train_mask]), sigma[train_mask], 0.0)
    return ransac_powerlaw_fit(sig, rho[train_mask], ransac_cfg, seed=seed, sample_ids=ids)


def fit_static_pipeline(
    presence: PresenceSeries,
    census: PopulationDensityMap,
    grid: GridTessellation,
    *,
    window: tuple[int, int] = (4 * 3600, 5 * 3600),
    train_cells: Sequence[str] | None = None,
    seed: int = 0,
    ransac_cfg: RansacConfig | None = None,
    bootstrap_cfg: BootstrapConfig | None = None,
    outlier_threshold: float = 0.8,
    n_folds: int = 3,
) -> StaticFitResult:
    """Daily fits -> persistent outliers -> pooled robust fit with bootstrap
    intervals -> contiguous-in-time cross-validation.

    Training uses the requested cell subset minus persistent outliers; every
    evaluation covers all cells that carry data in the relevant period.
    """
    ransac_cfg = ransac_cfg or RansacConfig()
    bootstrap_cfg = bootstrap_cfg or BootstrapConfig()
    cell_ids = grid.ids()
    rho = census.to_array(cell_ids)
    days = [int(d) for d in np.unique(day_index(presence.slot_starts))]
    if len(days) < n_folds:
        raise InsufficientDataError(f"need at least {n_folds} days for {n_folds}-fold validation")

    train_selector = np.ones(len(cell_ids), dtype=bool)
    if train_cells is not None:
        wanted = set(train_cells)
        train_selector = np.array([c in wanted for c in cell_ids])

    daily_fits: list[PowerLawFit] = []
    for i, day in enumerate(days):
        sigma_day = window_mean_density(presence, window, days=[day])
        try:
            daily_fits.append(
                _fit_window(sigma_day, rho, cell_ids, train_selector, ransac_cfg, seed=seed + 1000 + i)
            )
        except InsufficientDataError:
            continue  # day with too little usable data contributes no fit

    outliers: frozenset[str] = frozenset()
    if len(daily_fits) >= 5:
        outliers = persistent_outlier_cells(daily_fits, threshold=outlier_threshold)

    keep = train_selector & np.array([c not in outliers for c in cell_ids])

    def _pooled_fit(day_subset: Sequence[int], fit_seed: int) -> tuple[PowerLawFit, np.ndarray]:
        sigma = window_mean_density(presence, window, days=day_subset)
        fit = _fit_window(sigma, rho, cell_ids, keep, ransac_cfg, seed=fit_seed)
        return fit, sigma

    def _metrics(fit: PowerLawFit, sigma: np.ndarray) -> FitMetrics:
        usable = np.isfinite(sigma)
        return evaluate_static(fit, np.where(usable, sigma, 0.0)[usable], rho[usable])

    folds: list[FoldResult] = []
    if n_folds > 1:
        edges = np.linspace(0, len(days), n_folds + 1).astype(int)
        for f in range(n_folds):
            test_days = days[edges[f] : edges[f + 1]]
            train_days = [d for d in days if d not in set(test_days)]
            fit, sigma_train = _pooled_fit(train_days, seed + f)
            sigma_test = window_mean_density(presence, window, days=test_days)
            folds.append(
                FoldResult(
                    fold=f,
                    fit=fit,
                    train_metrics=_metrics(fit, sigma_train),
                    test_metrics=_metrics(fit, sigma_test),
                    test_days=tuple(test_days),
                )
            )

    full_fit, sigma_all = _pooled_fit(days, seed)
    alpha_ci, beta_ci = bootstrap_ci(
        np.where(np.isfinite(sigma_all), sigma_all, 0.0)[keep],
        rho[keep],
        full_fit,
        bootstrap_cfg,
        seed=seed + 5000,
    )
    full_fit.alpha_ci = alpha_ci
    full_fit.beta_ci = beta_ci
    return StaticFitResult(
        fit=full_fit,
        metrics=_metrics(full_fit, sigma_all),
        folds=folds,
        outlier_cells=outliers,
        daily_fits=daily_fits,
    )


def fit_lambda_pipeline(
    presence: PresenceSeries,
    volumes: VolumeSeries,
    census: PopulationDensityMap,
    grid: GridTessellation,
    *,
    kind: str = "call",
    train_cells: Sequence[str] | None = None,
    overnight: tuple[int, int] = (0, 8 * 3600),
    seed: int = 0,
    ransac_cfg: RansacConfig | None = None,
    min_pairs: int = 5,
) -> tuple[MultivariateParams, list[tuple[float, PowerLawFit]]]:
    """Hourly overnight fits paired with their mean activity levels, then the
    two parameter lines."""
    ransac_cfg = ransac_cfg or RansacConfig()
    cell_ids = grid.ids()
    rho = census.to_array(cell_ids)
    activity = activity_level(volumes, presence, kind)

    train_selector = np.ones(len(cell_ids), dtype=bool)
    if train_cells is not None:
        wanted = set(train_cells)
        train_selector = np.array([c in wanted for c in cell_ids])
    train_rows = np.flatnonzero(train_selector)

    sod = second_of_day(presence.slot_starts)
    days = day_index(presence.slot_starts)
    pairs: list[tuple[float, PowerLawFit]] = []
    hours = range(overnight[0] // SECONDS_PER_HOUR, overnight[1] // SECONDS_PER_HOUR)
    for i, day in enumerate(int(d) for d in np.unique(days)):
        for hour in hours:
            mask = (days == day) & (sod >= hour * SECONDS_PER_HOUR) & (sod < (hour + 1) * SECONDS_PER_HOUR)
            if not np.any(mask):
                continue
            with np.errstate(invalid="ignore"):
                sigma = np.nanmean(presence.densities[:, mask], axis=1)
                lam_window = activity.lam[train_rows][:, mask]
            if not np.any(np.isfinite(lam_window)):
                continue
            lam = float(np.nanmean(lam_window))
            try:
                fit = _fit_window(sigma, rho, cell_ids, train_selector, ransac_cfg, seed=seed + 100 * i + hour)
            except InsufficientDataError:
                continue
            pairs.append((lam, fit))
    if len(pairs) < min_pairs:
        raise InsufficientDataError(
            f"only {len(pairs)} overnight (lambda, fit) pairs; need {min_pairs}"
        )
    return fit_lambda_lines(pairs, kind=kind), pairs


@dataclass
class DynamicSeries:
    cell_ids: tuple[str, ...]
    slot_starts: np.ndarray
    rho_hat: np.ndarray  # (n_cells, n_slots), NaN where presence missing
    z: np.ndarray
    constant_cells: np.ndarray  # bool per cell
    lambda_fallback: np.ndarray  # bool, cells*slots where city-mean lambda was used


def dynamic_series(
    presence: PresenceSeries,
    volumes: VolumeSeries,
    params: MultivariateParams,
    *,
    literal_alpha: bool = False,
) -> DynamicSeries:
    """Per-slot multivariate estimates plus their z-score normalization."""
    if presence.densities is None:
        raise InputError("presence series lacks densities")
    activity = activity_level(volumes, presence, params.kind)
    n_cells, n_slots = presence.densities.shape
    rho_hat = np.full((n_cells, n_slots), np.nan)
    fallback = np.zeros((n_cells, n_slots), dtype=bool)
    for s in range(n_slots):
        sigma = presence.densities[:, s]
        usable = np.isfinite(sigma)
        if not np.any(usable):
            continue
        values, fb = dynamic_density_values(
            np.where(usable, sigma, 0.0), activity.lam[:, s], params, literal_alpha=literal_alpha
        )
        rho_hat[usable, s] = values[usable]
        fallback[:, s] = fb & usable
    z, constant = zscore(rho_hat)
    return DynamicSeries(
        cell_ids=presence.cell_ids,
        slot_starts=presence.slot_starts.copy(),
        rho_hat=rho_hat,
        z=z,
        constant_cells=constant,
        lambda_fallback=fallback,
    )


def fit_per_landuse(
    presence: PresenceSeries,
    census: PopulationDensityMap,
    grid: GridTessellation,
    labels: Mapping[str, str],
    *,
    window: tuple[int, int] = (4 * 3600, 5 * 3600),
    seed: int = 0,
    ransac_cfg: RansacConfig | None = None,
) -> dict[str, PowerLawFit]:
    """One static power law per land use, for the rescaled baseline model."""
    ransac_cfg = ransac_cfg or RansacConfig()
    cell_ids = grid.ids()
    rho = census.to_array(cell_ids)
    sigma = window_mean_density(presence, window)
    fits: dict[str, PowerLawFit] = {}
    for i, landuse in enumerate(sorted(set(labels.values()))):
        mask = np.array([labels.get(c) == landuse for c in cell_ids])
        fits[landuse] = _fit_window(sigma, rho, cell_ids, mask, ransac_cfg, seed=seed + 31 * i)
    return fits


def xu_attendance(
    event: EventSpec,
    presence: PresenceSeries,
    fits_by_landuse: Mapping[str, PowerLawFit],
    labels: Mapping[str, str],
    census: PopulationDensityMap,
    grid: GridTessellation,
) -> float:
    """Attendance under the rescaled per-land-use model, following the same
    steps as the multivariate estimator: same neighborhood, same peak slot,
    same baseline; the crowd is the integrated density uplift."""
    from .dynamic import _neighborhood

    cells = _neighborhood(grid, event.venue_cells)
    idx = np.array([grid.index_of(c) for c in cells])
    baseline_days = baseline_days_for(event, presence)
    t_peak_slot = presence_peak_slot(presence, event, idx)
    peak_sod = int(second_of_day(presence.slot_starts[t_peak_slot : t_peak_slot + 1])[0])

    current = presence.densities[:, t_peak_slot]
    current = np.where(np.isfinite(current), current, 0.0)
    baseline = baseline_median_column(presence, baseline_days, peak_sod)
    baseline = np.where(np.isfinite(baseline), baseline, 0.0)

    ids = grid.ids()
    match_map = xu_estimate(current, fits_by_landuse, labels, census, grid)
    norm_map = xu_estimate(baseline, fits_by_landuse, labels, census, grid)
    surfaces = grid.surfaces()[idx]
    uplift = match_map.to_array(ids)[idx] - norm_map.to_array(ids)[idx]
    return float(max(np.dot(uplift, surfaces), 0.0))


def events_from_truth(truths: Sequence, min_baseline_days: int = 3) -> list[EventSpec]:
    """EventSpecs for recorded events, each excluding all other event days."""
    all_dates = {t.date for t in truths}
    specs = []
    for t in truths:
        specs.append(
            EventSpec(
                event_id=t.event_id,
                venue_cells=tuple(t.venue_cells),
                date=t.date,
                start_s=t.span_start_s,
                end_s=t.span_end_s,
                exclude_dates=frozenset(all_dates - {t.date}),
                min_baseline_days=min_baseline_days,
            )
        )
    return specs


def filtered_presence(
    presence: PresenceSeries,
    config: FilterConfig,
    missing_by_day: Mapping[dt.date, float] | None = None,
):
    """Day filter then time filter; returns (series, exclusion log)."""
    series, exclusions = apply_day_filter(presence, config, missing_by_day)
    return apply_time_filter(series, config), exclusions
