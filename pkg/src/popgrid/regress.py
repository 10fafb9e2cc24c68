"""Robust log-log power-law fitting and the evaluation metrics.

The model is ``rho = alpha * sigma**beta``; fitting happens on natural logs,
with zero-valued samples excluded before the transform. The consensus search
follows the classic two-point-hypothesis scheme with a fixed residual
threshold derived from an initial least-squares fit, and the reported
parameters always come from an ordinary least-squares refit on the final
inlier set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateDataError, InputError, InsufficientDataError


@dataclass(frozen=True)
class RansacConfig:
    min_samples: int = 2  # points per hypothesis; a line needs two
    residual_threshold_scale: float = 2.0  # times the MAD of initial OLS residuals
    residual_floor: float = 1e-9  # keeps noiseless data from rejecting exact points
    max_iters: int = 1000
    min_points: int = 10


@dataclass(frozen=True)
class BootstrapConfig:
    n_resamples: int = 1000
    ci_level: float = 0.95
    min_inliers: int = 10


@dataclass
class PowerLawFit:
    alpha: float
    beta: float
    seed: int
    inlier_mask: np.ndarray  # over the samples retained for fitting
    sample_ids: tuple[str, ...] | None = None  # ids aligned with inlier_mask
    alpha_ci: tuple[float, float] | None = None
    beta_ci: tuple[float, float] | None = None

    @property
    def n_samples(self) -> int:
        return int(self.inlier_mask.size)

    @property
    def n_inliers(self) -> int:
        return int(np.count_nonzero(self.inlier_mask))


@dataclass(frozen=True)
class FitMetrics:
    r2: float
    nrmse1: float
    nrmse2: float
    rho_mean: float
    rho_min: float
    rho_max: float
    n: int


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation; needs length >= 3 and variance on both sides."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise InputError("pearson inputs must have equal length")
    if x.size < 3:
        raise InsufficientDataError("pearson needs at least 3 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(np.dot(xc, xc))
    vy = float(np.dot(yc, yc))
    if vx == 0.0 or vy == 0.0:
        raise DegenerateDataError("correlation undefined for zero-variance input")
    return float(np.dot(xc, yc) / np.sqrt(vx * vy))


def _ols_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares (slope, intercept); raises on zero x-variance."""
    xm = x.mean()
    ym = y.mean()
    sxx = float(np.dot(x - xm, x - xm))
    if sxx == 0.0:
        raise DegenerateDataError("rank-deficient fit: all abscissae identical")
    slope = float(np.dot(x - xm, y - ym) / sxx)
    return slope, ym - slope * xm


def ransac_powerlaw_fit(
    sigma: Sequence[float],
    rho: Sequence[float],
    config: RansacConfig | None = None,
    *,
    seed: int = 0,
    sample_ids: Sequence[str] | None = None,
) -> PowerLawFit:
    """Fit rho = alpha * sigma**beta robustly in log-log space.

    Samples with sigma <= 0 or rho <= 0 are excluded before the transform;
    ``sample_ids`` (if given) must align with the raw inputs and the returned
    fit carries the ids of the retained samples. Deterministic per seed.
    """
    cfg = config or RansacConfig()
    sigma = np.asarray(sigma, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if sigma.shape != rho.shape:
        raise InputError("sigma and rho must have equal length")
    if sample_ids is not None and len(sample_ids) != sigma.size:
        raise InputError("sample_ids must align with sigma/rho")

    positive = (sigma > 0) & (rho > 0) & np.isfinite(sigma) & np.isfinite(rho)
    if int(np.count_nonzero(positive)) < cfg.min_points:
        raise InsufficientDataError(
            f"need at least {cfg.min_points} cells with positive density, got {int(np.count_nonzero(positive))}"
        )
    x = np.log(sigma[positive])
    y = np.log(rho[positive])
    ids = tuple(np.asarray(sample_ids, dtype=object)[positive]) if sample_ids is not None else None
    n = x.size

    slope0, inter0 = _ols_line(x, y)
    resid0 = y - (inter0 + slope0 * x)
    mad = float(np.median(np.abs(resid0 - np.median(resid0))))
    threshold = max(cfg.residual_threshold_scale * mad, cfg.residual_floor)

    rng = np.random.default_rng(seed)
    best_mask: np.ndarray | None = None
    best_count = -1
    best_score = np.inf  # inlier residual sum, lower wins on count ties
    for _ in range(cfg.max_iters):
        pick = rng.choice(n, size=cfg.min_samples, replace=False)
        xs, ys = x[pick], y[pick]
        dx = xs[-1] - xs[0]
        if dx == 0.0:
            continue
        slope = (ys[-1] - ys[0]) / dx
        inter = ys[0] - slope * xs[0]
        resid = np.abs(y - (inter + slope * x))
        mask = resid <= threshold
        count = int(np.count_nonzero(mask))
        if count < cfg.min_samples:
            continue
        score = float(resid[mask].sum())
        if count > best_count or (count == best_count and score < best_score):
            best_count = count
            best_score = score
            best_mask = mask
    if best_mask is None:
        raise DegenerateDataError("rank-deficient fit: all abscissae identical")

    slope, inter = _ols_line(x[best_mask], y[best_mask])
    return PowerLawFit(
        alpha=float(np.exp(inter)),
        beta=slope,
        seed=seed,
        inlier_mask=best_mask,
        sample_ids=ids,
    )


def bootstrap_ci(
    sigma: Sequence[float],
    rho: Sequence[float],
    fit: PowerLawFit,
    config: BootstrapConfig | None = None,
    *,
    seed: int | None = None,
) -> tuple[tuple[float, float], tuple[float, float]]:
    """Percentile bootstrap intervals for (alpha, beta) over inlier resamples."""
    cfg = config or BootstrapConfig()
    sigma = np.asarray(sigma, dtype=float)
    rho = np.asarray(rho, dtype=float)
    positive = (sigma > 0) & (rho > 0) & np.isfinite(sigma) & np.isfinite(rho)
    x = np.log(sigma[positive])
    y = np.log(rho[positive])
    if x.size != fit.inlier_mask.size:
        raise InputError("fit does not correspond to the given samples")
    x = x[fit.inlier_mask]
    y = y[fit.inlier_mask]
    if x.size < cfg.min_inliers:
        raise InsufficientDataError(
            f"need at least {cfg.min_inliers} inliers for a bootstrap interval, got {x.size}"
        )

    rng = np.random.default_rng(fit.seed if seed is None else seed)
    slopes = np.empty(cfg.n_resamples)
    inters = np.empty(cfg.n_resamples)
    kept = 0
    for _ in range(cfg.n_resamples):
        idx = rng.integers(0, x.size, size=x.size)
        xs, ys = x[idx], y[idx]
        if np.ptp(xs) == 0.0:
            continue  # degenerate resample carries no slope information
        slope, inter = _ols_line(xs, ys)
        slopes[kept] = slope
        inters[kept] = inter
        kept += 1
    if kept == 0:
        raise DegenerateDataError("all bootstrap resamples were degenerate")
    tail = 100.0 * (1.0 - cfg.ci_level) / 2.0
    alphas = np.exp(inters[:kept])
    betas = slopes[:kept]
    alpha_ci = (float(np.percentile(alphas, tail)), float(np.percentile(alphas, 100 - tail)))
    beta_ci = (float(np.percentile(betas, tail)), float(np.percentile(betas, 100 - tail)))
    return alpha_ci, beta_ci


def predict_static(fit_or_params, sigma: Sequence[float]) -> np.ndarray:
    """Apply rho_hat = alpha * sigma**beta; zero presence maps to zero density."""
    if isinstance(fit_or_params, PowerLawFit):
        alpha, beta = fit_or_params.alpha, fit_or_params.beta
    else:
        alpha, beta = fit_or_params
    sigma = np.asarray(sigma, dtype=float)
    out = np.zeros_like(sigma)
    pos = sigma > 0
    out[pos] = alpha * np.power(sigma[pos], beta)
    return out


def r_squared(rho_hat: Sequence[float], rho: Sequence[float]) -> float:
    """Determination coefficient with the ground-truth mean as reference."""
    rho_hat = np.asarray(rho_hat, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if rho_hat.shape != rho.shape:
        raise InputError("estimate and truth must have equal length")
    ss_tot = float(np.sum((rho - rho.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateDataError("R² undefined for constant ground truth")
    ss_res = float(np.sum((rho - rho_hat) ** 2))
    return 1.0 - ss_res / ss_tot


def nrmse(rho_hat: Sequence[float], rho: Sequence[float], variant: int) -> float:
    """Root-mean-square error normalized by range (variant 1) or mean (variant 2)."""
    rho_hat = np.asarray(rho_hat, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if rho_hat.shape != rho.shape:
        raise InputError("estimate and truth must have equal length")
    rmse = float(np.sqrt(np.mean((rho_hat - rho) ** 2)))
    if variant == 1:
        spread = float(rho.max() - rho.min())
        if spread <= 0.0:
            raise InputError("NRMSE(1) undefined: zero density range")
        return rmse / spread
    if variant == 2:
        mean = float(rho.mean())
        if mean <= 0.0:
            raise InputError("NRMSE(2) undefined: zero mean density")
        return rmse / mean
    raise InputError(f"unknown NRMSE variant {variant!r}")


def evaluate_static(fit: PowerLawFit, sigma: Sequence[float], rho: Sequence[float]) -> FitMetrics:
    """Metrics of the static estimator over all given cells, outliers included."""
    sigma = np.asarray(sigma, dtype=float)
    rho = np.asarray(rho, dtype=float)
    rho_hat = predict_static(fit, sigma)
    return FitMetrics(
        r2=r_squared(rho_hat, rho),
        nrmse1=nrmse(rho_hat, rho, 1),
        nrmse2=nrmse(rho_hat, rho, 2),
        rho_mean=float(rho.mean()),
        rho_min=float(rho.min()),
        rho_max=float(rho.max()),
        n=int(rho.size),
    )


def persistent_outlier_cells(
    daily_fits: Iterable[PowerLawFit],
    threshold: float = 0.8,
) -> frozenset[str]:
    """Cells flagged as consensus outliers on at least ``threshold`` of the
    days in which they carried data; those cells are dropped from training."""
    fits = list(daily_fits)
    if len(fits) < 5:
        raise InsufficientDataError("persistent-outlier detection needs at least 5 daily fits")
    present: dict[str, int] = {}
    outlying: dict[str, int] = {}
    for fit in fits:
        if fit.sample_ids is None:
            raise InputError("daily fits must carry sample ids for outlier tracking")
        for cid, inlier in zip(fit.sample_ids, fit.inlier_mask):
            present[cid] = present.get(cid, 0) + 1
            if not inlier:
                outlying[cid] = outlying.get(cid, 0) + 1
    return frozenset(
        cid for cid, days in present.items() if outlying.get(cid, 0) / days >= threshold
    )


# ---------------------------------------------------------------------------
# CSV interface

FIT_HEADER = (
    "alpha",
    "alpha_lo",
    "alpha_hi",
    "beta",
    "beta_lo",
    "beta_hi",
    "r2",
    "nrmse1",
    "nrmse2",
    "n_inliers",
    "n_samples",
    "seed",
)


def fit_row(fit: PowerLawFit, metrics: FitMetrics) -> list:
    a_lo, a_hi = fit.alpha_ci if fit.alpha_ci else (float("nan"), float("nan"))
    b_lo, b_hi = fit.beta_ci if fit.beta_ci else (float("nan"), float("nan"))
    return [
        repr(float(fit.alpha)),
        repr(float(a_lo)),
        repr(float(a_hi)),
        repr(float(fit.beta)),
        repr(float(b_lo)),
        repr(float(b_hi)),
        repr(float(metrics.r2)),
        repr(float(metrics.nrmse1)),
        repr(float(metrics.nrmse2)),
        fit.n_inliers,
        fit.n_samples,
        fit.seed,
    ]
