"""Gaussian VaR under baseline and stressed correlations, and reverse stress tests.

Reverse stress tests search the highest density region (HDR)
``{beta : f(beta) >= f_q}`` of a fitted NIG law for the correlation
scenario with the largest portfolio variance.  With zero-mean Gaussian
returns, VaR and expected shortfall are increasing in the variance, so all
three share the same argmax.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm

from .corrmodel import (
    PSD_TOL,
    CorrelationMatrix,
    CorrelationParams,
    FactorAssignment,
    pair_features,
    repair,
    stressed_correlation,
)
from .distfit import NIGParams, nig_logdensity, sample_nig
from .exceptions import NumericalError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.99
DEFAULT_Q = 0.05
DEFAULT_WINDOW = 250
HISTORICAL_MC_SAMPLES = 100_000
MIN_HDR_SAMPLES = 100
_CHUNK = 20_000


@dataclass(frozen=True)
class PortfolioSpec:
    """Portfolio weights, initial value and daily return volatilities."""

    weights: np.ndarray
    value_v0: float
    vol: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        vol = np.atleast_1d(np.asarray(self.vol, dtype=float))
        if w.shape != vol.shape or w.ndim != 1:
            raise ValidationError("weights and vols must be vectors of equal length")
        if abs(w.sum() - 1.0) >= 1e-12:
            raise ValidationError(f"weights sum to {w.sum()!r}, not 1")
        if np.any(vol < 0) or not np.all(np.isfinite(vol)):
            raise ValidationError("vols must be finite and non-negative")
        if not self.value_v0 > 0:
            raise ValidationError("portfolio value must be positive")
        w.flags.writeable = False
        vol.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "vol", vol)
        object.__setattr__(self, "value_v0", float(self.value_v0))

    @property
    def n_assets(self) -> int:
        return self.weights.size

    def with_vol(self, vol) -> "PortfolioSpec":
        return PortfolioSpec(self.weights, self.value_v0, vol)

    @property
    def exposure(self) -> np.ndarray:
        """Volatility-scaled weights ``w_i sigma_i``."""
        return self.weights * self.vol


@dataclass(frozen=True)
class HDRegion:
    """Density threshold of a highest density region.

    ``log_f_q`` is authoritative; ``f_q`` may underflow to zero in high
    dimension.
    """

    level_q: float
    log_f_q: float
    n_samples_used: int

    @property
    def f_q(self) -> float:
        return float(np.exp(self.log_f_q))

    def contains(self, log_density) -> np.ndarray:
        return np.asarray(log_density) >= self.log_f_q


@dataclass(frozen=True)
class StressResult:
    beta_star: CorrelationParams
    var_alpha: float
    variance: float
    method: str
    in_region: bool
    log_density: float
    region: HDRegion
    alpha: float
    index: int

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "beta_star": self.beta_star.as_dict(),
            "eta_omitted": self.beta_star.eta is None,
            "log_density": self.log_density,
            "log_f_q": self.region.log_f_q,
            "f_q": self.region.f_q,
            "q": self.region.level_q,
            "n_samples": self.region.n_samples_used,
            "in_region": self.in_region,
            "variance": self.variance,
            "alpha": self.alpha,
            "var": self.var_alpha,
            "index": self.index,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# -- risk measures -------------------------------------------------------------

def _corr_values(corr) -> np.ndarray:
    if isinstance(corr, CorrelationMatrix):
        if not corr.is_psd:
            raise ValidationError("correlation matrix is not PSD; repair it first")
        return corr.values
    values = np.asarray(corr, dtype=float)
    if np.linalg.eigvalsh(values)[0] < -PSD_TOL:
        raise ValidationError("correlation matrix is not PSD; repair it first")
    return values


def _check_alpha(alpha: float) -> None:
    if not 0.5 < alpha < 1.0:
        raise ValidationError("alpha must lie in (0.5, 1)")


def portfolio_variance(portfolio: PortfolioSpec, corr) -> float:
    """``w' diag(vol) C diag(vol) w`` for a PSD correlation matrix."""
    c = _corr_values(corr)
    if c.shape != (portfolio.n_assets, portfolio.n_assets):
        raise ValidationError(f"correlation matrix is {c.shape}, portfolio has {portfolio.n_assets} assets")
    u = portfolio.exposure
    return float(max(u @ c @ u, 0.0))


def var_from_variance(variance, value_v0: float, alpha: float = DEFAULT_ALPHA):
    """``-N^{-1}(1 - alpha) V0 sqrt(variance)``, a positive loss amount."""
    _check_alpha(alpha)
    return -norm.ppf(1.0 - alpha) * value_v0 * np.sqrt(variance)


def var_gaussian(portfolio: PortfolioSpec, corr, alpha: float = DEFAULT_ALPHA) -> float:
    """Zero-mean variance-covariance VaR at confidence ``alpha``."""
    _check_alpha(alpha)
    return float(var_from_variance(portfolio_variance(portfolio, corr), portfolio.value_v0, alpha))


def es_gaussian(portfolio: PortfolioSpec, corr, alpha: float = DEFAULT_ALPHA) -> float:
    """Zero-mean Gaussian expected shortfall at confidence ``alpha``."""
    _check_alpha(alpha)
    sd = np.sqrt(portfolio_variance(portfolio, corr))
    return float(portfolio.value_v0 * sd * norm.pdf(norm.ppf(alpha)) / (1.0 - alpha))


def mahalanobis(x, mu, sigma):
    """Mahalanobis distance ``sqrt((x - mu)' Sigma^-1 (x - mu))``, row-wise for 2-D ``x``."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ValidationError("Sigma must be positive definite") from None
    diff = np.atleast_2d(x - mu)
    z = np.linalg.solve(L, diff.T)
    d = np.sqrt(np.sum(z * z, axis=0))
    return float(d[0]) if x.ndim == 1 else d


# -- highest density regions ---------------------------------------------------

def hdr_threshold(density_values, q: float = DEFAULT_Q, log: bool = False) -> HDRegion:
    """Threshold ``f_q`` as the lower empirical ``q``-quantile of densities.

    Parameters
    ----------
    density_values : array_like
        Densities (or log-densities with ``log=True``) of an iid sample from
        the law itself.
    q : float
        Probability mass outside the region.
    """
    v = np.asarray(density_values, dtype=float).ravel()
    if not 0.0 < q < 1.0:
        raise ValidationError("q must lie in (0, 1)")
    if v.size < MIN_HDR_SAMPLES:
        raise ValidationError(f"need at least {MIN_HDR_SAMPLES} density values, got {v.size}")
    if np.any(np.isnan(v)):
        raise ValidationError("density values contain NaN")
    with np.errstate(divide="ignore"):
        logs = v if log else np.log(v)
    return HDRegion(float(q), float(np.quantile(logs, q, method="lower")), int(v.size))


def worst_in_region(log_density, region: HDRegion, objective: Callable[[np.ndarray], np.ndarray], points) -> int:
    """Index of the in-region point with the largest objective (first on ties)."""
    members = np.flatnonzero(region.contains(log_density))
    if members.size == 0:
        raise NumericalError("highest density region is empty")
    values = objective(np.asarray(points)[members])
    return int(members[int(np.argmax(values))])


# -- scenario evaluation -------------------------------------------------------

class ScenarioEvaluator:
    """Maps coefficient vectors to PSD-repaired portfolio variances in batches."""

    def __init__(self, assignment: FactorAssignment, portfolio: PortfolioSpec):
        if assignment.n_assets != portfolio.n_assets:
            raise ValidationError("assignment and portfolio differ in asset count")
        (self.iu, self.ju), inter, intra = pair_features(assignment.indicators)
        self.design = np.column_stack([np.ones(self.iu.size), inter, intra])
        u = portfolio.exposure
        self.u = u
        self.pair_weight = 2.0 * u[self.iu] * u[self.ju]
        self.diag = float(u @ u)
        self.p = assignment.n_assets
        self.dim = self.design.shape[1]

    def correlation(self, beta) -> np.ndarray:
        c = np.tanh(self.design @ np.asarray(beta, dtype=float))
        m = np.eye(self.p)
        m[self.iu, self.ju] = c
        m[self.ju, self.iu] = c
        return m

    def variances(self, betas) -> np.ndarray:
        betas = np.atleast_2d(np.asarray(betas, dtype=float))
        if betas.shape[1] != self.dim:
            raise ValidationError(f"scenario vectors have length {betas.shape[1]}, expected {self.dim}")
        out = np.empty(betas.shape[0])
        for start in range(0, betas.shape[0], _CHUNK):
            chunk = betas[start : start + _CHUNK]
            c = np.tanh(chunk @ self.design.T)
            out[start : start + len(chunk)] = self.diag + c @ self.pair_weight
            mats = np.broadcast_to(np.eye(self.p), (len(chunk), self.p, self.p)).copy()
            mats[:, self.iu, self.ju] = c
            mats[:, self.ju, self.iu] = c
            low = np.linalg.eigvalsh(mats)[:, 0]
            for k in np.flatnonzero(low < 0.0):
                fixed = repair(mats[k]).values
                out[start + k] = float(self.u @ fixed @ self.u)
        return np.maximum(out, 0.0)


def _result(beta, evaluator, portfolio, alpha, method, log_density, region, index, factor_names, eta_omitted):
    variance = float(evaluator.variances(beta[None, :])[0])
    params = CorrelationParams.from_vector(beta, factor_names, eta_omitted=eta_omitted)
    return StressResult(
        beta_star=params,
        var_alpha=float(var_from_variance(variance, portfolio.value_v0, alpha)),
        variance=variance,
        method=method,
        in_region=bool(region.contains(log_density)),
        log_density=float(log_density),
        region=region,
        alpha=alpha,
        index=int(index),
    )


class _Embedding:
    """Places the law's coordinates inside full coefficient vectors.

    Coefficients outside ``coords`` stay at ``baseline`` (e.g. an intercept
    that was omitted on every date and so cannot enter the fit).
    """

    def __init__(self, dist: NIGParams, dim: int, coords=None, baseline=None):
        self.coords = np.arange(dim) if coords is None else np.asarray(coords, dtype=int)
        self.baseline = np.zeros(dim) if baseline is None else np.asarray(baseline, dtype=float)
        if self.baseline.shape != (dim,):
            raise ValidationError(f"baseline must have length {dim}")
        if dist.dim != self.coords.size:
            raise ValidationError(f"distribution has dimension {dist.dim}, scenarios need {self.coords.size}")
        if np.unique(self.coords).size != self.coords.size or self.coords.min() < 0 or self.coords.max() >= dim:
            raise ValidationError("coordinate indices must be distinct and within the coefficient vector")

    def full(self, reduced: np.ndarray) -> np.ndarray:
        out = np.tile(self.baseline, (len(reduced), 1))
        out[:, self.coords] = reduced
        return out

    def reduce(self, full: np.ndarray) -> np.ndarray:
        return full[:, self.coords]


def reverse_stress_mc(
    dist: NIGParams,
    assignment: FactorAssignment,
    portfolio: PortfolioSpec,
    q: float = DEFAULT_Q,
    n_samples: int = HISTORICAL_MC_SAMPLES,
    seed=None,
    alpha: float = DEFAULT_ALPHA,
    eta_omitted: bool = False,
    coords=None,
    baseline=None,
) -> StressResult:
    """Worst sampled scenario inside the ``1 - q`` highest density region.

    ``coords`` lists which coefficients ``dist`` describes when it covers
    only part of the vector; the others stay at ``baseline``.
    """
    evaluator = ScenarioEvaluator(assignment, portfolio)
    emb = _Embedding(dist, evaluator.dim, coords, baseline)
    samples = sample_nig(dist, n_samples, seed)
    logf = nig_logdensity(samples, dist)
    region = hdr_threshold(logf, q, log=True)
    betas = emb.full(samples)
    idx = worst_in_region(logf, region, evaluator.variances, betas)
    logger.info("Monte Carlo reverse stress: sample %d of %d, log f = %.4f", idx, n_samples, logf[idx])
    return _result(betas[idx], evaluator, portfolio, alpha, "monte_carlo", logf[idx], region, idx,
                   assignment.factor_names, eta_omitted)


def reverse_stress_historical(
    beta_history: Sequence[CorrelationParams] | np.ndarray,
    dist: NIGParams,
    assignment: FactorAssignment,
    portfolio: PortfolioSpec,
    q: float = DEFAULT_Q,
    seed=None,
    alpha: float = DEFAULT_ALPHA,
    region: HDRegion | None = None,
    n_mc: int = HISTORICAL_MC_SAMPLES,
    coords=None,
    baseline=None,
) -> StressResult:
    """Worst historical scenario inside the highest density region.

    ``f_q`` comes from a fresh Monte Carlo sample of ``dist`` unless an
    explicit ``region`` is given.
    """
    evaluator = ScenarioEvaluator(assignment, portfolio)
    emb = _Embedding(dist, evaluator.dim, coords, baseline)
    if len(beta_history) == 0:
        raise ValidationError("empty scenario history")
    if isinstance(beta_history, np.ndarray):
        betas = np.atleast_2d(beta_history)
        omitted = np.zeros(len(betas), dtype=bool)
    else:
        betas = np.array([b.to_vector() for b in beta_history])
        omitted = np.array([b.eta is None for b in beta_history])
    if region is None:
        region = hdr_threshold(nig_logdensity(sample_nig(dist, n_mc, seed), dist), q, log=True)
    if betas.shape[1] != evaluator.dim:
        raise ValidationError(f"history vectors have length {betas.shape[1]}, expected {evaluator.dim}")
    logf = nig_logdensity(emb.reduce(betas), dist)
    if not np.any(region.contains(logf)):
        raise ValidationError(
            f"no historical scenario lies inside the {1 - region.level_q:.0%} region; "
            "use a smaller q to widen the region"
        )
    idx = worst_in_region(logf, region, evaluator.variances, betas)
    return _result(betas[idx], evaluator, portfolio, alpha, "historical", logf[idx], region, idx,
                   assignment.factor_names, bool(omitted[idx]))


# -- stressed VaR time series --------------------------------------------------

def _assignment_for(schedule, date) -> FactorAssignment:
    if isinstance(schedule, FactorAssignment):
        return schedule
    chosen = None
    for start in sorted(schedule):
        if pd.Timestamp(start) <= pd.Timestamp(date):
            chosen = schedule[start]
    if chosen is None:
        raise ValidationError(f"no factor assignment in force on {date}")
    return chosen


def _window_correlation(block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vol = block.std(axis=0, ddof=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.corrcoef(block, rowvar=False)
    c = np.nan_to_num(np.atleast_2d(c), nan=0.0)
    np.fill_diagonal(c, 1.0)
    return vol, np.clip(0.5 * (c + c.T), -1.0, 1.0)


def stressed_var_series(
    returns,
    assignment_schedule: FactorAssignment | Mapping,
    scenario: CorrelationParams,
    portfolio: PortfolioSpec,
    alpha: float = DEFAULT_ALPHA,
    window: int = DEFAULT_WINDOW,
) -> pd.DataFrame:
    """Baseline and stressed VaR for every date with a full trailing window.

    On date ``t`` the vols and empirical correlation come from the ``window``
    returns strictly before ``t``.  The stressed matrix is the scenario's
    model correlation under the assignment in force on ``t``; both VaRs use
    the same vols.

    Returns
    -------
    pandas.DataFrame
        Columns ``date``, ``var``, ``stressed_var``.
    """
    _check_alpha(alpha)
    frame = getattr(returns, "assets", returns)
    if not isinstance(frame, pd.DataFrame):
        raise ValidationError("returns must be a DataFrame or a panel with an `assets` frame")
    if frame.shape[1] != portfolio.n_assets:
        raise ValidationError(f"panel has {frame.shape[1]} assets, portfolio has {portfolio.n_assets}")
    if window < 2:
        raise ValidationError("window must be at least 2")
    if not (frame.index.is_monotonic_increasing and frame.index.is_unique):
        raise ValidationError("return dates must be strictly increasing")
    values = frame.to_numpy(dtype=float)
    dates = frame.index
    rows = []
    cache: dict[int, CorrelationMatrix] = {}
    if len(dates) <= window:
        logger.warning("panel of %d rows is shorter than the %d-day window", len(dates), window)
    for t in range(window, len(dates)):
        vol, emp = _window_correlation(values[t - window : t])
        pf = portfolio.with_vol(vol)
        assignment = _assignment_for(assignment_schedule, dates[t])
        key = id(assignment)
        if key not in cache:
            cache[key] = stressed_correlation(scenario, assignment)
        base = var_gaussian(pf, repair(emp, "empirical"), alpha)
        stressed = var_gaussian(pf, cache[key], alpha)
        rows.append((dates[t], base, stressed))
    return pd.DataFrame(rows, columns=["date", "var", "stressed_var"])
