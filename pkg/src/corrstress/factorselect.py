"""Bayesian factor selection with a conjugate normal-inverse-gamma linear model.

For every asset the daily return is regressed on the candidate factor
returns.  Models are indexed by a binary inclusion vector; their posterior
probabilities combine the closed-form marginal likelihood with independent
Bernoulli model priors.  Posterior inclusion probabilities (PIPs) come from
exhaustive enumeration when the model space is small and from a single-flip
Metropolis-Hastings search otherwise.  The median probability model (PIP
above one half) defines the asset's factor row.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky
from scipy.special import gammaln, logsumexp

from .corrmodel import FactorAssignment
from .exceptions import ValidationError

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
PIP_CLIP = (0.01, 0.99)
DEFAULT_A = 0.01
DEFAULT_B = 0.01


@dataclass(frozen=True)
class BayesLinearPrior:
    """``beta | s2 ~ N(m, s2 M)``, ``s2 ~ IG(a, b)``."""

    m: np.ndarray
    M: np.ndarray
    a: float
    b: float

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.m, dtype=float))
        M = np.atleast_2d(np.asarray(self.M, dtype=float)) if m.size else np.zeros((0, 0))
        if M.shape != (m.size, m.size):
            raise ValidationError(f"prior scale shape {M.shape} does not match mean length {m.size}")
        if m.size and np.max(np.abs(M - M.T)) > 1e-10 * max(1.0, np.max(np.abs(M))):
            raise ValidationError("prior scale must be symmetric")
        if not (self.a > 0 and self.b > 0):
            raise ValidationError("inverse-gamma shape and scale must be positive")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "M", M)


@dataclass(frozen=True)
class BayesLinearPosterior:
    m_tilde: np.ndarray
    M_tilde: np.ndarray
    a_tilde: float
    b_tilde: float


@dataclass(frozen=True)
class InclusionPrior:
    """Independent Bernoulli inclusion weights; forced factors carry weight 1."""

    w: np.ndarray
    forced: frozenset = frozenset()

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float)).copy()
        if np.any((w < 0) | (w > 1)) or not np.all(np.isfinite(w)):
            raise ValidationError("inclusion weights must lie in [0, 1]")
        forced = frozenset(int(k) for k in self.forced)
        if any(k < 0 or k >= w.size for k in forced):
            raise ValidationError("forced index out of range")
        w[list(forced)] = 1.0
        forced = forced | frozenset(np.flatnonzero(w == 1.0).tolist())
        w.flags.writeable = False
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "forced", forced)

    @property
    def d(self) -> int:
        return self.w.size


@dataclass(frozen=True)
class PIPResult:
    pip: np.ndarray
    selected: np.ndarray
    n_models_visited: int
    mcmc_acceptance_rate: float
    method: str = "mcmc"
    flagged: bool = False
    forced: frozenset = field(default_factory=frozenset)

    @classmethod
    def from_pip(cls, pip, forced, **kw) -> "PIPResult":
        pip = np.asarray(pip, dtype=float)
        pip[list(forced)] = 1.0
        return cls(pip, (pip > 0.5).astype(np.int8), forced=frozenset(forced), **kw)


# -- conjugate algebra --------------------------------------------------------

def _chol_inv_logdet(M: np.ndarray) -> tuple[np.ndarray, float]:
    try:
        c = cholesky(M, lower=True)
    except LinAlgError:
        raise ValidationError("prior scale matrix is singular or not positive definite") from None
    inv = cho_solve((c, True), np.eye(M.shape[0]))
    return inv, 2.0 * float(np.sum(np.log(np.diag(c))))


def posterior_update(prior: BayesLinearPrior, X, y) -> BayesLinearPosterior:
    """Conjugate update of ``(beta, s2)`` given ``y = X beta + eps``."""
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    X = X.reshape(y.size, -1) if X.size else np.zeros((y.size, prior.m.size))
    if X.shape[1] != prior.m.size:
        raise ValidationError(f"X has {X.shape[1]} columns, prior has {prior.m.size}")
    if X.shape[0] != y.size:
        raise ValidationError(f"X has {X.shape[0]} rows, y has {y.size}")
    q = prior.m.size
    if q == 0:
        return BayesLinearPosterior(prior.m, prior.M, prior.a + y.size / 2, prior.b + 0.5 * float(y @ y))
    Minv, _ = _chol_inv_logdet(prior.M)
    precision = X.T @ X + Minv
    M_tilde = cho_solve(cho_factor(precision, lower=True), np.eye(q))
    M_tilde = 0.5 * (M_tilde + M_tilde.T)
    m_tilde = M_tilde @ (Minv @ prior.m + X.T @ y)
    b_tilde = prior.b + 0.5 * float(
        y @ y + prior.m @ Minv @ prior.m - m_tilde @ precision @ m_tilde
    )
    return BayesLinearPosterior(m_tilde, M_tilde, prior.a + y.size / 2, b_tilde)


def _log_nig_density(beta, s2, m, M, a, b) -> float:
    """Normal-inverse-gamma log density at ``(beta, s2)``."""
    q = m.size
    out = a * np.log(b) - gammaln(a) - (a + 1) * np.log(s2) - b / s2
    if q:
        Minv, logdet = _chol_inv_logdet(M)
        r = beta - m
        out += -0.5 * q * (LOG_2PI + np.log(s2)) - 0.5 * logdet - 0.5 * float(r @ Minv @ r) / s2
    return float(out)


def sample_posterior(post: BayesLinearPosterior, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(beta, s2)`` pairs from a normal-inverse-gamma law."""
    rng = np.random.default_rng(rng)
    s2 = post.b_tilde / rng.gamma(post.a_tilde, size=n)
    q = post.m_tilde.size
    if q == 0:
        return np.zeros((n, 0)), s2
    L = cholesky(post.M_tilde, lower=True)
    z = rng.standard_normal((n, q))
    return post.m_tilde + np.sqrt(s2)[:, None] * (z @ L.T), s2


def g_prior(X_sel: np.ndarray, g: float | None = None, a: float = DEFAULT_A, b: float = DEFAULT_B) -> BayesLinearPrior:
    """Zellner g-prior ``M = g (X'X)^-1`` with zero mean; ``g`` defaults to n."""
    X_sel = np.asarray(X_sel, dtype=float)
    q = X_sel.shape[1]
    g = X_sel.shape[0] if g is None else g
    if q == 0:
        return BayesLinearPrior(np.zeros(0), np.zeros((0, 0)), a, b)
    return BayesLinearPrior(np.zeros(q), g * np.linalg.inv(X_sel.T @ X_sel), a, b)


def log_marginal_likelihood(gamma, X_full, y, prior_builder: Callable = g_prior) -> float:
    """Log evidence ``log p(y | model)`` of the columns selected by ``gamma``.

    Uses ``p(y) = p(y | beta, s2) p(beta, s2) / p(beta, s2 | y)``, evaluated at
    the posterior mode where all three terms are well scaled.  Returns
    ``-inf`` when the model cannot be evaluated.
    """
    gamma = np.asarray(gamma).astype(bool)
    X_full = np.asarray(X_full, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    X = X_full[:, gamma]
    n = y.size
    try:
        prior = prior_builder(X)
        post = posterior_update(prior, X, y)
    except (ValidationError, LinAlgError, np.linalg.LinAlgError):
        logger.debug("model %s failed to evaluate", np.flatnonzero(gamma))
        return float("-inf")
    if not post.b_tilde > 0:
        return float("-inf")
    beta = post.m_tilde
    s2 = post.b_tilde / (post.a_tilde + 1.0)
    resid = y - X @ beta
    loglik = -0.5 * n * (LOG_2PI + np.log(s2)) - 0.5 * float(resid @ resid) / s2
    lp_prior = _log_nig_density(beta, s2, prior.m, prior.M, prior.a, prior.b)
    lp_post = _log_nig_density(beta, s2, post.m_tilde, post.M_tilde, post.a_tilde, post.b_tilde)
    out = loglik + lp_prior - lp_post
    return float(out) if np.isfinite(out) else float("-inf")


class _GPriorEvidence:
    """Closed-form g-prior evidence from cached sufficient statistics."""

    def __init__(self, X, y, g=None, a=DEFAULT_A, b=DEFAULT_B):
        self.n = y.size
        self.g = float(self.n if g is None else g)
        self.a, self.b = a, b
        self.xtx = X.T @ X
        self.xty = X.T @ y
        self.yty = float(y @ y)
        self.a_tilde = a + self.n / 2
        self.const = -0.5 * self.n * LOG_2PI + a * np.log(b) - gammaln(a) + gammaln(self.a_tilde)

    def __call__(self, gamma: np.ndarray) -> float:
        idx = np.flatnonzero(gamma)
        q = idx.size
        fit = 0.0
        if q:
            try:
                cf = cho_factor(self.xtx[np.ix_(idx, idx)], lower=True)
            except LinAlgError:
                return float("-inf")
            c = self.xty[idx]
            fit = float(c @ cho_solve(cf, c))
        b_tilde = self.b + 0.5 * (self.yty - self.g / (1.0 + self.g) * fit)
        if not b_tilde > 0:
            return float("-inf")
        return float(self.const - 0.5 * q * np.log1p(self.g) - self.a_tilde * np.log(b_tilde))


# -- model priors -------------------------------------------------------------

def prior_model_prob(gamma, w: InclusionPrior) -> float:
    gamma = np.asarray(gamma).astype(bool)
    if gamma.size != w.d:
        raise ValidationError("gamma and inclusion weights differ in length")
    return float(np.prod(np.where(gamma, w.w, 1.0 - w.w)))


def log_prior_model_prob(gamma, w: InclusionPrior) -> float:
    gamma = np.asarray(gamma).astype(bool)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(np.where(gamma, w.w, 1.0 - w.w))))


def expected_size_weight(target_size: float, d: int) -> float:
    """Bernoulli weight giving expected model size ``target_size`` out of ``d``."""
    if d < 1:
        raise ValidationError("need at least one factor")
    if not 0 < target_size <= d:
        raise ValidationError(f"target model size must lie in (0, {d}]")
    return target_size / d


def initial_prior(d: int, forced: Iterable[int], theta: float) -> InclusionPrior:
    forced = frozenset(forced)
    w = np.full(d, float(theta))
    return InclusionPrior(w, forced)


def propagated_prior(previous: PIPResult, clip=PIP_CLIP) -> InclusionPrior:
    """Previous PIPs become the next prior, clipped away from 0 and 1."""
    return InclusionPrior(np.clip(previous.pip, *clip))


# -- search -------------------------------------------------------------------

def standardize(X, y) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean, unit-variance predictors and response (intercept absorbed)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size or y.size < 3:
        raise ValidationError("need at least 3 aligned observations")
    sx = X.std(axis=0)
    sy = y.std()
    if np.any(sx == 0) or sy == 0:
        raise ValidationError("constant return series cannot be standardized")
    return (X - X.mean(axis=0)) / sx, (y - y.mean()) / sy


def _evidence(X, y, prior_builder):
    if prior_builder is None:
        return _GPriorEvidence(X, y)
    return lambda gamma: log_marginal_likelihood(gamma, X, y, prior_builder)


def enumerate_pips(X, y, w: InclusionPrior, prior_builder=None) -> PIPResult:
    """Exact PIPs by summing over every model with non-zero prior mass."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] != w.d:
        raise ValidationError("X columns and inclusion weights differ in length")
    evidence = _evidence(X, np.asarray(y, float).ravel(), prior_builder)
    free = [k for k in range(w.d) if k not in w.forced and w.w[k] > 0]
    base = np.zeros(w.d, dtype=bool)
    base[list(w.forced)] = True
    models, logpost = [], []
    for bits in itertools.product((False, True), repeat=len(free)):
        g = base.copy()
        g[free] = bits
        lp = evidence(g) + log_prior_model_prob(g, w)
        if np.isfinite(lp):
            models.append(g)
            logpost.append(lp)
    if not models:
        raise ValidationError("no model with finite posterior mass")
    logpost = np.array(logpost)
    prob = np.exp(logpost - logsumexp(logpost))
    pip = prob @ np.array(models, dtype=float)
    return PIPResult.from_pip(pip, w.forced, n_models_visited=len(models),
                              mcmc_acceptance_rate=float("nan"), method="enumeration")


def mcmc_model_search(
    X,
    y,
    w: InclusionPrior,
    n_iter: int = 50_000,
    burn_in: int | None = None,
    seed=0,
    prior_builder=None,
) -> PIPResult:
    """Metropolis-Hastings over inclusion vectors with single-flip proposals.

    Each step flips one uniformly chosen non-forced coordinate (an add or a
    delete).  PIPs are visit frequencies after ``burn_in`` (default 20% of
    ``n_iter``).  Deterministic for a given ``seed``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[1] != w.d:
        raise ValidationError("X columns and inclusion weights differ in length")
    burn_in = int(0.2 * n_iter) if burn_in is None else int(burn_in)
    if not 0 <= burn_in < n_iter:
        raise ValidationError("need 0 <= burn_in < n_iter")
    rng = np.random.default_rng(seed)
    evidence = _evidence(X, y, prior_builder)
    free = np.array([k for k in range(w.d) if k not in w.forced], dtype=int)

    gamma = np.zeros(w.d, dtype=bool)
    gamma[list(w.forced)] = True
    cache: dict[bytes, float] = {}

    def log_post(g):
        key = g.tobytes()
        if key not in cache:
            cache[key] = evidence(g) + log_prior_model_prob(g, w)
        return cache[key]

    current = log_post(gamma)
    if not np.isfinite(current):
        raise ValidationError("forced model has zero posterior mass")
    counts = np.zeros(w.d)
    accepted = 0
    if free.size:
        picks = free[rng.integers(free.size, size=n_iter)]
        log_u = np.log(rng.random(n_iter))
    for it in range(n_iter):
        if free.size:
            k = picks[it]
            gamma[k] = not gamma[k]
            proposal = log_post(gamma)
            if log_u[it] < proposal - current:
                current = proposal
                accepted += 1
            else:
                gamma[k] = not gamma[k]
        if it >= burn_in:
            counts += gamma
    kept = n_iter - burn_in
    rate = accepted / n_iter if free.size else float("nan")
    flagged = bool(free.size and accepted == 0)
    if flagged:
        logger.warning("MCMC model search rejected every proposal")
    visited = sum(1 for v in cache.values() if np.isfinite(v))
    return PIPResult.from_pip(counts / kept, w.forced, n_models_visited=visited,
                              mcmc_acceptance_rate=rate, method="mcmc", flagged=flagged)


def search(X, y, w: InclusionPrior, method="auto", enumerate_max=12, **mcmc_kw) -> PIPResult:
    n_free = sum(1 for k in range(w.d) if k not in w.forced and w.w[k] > 0)
    if method == "enumeration" or (method == "auto" and n_free <= enumerate_max):
        return enumerate_pips(X, y, w, mcmc_kw.get("prior_builder"))
    if method not in ("auto", "mcmc"):
        raise ValidationError(f"unknown search method {method!r}")
    return mcmc_model_search(X, y, w, **mcmc_kw)


def median_model(pip) -> np.ndarray:
    return (np.asarray(pip) > 0.5).astype(np.int8)


def select_and_propagate(
    previous,
    asset_returns,
    factor_returns,
    target_size: float | None = None,
    method: str = "auto",
    **search_kw,
) -> tuple[np.ndarray, PIPResult]:
    """Select one asset's factors and return its row plus the PIPs to carry forward.

    ``previous`` is the last quarter's :class:`PIPResult` (its PIPs become the
    clipped prior), an explicit :class:`InclusionPrior`, or the iterable of
    forced factor indices for the first run, in which case all other factors
    get weight ``target_size / d``.
    """
    X, y = standardize(factor_returns, asset_returns)
    d = X.shape[1]
    if isinstance(previous, PIPResult):
        w = propagated_prior(previous)
    elif isinstance(previous, InclusionPrior):
        w = previous
    else:
        forced = frozenset(previous)
        theta = expected_size_weight(target_size, d) if target_size else 0.0
        w = initial_prior(d, forced, theta)
    result = search(X, y, w, method=method, **search_kw)
    row = result.selected.copy()
    if row.sum() == 0:
        best = int(np.argmax(result.pip))
        logger.warning("median model is empty; keeping factor %d (PIP %.3f)", best, result.pip[best])
        row[best] = 1
    return row, result


def select_factors(
    asset_returns,
    factor_returns,
    asset_ids: Sequence[str],
    factor_names: Sequence[str],
    previous: Mapping[str, object],
    target_size: float,
    seed: Sequence[int] | int = 0,
    method: str = "auto",
    **search_kw,
) -> tuple[FactorAssignment, dict[str, PIPResult]]:
    """Run :func:`select_and_propagate` for every asset of a return window.

    Each asset's chain gets its own RNG stream derived from ``(seed, asset index)``.
    """
    asset_returns = np.asarray(asset_returns, dtype=float)
    factor_returns = np.asarray(factor_returns, dtype=float)
    if asset_returns.shape[0] == 0:
        raise ValidationError("empty selection window")
    if asset_returns.shape[0] != factor_returns.shape[0]:
        raise ValidationError("asset and factor windows are not aligned")
    seed = list(np.atleast_1d(seed).astype(int))
    rows, results = [], {}
    for i, asset in enumerate(asset_ids):
        kw = dict(search_kw)
        if method != "enumeration":
            kw["seed"] = seed + [i]
        row, res = select_and_propagate(
            previous[asset], asset_returns[:, i], factor_returns, target_size, method=method, **kw
        )
        rows.append(row)
        results[asset] = res
    return FactorAssignment(np.array(rows), asset_ids, factor_names), results


# -- files --------------------------------------------------------------------

def read_forced_priors(path, factor_names: Sequence[str]) -> dict[str, frozenset]:
    """CSV ``asset_id,country_factor,industry_factor`` -> forced factor indices."""
    names = list(factor_names)
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"asset_id", "country_factor", "industry_factor"}
        if reader.fieldnames is None or not expected <= set(reader.fieldnames):
            raise ValidationError(f"{path}: header must contain {sorted(expected)}")
        for row in reader:
            idx = set()
            for col in ("country_factor", "industry_factor"):
                label = (row[col] or "").strip()
                if label:
                    if label not in names:
                        raise ValidationError(f"{path}: unknown factor {label!r}")
                    idx.add(names.index(label))
            out[row["asset_id"]] = frozenset(idx)
    return out


def write_pip_history(path, history: Iterable[tuple[str, Mapping[str, PIPResult]]], factor_names) -> None:
    """Rows ``date,asset_id,factor,pip`` for every (quarter, asset, factor)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "asset_id", "factor", "pip"])
        for date, results in history:
            for asset, res in results.items():
                for f, p in zip(factor_names, res.pip):
                    w.writerow([date, asset, f, f"{p:.6f}"])
