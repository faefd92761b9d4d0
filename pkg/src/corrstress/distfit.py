"""Multivariate normal-inverse-Gaussian (NIG) law and its EM calibration.

The NIG law is the normal mean-variance mixture

    X = mu + W gamma + sqrt(W) A Z,    Sigma = A A',

with W inverse-Gaussian, i.e. generalized inverse-Gaussian GIG(-1/2, chi, psi).
Fitted parameters are normalized so that E[W] = 1, which forces chi = psi.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky
from scipy.optimize import minimize_scalar
from scipy.special import gammaln, kve

from .exceptions import IngestError, SingularCovarianceError, ValidationError

logger = logging.getLogger(__name__)

LAMBDA_GH = -0.5
LOG_2PI = np.log(2.0 * np.pi)
MONOTONE_SLACK = 1e-8
LOG_KAPPA_BOUNDS = (-20.0, 20.0)


def log_kv(nu, x):
    """``log K_nu(x)`` for ``x > 0`` without overflow or underflow.

    Uses the exponentially scaled Bessel function and falls back to the
    small- and large-argument asymptotics where it is not representable.
    """
    nu = np.abs(np.asarray(nu, dtype=float))
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        out = np.log(kve(nu, x)) - x
        bad = ~np.isfinite(out)
        if np.any(bad):
            nu_b, x_b = np.broadcast_to(nu, out.shape)[bad], np.broadcast_to(x, out.shape)[bad]
            small = np.where(
                nu_b > 0,
                gammaln(np.maximum(nu_b, 1e-300)) - np.log(2.0) + nu_b * np.log(2.0 / x_b),
                np.log(np.maximum(-np.log(x_b / 2.0) - np.euler_gamma, 1e-300)),
            )
            large = 0.5 * np.log(np.pi / (2.0 * x_b)) - x_b
            out = np.array(out, dtype=float)
            out[bad] = np.where(x_b < np.sqrt(nu_b + 1.0), small, large)
    return out if out.ndim else float(out)


def gig_moment(lam: float, chi, psi, alpha: float = 1.0):
    """``E[W^alpha]`` for ``W ~ GIG(lam, chi, psi)``."""
    chi = np.asarray(chi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    s = np.sqrt(chi * psi)
    return np.exp(0.5 * alpha * np.log(chi / psi) + log_kv(lam + alpha, s) - log_kv(lam, s))


@dataclass(frozen=True)
class NIGParams:
    """Parameters of ``GH_d(-1/2, chi, psi, mu, Sigma, gamma)``.

    Parameters
    ----------
    chi, psi : float
        Inverse-Gaussian mixing parameters, both positive.
    mu : array_like, shape (d,)
        Location.
    sigma : array_like, shape (d, d)
        Dispersion matrix, symmetric positive definite.
    gamma : array_like, shape (d,)
        Skewness vector.
    labels : sequence of str, optional
        Coordinate names carried into the JSON file.
    """

    chi: float
    psi: float
    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    labels: tuple = ()
    lambda_gh: float = field(default=LAMBDA_GH, init=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        d = mu.size
        sigma = np.asarray(self.sigma, dtype=float).reshape(d, d)
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if gamma.size != d:
            raise ValidationError(f"gamma has length {gamma.size}, expected {d}")
        if not (np.isfinite(self.chi) and np.isfinite(self.psi) and self.chi > 0 and self.psi > 0):
            raise ValidationError("chi and psi must be positive and finite")
        if np.max(np.abs(sigma - sigma.T)) > 1e-10 * max(1.0, np.max(np.abs(sigma))):
            raise ValidationError("Sigma must be symmetric")
        sigma = 0.5 * (sigma + sigma.T)
        try:
            cholesky(sigma, lower=True)
        except LinAlgError:
            raise ValidationError("Sigma must be positive definite") from None
        labels = tuple(self.labels)
        if labels and len(labels) != d:
            raise ValidationError(f"{len(labels)} labels for dimension {d}")
        for name, arr in (("mu", mu), ("sigma", sigma), ("gamma", gamma)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "chi", float(self.chi))
        object.__setattr__(self, "psi", float(self.psi))
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.mu.size

    def mixing_mean(self) -> float:
        return float(np.sqrt(self.chi / self.psi))

    def mixing_var(self) -> float:
        m = self.mixing_mean()
        return m ** 3 / self.chi

    def mean(self) -> np.ndarray:
        return self.mu + self.mixing_mean() * self.gamma

    def covariance(self) -> np.ndarray:
        return self.mixing_mean() * self.sigma + self.mixing_var() * np.outer(self.gamma, self.gamma)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "labels": list(self.labels),
            "chi": self.chi,
            "psi": self.psi,
            "mu": self.mu.tolist(),
            "gamma": self.gamma.tolist(),
            "sigma": self.sigma.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NIGParams":
        try:
            params = cls(data["chi"], data["psi"], data["mu"], data["sigma"], data["gamma"],
                         tuple(data.get("labels", ())))
        except KeyError as exc:
            raise ValidationError(f"NIG parameter record lacks {exc.args[0]!r}") from None
        if "dim" in data and int(data["dim"]) != params.dim:
            raise ValidationError("declared dimension does not match mu")
        return params

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NIGParams":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestError(f"cannot read NIG parameters from {path}: {exc}") from exc


@dataclass(frozen=True)
class FitDiagnostics:
    loglik_trace: np.ndarray
    n_iter: int
    converged: bool
    ks_pvalues: np.ndarray
    monotone: bool = True


# -- density ------------------------------------------------------------------

class _Factored:
    """Cholesky of Sigma plus the quantities the density needs."""

    def __init__(self, params: NIGParams):
        self.cf = cho_factor(params.sigma, lower=True)
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.cf[0]))))
        self.sinv_gamma = cho_solve(self.cf, params.gamma)
        self.g2 = float(params.gamma @ self.sinv_gamma)

    def quad(self, centered: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ij->i", centered, cho_solve(self.cf, centered.T).T)


def _logdensity(X: np.ndarray, params: NIGParams, fac: _Factored | None = None) -> np.ndarray:
    fac = fac or _Factored(params)
    d = params.dim
    lam = LAMBDA_GH
    chi, psi = params.chi, params.psi
    centered = X - params.mu
    q = fac.quad(centered)
    a = psi + fac.g2
    b = chi + q
    nu = lam - 0.5 * d
    const = (
        -0.5 * lam * np.log(chi * psi) + lam * np.log(psi) - 0.5 * d * LOG_2PI
        - 0.5 * fac.logdet - log_kv(lam, np.sqrt(chi * psi))
    )
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        out = (
            const
            + log_kv(nu, np.sqrt(a * b))
            + centered @ fac.sinv_gamma
            + 0.5 * (0.5 * d - lam) * (np.log(a) - np.log(b))
        )
    out = np.asarray(out, dtype=float)
    out[~np.isfinite(out) & ~np.isposinf(out)] = -np.inf
    return out


def nig_logdensity(x, params: NIGParams):
    """Log density of the NIG law; one value per row of ``x``.

    Returns ``-inf`` (never NaN) where the density underflows.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 0 if params.dim == 1 else x.ndim == 1
    X = x.reshape(-1, params.dim)
    out = _logdensity(X, params)
    return float(out[0]) if single else out


def nig_loglik(samples, params: NIGParams) -> float:
    return float(np.sum(_logdensity(np.asarray(samples, dtype=float).reshape(-1, params.dim), params)))


# -- sampling -----------------------------------------------------------------

def sample_inverse_gaussian(mean: float, shape: float, n: int, rng) -> np.ndarray:
    """Inverse-Gaussian draws by the Michael-Schucany-Haas transformation."""
    rng = np.random.default_rng(rng)
    y = rng.standard_normal(n) ** 2
    u = rng.random(n)
    # the two roots multiply to mean^2; compute the large one stably
    big = mean + mean * mean * y / (2.0 * shape) + mean / (2.0 * shape) * np.sqrt(
        4.0 * mean * shape * y + (mean * y) ** 2
    )
    small = mean * mean / big
    return np.where(u <= mean / (mean + small), small, big)


def sample_nig(params: NIGParams, n_samples: int, seed=None, return_mixing: bool = False):
    """Draw ``mu + W gamma + sqrt(W) A Z``; deterministic for a given ``seed``."""
    if n_samples < 1:
        raise ValidationError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    w = sample_inverse_gaussian(params.mixing_mean(), params.chi, n_samples, rng)
    A = cholesky(params.sigma, lower=True)
    z = rng.standard_normal((n_samples, params.dim))
    x = params.mu + w[:, None] * params.gamma + np.sqrt(w)[:, None] * (z @ A.T)
    return (x, w) if return_mixing else x


# -- marginals and goodness of fit -------------------------------------------

def marginal_params(params: NIGParams, weights) -> NIGParams:
    """Law of ``w'X``: NIG with the same mixing and projected mu, gamma, Sigma."""
    w = np.asarray(weights, dtype=float).ravel()
    if w.size != params.dim:
        raise ValidationError(f"weights have length {w.size}, expected {params.dim}")
    if not np.any(w):
        raise ValidationError("weights must not all be zero")
    return NIGParams(params.chi, params.psi, [w @ params.mu], [[w @ params.sigma @ w]], [w @ params.gamma])


def nig_cdf(params: NIGParams, grid_size: int = 100001, width: float = 40.0) -> Callable:
    """CDF of a one-dimensional NIG law by integrating its density on a grid."""
    if params.dim != 1:
        raise ValidationError("nig_cdf needs a one-dimensional law")
    m = float(params.mean()[0])
    s = float(np.sqrt(params.covariance()[0, 0]))
    grid = np.linspace(m - width * s, m + width * s, grid_size)
    dens = np.exp(_logdensity(grid[:, None], params))
    cdf = cumulative_trapezoid(dens, grid, initial=0.0)
    total = cdf[-1]
    if abs(total - 1.0) > 1e-4:
        logger.warning("density mass on the CDF grid is %.6f", total)
    cdf /= total

    def evaluate(x):
        return np.interp(x, grid, cdf, left=0.0, right=1.0)

    return evaluate


@dataclass(frozen=True)
class KSResult:
    statistic: float
    pvalue: float


def ks_test(samples_1d, cdf_evaluator: Callable) -> KSResult:
    """One-sample Kolmogorov-Smirnov test against ``cdf_evaluator``."""
    x = np.asarray(samples_1d, dtype=float).ravel()
    if x.size < 20:
        raise ValidationError("KS test needs at least 20 samples")
    res = stats.kstest(x, cdf_evaluator)
    return KSResult(float(res.statistic), float(res.pvalue))


def marginal_ks_pvalues(samples, params: NIGParams) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    out = np.empty(params.dim)
    for k in range(params.dim):
        e = np.zeros(params.dim)
        e[k] = 1.0
        out[k] = ks_test(samples[:, k], nig_cdf(marginal_params(params, e))).pvalue
    return out


# -- EM calibration -----------------------------------------------------------

def _e_step(X, params: NIGParams, fac: _Factored):
    """Conditional moments E[1/W | x] and E[W | x] of GIG(lam - d/2, chi + Q, psi + g2)."""
    d = params.dim
    nu = LAMBDA_GH - 0.5 * d
    b = params.chi + fac.quad(X - params.mu)
    a = params.psi + fac.g2
    s = np.sqrt(a * b)
    base = log_kv(nu, s)
    log_ratio = 0.5 * (np.log(b) - np.log(a))
    delta = np.exp(log_kv(nu - 1.0, s) - base - log_ratio)
    eta = np.exp(log_kv(nu + 1.0, s) - base + log_ratio)
    return delta, eta


def _with(params: NIGParams, **kw) -> NIGParams:
    fields = dict(chi=params.chi, psi=params.psi, mu=params.mu, sigma=params.sigma,
                  gamma=params.gamma, labels=params.labels)
    fields.update(kw)
    return NIGParams(**fields)


def fit_em(samples, tol: float = 1e-8, max_iter: int = 1000, labels: Sequence[str] = ()) -> tuple[NIGParams, FitDiagnostics]:
    """Fit a NIG law by MCECM with the mixing mean normalized to one.

    CM step one updates ``mu``, ``gamma`` and ``Sigma`` in closed form; step
    two maximizes the likelihood over ``kappa = chi = psi`` on a log scale.

    Parameters
    ----------
    samples : array_like, shape (n, d)
    tol : float
        Stop when the relative change of the log-likelihood drops below this.
    max_iter : int
    labels : sequence of str, optional

    Returns
    -------
    params : NIGParams
    diagnostics : FitDiagnostics

    Raises
    ------
    ValidationError
        Fewer than ``10 d`` samples or non-finite entries.
    SingularCovarianceError
        Sample or weighted covariance is singular; carries ``diagnostics``.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n < 10 * d:
        raise ValidationError(f"need at least {10 * d} samples for dimension {d}, got {n}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("samples contain non-finite values")
    xbar = X.mean(axis=0)
    S = np.cov(X, rowvar=False, ddof=0).reshape(d, d)
    if np.linalg.cond(S) > 1e12:
        err = SingularCovarianceError("sample covariance is singular")
        err.diagnostics = FitDiagnostics(np.array([]), 0, False, np.full(d, np.nan))
        raise err
    try:
        params = NIGParams(1.0, 1.0, xbar, S, np.zeros(d), tuple(labels))
    except ValidationError as exc:
        raise SingularCovarianceError(str(exc)) from exc
    trace = [nig_loglik(X, params)]
    converged = False
    monotone = True

    def neg_ll(t, base):
        k = np.exp(t)
        return -nig_loglik(X, _with(base, chi=k, psi=k))

    it = 0
    for it in range(1, max_iter + 1):
        fac = _Factored(params)
        delta, eta = _e_step(X, params, fac)
        dbar, ebar = delta.mean(), eta.mean()
        denom = dbar * ebar - 1.0
        if denom > 1e-14:
            gamma = (delta[:, None] * (xbar - X)).mean(axis=0) / denom
        else:
            gamma = np.zeros(d)
        mu = ((delta[:, None] * X).mean(axis=0) - gamma) / dbar
        C = X - mu
        sigma = (delta[:, None] * C).T @ C / n - ebar * np.outer(gamma, gamma)
        try:
            cm1 = _with(params, mu=mu, gamma=gamma, sigma=sigma)
        except ValidationError as exc:
            err = SingularCovarianceError(f"weighted covariance became singular at iteration {it}")
            err.diagnostics = FitDiagnostics(np.array(trace), it, False, np.full(d, np.nan))
            raise err from exc
        t0 = np.log(params.chi)
        res = minimize_scalar(neg_ll, bounds=LOG_KAPPA_BOUNDS, args=(cm1,), method="bounded",
                              options={"xatol": 1e-10})
        ll_keep = -neg_ll(t0, cm1)
        if res.fun < -ll_keep:
            k = float(np.exp(res.x))
            params, ll = _with(cm1, chi=k, psi=k), float(-res.fun)
        else:
            params, ll = cm1, ll_keep
        prev = trace[-1]
        trace.append(ll)
        if ll < prev - MONOTONE_SLACK * max(1.0, abs(prev)):
            logger.warning("EM log-likelihood decreased from %.10g to %.10g", prev, ll)
            monotone = False
            break
        if abs(ll - prev) <= tol * max(1.0, abs(prev)):
            converged = True
            break
    if not converged and monotone:
        logger.warning("EM stopped after %d iterations without converging", it)
    pvals = marginal_ks_pvalues(X, params)
    return params, FitDiagnostics(np.array(trace), it, converged, pvals, monotone)
