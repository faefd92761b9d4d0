"""Parametric factor correlation surface, its OLS calibration and PSD repair.

Pairwise correlations are driven by a binary asset/factor assignment::

    c_ij = tanh(eta + sum_k lambda_k |1_ki - 1_kj| + sum_k nu_k 1_ki 1_kj)

``lambda_k`` ("inter") acts when exactly one asset of the pair carries factor
``k``; ``nu_k`` ("intra") acts when both do.  Calibration regresses
``arctanh`` of an empirical correlation matrix on the pair design.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import CalibrationError, ValidationError

logger = logging.getLogger(__name__)

PSD_TOL = 1e-10
BLEND_EPSILON = 1e-8
CLAMP = 1.0 - 1e-7
GRAM_COND_MAX = 1e10
SOURCES = ("empirical", "model", "repaired", "stressed")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FactorAssignment:
    """Binary asset x factor indicator matrix with labels."""

    indicators: np.ndarray
    asset_ids: tuple
    factor_names: tuple

    def __post_init__(self):
        ind = np.asarray(self.indicators)
        if ind.ndim != 2:
            raise ValidationError("indicators must be a 2-D matrix")
        if not np.all((ind == 0) | (ind == 1)):
            raise ValidationError("indicator entries must be exactly 0 or 1")
        ind = ind.astype(np.int8)
        ind.flags.writeable = False
        object.__setattr__(self, "indicators", ind)
        object.__setattr__(self, "asset_ids", tuple(str(a) for a in self.asset_ids))
        object.__setattr__(self, "factor_names", tuple(str(f) for f in self.factor_names))
        p, d = ind.shape
        if len(self.asset_ids) != p or len(self.factor_names) != d:
            raise ValidationError(
                f"label lengths ({len(self.asset_ids)}, {len(self.factor_names)}) "
                f"do not match indicator shape {ind.shape}"
            )
        if len(set(self.asset_ids)) != p or len(set(self.factor_names)) != d:
            raise ValidationError("asset and factor labels must be unique")
        empty = [a for a, row in zip(self.asset_ids, ind) if row.sum() == 0]
        if empty:
            raise ValidationError(f"assets without any factor: {empty}")

    @property
    def n_assets(self) -> int:
        return self.indicators.shape[0]

    @property
    def n_factors(self) -> int:
        return self.indicators.shape[1]

    def to_dict(self) -> dict:
        return {
            "assets": list(self.asset_ids),
            "factors": list(self.factor_names),
            "indicators": self.indicators.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FactorAssignment":
        try:
            return cls(np.array(data["indicators"]), data["assets"], data["factors"])
        except KeyError as exc:
            raise ValidationError(f"assignment JSON lacks key {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FactorAssignment":
        return cls.from_dict(json.loads(Path(path).read_text()))


def coefficient_names(factor_names: Sequence[str]) -> list[str]:
    return ["eta"] + [f"lambda_{f}" for f in factor_names] + [f"nu_{f}" for f in factor_names]


@dataclass(frozen=True)
class CorrelationParams:
    """Coefficients ``(eta, lambda_1..d, nu_1..d)``.

    ``eta`` is ``None`` when the constant had to be omitted; it then acts as
    zero in the correlation surface.
    """

    eta: float | None
    lam: np.ndarray
    nu: np.ndarray
    factor_names: tuple = ()
    timestamp: dt.date | None = None

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        nu = np.atleast_1d(np.asarray(self.nu, dtype=float))
        if lam.ndim != 1 or lam.shape != nu.shape:
            raise ValidationError("lambda and nu must be vectors of equal length")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(nu))):
            raise ValidationError("coefficients must be finite")
        if self.eta is not None:
            if not np.isfinite(self.eta):
                raise ValidationError("eta must be finite")
            object.__setattr__(self, "eta", float(self.eta))
        names = tuple(str(f) for f in self.factor_names) or tuple(
            f"f{k + 1}" for k in range(lam.size)
        )
        if len(names) != lam.size:
            raise ValidationError("factor_names length does not match coefficients")
        object.__setattr__(self, "lam", _frozen(lam))
        object.__setattr__(self, "nu", _frozen(nu))
        object.__setattr__(self, "factor_names", names)

    @property
    def n_factors(self) -> int:
        return self.lam.size

    @property
    def names(self) -> list[str]:
        return coefficient_names(self.factor_names)

    def to_vector(self) -> np.ndarray:
        """Full ``2d+1`` vector; an omitted eta enters as 0."""
        eta = 0.0 if self.eta is None else self.eta
        return np.concatenate([[eta], self.lam, self.nu])

    @classmethod
    def from_vector(cls, beta, factor_names=(), timestamp=None, eta_omitted=False):
        beta = np.asarray(beta, dtype=float)
        if beta.ndim != 1 or beta.size % 2 != 1:
            raise ValidationError("beta vector must have odd length 2d+1")
        d = (beta.size - 1) // 2
        eta = None if eta_omitted else float(beta[0])
        return cls(eta, beta[1 : d + 1], beta[d + 1 :], tuple(factor_names), timestamp)

    def as_dict(self) -> dict:
        vec = self.to_vector()
        out = dict(zip(self.names, map(float, vec)))
        if self.eta is None:
            out["eta"] = None
        return out


@dataclass(frozen=True)
class CorrelationMatrix:
    values: np.ndarray
    is_psd: bool
    source: str = "model"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValidationError("correlation matrix must be square")
        if np.max(np.abs(v - v.T), initial=0.0) > 1e-12:
            raise ValidationError("correlation matrix must be symmetric")
        if not np.all(np.diag(v) == 1.0):
            raise ValidationError("correlation matrix diagonal must be exactly 1")
        if np.any(np.abs(v) > 1.0):
            raise ValidationError("correlations must lie in [-1, 1]")
        if self.source not in SOURCES:
            raise ValidationError(f"unknown source {self.source!r}")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "is_psd", bool(self.is_psd))

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.values)[0])

    @classmethod
    def checked(cls, values, source) -> "CorrelationMatrix":
        values = np.asarray(values, dtype=float)
        return cls(values, bool(np.linalg.eigvalsh(values)[0] >= -PSD_TOL), source)


@dataclass(frozen=True)
class PairDesign:
    """Regression design with one row per unordered pair ``i < j``."""

    matrix: np.ndarray
    response: np.ndarray
    columns: tuple
    pairs: tuple  # (row_index_i, row_index_j) arrays


@dataclass(frozen=True)
class CalibrationFit:
    params: CorrelationParams
    rss: float
    r_squared: float
    pruned: tuple = ()
    condition_number: float = float("nan")
    fitted: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True)
class RepairResult:
    matrix: CorrelationMatrix
    converged: bool
    n_iter: int
    distance: float


def pair_features(indicators: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pair index arrays plus inter ``|a_i - a_j|`` and intra ``a_i a_j`` columns."""
    ind = np.asarray(indicators, dtype=float)
    iu, ju = np.triu_indices(ind.shape[0], k=1)
    a, b = ind[iu], ind[ju]
    return (iu, ju), np.abs(a - b), a * b


def _check_dims(params: CorrelationParams, assignment: FactorAssignment) -> None:
    if params.n_factors != assignment.n_factors:
        raise ValidationError(
            f"params carry {params.n_factors} factors, assignment has {assignment.n_factors}"
        )


def model_correlation(params: CorrelationParams, assignment: FactorAssignment) -> CorrelationMatrix:
    """Evaluate the tanh correlation surface for every asset pair."""
    _check_dims(params, assignment)
    (iu, ju), inter, intra = pair_features(assignment.indicators)
    eta = 0.0 if params.eta is None else params.eta
    c = np.tanh(eta + inter @ params.lam + intra @ params.nu)
    p = assignment.n_assets
    values = np.eye(p)
    values[iu, ju] = c
    values[ju, iu] = c
    return CorrelationMatrix.checked(values, "model")


def build_pair_design(
    assignment: FactorAssignment, empirical: CorrelationMatrix | np.ndarray, clamp: float = CLAMP
) -> PairDesign:
    if not 0.0 < clamp < 1.0:
        raise ValidationError("clamp must lie in (0, 1)")
    c = np.asarray(getattr(empirical, "values", empirical), dtype=float)
    p = assignment.n_assets
    if c.shape != (p, p):
        raise ValidationError(f"empirical matrix shape {c.shape} != ({p}, {p})")
    (iu, ju), inter, intra = pair_features(assignment.indicators)
    x = np.column_stack([np.ones(iu.size), inter, intra])
    y = np.arctanh(np.clip(c[iu, ju], -clamp, clamp))
    cols = ("const",) + tuple(coefficient_names(assignment.factor_names)[1:])
    return PairDesign(x, y, cols, (iu, ju))


def _gram_condition(x: np.ndarray) -> float:
    if x.shape[1] == 0:
        return 1.0
    s = np.linalg.svd(x, compute_uv=False)
    if x.shape[0] < x.shape[1] or s[-1] <= s[0] * 1e-300:
        return np.inf
    return float((s[0] / s[-1]) ** 2)


def calibrate_fit(
    empirical: CorrelationMatrix | np.ndarray,
    assignment: FactorAssignment,
    clamp: float = CLAMP,
    cond_max: float = GRAM_COND_MAX,
    timestamp: dt.date | None = None,
) -> CalibrationFit:
    """OLS fit of the coefficients to ``arctanh`` of the empirical pairs.

    All-zero design columns (a factor carried by no asset, or by every asset
    for the inter column) never enter the regression and get coefficient 0.
    The constant is dropped when the Gram matrix of the remaining design is
    singular or its condition number exceeds ``cond_max``; the fit is
    refused if the design is still ill-conditioned after that.
    """
    design = build_pair_design(assignment, empirical, clamp)
    x, y = design.matrix, design.response
    nonzero = [k for k in range(1, x.shape[1]) if np.any(x[:, k] != 0)]
    zero = [design.columns[k] for k in range(1, x.shape[1]) if k not in nonzero]

    pruned: list[str] = []
    active = [0] + nonzero
    cond = _gram_condition(x[:, active])
    if cond > cond_max:
        pruned.append("const")
        active = nonzero
        cond = _gram_condition(x[:, active])
    pruned.extend(zero)
    if not active or cond > cond_max:
        raise CalibrationError(
            f"pair design rank-deficient (Gram condition {cond:.3g}) after pruning {pruned}",
            pruned,
        )

    coef, *_ = np.linalg.lstsq(x[:, active], y, rcond=None)
    beta = np.zeros(x.shape[1])
    beta[active] = coef
    fitted = x[:, active] @ coef
    rss = float(np.sum((y - fitted) ** 2))
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else float(rss <= 1e-20)
    d = assignment.n_factors
    params = CorrelationParams(
        None if "const" in pruned else beta[0],
        beta[1 : d + 1],
        beta[d + 1 :],
        assignment.factor_names,
        timestamp,
    )
    if pruned:
        logger.debug("calibration pruned %s", pruned)
    return CalibrationFit(params, rss, r2, tuple(pruned), cond, fitted)


def calibrate(empirical, assignment: FactorAssignment, **kwargs) -> CorrelationParams:
    return calibrate_fit(empirical, assignment, **kwargs).params


def _symmetric_unit(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError("matrix must be square")
    a = 0.5 * (a + a.T)
    np.fill_diagonal(a, 1.0)
    return a


def _project_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    x = (v * np.maximum(w, 0.0)) @ v.T
    return 0.5 * (x + x.T)


def _finalize(y: np.ndarray) -> np.ndarray:
    y = 0.5 * (y + y.T)
    np.fill_diagonal(y, 1.0)
    return np.clip(y, -1.0, 1.0)


def nearest_correlation(a, tol: float = 1e-8, max_iter: int = 200) -> RepairResult:
    """Nearest correlation matrix in Frobenius norm.

    Alternating projections between the PSD cone and the unit-diagonal set,
    with Dykstra's correction applied to the PSD step.  Stops when the
    Frobenius change between successive unit-diagonal iterates drops below
    ``tol``.  Matrices that are already valid correlation matrices are
    returned unchanged.
    """
    a = _symmetric_unit(a)
    if np.all(np.abs(a) <= 1.0) and np.linalg.eigvalsh(a)[0] >= -PSD_TOL:
        return RepairResult(CorrelationMatrix(a, True, "repaired"), True, 0, 0.0)

    y = a.copy()
    ds = np.zeros_like(a)
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        r = y - ds
        x = _project_psd(r)
        ds = x - r
        y_next = x.copy()
        np.fill_diagonal(y_next, 1.0)
        change = np.linalg.norm(y_next - y, "fro")
        y = y_next
        if change < tol:
            converged = True
            break
    if not converged:
        logger.warning("nearest_correlation: no convergence after %d iterations", max_iter)

    y = _finalize(y)
    if np.linalg.eigvalsh(y)[0] < -PSD_TOL:
        # unit-diagonal iterate sits a hair outside the cone; rescale its projection
        x = _project_psd(y)
        s = 1.0 / np.sqrt(np.diag(x))
        y = _finalize(x * np.outer(s, s))
    m = CorrelationMatrix.checked(y, "repaired")
    return RepairResult(m, converged, n_iter, float(np.linalg.norm(y - a, "fro")))


def epsilon_blend(a, epsilon: float = BLEND_EPSILON) -> CorrelationMatrix:
    """``(1 - epsilon) * a + epsilon * I``; eigenvalues map to ``(1-e)l + e``."""
    if not 0.0 < epsilon < 1.0:
        raise ValidationError("epsilon must lie in (0, 1)")
    a = _symmetric_unit(a)
    out = (1.0 - epsilon) * a
    np.fill_diagonal(out, 1.0)
    return CorrelationMatrix.checked(out, "repaired")


def repair(a, source: str | None = None) -> CorrelationMatrix:
    """Apply the PSD policy: keep, blend (tiny negative eigenvalues) or project."""
    values = _symmetric_unit(getattr(a, "values", a))
    src = source or getattr(a, "source", "model")
    lo = np.linalg.eigvalsh(values)[0]
    if lo >= 0.0 and np.all(np.abs(values) <= 1.0):
        return CorrelationMatrix(values, True, src)
    if lo >= -PSD_TOL:
        return epsilon_blend(values, BLEND_EPSILON)
    return nearest_correlation(values).matrix


def _resolve_coefficient(name: str, factor_names: Sequence[str]) -> tuple[str, int]:
    if name == "eta":
        return "eta", -1
    for prefix, kind in (("lambda_", "lam"), ("inter_", "lam"), ("nu_", "nu"), ("intra_", "nu")):
        if name.startswith(prefix):
            label = name[len(prefix) :]
            if label in factor_names:
                return kind, list(factor_names).index(label)
            if label.isdigit() and 1 <= int(label) <= len(factor_names):
                return kind, int(label) - 1
    raise ValidationError(f"unknown coefficient {name!r}")


def apply_scenario(params: CorrelationParams, shifts: Mapping[str, float]) -> CorrelationParams:
    """Additive shifts keyed ``eta``, ``lambda_<factor>`` or ``nu_<factor>``.

    ``inter_``/``intra_`` prefixes and 1-based factor numbers are accepted as
    aliases.  A shift on an omitted eta starts from zero.
    """
    unknown = []
    resolved = []
    for name, delta in shifts.items():
        try:
            resolved.append((_resolve_coefficient(name, params.factor_names), float(delta)))
        except ValidationError:
            unknown.append(name)
    if unknown:
        raise ValidationError(f"unknown coefficients in scenario: {unknown}")
    eta, lam, nu = params.eta, params.lam.copy(), params.nu.copy()
    for (kind, k), delta in resolved:
        if kind == "eta":
            eta = (0.0 if eta is None else eta) + delta
        elif kind == "lam":
            lam[k] += delta
        else:
            nu[k] += delta
    return replace(params, eta=eta, lam=lam, nu=nu)


def stressed_correlation(params: CorrelationParams, assignment: FactorAssignment) -> CorrelationMatrix:
    m = model_correlation(params, assignment)
    if m.is_psd and m.min_eigenvalue >= 0.0:
        return m
    return repair(m)


# -- params CSV ---------------------------------------------------------------

def write_params_csv(path, history: Iterable[CorrelationParams], label: str | None = None) -> None:
    history = list(history)
    if not history:
        raise ValidationError("no parameters to write")
    names = history[0].names
    header = ["date"] + names + (["label"] if label is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for prm in history:
            if prm.names != names:
                raise ValidationError("all rows must share the same factor set")
            vec = prm.to_vector()
            row = [prm.timestamp.isoformat() if prm.timestamp else ""]
            row.append("" if prm.eta is None else repr(float(vec[0])))
            row += [repr(float(v)) for v in vec[1:]]
            if label is not None:
                row.append(label)
            w.writerow(row)


def read_params_csv(path) -> list[CorrelationParams]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty params file")
    header = rows[0]
    if header[:2] != ["date", "eta"]:
        raise ValidationError(f"{path}: header must start with date, eta")
    coef_cols = [h for h in header[2:] if h != "label"]
    d = len(coef_cols) // 2
    factors = [h[len("lambda_") :] for h in coef_cols[:d]]
    if coef_cols != coefficient_names(factors)[1:]:
        raise ValidationError(f"{path}: unexpected coefficient columns {coef_cols}")
    out = []
    for row in rows[1:]:
        if not row:
            continue
        date = dt.date.fromisoformat(row[0]) if row[0] else None
        eta = float(row[1]) if row[1] != "" else None
        vals = np.array([float(v) for v in row[2 : 2 + 2 * d]])
        out.append(CorrelationParams(eta, vals[:d], vals[d:], tuple(factors), date))
    return out
