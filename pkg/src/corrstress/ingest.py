"""Price panels to log-returns, rolling windows and the quarterly schedule."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .exceptions import IngestError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 250
DEFAULT_SELECTION_WINDOW = 63
MIN_WINDOW = 30
MISSING_TOKENS = ("", "NA", "NaN", "nan", "null")


@dataclass(frozen=True)
class Manifest:
    """Column roles of a price file and each asset's forced factors.

    ``forced`` maps an asset to its ``(country_factor, industry_factor)``
    names; either may be ``None``.
    """

    assets: tuple
    factors: tuple
    forced: dict = field(default_factory=dict)

    def __post_init__(self):
        assets, factors = tuple(self.assets), tuple(self.factors)
        if not assets or not factors:
            raise ValidationError("manifest needs at least one asset and one factor")
        if len(set(assets) | set(factors)) != len(assets) + len(factors):
            raise ValidationError("manifest column names must be unique")
        for asset, names in self.forced.items():
            if asset not in assets:
                raise ValidationError(f"forced factors given for unknown asset {asset!r}")
            unknown = [n for n in names if n is not None and n not in factors]
            if unknown:
                raise ValidationError(f"asset {asset!r} forces unknown factors {unknown}")
        object.__setattr__(self, "assets", assets)
        object.__setattr__(self, "factors", factors)

    def forced_indices(self) -> dict[str, frozenset]:
        return {
            a: frozenset(self.factors.index(n) for n in self.forced.get(a, ()) if n is not None)
            for a in self.assets
        }

    @classmethod
    def load(cls, path) -> "Manifest":
        """Read ``{"factors": [...], "assets": {id: {"country_factor", "industry_factor"}}}``."""
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestError(f"cannot read manifest {path}: {exc}") from exc
        if not isinstance(data, dict) or "assets" not in data or "factors" not in data:
            raise ValidationError(f"{path}: manifest needs 'assets' and 'factors'")
        assets = data["assets"]
        if isinstance(assets, list):
            return cls(tuple(assets), tuple(data["factors"]))
        forced = {
            a: (spec.get("country_factor") or None, spec.get("industry_factor") or None)
            for a, spec in assets.items()
        }
        return cls(tuple(assets), tuple(data["factors"]), forced)


@dataclass(frozen=True)
class ReturnPanel:
    """Aligned daily log-returns of assets and factors.

    Attributes
    ----------
    assets, factors : pandas.DataFrame
        Indexed by the same strictly increasing dates, no missing values.
    n_dropped : int
        Price rows removed by listwise deletion of gaps.
    n_rejected : int
        Price rows removed for non-positive prices.
    """

    assets: pd.DataFrame
    factors: pd.DataFrame
    n_dropped: int = 0
    n_rejected: int = 0

    def __post_init__(self):
        if not self.assets.index.equals(self.factors.index):
            raise ValidationError("asset and factor returns must share the date index")
        idx = self.assets.index
        if not (idx.is_monotonic_increasing and idx.is_unique):
            raise ValidationError("dates must be strictly increasing")
        if self.assets.isna().any().any() or self.factors.isna().any().any():
            raise ValidationError("return panel contains missing values")

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.assets.index

    @property
    def asset_ids(self) -> list[str]:
        return list(self.assets.columns)

    @property
    def factor_names(self) -> list[str]:
        return list(self.factors.columns)

    def __len__(self) -> int:
        return len(self.assets)

    def iloc(self, rows) -> "ReturnPanel":
        return ReturnPanel(self.assets.iloc[rows], self.factors.iloc[rows], self.n_dropped, self.n_rejected)


def _parse_dates(raw: pd.Series, path) -> pd.DatetimeIndex:
    try:
        return pd.DatetimeIndex(pd.to_datetime(raw, format="ISO8601", errors="raise"))
    except (ValueError, TypeError) as exc:
        raise IngestError(f"{path}: unparseable date ({exc})") from exc


def load_prices(path, manifest: Manifest | str | Path, format: str = "csv") -> ReturnPanel:
    """Read a ``date,<ticker>...`` price file and convert to log-returns.

    Rows with any missing price are dropped (listwise deletion) and rows
    with a non-positive price are rejected; both are counted and logged.
    """
    if format != "csv":
        raise ValidationError(f"unsupported price format {format!r}")
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise IngestError(f"cannot read prices {path}: {exc}") from exc
    if "date" not in raw.columns:
        raise IngestError(f"{path}: missing 'date' column")
    columns = list(manifest.assets) + list(manifest.factors)
    missing = [c for c in columns if c not in raw.columns]
    if missing:
        raise IngestError(f"{path}: columns {missing} listed in the manifest are absent")
    dates = _parse_dates(raw["date"], path)
    text = raw[columns].apply(lambda s: s.str.strip())
    prices = text.apply(pd.to_numeric, errors="coerce")
    bad_text = ~text.isin(MISSING_TOKENS) & prices.isna()
    if bad_text.any().any():
        r, c = np.argwhere(bad_text.to_numpy())[0]
        raise IngestError(f"{path}: non-numeric price {text.iat[r, c]!r} at {raw['date'].iat[r]}, {columns[c]}")
    prices.index = dates
    if not (dates.is_monotonic_increasing and dates.is_unique):
        raise IngestError(f"{path}: dates must be strictly increasing")

    gaps = prices.isna().any(axis=1)
    nonpos = (prices <= 0).any(axis=1) & ~gaps
    for d in prices.index[nonpos]:
        cols = list(prices.columns[(prices.loc[d] <= 0).to_numpy()])
        logger.warning("rejecting %s: non-positive price in %s", d.date().isoformat(), cols)
    if gaps.any():
        logger.warning("dropping %d date(s) with missing prices", int(gaps.sum()))
    clean = prices[~gaps & ~nonpos]
    if len(clean) < 2:
        raise ValidationError(f"{path}: fewer than two usable price rows")
    logret = np.log(clean).diff().iloc[1:]
    return ReturnPanel(
        logret[list(manifest.assets)],
        logret[list(manifest.factors)],
        n_dropped=int(gaps.sum()),
        n_rejected=int(nonpos.sum()),
    )


def window_slice(panel: ReturnPanel, end_date, length: int) -> ReturnPanel:
    """The ``length`` rows ending at the last date strictly before ``end_date``."""
    if length < 1:
        raise ValidationError("window length must be positive")
    end = pd.Timestamp(end_date)
    stop = int(panel.dates.searchsorted(end, side="left"))
    if stop < length:
        first = panel.dates[0].date().isoformat() if len(panel) else "n/a"
        raise ValidationError(
            f"window of {length} rows before {end.date().isoformat()} needs {length - stop} more "
            f"row(s) of history before {first}"
        )
    return panel.iloc(slice(stop - length, stop))


def thin(series, stride: int):
    """Keep rows ``0, stride, 2 stride, ...``."""
    if stride < 1:
        raise ValidationError("stride must be at least 1")
    if isinstance(series, (pd.DataFrame, pd.Series)):
        return series.iloc[::stride]
    return series[::stride]


@dataclass(frozen=True)
class Schedule:
    calibration_dates: pd.DatetimeIndex
    selection_dates: pd.DatetimeIndex
    window: int = DEFAULT_WINDOW
    selection_window: int = DEFAULT_SELECTION_WINDOW

    def __post_init__(self):
        if self.window < MIN_WINDOW:
            raise ValidationError(f"window must be at least {MIN_WINDOW}")
        if self.selection_window < 3:
            raise ValidationError("selection window must be at least 3")
        if not set(self.selection_dates) <= set(self.calibration_dates):
            raise ValidationError("selection dates must be calibration dates")

    def selection_date_for(self, date) -> pd.Timestamp:
        """Latest selection date on or before ``date``."""
        pos = self.selection_dates.searchsorted(pd.Timestamp(date), side="right")
        if pos == 0:
            raise ValidationError(f"no factor selection on or before {pd.Timestamp(date).date()}")
        return self.selection_dates[pos - 1]


def make_schedule(dates: Sequence, window: int = DEFAULT_WINDOW,
                  selection_window: int = DEFAULT_SELECTION_WINDOW) -> Schedule:
    """Daily calibration dates with a full window and calendar-quarter selection dates.

    A date qualifies for calibration once ``window`` returns precede it.
    Selection happens on the first calibration date and on the first
    calibration date of each later calendar quarter.
    """
    dates = pd.DatetimeIndex(dates)
    if window < MIN_WINDOW:
        raise ValidationError(f"window must be at least {MIN_WINDOW}")
    start = max(window, selection_window)
    if len(dates) <= start:
        raise ValidationError(f"need more than {start} return rows, got {len(dates)}")
    calib = dates[start:]
    quarters = calib.to_period("Q")
    first = np.r_[True, quarters[1:] != quarters[:-1]]
    return Schedule(calib, calib[first], window, selection_window)
