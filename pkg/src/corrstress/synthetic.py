"""Forward-simulated price panels for tests, examples and the shipped fixture."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

FIXTURE_ASSETS = ("AM1", "AM2", "AM3", "FN1", "FN2", "AF1", "AF2", "AF3")
FIXTURE_FACTORS = ("MM-Americas", "Financials")
FIXTURE_LOADINGS = np.array([
    [1.0, 0.0], [0.9, 0.0], [1.1, 0.0],
    [0.0, 1.0], [0.0, 1.2],
    [0.8, 0.7], [1.0, 0.6], [0.7, 0.9],
])
FIXTURE_FORCED = {
    "AM1": ("MM-Americas", None), "AM2": ("MM-Americas", None), "AM3": ("MM-Americas", None),
    "FN1": (None, "Financials"), "FN2": (None, "Financials"),
    "AF1": ("MM-Americas", "Financials"), "AF2": ("MM-Americas", "Financials"),
    "AF3": ("MM-Americas", "Financials"),
}


def factor_returns(n_days: int, rng, base_vol=0.01, cycle=260.0) -> np.ndarray:
    """Independent factor returns whose volatility follows a slow cycle.

    The varying factor share of asset variance makes the fitted
    correlation parameters move over time.
    """
    t = np.arange(n_days)
    d = FIXTURE_FACTORS.__len__()
    phase = np.linspace(0.0, np.pi, d)
    scale = base_vol * (1.0 + 0.6 * np.sin(2 * np.pi * t[:, None] / cycle + phase))
    return rng.standard_normal((n_days, d)) * scale


def simulate_fixture(n_days: int = 850, seed: int = 20240611, idio_vol: float = 0.009) -> pd.DataFrame:
    """Daily prices for the fixture universe (assets then factor index levels)."""
    rng = np.random.default_rng(seed)
    f = factor_returns(n_days, rng)
    eps = rng.standard_normal((n_days, len(FIXTURE_ASSETS))) * idio_vol
    r = f @ FIXTURE_LOADINGS.T + eps
    logret = np.hstack([r, f])
    levels = 100.0 * np.exp(np.vstack([np.zeros(logret.shape[1]), np.cumsum(logret, axis=0)]))
    dates = pd.bdate_range("2019-01-02", periods=n_days + 1)
    return pd.DataFrame(levels, index=dates, columns=list(FIXTURE_ASSETS + FIXTURE_FACTORS))


def fixture_manifest() -> dict:
    return {
        "factors": list(FIXTURE_FACTORS),
        "assets": {
            a: {"country_factor": c or "", "industry_factor": i or ""}
            for a, (c, i) in FIXTURE_FORCED.items()
        },
    }


def fixture_config() -> dict:
    return {
        "prices": "prices.csv",
        "manifest": "manifest.json",
        "output_dir": "out",
        "window": 250,
        "selection_window": 63,
        "target_model_size": 1,
        "hdr_q": 0.05,
        "var_alpha": 0.99,
        "mc_samples": 100000,
        "seed": 7,
        "thin_stride": 1,
        "portfolio": {"value": 1000000.0},
    }


def write_fixture(directory, n_days: int = 850, seed: int = 20240611) -> Path:
    """Write ``prices.csv``, ``manifest.json``, ``forced.csv`` and ``config.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    prices = simulate_fixture(n_days, seed)
    prices.to_csv(out / "prices.csv", index_label="date", date_format="%Y-%m-%d", float_format="%.6f")
    (out / "manifest.json").write_text(json.dumps(fixture_manifest(), indent=2) + "\n")
    lines = ["asset_id,country_factor,industry_factor"]
    lines += [f"{a},{c or ''},{i or ''}" for a, (c, i) in FIXTURE_FORCED.items()]
    (out / "forced.csv").write_text("\n".join(lines) + "\n")
    (out / "config.json").write_text(json.dumps(fixture_config(), indent=2) + "\n")
    return out


def two_regime_returns(n_calm: int, n_crisis: int, p: int, rng, calm_rho=0.1, crisis_rho=0.75,
                       vol=0.01, crisis_vol_mult=2.0) -> pd.DataFrame:
    """Equicorrelated Gaussian returns, calm block then a high-correlation block."""

    def block(n, rho, scale):
        c = np.full((p, p), rho)
        np.fill_diagonal(c, 1.0)
        return rng.standard_normal((n, p)) @ np.linalg.cholesky(c).T * scale

    x = np.vstack([block(n_calm, calm_rho, vol), block(n_crisis, crisis_rho, vol * crisis_vol_mult)])
    return pd.DataFrame(x, index=pd.bdate_range("2015-01-01", periods=n_calm + n_crisis),
                        columns=[f"X{i}" for i in range(p)])
