"""Command line driver: ingest, factor selection, calibration, NIG fit and stress tests.

Every subcommand runs the stages it depends on from the raw inputs, so each
invocation is self-contained and deterministic for a given config and seed.

Exit codes: 0 ok, 2 invalid input, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import corrmodel, distfit, factorselect, ingest, stress
from .corrmodel import CorrelationParams, FactorAssignment
from .exceptions import CorrStressError, IngestError, NumericalError, ValidationError

logger = logging.getLogger("corrstress")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
FAILURE_MARKER = "FAILED_STAGE"
STAGE_SELECT, STAGE_MC, STAGE_HIST = 1, 2, 3
AUTO_THIN_ABOVE = 2000
AUTO_THIN_STRIDE = 10
SVG_SALT = "corrstress"


@dataclass(frozen=True)
class RunConfig:
    """Validated run settings; relative paths resolve against the config file."""

    prices: Path
    manifest: Path
    output_dir: Path
    seed: int
    forced_priors: Path | None = None
    window: int = 250
    selection_window: int = 63
    target_model_size: float = 6.0
    hdr_q: float = 0.05
    var_alpha: float = 0.99
    mc_samples: int = 100_000
    thin_stride: int | None = None
    portfolio_value: float = 1_000_000.0
    portfolio_weights: tuple | None = None
    selection_method: str = "auto"
    mcmc_iterations: int = 50_000
    date: str | None = None
    scenario: Path | None = None

    def __post_init__(self):
        checks = [
            (isinstance(self.seed, int) and not isinstance(self.seed, bool) and self.seed >= 0,
             "seed must be a non-negative integer"),
            (self.window >= ingest.MIN_WINDOW, f"window must be at least {ingest.MIN_WINDOW}"),
            (3 <= self.selection_window, "selection_window must be at least 3"),
            (self.target_model_size > 0, "target_model_size must be positive"),
            (0.0 < self.hdr_q < 1.0, "hdr_q must lie in (0, 1)"),
            (0.5 < self.var_alpha < 1.0, "var_alpha must lie in (0.5, 1)"),
            (self.mc_samples >= stress.MIN_HDR_SAMPLES, f"mc_samples must be at least {stress.MIN_HDR_SAMPLES}"),
            (self.thin_stride is None or self.thin_stride >= 1, "thin_stride must be at least 1"),
            (self.portfolio_value > 0, "portfolio value must be positive"),
            (self.selection_method in ("auto", "enumeration", "mcmc"), "selection_method must be auto, enumeration or mcmc"),
            (self.mcmc_iterations >= 10, "mcmc_iterations must be at least 10"),
        ]
        problems = [msg for ok, msg in checks if not ok]
        if problems:
            raise ValidationError("invalid config: " + "; ".join(problems))
        if self.date is not None:
            try:
                pd.Timestamp(self.date)
            except ValueError:
                raise ValidationError(f"invalid config: cannot parse date {self.date!r}") from None

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise IngestError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        portfolio = data.pop("portfolio", {}) or {}
        if "value" in portfolio:
            data["portfolio_value"] = portfolio["value"]
        if portfolio.get("weights") is not None:
            data["portfolio_weights"] = tuple(portfolio["weights"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"invalid config: unknown keys {unknown}")
        missing = [k for k in ("prices", "manifest", "output_dir", "seed") if data.get(k) is None]
        if missing:
            raise ValidationError(f"invalid config: missing {missing}")
        base = path.parent
        for key in ("prices", "manifest", "output_dir", "forced_priors", "scenario"):
            if data.get(key) is not None:
                p = Path(data[key])
                data[key] = p if p.is_absolute() else base / p
        try:
            return cls(**data)
        except TypeError as exc:
            raise ValidationError(f"invalid config: {exc}") from None


def _iso(ts) -> str:
    return pd.Timestamp(ts).date().isoformat()


def _configure_matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = SVG_SALT
    plt.rcParams["svg.fonttype"] = "none"
    return plt


class Pipeline:
    """Lazily evaluated stages sharing one config and output directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.stage = "setup"

    @contextmanager
    def running(self, name: str):
        previous, self.stage = self.stage, name
        logger.info("stage %s", name)
        yield
        self.stage = previous

    def _path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    # -- data ------------------------------------------------------------------

    @cached_property
    def manifest(self) -> ingest.Manifest:
        with self.running("ingest"):
            return ingest.Manifest.load(self.cfg.manifest)

    @cached_property
    def panel(self) -> ingest.ReturnPanel:
        with self.running("ingest"):
            panel = ingest.load_prices(self.cfg.prices, self.manifest)
            logger.info("loaded %d return rows, %d assets, %d factors (dropped %d, rejected %d)",
                        len(panel), len(panel.asset_ids), len(panel.factor_names),
                        panel.n_dropped, panel.n_rejected)
            return panel

    @cached_property
    def schedule(self) -> ingest.Schedule:
        with self.running("ingest"):
            return ingest.make_schedule(self.panel.dates, self.cfg.window, self.cfg.selection_window)

    @cached_property
    def portfolio_weights(self) -> np.ndarray:
        p = len(self.manifest.assets)
        if self.cfg.portfolio_weights is None:
            return np.full(p, 1.0 / p)
        w = np.asarray(self.cfg.portfolio_weights, dtype=float)
        if w.size != p:
            raise ValidationError(f"portfolio has {w.size} weights for {p} assets")
        return w

    # -- factor selection ------------------------------------------------------

    @cached_property
    def forced(self) -> dict[str, frozenset]:
        if self.cfg.forced_priors is not None:
            return factorselect.read_forced_priors(self.cfg.forced_priors, self.manifest.factors)
        return self.manifest.forced_indices()

    @cached_property
    def assignments(self) -> dict[pd.Timestamp, FactorAssignment]:
        with self.running("select-factors"):
            panel, cfg = self.panel, self.cfg
            previous: dict = {a: self.forced.get(a, frozenset()) for a in panel.asset_ids}
            out, history = {}, []
            for k, date in enumerate(self.schedule.selection_dates):
                win = ingest.window_slice(panel, date, cfg.selection_window)
                assignment, results = factorselect.select_factors(
                    win.assets.to_numpy(), win.factors.to_numpy(), panel.asset_ids, panel.factor_names,
                    previous, cfg.target_model_size, seed=[cfg.seed, STAGE_SELECT, k],
                    method=cfg.selection_method, n_iter=cfg.mcmc_iterations,
                )
                for asset, res in results.items():
                    if res.flagged:
                        logger.warning("%s %s: model search rejected every proposal", _iso(date), asset)
                out[date] = assignment
                history.append((_iso(date), results))
                previous = results
                assignment.save(self._path("assignments", f"assignment_{_iso(date)}.json"))
            factorselect.write_pip_history(self._path("pip_history.csv"), history, panel.factor_names)
            return out

    def assignment_on(self, date) -> FactorAssignment:
        return self.assignments[self.schedule.selection_date_for(date)]

    # -- calibration -----------------------------------------------------------

    @cached_property
    def params_history(self) -> list[CorrelationParams]:
        with self.running("calibrate"):
            assignments = self.assignments
            history = []
            for date in self.schedule.calibration_dates:
                win = ingest.window_slice(self.panel, date, self.cfg.window)
                emp = np.corrcoef(win.assets.to_numpy(), rowvar=False)
                if not np.all(np.isfinite(emp)):
                    raise ValidationError(f"{_iso(date)}: constant return series in the calibration window")
                fit = corrmodel.calibrate_fit(emp, assignments[self.schedule.selection_date_for(date)],
                                              timestamp=date.date())
                history.append(fit.params)
            corrmodel.write_params_csv(self._path("params.csv"), history)
            return history

    @cached_property
    def stress_date(self) -> pd.Timestamp:
        dates = self.schedule.calibration_dates
        if self.cfg.date is None:
            return dates[-1]
        pos = dates.searchsorted(pd.Timestamp(self.cfg.date), side="right")
        if pos == 0:
            raise ValidationError(f"no calibration on or before {self.cfg.date}; first is {_iso(dates[0])}")
        return dates[pos - 1]

    def history_until(self, date) -> list[CorrelationParams]:
        cutoff = pd.Timestamp(date).date()
        return [p for p in self.params_history if p.timestamp <= cutoff]

    def params_on(self, date) -> CorrelationParams:
        return self.history_until(date)[-1]

    def portfolio_on(self, date) -> stress.PortfolioSpec:
        win = ingest.window_slice(self.panel, date, self.cfg.window)
        vol = win.assets.to_numpy().std(axis=0, ddof=1)
        return stress.PortfolioSpec(self.portfolio_weights, self.cfg.portfolio_value, vol)

    # -- distribution fit ------------------------------------------------------

    @cached_property
    def fitted(self):
        """NIG law of the coefficient history, the coordinates it covers and fixed values."""
        with self.running("fit-dist"):
            history = self.history_until(self.stress_date)
            betas = np.array([p.to_vector() for p in history])
            stride = self.cfg.thin_stride
            if stride is None:
                stride = AUTO_THIN_STRIDE if len(betas) > AUTO_THIN_ABOVE else 1
            sample = ingest.thin(betas, stride)
            spread = sample.max(axis=0) - sample.min(axis=0)
            coords = np.flatnonzero(spread > 0)
            names = history[0].names
            fixed = [names[k] for k in range(len(names)) if k not in coords]
            if fixed:
                logger.warning("coefficients %s are constant over the history and stay fixed", fixed)
            baseline = sample[0].copy()
            dist, diag = distfit.fit_em(sample[:, coords], labels=[names[k] for k in coords])
            if not diag.converged:
                logger.warning("NIG fit did not converge after %d iterations", diag.n_iter)
            dist.save(self._path("nig_params.json"))
            report = {
                "date": _iso(self.stress_date),
                "n_samples": int(len(sample)),
                "thin_stride": int(stride),
                "fixed_coefficients": {names[k]: float(baseline[k]) for k in range(len(names)) if k not in coords},
                "n_iter": int(diag.n_iter),
                "converged": bool(diag.converged),
                "loglik": float(diag.loglik_trace[-1]),
                "ks_pvalues": dict(zip(dist.labels, map(float, diag.ks_pvalues))),
            }
            self._path("nig_fit.json").write_text(json.dumps(report, indent=2) + "\n")
            return dist, coords, baseline

    # -- stress ----------------------------------------------------------------

    @cached_property
    def reverse(self) -> tuple[stress.StressResult, stress.StressResult]:
        with self.running("reverse-stress"):
            dist, coords, baseline = self.fitted
            date = self.stress_date
            assignment = self.assignment_on(date)
            portfolio = self.portfolio_on(date)
            eta_omitted = 0 not in coords and self.params_on(date).eta is None
            mc = stress.reverse_stress_mc(
                dist, assignment, portfolio, self.cfg.hdr_q, self.cfg.mc_samples,
                seed=[self.cfg.seed, STAGE_MC], alpha=self.cfg.var_alpha,
                eta_omitted=eta_omitted, coords=coords, baseline=baseline,
            )
            hist = stress.reverse_stress_historical(
                self.history_until(date), dist, assignment, portfolio, self.cfg.hdr_q,
                seed=[self.cfg.seed, STAGE_HIST], alpha=self.cfg.var_alpha,
                n_mc=self.cfg.mc_samples, coords=coords, baseline=baseline,
            )
            for name, res in (("stress_mc.json", mc), ("stress_historical.json", hist)):
                data = res.to_dict()
                data["date"] = _iso(date)
                if res.method == "historical":
                    data["scenario_date"] = _iso(self.history_until(date)[res.index].timestamp)
                self._path(name).write_text(json.dumps(data, indent=2) + "\n")
            corrmodel.write_params_csv(self._path("scenario_mc.csv"), [
                dataclasses.replace(mc.beta_star, timestamp=date.date())], label="reverse_stress_mc")
            return mc, hist

    @cached_property
    def var_series(self) -> pd.DataFrame:
        with self.running("report"):
            mc, _ = self.reverse
            panel = self.panel
            first = self.schedule.calibration_dates[0]
            start = panel.dates.get_loc(first) - self.cfg.window
            frame = panel.assets.iloc[start:]
            series = stress.stressed_var_series(
                frame, self.assignments, mc.beta_star,
                stress.PortfolioSpec(self.portfolio_weights, self.cfg.portfolio_value,
                                     np.ones(len(self.portfolio_weights))),
                alpha=self.cfg.var_alpha, window=self.cfg.window,
            )
            out = series.assign(date=series["date"].map(_iso))
            out.to_csv(self._path("var_series.csv"), index=False, float_format="%.10g", lineterminator="\n")
            return series

    def var_report(self) -> pd.DataFrame:
        with self.running("var"):
            date = self.stress_date
            pf = self.portfolio_on(date)
            win = ingest.window_slice(self.panel, date, self.cfg.window)
            emp = corrmodel.repair(np.corrcoef(win.assets.to_numpy(), rowvar=False), "empirical")
            model = corrmodel.stressed_correlation(self.params_on(date), self.assignment_on(date))
            row = {
                "date": _iso(date),
                "alpha": self.cfg.var_alpha,
                "var_empirical": stress.var_gaussian(pf, emp, self.cfg.var_alpha),
                "var_model": stress.var_gaussian(pf, model, self.cfg.var_alpha),
            }
            frame = pd.DataFrame([row])
            frame.to_csv(self._path("var_report.csv"), index=False, float_format="%.10g", lineterminator="\n")
            return frame

    def stress_report(self, scenario_path) -> pd.DataFrame:
        with self.running("stress"):
            scenarios = read_scenarios(scenario_path)
            date = self.stress_date
            base_params = self.params_on(date)
            assignment = self.assignment_on(date)
            pf = self.portfolio_on(date)
            alpha = self.cfg.var_alpha
            base = stress.var_gaussian(pf, corrmodel.stressed_correlation(base_params, assignment), alpha)
            rows = []
            for label, shifts in scenarios:
                shocked = corrmodel.apply_scenario(base_params, shifts)
                var_s = stress.var_gaussian(pf, corrmodel.stressed_correlation(shocked, assignment), alpha)
                rows.append({"label": label, "date": _iso(date), "var_base": base,
                             "var_stressed": var_s, "delta_var": var_s - base})
            frame = pd.DataFrame(rows, columns=["label", "date", "var_base", "var_stressed", "delta_var"])
            frame.to_csv(self._path("stress_report.csv"), index=False, float_format="%.10g", lineterminator="\n")
            return frame

    # -- plots -----------------------------------------------------------------

    def plots(self) -> None:
        with self.running("plots"):
            plt = _configure_matplotlib()
            meta = {"Date": None}
            history = self.params_history
            dates = pd.to_datetime([p.timestamp for p in history])
            values = np.array([p.to_vector() for p in history])
            fig, ax = plt.subplots(figsize=(8, 4.5))
            for k, name in enumerate(history[0].names):
                ax.plot(dates, values[:, k], lw=0.9, label=name)
            ax.set_title("Calibrated correlation parameters")
            ax.legend(fontsize=7, ncol=2)
            fig.autofmt_xdate()
            fig.savefig(self._path("params_timeseries.svg"), metadata=meta)
            plt.close(fig)

            mc, _ = self.reverse
            date = self.stress_date
            assignment = self.assignment_on(date)
            before = corrmodel.stressed_correlation(self.params_on(date), assignment).values
            after = corrmodel.stressed_correlation(mc.beta_star, assignment).values
            fig, axes = plt.subplots(1, 2, figsize=(9, 4))
            for ax, mat, title in ((axes[0], before, f"Calibrated {_iso(date)}"), (axes[1], after, "Reverse stress scenario")):
                im = ax.imshow(mat, vmin=-1, vmax=1, cmap="RdBu_r")
                ax.set_title(title)
                ax.set_xticks(range(len(assignment.asset_ids)), assignment.asset_ids, rotation=90, fontsize=7)
                ax.set_yticks(range(len(assignment.asset_ids)), assignment.asset_ids, fontsize=7)
            fig.colorbar(im, ax=axes, shrink=0.8)
            fig.savefig(self._path("heatmaps.svg"), metadata=meta)
            plt.close(fig)

            series = self.var_series
            fig, ax = plt.subplots(figsize=(8, 4))
            ax.plot(series["date"], series["var"], lw=1.0, label="VaR")
            ax.plot(series["date"], series["stressed_var"], lw=1.0, label="stressed VaR")
            ax.set_title(f"VaR at {self.cfg.var_alpha:.0%}")
            ax.legend()
            fig.autofmt_xdate()
            fig.savefig(self._path("var_series.svg"), metadata=meta)
            plt.close(fig)


def read_scenarios(path) -> list[tuple[str, dict]]:
    """Scenario shifts from JSON or from CSV in the params layout plus ``label``.

    JSON: ``{"label": ..., "shifts": {"nu_MM-Americas": 0.1}}`` or a list of
    such objects.  CSV: header ``[date,]eta,lambda_<f>..,nu_<f>..[,label]``;
    empty cells mean no shift.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestError(f"cannot read scenario file {path}: {exc}") from exc
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        items = data if isinstance(data, list) else [data]
        out = []
        for k, item in enumerate(items):
            if not isinstance(item, dict) or not isinstance(item.get("shifts"), dict):
                raise ValidationError(f"{path}: scenario {k} needs a 'shifts' object")
            out.append((str(item.get("label", f"scenario_{k + 1}")), {n: float(v) for n, v in item["shifts"].items()}))
        return out
    rows = list(csv.DictReader(text.splitlines()))
    if not rows:
        raise ValidationError(f"{path}: no scenarios")
    out = []
    for k, row in enumerate(rows):
        label = row.pop("label", None) or f"scenario_{k + 1}"
        row.pop("date", None)
        try:
            shifts = {n: float(v) for n, v in row.items() if v not in (None, "")}
        except ValueError as exc:
            raise ValidationError(f"{path}: row {k + 1}: {exc}") from None
        out.append((label, shifts))
    return out


# -- command line --------------------------------------------------------------

COMMANDS = ("run", "select-factors", "calibrate", "fit-dist", "var", "stress", "reverse-stress", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrstress", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "full pipeline with reports and plots",
        "select-factors": "quarterly Bayesian factor selection",
        "calibrate": "daily correlation parameter calibration",
        "fit-dist": "NIG fit to the parameter history",
        "var": "VaR at the evaluation date (empirical and model correlation)",
        "stress": "VaR under scenario shifts of the parameters",
        "reverse-stress": "worst scenarios in the highest density region",
        "report": "VaR and stressed VaR series plus plots",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--date", help="evaluation date (ISO 8601)")
        p.add_argument("--q", type=float, help="mass outside the highest density region")
        p.add_argument("--alpha", type=float, help="VaR confidence level")
        p.add_argument("--window", type=int, help="calibration window in days")
        p.add_argument("--scenario", help="scenario file (stress)")
    return parser


def _overrides(args) -> dict:
    return {
        "seed": args.seed, "output_dir": Path(args.out).resolve() if args.out else None,
        "date": args.date, "hdr_q": args.q, "var_alpha": args.alpha,
        "window": args.window, "scenario": Path(args.scenario).resolve() if args.scenario else None,
    }


def execute(command: str, pipe: Pipeline) -> None:
    if command == "select-factors":
        pipe.assignments
    elif command == "calibrate":
        pipe.params_history
    elif command == "fit-dist":
        pipe.fitted
    elif command == "var":
        pipe.var_report()
    elif command == "stress":
        if pipe.cfg.scenario is None:
            raise ValidationError("stress needs --scenario")
        pipe.stress_report(pipe.cfg.scenario)
    elif command == "reverse-stress":
        pipe.reverse
    elif command == "report":
        pipe.var_series
        pipe.plots()
    elif command == "run":
        pipe.params_history
        pipe.fitted
        pipe.reverse
        pipe.var_report()
        pipe.var_series
        pipe.plots()
    else:  # pragma: no cover - argparse restricts choices
        raise ValidationError(f"unknown command {command!r}")


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, IngestError):
        return EXIT_IO
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_NUMERICAL


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = RunConfig.from_file(args.config, _overrides(args))
    except (CorrStressError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    pipe = Pipeline(cfg)
    marker = Path(cfg.output_dir) / FAILURE_MARKER
    try:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        marker.unlink(missing_ok=True)
        execute(args.command, pipe)
    except (CorrStressError, OSError, ArithmeticError, np.linalg.LinAlgError) as exc:
        code = _exit_code(exc)
        try:
            marker.write_text(f"stage: {pipe.stage}\nerror: {type(exc).__name__}: {exc}\n")
        except OSError:
            pass
        print(f"error in stage {pipe.stage}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
