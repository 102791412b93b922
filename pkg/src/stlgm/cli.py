"""Command-line interface.

Every command reads one TOML configuration and writes its outputs plus a
manifest.toml into a run directory. Without --out the directory is derived
from the configuration digest and a timestamp, so repeated runs never
collide; with --out results land exactly where asked.

Exit codes: 0 success, 2 invalid data or configuration, 3 numerical
failure, 4 file-system problems.
"""

from __future__ import annotations

import csv
import hashlib
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
import shapely

from . import __version__, _kernels
from .config import RunConfig, emit_toml, load_config
from .data_model import (
    PlotMeasurement,
    RootTransform,
    SpaceTimeCoord,
    load_plot_table,
    split_observations,
    write_plot_table,
)
from .errors import NumericalError, ValidationError
from .evaluate import (
    LagBins,
    SyntheticTruth,
    empirical_semivariogram,
    horvitz_thompson_cycles,
    run_cross_validation,
    simulate_dataset,
)
from .covariance import CovarianceParams
from .predict import (
    area_average_series,
    change_summary,
    compose_biomass,
    make_grid,
    predict_y,
    predict_z,
    summarize,
)
from .samplers import (
    read_posterior,
    run_gibbs_bernoulli,
    run_gibbs_normal,
    write_posterior,
)

def _F(value) -> str:
    """Canonical float formatting for all CSV output."""
    return repr(float(value))


def _run_dir(config_path: Path, out: str | None) -> Path:
    if out is not None:
        path = Path(out)
    else:
        digest = hashlib.sha256(config_path.read_bytes()).hexdigest()[:12]
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
        path = Path("runs") / f"{digest}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(run_dir: Path, command: str, cfg: RunConfig,
                    elapsed: float, **extra) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "backend": _kernels.BACKEND,
        "elapsed_seconds": float(elapsed),
    }
    doc.update(extra)
    doc["config"] = cfg.raw
    (run_dir / "manifest.toml").write_text(emit_toml(doc))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _load_observations(cfg: RunConfig):
    measurements = load_plot_table(cfg.data.path)
    transform = RootTransform(cfg.data.root)
    return measurements, split_observations(measurements, transform)


def _fail(exc: BaseException, code: int) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


class _Runner:
    """Shared option handling and error-to-exit-code mapping."""

    def __init__(self, config, out):
        self.config_path = Path(config)
        self.out = out

    def __call__(self, command: str, body) -> None:
        try:
            cfg = load_config(self.config_path)
            run_dir = _run_dir(self.config_path, self.out)
            t0 = time.perf_counter()
            extra = body(cfg, run_dir) or {}
            _write_manifest(run_dir, command, cfg,
                            time.perf_counter() - t0, **extra)
        except NumericalError as exc:
            _fail(exc, 3)
        except ValidationError as exc:
            _fail(exc, 2)
        except OSError as exc:
            _fail(exc, 4)
        click.echo(str(run_dir))


def _common_options(fn):
    fn = click.option("--out", type=click.Path(), default=None,
                      help="Run directory (default: runs/<digest>-<stamp>).")(fn)
    fn = click.option("--threads", type=int, default=1, show_default=True,
                      help="Worker threads for prediction.")(fn)
    fn = click.option("--config", required=True,
                      type=click.Path(exists=True, dir_okay=False),
                      help="TOML run configuration.")(fn)
    return fn


@click.group()
@click.version_option(version=__version__, prog_name="stlgm")
def main() -> None:
    """Two-stage space-time models of semi-continuous forest biomass."""


@main.command()
@_common_options
@click.option("--stage", type=click.Choice(["y", "z"]), required=True,
              help="y fits the continuous stage, z the occupancy stage.")
def fit(config, threads, out, stage):
    """Run one Gibbs sampler and store its posterior."""

    def body(cfg: RunConfig, run_dir: Path):
        cfg.require("fit", "data", "model", "mcmc",
                    "priors_y" if stage == "y" else "priors_z")
        _, obs = _load_observations(cfg)
        rng = np.random.default_rng(cfg.mcmc.seed)
        kwargs = dict(
            iterations=cfg.mcmc.iterations, burn_in=cfg.mcmc.burn_in,
            thin=cfg.mcmc.thin, rng=rng, m=cfg.model.neighbors,
            jitter=cfg.model.jitter,
        )
        if stage == "y":
            samples = run_gibbs_normal(obs.y, obs.continuous_coords,
                                       cfg.priors_y, **kwargs)
        else:
            samples = run_gibbs_bernoulli(obs.z, obs.binary_coords,
                                          cfg.priors_z, **kwargs)
        write_posterior(samples, run_dir / "posterior.csv",
                        run_dir / "fields.bin")
        return {
            "stage": stage,
            "seed": cfg.mcmc.seed,
            "n_observations": int(samples.w.shape[1]),
            "retained_draws": samples.n_kept,
            "acceptance_rate": samples.acceptance_rate,
        }

    _Runner(config, out)("fit", body)


@main.command()
@_common_options
def predict(config, threads, out):
    """Predict biomass over a grid from stored posteriors."""

    def body(cfg: RunConfig, run_dir: Path):
        cfg.require("predict", "data", "model", "predict")
        _, obs = _load_observations(cfg)
        pc = cfg.predict
        samples_y = read_posterior(pc.posterior_y, pc.fields_y)
        samples_z = read_posterior(pc.posterior_z, pc.fields_z)
        grid = make_grid(shapely.Polygon(pc.region), pc.spacing, pc.years)
        coords = grid.coords()
        py = predict_y(samples_y, obs.continuous_coords, coords,
                       master_seed=pc.seed, m=cfg.model.neighbors,
                       jitter=cfg.model.jitter, threads=threads)
        pz = predict_z(samples_z, obs.binary_coords, coords,
                       master_seed=pc.seed, m=cfg.model.neighbors,
                       jitter=cfg.model.jitter, threads=threads)
        b_draws = compose_biomass(py, pz, obs.transform)
        summ = summarize(b_draws)
        prob_forest = pz.prob.mean(axis=0)
        _write_csv(
            run_dir / "grid.csv",
            ["x_km", "y_km", "year", "mean_b", "sd_b", "q2.5", "q97.5",
             "prob_forest"],
            (
                [_F(coords[i, 0]), _F(coords[i, 1]), _F(coords[i, 2]),
                 _F(summ.mean[i]), _F(summ.sd[i]), _F(summ.q025[i]),
                 _F(summ.q975[i]), _F(prob_forest[i])]
                for i in range(coords.shape[0])
            ),
        )
        series = area_average_series(b_draws, grid)
        area_summ = summarize(series)
        _write_csv(
            run_dir / "area.csv",
            ["year", "mean_b", "sd_b", "q2.5", "q97.5"],
            (
                [_F(float(grid.years[j])), _F(area_summ.mean[j]),
                 _F(area_summ.sd[j]), _F(area_summ.q025[j]),
                 _F(area_summ.q975[j])]
                for j in range(grid.n_years)
            ),
        )
        extra = {
            "seed": pc.seed,
            "n_grid_cells": grid.n_cells,
            "n_draws": samples_y.n_kept,
        }
        if pc.change is not None:
            ch = change_summary(series, grid, pc.change[0], pc.change[1])
            _write_csv(
                run_dir / "change.csv",
                ["year_from", "year_to", "mean", "sd", "q2.5", "q97.5",
                 "prob_decrease"],
                [[_F(ch.year_from), _F(ch.year_to), _F(ch.mean), _F(ch.sd),
                  _F(ch.q025), _F(ch.q975), _F(ch.prob_decrease)]],
            )
        return extra

    _Runner(config, out)("predict", body)


@main.command()
@_common_options
def cv(config, threads, out):
    """Plot-blocked k-fold cross-validation."""

    def body(cfg: RunConfig, run_dir: Path):
        cfg.require("cv", "data", "model", "mcmc", "cv", "priors_y",
                    "priors_z")
        measurements, obs = _load_observations(cfg)
        b = np.asarray([m.agbd for m in measurements], dtype=float)
        plot_ids = np.asarray(obs.plot_ids)
        result = run_cross_validation(
            obs.binary_coords, b, plot_ids, obs.transform, cfg.priors_y,
            cfg.priors_z, k=cfg.cv.folds, iterations=cfg.mcmc.iterations,
            burn_in=cfg.mcmc.burn_in, thin=cfg.mcmc.thin, seed=cfg.cv.seed,
            m=cfg.model.neighbors, threads=threads, jitter=cfg.model.jitter,
        )
        _write_csv(
            run_dir / "cv_folds.csv",
            ["fold", "n_test", "n_forest_test", "mse", "mlpd_y", "mlpd_z",
             "coverage95"],
            (
                [str(f.fold), str(f.n_test), str(f.n_forest_test),
                 _F(f.mse), _F(f.mlpd_y), _F(f.mlpd_z), _F(f.coverage95)]
                for f in result.folds
            ),
        )
        _write_csv(
            run_dir / "cv_overall.csv",
            ["n_test", "mse", "r_squared", "mlpd_y", "mlpd_z", "coverage95"],
            [[str(result.n_test), _F(result.mse), _F(result.r_squared),
              _F(result.mlpd_y), _F(result.mlpd_z), _F(result.coverage95)]],
        )
        return {
            "seed": cfg.cv.seed,
            "folds": cfg.cv.folds,
            "mse": result.mse,
            "r_squared": result.r_squared,
            "mlpd_y": result.mlpd_y,
            "mlpd_z": result.mlpd_z,
            "coverage95": result.coverage95,
        }

    _Runner(config, out)("cv", body)


@main.command()
@_common_options
def variogram(config, threads, out):
    """Empirical semivariogram of the transformed forested responses."""

    def body(cfg: RunConfig, run_dir: Path):
        cfg.require("variogram", "data", "variogram")
        _, obs = _load_observations(cfg)
        bins = LagBins(np.asarray(cfg.variogram.space_edges),
                       np.asarray(cfg.variogram.time_edges))
        table = empirical_semivariogram(obs.continuous_coords, obs.y, bins)
        norm = table.normalized_gamma()
        rows = []
        for si in range(bins.n_space):
            for ti in range(bins.n_time):
                rows.append([
                    _F(float(bins.space_edges[si])),
                    _F(float(bins.space_edges[si + 1])),
                    _F(float(bins.time_edges[ti])),
                    _F(float(bins.time_edges[ti + 1])),
                    str(int(table.count[si, ti])),
                    _F(float(table.gamma[si, ti])),
                    _F(float(norm[si, ti])),
                ])
        _write_csv(
            run_dir / "variogram.csv",
            ["space_lo", "space_hi", "time_lo", "time_hi", "count", "gamma",
             "gamma_normalized"],
            rows,
        )
        return {"n_forested": obs.n_forested}

    _Runner(config, out)("variogram", body)


@main.command()
@_common_options
def simulate(config, threads, out):
    """Generate a synthetic plot table from known parameters."""

    def body(cfg: RunConfig, run_dir: Path):
        cfg.require("simulate", "simulate")
        sc = cfg.simulate
        L = len(sc.sigma)
        theta_y = CovarianceParams(sigma=tuple(sc.sigma),
                                   phi=tuple(sc.phi), lam=tuple(sc.lam))
        theta_z = None
        if sc.alpha_z is not None:
            theta_z = CovarianceParams(sigma=tuple(sc.z_sigma),
                                       phi=tuple(sc.z_phi),
                                       lam=tuple(sc.z_lam))
        truth = SyntheticTruth(
            alpha_y=sc.alpha_y, theta_y=theta_y, tau=sc.tau,
            transform=RootTransform(sc.root), alpha_z=sc.alpha_z,
            theta_z=theta_z,
        )
        data = simulate_dataset(sc.n_plots, sc.extent, sc.years, sc.visits,
                                truth, np.random.default_rng(sc.seed))
        rows = [
            PlotMeasurement(
                f"plot{int(p):06d}",
                SpaceTimeCoord(float(data.coords[i, 0]),
                               float(data.coords[i, 1]),
                               float(data.coords[i, 2])),
                float(data.b[i]),
            )
            for i, p in enumerate(data.plot_ids)
        ]
        write_plot_table(rows, run_dir / "data.csv")
        return {
            "seed": sc.seed,
            "n_rows": int(data.b.size),
            "n_components": L,
            "forested_fraction": float((data.b > 0).mean()),
        }

    _Runner(config, out)("simulate", body)


@main.command()
@_common_options
def ht(config, threads, out):
    """Design-based mean biomass per measurement cycle."""

    def body(cfg: RunConfig, run_dir: Path):
        cfg.require("ht", "data", "ht")
        measurements, obs = _load_observations(cfg)
        b = np.asarray([m.agbd for m in measurements], dtype=float)
        years = obs.binary_coords[:, 2]
        cycles = horvitz_thompson_cycles(b, years, cfg.ht.cycles)
        _write_csv(
            run_dir / "ht.csv",
            ["start", "end", "n", "mean_year", "mean", "se"],
            (
                [_F(c.start), _F(c.end), str(c.n), _F(c.mean_year),
                 _F(c.mean), _F(c.se)]
                for c in cycles
            ),
        )
        return {"n_cycles": len(cycles)}

    _Runner(config, out)("ht", body)


if __name__ == "__main__":
    main()
