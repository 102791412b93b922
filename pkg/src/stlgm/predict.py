"""Posterior prediction at new space-time points and gridded aggregation.

Each retained posterior draw k carries its own (alpha, theta, tau, w); the
kriging projection onto the prediction points is rebuilt under that draw's
theta, so parameter uncertainty propagates into the predictive field. Draw
k uses its own generator seeded from (master_seed, stage, k), with stage 1
for the continuous response and 2 for occupancy. That makes every draw row
independent of execution order, so results are identical for any thread
count.

Per-draw variate order: the field normals (one per prediction point) come
first, then the continuous stage consumes one noise normal per point, or
the occupancy stage one uniform per point.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import shapely

from .data_model import RootTransform, as_coord_array
from .errors import ValidationError
from .nngp import projection_from_workspace, projection_workspace
from .samplers import PosteriorSamples

__all__ = [
    "Grid",
    "make_grid",
    "ContinuousPrediction",
    "OccupancyPrediction",
    "predict_y",
    "predict_z",
    "compose_biomass",
    "area_average_series",
    "Summary",
    "summarize",
    "ChangeSummary",
    "change_summary",
]

_STAGE_Y = 1
_STAGE_Z = 2


@dataclass(frozen=True)
class Grid:
    """Regular prediction grid: cell centers crossed with years, year-major.

    coords() lists all cells for years[0] first, then years[1], and so on,
    so the rows for one year form a contiguous block.
    """

    cells: np.ndarray
    years: np.ndarray
    spacing: float

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_years(self) -> int:
        return self.years.shape[0]

    @property
    def n_points(self) -> int:
        return self.n_cells * self.n_years

    def coords(self) -> np.ndarray:
        out = np.empty((self.n_points, 3))
        k = self.n_cells
        for j, year in enumerate(self.years):
            out[j * k : (j + 1) * k, :2] = self.cells
            out[j * k : (j + 1) * k, 2] = year
        return out

    def by_year(self, draws: np.ndarray) -> np.ndarray:
        """Reshape (n_draws, n_points) rows into (n_draws, n_years, n_cells)."""
        if draws.shape[1] != self.n_points:
            raise ValidationError(
                f"draws have {draws.shape[1]} columns, grid has {self.n_points} points"
            )
        return draws.reshape(draws.shape[0], self.n_years, self.n_cells)


def make_grid(polygon, spacing: float, years) -> Grid:
    """Lay cell centers over a polygon; a cell belongs if its center does.

    Centers start half a spacing in from the bounding-box minimum, so cells
    tile the box without sticking out on the low side.
    """
    if not (spacing > 0 and np.isfinite(spacing)):
        raise ValidationError(f"grid spacing must be positive finite, got {spacing}")
    years = np.asarray(years, dtype=float)
    if years.size == 0:
        raise ValidationError("grid needs at least one year")
    if polygon.is_empty or polygon.area == 0:
        raise ValidationError("grid polygon has no area")
    minx, miny, maxx, maxy = polygon.bounds
    xs = np.arange(minx + spacing / 2.0, maxx, spacing)
    ys = np.arange(miny + spacing / 2.0, maxy, spacing)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    xx = xx.ravel()
    yy = yy.ravel()
    keep = shapely.contains_xy(polygon, xx, yy)
    if not keep.any():
        raise ValidationError(
            f"no cell centers fall inside the polygon at spacing {spacing}"
        )
    cells = np.column_stack([xx[keep], yy[keep]])
    return Grid(cells=cells, years=years, spacing=float(spacing))


@dataclass(frozen=True)
class ContinuousPrediction:
    """Paired draws of the continuous stage at the prediction points.

    mu rows are alpha + w_pred per retained draw; y adds the observation
    noise tau * eps. Both are (n_draws, n_points) in the order the
    prediction coordinates were given.
    """

    mu: np.ndarray
    y: np.ndarray
    tau: np.ndarray


@dataclass(frozen=True)
class OccupancyPrediction:
    """Paired draws of the occupancy stage at the prediction points.

    prob rows are logit^-1(alpha + w_pred); z is a Bernoulli draw at that
    probability, one per draw and point.
    """

    prob: np.ndarray
    z: np.ndarray


def _check_samples(samples: PosteriorSamples, kind: str, n_obs: int) -> None:
    if samples.kind != kind:
        raise ValidationError(
            f"expected stage {kind!r} posterior, got {samples.kind!r}"
        )
    if samples.n_kept == 0:
        raise ValidationError("posterior has no retained draws to predict from")
    if samples.w.shape[1] != n_obs:
        raise ValidationError(
            f"posterior fields cover {samples.w.shape[1]} points but "
            f"{n_obs} observed coordinates were given"
        )


def _draw_rng(master_seed: int, stage: int, k: int) -> np.random.Generator:
    seq = np.random.SeedSequence((master_seed, stage, k))
    return np.random.Generator(np.random.PCG64(seq))


def _run_draws(worker, n_draws: int, threads: int) -> None:
    if threads <= 1:
        for k in range(n_draws):
            worker(k)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # consume the iterator to surface worker exceptions
        list(pool.map(worker, range(n_draws)))


def predict_y(samples: PosteriorSamples, obs_coords, pred_coords, *,
              master_seed: int, m: int = 25, jitter: Optional[float] = None,
              threads: int = 1) -> ContinuousPrediction:
    """Continuous-stage posterior predictive draws at new points."""
    obs = as_coord_array(obs_coords)
    pred = as_coord_array(pred_coords)
    _check_samples(samples, "y", obs.shape[0])
    if master_seed < 0:
        raise ValidationError(f"master_seed must be >= 0, got {master_seed}")
    ws = projection_workspace(obs, pred, m)
    n_obs = obs.shape[0]
    p = pred.shape[0]
    alpha = samples.retained_alpha()
    theta_vecs = samples.retained_theta()
    tau = samples.retained_tau()
    M = samples.n_kept
    mu = np.empty((M, p))
    y = np.empty((M, p))

    from .covariance import CovarianceParams

    def worker(k: int) -> None:
        rng = _draw_rng(master_seed, _STAGE_Y, k)
        theta = CovarianceParams.from_vector(theta_vecs[k])
        proj = projection_from_workspace(ws, n_obs, theta, jitter)
        w_pred = proj.project_mean(samples.w[k]) + np.sqrt(proj.F) * (
            rng.standard_normal(p)
        )
        mu[k] = alpha[k] + w_pred
        y[k] = mu[k] + tau[k] * rng.standard_normal(p)

    _run_draws(worker, M, threads)
    return ContinuousPrediction(mu=mu, y=y, tau=tau.copy())


def predict_z(samples: PosteriorSamples, obs_coords, pred_coords, *,
              master_seed: int, m: int = 25, jitter: Optional[float] = None,
              threads: int = 1) -> OccupancyPrediction:
    """Occupancy-stage posterior predictive draws at new points."""
    obs = as_coord_array(obs_coords)
    pred = as_coord_array(pred_coords)
    _check_samples(samples, "z", obs.shape[0])
    if master_seed < 0:
        raise ValidationError(f"master_seed must be >= 0, got {master_seed}")
    ws = projection_workspace(obs, pred, m)
    n_obs = obs.shape[0]
    p = pred.shape[0]
    alpha = samples.retained_alpha()
    theta_vecs = samples.retained_theta()
    M = samples.n_kept
    prob = np.empty((M, p))
    z = np.empty((M, p), dtype=np.uint8)

    from .covariance import CovarianceParams

    def worker(k: int) -> None:
        rng = _draw_rng(master_seed, _STAGE_Z, k)
        theta = CovarianceParams.from_vector(theta_vecs[k])
        proj = projection_from_workspace(ws, n_obs, theta, jitter)
        w_pred = proj.project_mean(samples.w[k]) + np.sqrt(proj.F) * (
            rng.standard_normal(p)
        )
        eta = alpha[k] + w_pred
        # logistic through exp of the negative absolute value, stable both ways
        prob[k] = np.where(eta >= 0, 1.0 / (1.0 + np.exp(-eta)),
                           np.exp(eta) / (1.0 + np.exp(eta)))
        z[k] = rng.random(p) < prob[k]

    _run_draws(worker, M, threads)
    return OccupancyPrediction(prob=prob, z=z)


def compose_biomass(continuous: ContinuousPrediction,
                    occupancy: OccupancyPrediction,
                    transform: RootTransform) -> np.ndarray:
    """Per-draw biomass: back-transformed continuous response times occupancy.

    Negative continuous draws clamp to zero biomass through the inverse
    transform, so the product is always non-negative.
    """
    if continuous.y.shape != occupancy.z.shape:
        raise ValidationError(
            f"continuous draws {continuous.y.shape} and occupancy draws "
            f"{occupancy.z.shape} do not align"
        )
    return transform.invert(continuous.y) * occupancy.z


def area_average_series(b_draws: np.ndarray, grid: Grid) -> np.ndarray:
    """Mean biomass over the grid cells, per draw and year: (n_draws, n_years)."""
    return grid.by_year(np.asarray(b_draws, dtype=float)).mean(axis=2)


@dataclass(frozen=True)
class Summary:
    """Pointwise posterior summary: mean, sd, and central 95% bounds."""

    mean: np.ndarray
    sd: np.ndarray
    q025: np.ndarray
    q975: np.ndarray


def summarize(draws: np.ndarray) -> Summary:
    """Column-wise summaries over draws (rows)."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[0] < 2:
        raise ValidationError(
            f"summaries need a (draws, points) array with >= 2 draws, got {draws.shape}"
        )
    q = np.quantile(draws, [0.025, 0.975], axis=0)
    return Summary(
        mean=draws.mean(axis=0),
        sd=draws.std(axis=0, ddof=1),
        q025=q[0],
        q975=q[1],
    )


@dataclass(frozen=True)
class ChangeSummary:
    """Posterior of the difference in area-average biomass between two years."""

    year_from: float
    year_to: float
    mean: float
    sd: float
    q025: float
    q975: float
    prob_decrease: float


def change_summary(series: np.ndarray, grid: Grid, year_from: float,
                   year_to: float) -> ChangeSummary:
    """Difference year_to minus year_from; prob_decrease is P(difference < 0)."""
    series = np.asarray(series, dtype=float)
    if series.ndim != 2 or series.shape[1] != grid.n_years:
        raise ValidationError(
            f"series shape {series.shape} does not match {grid.n_years} grid years"
        )
    years = list(grid.years)
    if year_from not in years or year_to not in years:
        raise ValidationError(
            f"change years ({year_from}, {year_to}) must both be grid years {years}"
        )
    delta = series[:, years.index(year_to)] - series[:, years.index(year_from)]
    q = np.quantile(delta, [0.025, 0.975])
    return ChangeSummary(
        year_from=float(year_from),
        year_to=float(year_to),
        mean=float(delta.mean()),
        sd=float(delta.std(ddof=1)),
        q025=float(q[0]),
        q975=float(q[1]),
        prob_decrease=float(np.mean(delta < 0.0)),
    )
