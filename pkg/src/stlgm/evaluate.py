"""Model evaluation: semivariograms, blocked cross-validation, a
design-based comparator, and a synthetic-data generator.

Cross-validation blocks by plot: every visit of a plot lands in the same
fold, so held-out rows are never informed by other measurements of the
same location. Overall metrics pool the held-out rows across folds rather
than averaging per-fold summaries, so unequal fold sizes get their natural
weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.special import expit, logsumexp

from .covariance import CovarianceParams, PriorSpec, cov_matrix, cov_value
from .data_model import RootTransform, as_coord_array
from .errors import ValidationError
from .nngp import build_graph, default_jitter, graph_workspace, kriging_weights
from .predict import compose_biomass, predict_y, predict_z
from .samplers import run_gibbs_bernoulli, run_gibbs_normal

__all__ = [
    "LagBins",
    "VariogramTable",
    "empirical_semivariogram",
    "assign_folds",
    "FoldResult",
    "CvResult",
    "run_cross_validation",
    "horvitz_thompson",
    "HtEstimate",
    "horvitz_thompson_cycles",
    "mean_squared_error",
    "r_squared",
    "log_predictive_density_normal",
    "log_predictive_density_bernoulli",
    "coverage_95",
    "sample_gaussian_field",
    "SyntheticTruth",
    "SyntheticData",
    "simulate_dataset",
]


# ------------------------------------------------------------- semivariogram

@dataclass(frozen=True)
class LagBins:
    """Half-open lag bins [edge_k, edge_k+1) in space and time."""

    space_edges: np.ndarray
    time_edges: np.ndarray

    def __post_init__(self):
        for name, edges in (("space", self.space_edges), ("time", self.time_edges)):
            e = np.asarray(edges, dtype=float)
            if e.ndim != 1 or e.size < 2:
                raise ValidationError(f"{name} edges need at least two values")
            if not np.all(np.diff(e) > 0):
                raise ValidationError(f"{name} edges must be strictly increasing")
            object.__setattr__(self, f"{name}_edges", e)

    @property
    def n_space(self) -> int:
        return self.space_edges.size - 1

    @property
    def n_time(self) -> int:
        return self.time_edges.size - 1


@dataclass(frozen=True)
class VariogramTable:
    """Per-bin pair counts, the empirical semivariogram, and optionally the
    model semivariogram averaged over the same pairs."""

    bins: LagBins
    count: np.ndarray
    gamma: np.ndarray
    gamma_model: Optional[np.ndarray]

    def normalized_gamma(self) -> np.ndarray:
        """gamma divided by its largest populated bin."""
        top = np.nanmax(self.gamma)
        return self.gamma / top

    def normalized_model(self) -> Optional[np.ndarray]:
        if self.gamma_model is None:
            return None
        top = np.nanmax(self.gamma_model)
        return self.gamma_model / top


def empirical_semivariogram(coords, values, bins: LagBins,
                            theta: Optional[CovarianceParams] = None,
                            chunk: int = 512) -> VariogramTable:
    """Binned semivariogram gamma(B) = sum (v_i - v_j)^2 / (2 |B|).

    All unordered pairs are swept in row chunks; a pair contributes to the
    bin holding its (spatial, temporal) lag and pairs outside the edges are
    dropped. With theta given, the model semivariogram sill - K(ds, dt) is
    averaged over exactly the same pairs, bin by bin.
    """
    coords = as_coord_array(coords)
    values = np.asarray(values, dtype=float)
    n = coords.shape[0]
    if values.shape != (n,):
        raise ValidationError(f"values have shape {values.shape}, expected ({n},)")
    if n < 2:
        raise ValidationError("semivariogram needs at least two points")
    S, T = bins.n_space, bins.n_time
    count = np.zeros(S * T, dtype=np.int64)
    sq_sum = np.zeros(S * T)
    model_sum = np.zeros(S * T) if theta is not None else None
    sill = theta.sill if theta is not None else 0.0
    cols = np.arange(n)
    for lo in range(0, n - 1, chunk):
        hi = min(lo + chunk, n - 1)
        block = coords[lo:hi]
        dx = block[:, 0:1] - coords[None, :, 0]
        dy = block[:, 1:2] - coords[None, :, 1]
        ds = np.sqrt(dx * dx + dy * dy)
        dt = np.abs(block[:, 2:3] - coords[None, :, 2])
        si = np.searchsorted(bins.space_edges, ds, side="right") - 1
        ti = np.searchsorted(bins.time_edges, dt, side="right") - 1
        upper = cols[None, :] > np.arange(lo, hi)[:, None]
        ok = upper & (si >= 0) & (si < S) & (ti >= 0) & (ti < T)
        if not ok.any():
            continue
        flat = (si * T + ti)[ok]
        dv = (values[None, :] - values[lo:hi, None])[ok]
        np.add.at(count, flat, 1)
        np.add.at(sq_sum, flat, dv * dv)
        if model_sum is not None:
            gm = sill - cov_value(theta, ds[ok], dt[ok])
            np.add.at(model_sum, flat, gm)
    count = count.reshape(S, T)
    sq_sum = sq_sum.reshape(S, T)
    if model_sum is not None:
        model_sum = model_sum.reshape(S, T)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(count > 0, sq_sum / (2.0 * count), np.nan)
        gamma_model = (
            None if model_sum is None
            else np.where(count > 0, model_sum / count, np.nan)
        )
    return VariogramTable(bins=bins, count=count, gamma=gamma,
                          gamma_model=gamma_model)


# ---------------------------------------------------------------- CV folds

def assign_folds(plot_ids, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold index per row, blocking all rows of a plot together.

    Unique plot ids are sorted, permuted once, and dealt into k contiguous
    groups; the first (n_plots mod k) folds receive the extra plot each.
    """
    plot_ids = np.asarray(plot_ids)
    unique = np.sort(np.unique(plot_ids))
    n_plots = unique.size
    if k < 2:
        raise ValidationError(f"cross-validation needs k >= 2, got {k}")
    if k > n_plots:
        raise ValidationError(
            f"k = {k} exceeds the {n_plots} distinct plots available"
        )
    perm = rng.permutation(n_plots)
    base = n_plots // k
    extra = n_plots % k
    fold_of_plot = np.empty(n_plots, dtype=np.int64)
    start = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        fold_of_plot[perm[start : start + size]] = f
        start += size
    lookup = dict(zip(unique.tolist(), fold_of_plot.tolist()))
    return np.asarray([lookup[p] for p in plot_ids.tolist()], dtype=np.int64)


# ----------------------------------------------------------------- metrics

def mean_squared_error(obs, est) -> float:
    obs = np.asarray(obs, dtype=float)
    est = np.asarray(est, dtype=float)
    return float(np.mean((obs - est) ** 2))


def r_squared(obs, est) -> float:
    """1 - sum (obs - est)^2 / sum (obs - mean(obs))^2."""
    obs = np.asarray(obs, dtype=float)
    est = np.asarray(est, dtype=float)
    denom = float(np.sum((obs - obs.mean()) ** 2))
    if denom == 0.0:
        raise ValidationError("observations are constant; no variance to explain")
    return 1.0 - float(np.sum((obs - est) ** 2)) / denom


def log_predictive_density_normal(obs, mu_draws, tau_draws) -> np.ndarray:
    """Per-point log of the draw-averaged normal density.

    log (1/M) sum_m N(obs_j; mu_mj, tau_m^2), computed through logsumexp.
    """
    obs = np.asarray(obs, dtype=float)
    mu = np.asarray(mu_draws, dtype=float)
    tau = np.asarray(tau_draws, dtype=float)[:, None]
    M = mu.shape[0]
    logs = (
        -0.5 * math.log(2.0 * math.pi)
        - np.log(tau)
        - 0.5 * ((obs[None, :] - mu) / tau) ** 2
    )
    return logsumexp(logs, axis=0) - math.log(M)


def log_predictive_density_bernoulli(obs, prob_draws,
                                     floor: float = 1e-12) -> np.ndarray:
    """Per-point log of the draw-averaged Bernoulli mass, floored."""
    obs = np.asarray(obs)
    prob = np.asarray(prob_draws, dtype=float)
    mass = np.where(obs[None, :] == 1, prob, 1.0 - prob).mean(axis=0)
    return np.log(np.maximum(mass, floor))


def coverage_95(obs, draws) -> float:
    """Fraction of points whose value lies inside the central 95% interval."""
    obs = np.asarray(obs, dtype=float)
    draws = np.asarray(draws, dtype=float)
    q = np.quantile(draws, [0.025, 0.975], axis=0)
    return float(np.mean((obs >= q[0]) & (obs <= q[1])))


# ---------------------------------------------------------- cross-validation

@dataclass(frozen=True)
class FoldResult:
    fold: int
    n_test: int
    n_forest_test: int
    mse: float
    mlpd_y: float
    mlpd_z: float
    coverage95: float


@dataclass(frozen=True)
class CvResult:
    """Pooled held-out metrics with the per-fold breakdown.

    mlpd_y covers only held-out rows observed forested (the continuous
    stage is undefined at zero biomass); everything else covers all
    held-out rows.
    """

    folds: List[FoldResult]
    n_test: int
    mse: float
    r_squared: float
    mlpd_y: float
    mlpd_z: float
    coverage95: float


def run_cross_validation(coords, b, plot_ids, transform: RootTransform,
                         priors_y: PriorSpec, priors_z: PriorSpec, *,
                         k: int = 10, iterations: int,
                         burn_in: Optional[int] = None, thin: int = 1,
                         seed: int = 0, m: int = 25, threads: int = 1,
                         jitter: Optional[float] = None) -> CvResult:
    """Plot-blocked k-fold cross-validation of the two-stage model.

    Per fold, the occupancy stage trains on every training row and the
    continuous stage on the forested training rows; held-out biomass is
    scored against composed posterior predictive draws. Chains and
    predictions get fold-specific generators derived from (seed, stage,
    fold), so fold results do not depend on evaluation order.
    """
    coords = as_coord_array(coords)
    b = np.asarray(b, dtype=float)
    n = coords.shape[0]
    if b.shape != (n,):
        raise ValidationError(f"b has shape {b.shape}, expected ({n},)")
    if np.any(b < 0):
        raise ValidationError("biomass must be non-negative")
    fold_of_row = assign_folds(
        plot_ids, k,
        np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0)))),
    )
    z_all = (b > 0).astype(np.int64)

    pooled_obs: List[np.ndarray] = []
    pooled_est: List[np.ndarray] = []
    pooled_mlpd_y: List[np.ndarray] = []
    pooled_mlpd_z: List[np.ndarray] = []
    pooled_cover: List[float] = []
    pooled_cover_n: List[int] = []
    folds: List[FoldResult] = []

    for f in range(k):
        test = fold_of_row == f
        train = ~test
        z_train = z_all[train]
        if z_train.min() == z_train.max():
            raise ValidationError(
                f"fold {f}: training occupancy collapses to a single class"
            )
        forest_train = train & (b > 0)
        if not forest_train.any():
            raise ValidationError(f"fold {f}: no forested training rows")

        z_rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((seed, 1, f)))
        )
        y_rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((seed, 2, f)))
        )
        pred_seed = int(
            np.random.SeedSequence((seed, 3, f)).generate_state(1)[0]
        )

        samples_z = run_gibbs_bernoulli(
            z_all[train], coords[train], priors_z, iterations=iterations,
            burn_in=burn_in, thin=thin, rng=z_rng, m=m, jitter=jitter,
        )
        samples_y = run_gibbs_normal(
            transform.apply(b[forest_train]), coords[forest_train], priors_y,
            iterations=iterations, burn_in=burn_in, thin=thin, rng=y_rng,
            m=m, jitter=jitter,
        )
        pred_y = predict_y(samples_y, coords[forest_train], coords[test],
                           master_seed=pred_seed, m=m, jitter=jitter,
                           threads=threads)
        pred_z = predict_z(samples_z, coords[train], coords[test],
                           master_seed=pred_seed, m=m, jitter=jitter,
                           threads=threads)
        b_draws = compose_biomass(pred_y, pred_z, transform)

        b_test = b[test]
        est = b_draws.mean(axis=0)
        forest_test = b_test > 0
        mlpd_y_rows = log_predictive_density_normal(
            transform.apply(b_test[forest_test]),
            pred_y.mu[:, forest_test], pred_y.tau,
        )
        mlpd_z_rows = log_predictive_density_bernoulli(
            (b_test > 0).astype(np.int64), pred_z.prob
        )
        cover = coverage_95(b_test, b_draws)

        pooled_obs.append(b_test)
        pooled_est.append(est)
        pooled_mlpd_y.append(mlpd_y_rows)
        pooled_mlpd_z.append(mlpd_z_rows)
        pooled_cover.append(cover)
        pooled_cover_n.append(int(test.sum()))
        folds.append(FoldResult(
            fold=f, n_test=int(test.sum()),
            n_forest_test=int(forest_test.sum()),
            mse=mean_squared_error(b_test, est),
            mlpd_y=float(np.mean(mlpd_y_rows)) if mlpd_y_rows.size else math.nan,
            mlpd_z=float(np.mean(mlpd_z_rows)),
            coverage95=cover,
        ))

    obs = np.concatenate(pooled_obs)
    est = np.concatenate(pooled_est)
    cover_overall = float(
        np.average(pooled_cover, weights=pooled_cover_n)
    )
    return CvResult(
        folds=folds,
        n_test=obs.size,
        mse=mean_squared_error(obs, est),
        r_squared=r_squared(obs, est),
        mlpd_y=float(np.mean(np.concatenate(pooled_mlpd_y))),
        mlpd_z=float(np.mean(np.concatenate(pooled_mlpd_z))),
        coverage95=cover_overall,
    )


# ------------------------------------------------------ design-based check

def horvitz_thompson(values) -> tuple:
    """Equal-probability estimator: (mean, standard error sd/sqrt(n))."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size < 2:
        raise ValidationError(
            f"estimator needs a 1-d sample of >= 2 values, got shape {values.shape}"
        )
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


@dataclass(frozen=True)
class HtEstimate:
    start: float
    end: float
    n: int
    mean_year: float
    mean: float
    se: float


def horvitz_thompson_cycles(values, years, edges) -> List[HtEstimate]:
    """Design-based estimates over measurement cycles [edge_k, edge_k+1).

    Zero-biomass rows stay in the sample; each cycle also reports the mean
    measurement year of its rows.
    """
    values = np.asarray(values, dtype=float)
    years = np.asarray(years, dtype=float)
    if values.shape != years.shape:
        raise ValidationError("values and years must align")
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or not np.all(np.diff(edges) > 0):
        raise ValidationError("cycle edges must be increasing with >= 2 values")
    out = []
    for a, bnd in zip(edges[:-1], edges[1:]):
        inside = (years >= a) & (years < bnd)
        if inside.sum() < 2:
            raise ValidationError(
                f"cycle [{a}, {bnd}) holds {int(inside.sum())} rows; need >= 2"
            )
        mean, se = horvitz_thompson(values[inside])
        out.append(HtEstimate(
            start=float(a), end=float(bnd), n=int(inside.sum()),
            mean_year=float(years[inside].mean()), mean=mean, se=se,
        ))
    return out


# --------------------------------------------------------------- synthetic

def sample_gaussian_field(coords, theta: CovarianceParams,
                          rng: np.random.Generator, *,
                          dense_limit: int = 3000, m: int = 25,
                          jitter: Optional[float] = None) -> np.ndarray:
    """One zero-mean field draw; consumes exactly n standard normals.

    Up to dense_limit points the draw is exact through a dense Cholesky;
    past it the field is built sequentially from the kriging weights, i.e.
    a draw from the nearest-neighbor approximation of the process.
    """
    coords = as_coord_array(coords)
    n = coords.shape[0]
    if jitter is None:
        jitter = default_jitter(theta)
    eps = rng.standard_normal(n)
    if n <= dense_limit:
        C = cov_matrix(theta, coords)
        C[np.diag_indices_from(C)] += jitter
        return np.linalg.cholesky(C) @ eps
    graph = build_graph(coords, m)
    ws = graph_workspace(graph)
    B, F = kriging_weights(ws, theta, jitter)
    sd = np.sqrt(F)
    w_ord = np.empty(n)
    nbr_idx = graph.nbr_idx
    nbr_cnt = graph.nbr_cnt
    for i in range(n):
        cnt = nbr_cnt[i]
        val = sd[i] * eps[i]
        if cnt:
            val += float(B[i, :cnt] @ w_ord[nbr_idx[i, :cnt]])
        w_ord[i] = val
    return np.ascontiguousarray(w_ord[graph.rank])


@dataclass(frozen=True)
class SyntheticTruth:
    """Generating parameters for a synthetic dataset.

    alpha_z None drops the occupancy stage entirely: everything is
    forested and no occupancy variates are consumed.
    """

    alpha_y: float
    theta_y: CovarianceParams
    tau: float
    transform: RootTransform
    alpha_z: Optional[float] = None
    theta_z: Optional[CovarianceParams] = None

    def __post_init__(self):
        if (self.alpha_z is None) != (self.theta_z is None):
            raise ValidationError(
                "alpha_z and theta_z must be given together or both omitted"
            )
        if self.tau < 0:
            raise ValidationError(f"tau must be >= 0, got {self.tau}")


@dataclass(frozen=True)
class SyntheticData:
    coords: np.ndarray
    plot_ids: np.ndarray
    b: np.ndarray
    z: np.ndarray
    y_latent: np.ndarray
    w_y: np.ndarray
    w_z: Optional[np.ndarray]


def simulate_dataset(n_plots: int, extent: float, years, visits: int,
                     truth: SyntheticTruth, rng: np.random.Generator, *,
                     dense_limit: int = 3000, m: int = 25) -> SyntheticData:
    """Plots at uniform locations, each visited in `visits` distinct years.

    Variate order: plot x then y coordinates, one uniform matrix for the
    visit-year choice, the occupancy field and its Bernoulli uniforms (when
    present), the continuous field, then the noise normals, which are
    consumed even when tau is zero. Rows are plot-major with years
    ascending within a plot.
    """
    years = np.asarray(years, dtype=float)
    if n_plots < 1:
        raise ValidationError(f"n_plots must be >= 1, got {n_plots}")
    if not (extent > 0):
        raise ValidationError(f"extent must be positive, got {extent}")
    if not 1 <= visits <= years.size:
        raise ValidationError(
            f"visits must lie in [1, {years.size}], got {visits}"
        )
    xs = rng.uniform(0.0, extent, n_plots)
    ys = rng.uniform(0.0, extent, n_plots)
    pick = np.argsort(rng.random((n_plots, years.size)), axis=1)[:, :visits]
    pick.sort(axis=1)
    n = n_plots * visits
    coords = np.empty((n, 3))
    coords[:, 0] = np.repeat(xs, visits)
    coords[:, 1] = np.repeat(ys, visits)
    coords[:, 2] = years[pick].ravel()
    plot_ids = np.repeat(np.arange(n_plots), visits)

    if truth.alpha_z is not None:
        w_z = sample_gaussian_field(coords, truth.theta_z, rng,
                                    dense_limit=dense_limit, m=m)
        z = (rng.random(n) < expit(truth.alpha_z + w_z)).astype(np.int64)
    else:
        w_z = None
        z = np.ones(n, dtype=np.int64)
    w_y = sample_gaussian_field(coords, truth.theta_y, rng,
                                dense_limit=dense_limit, m=m)
    y = truth.alpha_y + w_y + truth.tau * rng.standard_normal(n)
    b = truth.transform.invert(y) * z
    return SyntheticData(coords=coords, plot_ids=plot_ids, b=b, z=z,
                         y_latent=y, w_y=w_y, w_z=w_z)
