"""Nearest-neighbor Gaussian process machinery.

Points are ordered by time (ties broken by x, y, then input position). Each
ordered point i conditions on N(i), its m nearest predecessors, nearest by
spatial distance with ties broken by temporal distance and then by ordered
index. That conditioning yields kriging weights B and conditional variances
F with

    w_i | w_N(i) ~ Normal(B_i w_N(i), F_i)

and the implied sparse precision Q = (I - B)^T F^-1 (I - B). The same
formulas project the field to new points for prediction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import csc_matrix, csr_matrix
from scipy.spatial import cKDTree

from . import _kernels
from .covariance import CovarianceParams, cov_value
from .data_model import as_coord_array
from .errors import NumericalError, ValidationError

__all__ = [
    "NngpGraph",
    "SparsePrecision",
    "PredictionProjection",
    "order_points",
    "build_graph",
    "build_precision",
    "vecchia_log_density",
    "build_projection",
    "sample_predictive_field",
    "default_jitter",
    "write_graph",
    "read_graph",
]

_BRUTE_FORCE_LIMIT = 200
_DEFAULT_JITTER_SCALE = 1e-8


def default_jitter(theta: CovarianceParams) -> float:
    """Diagonal jitter for the m x m neighbor systems: 1e-8 times the sill."""
    return _DEFAULT_JITTER_SCALE * theta.sill


def order_points(coords) -> np.ndarray:
    """Deterministic point ordering for the Vecchia factorization.

    Sorts by ascending t, breaking ties by ascending x, then y, then input
    position. Returns the permutation p with coords[p] sorted; its argsort
    restores input order.
    """
    arr = as_coord_array(coords)
    n = arr.shape[0]
    if n == 0:
        raise ValidationError("cannot order an empty coordinate set")
    return np.lexsort((np.arange(n), arr[:, 1], arr[:, 0], arr[:, 2]))


@dataclass(frozen=True)
class NngpGraph:
    """Ordered coordinates plus per-point neighbor sets.

    coords are in sorted order; order maps ordered position to original input
    index and rank is its inverse. nbr_idx holds ordered indices padded with
    -1; row i has nbr_cnt[i] = min(m, i) active entries.
    """

    coords: np.ndarray
    order: np.ndarray
    rank: np.ndarray
    m: int
    nbr_idx: np.ndarray
    nbr_cnt: np.ndarray

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def neighbor_sets(self):
        """Neighbor index sets in ordered space, one frozenset per point."""
        return [
            frozenset(self.nbr_idx[i, : self.nbr_cnt[i]].tolist())
            for i in range(self.n)
        ]


def _exact_select(ds, dt, cand, m):
    """Pick m candidates by the (spatial, temporal, index) lexicographic key."""
    take = np.lexsort((cand, dt, ds))[:m]
    chosen = cand[take]
    chosen.sort()
    return chosen


def _predecessor_neighbors_brute(xy, t, m):
    n = xy.shape[0]
    nbr_idx = np.full((n, m), -1, dtype=np.int32)
    nbr_cnt = np.zeros(n, dtype=np.int32)
    for i in range(1, n):
        dx = xy[:i, 0] - xy[i, 0]
        dy = xy[:i, 1] - xy[i, 1]
        ds = np.sqrt(dx * dx + dy * dy)
        dt = np.abs(t[:i] - t[i])
        chosen = _exact_select(ds, dt, np.arange(i), m)
        nbr_cnt[i] = chosen.size
        nbr_idx[i, : chosen.size] = chosen
    return nbr_idx, nbr_cnt


def _keys_for(xy, t, i, cand):
    dx = xy[cand, 0] - xy[i, 0]
    dy = xy[cand, 1] - xy[i, 1]
    ds = np.sqrt(dx * dx + dy * dy)
    dt = np.abs(t[cand] - t[i])
    return ds, dt

def _predecessor_neighbors_tree(xy, t, m):
    n = xy.shape[0]
    tree = cKDTree(xy)
    k0 = min(n, 2 * m + 16)
    dist0, idx0 = tree.query(xy, k=k0)
    idx0 = np.atleast_2d(idx0)
    dist0 = np.atleast_2d(dist0)
    nbr_idx = np.full((n, m), -1, dtype=np.int32)
    nbr_cnt = np.zeros(n, dtype=np.int32)
    for i in range(1, n):
        cand = idx0[i]
        cover = dist0[i, -1]
        exhausted = k0 >= n
        pred = cand[cand < i]
        k = k0
        while pred.size < min(m, i) and not exhausted:
            k = min(n, 2 * k)
            dists, cand = tree.query(xy[i], k=k)
            exhausted = k >= n
            cover = dists[-1]
            pred = cand[cand < i]
        ds, dt = _keys_for(xy, t, i, pred)
        take = np.lexsort((pred, dt, ds))[: min(m, i)]
        boundary = ds[take[-1]]
        # the harvested ball must strictly cover the selection radius,
        # otherwise unseen points could tie at the boundary
        if not exhausted and not boundary < cover * (1.0 - 1e-12):
            ball = np.asarray(tree.query_ball_point(xy[i], boundary * (1 + 1e-9) + 1e-12))
            pred = ball[ball < i]
            ds, dt = _keys_for(xy, t, i, pred)
            take = np.lexsort((pred, dt, ds))[: min(m, i)]
        chosen = pred[take]
        chosen.sort()
        nbr_cnt[i] = chosen.size
        nbr_idx[i, : chosen.size] = chosen
    return nbr_idx, nbr_cnt


def build_graph(coords, m: int) -> NngpGraph:
    """Order points and attach each one's m nearest predecessors.

    Neighbor selection is exact: candidates are harvested from a k-d tree
    over (x, y) but the final choice always applies the lexicographic
    (spatial distance, temporal distance, index) key, so tree floating-point
    quirks cannot change the sets. m >= n-1 degenerates to full conditioning.
    """
    if m < 1:
        raise ValidationError(f"neighbor count m must be >= 1, got {m}")
    arr = as_coord_array(coords)
    order = order_points(arr)
    rank = np.argsort(order)
    pts = arr[order]
    xy = np.ascontiguousarray(pts[:, :2])
    t = pts[:, 2]
    n = pts.shape[0]
    mm = min(m, max(n - 1, 1))
    if n <= _BRUTE_FORCE_LIMIT:
        nbr_idx, nbr_cnt = _predecessor_neighbors_brute(xy, t, mm)
    else:
        nbr_idx, nbr_cnt = _predecessor_neighbors_tree(xy, t, mm)
    return NngpGraph(
        coords=pts, order=order, rank=rank, m=m, nbr_idx=nbr_idx, nbr_cnt=nbr_cnt
    )


@dataclass(frozen=True)
class _WeightWorkspace:
    """Precomputed lag arrays for one fixed neighbor structure."""

    nbr_idx: np.ndarray
    nbr_cnt: np.ndarray
    ds_in: np.ndarray
    dt_in: np.ndarray
    ds_nn: np.ndarray
    dt_nn: np.ndarray


def _weight_workspace(targets, sources, nbr_idx, nbr_cnt) -> _WeightWorkspace:
    safe = np.where(nbr_idx >= 0, nbr_idx, 0)
    nx = sources[safe]  # (n, m, 3); padded slots alias source 0, never read
    dx = targets[:, None, 0] - nx[:, :, 0]
    dy = targets[:, None, 1] - nx[:, :, 1]
    ds_in = np.sqrt(dx * dx + dy * dy)
    dt_in = np.abs(targets[:, None, 2] - nx[:, :, 2])
    dx = nx[:, :, None, 0] - nx[:, None, :, 0]
    dy = nx[:, :, None, 1] - nx[:, None, :, 1]
    ds_nn = np.sqrt(dx * dx + dy * dy)
    dt_nn = np.abs(nx[:, :, None, 2] - nx[:, None, :, 2])
    return _WeightWorkspace(nbr_idx, nbr_cnt, ds_in, dt_in, ds_nn, dt_nn)


def graph_workspace(graph: NngpGraph) -> _WeightWorkspace:
    return _weight_workspace(graph.coords, graph.coords, graph.nbr_idx, graph.nbr_cnt)


def kriging_weights(ws: _WeightWorkspace, theta: CovarianceParams, jitter=None):
    """Evaluate B and F for a neighbor structure under covariance theta."""
    if jitter is None:
        jitter = default_jitter(theta)
    sigma2 = np.array(theta.sigma, dtype=float) ** 2
    phi = np.array(theta.phi, dtype=float)
    lam = np.array(theta.lam, dtype=float)
    try:
        B, F = _kernels.nngp_weights(
            sigma2, phi, lam, ws.nbr_cnt, ws.ds_in, ws.dt_in, ws.ds_nn, ws.dt_nn,
            float(jitter),
        )
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"neighbor system factorization failed: {exc}") from exc
    # F below the double-precision resolution of the sill is cancellation
    # noise from a (near-)singular neighbor system, not a real variance
    floor = 1e-13 * theta.sill
    if not np.all(F > floor):
        bad = int(np.argmax(F <= floor))
        raise NumericalError(
            f"degenerate conditional variance at point {bad} "
            f"(F={F[bad]!r}); coincident points may need jitter"
        )
    return B, F


class CliqueScatter:
    """Accumulate sum_i (v_i outer v_i) / F_i into a fixed CSC pattern.

    idx_pad row i lists the clique member indices (the point itself first,
    then its neighbors, -1 padding). The sparsity pattern and the scatter
    bookkeeping are built once; values() recomputes numeric entries for new
    (B, F) in O(nnz).
    """

    def __init__(self, idx_pad: np.ndarray, dim: int):
        n, m1 = idx_pad.shape
        valid = idx_pad >= 0
        pair_valid = valid[:, :, None] & valid[:, None, :]
        rows = np.broadcast_to(idx_pad[:, :, None], (n, m1, m1))[pair_valid]
        cols = np.broadcast_to(idx_pad[:, None, :], (n, m1, m1))[pair_valid]
        order = np.lexsort((rows, cols))
        r_s = rows[order]
        c_s = cols[order]
        first = np.empty(r_s.size, dtype=bool)
        first[0] = True
        first[1:] = (r_s[1:] != r_s[:-1]) | (c_s[1:] != c_s[:-1])
        seg = np.flatnonzero(first)
        self.dim = dim
        self.indices = r_s[seg].astype(np.int32)
        self.indptr = np.searchsorted(c_s[seg], np.arange(dim + 1)).astype(np.int32)
        self._pair_valid = pair_valid
        self._order = order
        self._seg = seg

    @property
    def nnz(self) -> int:
        return self.indices.size

    def values(self, B: np.ndarray, F: np.ndarray) -> np.ndarray:
        n = B.shape[0]
        V = np.empty((n, B.shape[1] + 1))
        V[:, 0] = 1.0
        V[:, 1:] = -B
        # multiply before dividing so (p, q) and (q, p) entries are
        # bit-identical and the assembled matrix is exactly symmetric
        contr = (V[:, :, None] * V[:, None, :]) / F[:, None, None]
        flat = contr[self._pair_valid][self._order]
        return np.add.reduceat(flat, self._seg)


def _clique_index_pad(nbr_idx: np.ndarray) -> np.ndarray:
    n, m = nbr_idx.shape
    idx_pad = np.empty((n, m + 1), dtype=np.int64)
    idx_pad[:, 0] = np.arange(n)
    idx_pad[:, 1:] = nbr_idx
    return idx_pad


@dataclass(frozen=True)
class SparsePrecision:
    """Sparse NNGP precision over the ordered points, with its B/F factors.

    Q = (I - B)^T F^-1 (I - B) where row i of the strictly lower-triangular B
    holds the kriging weights on N(i) and F is the diagonal of conditional
    variances. Q is CSC over ordered indices.
    """

    graph: NngpGraph
    theta: CovarianceParams
    B: np.ndarray
    F: np.ndarray
    Q: csc_matrix
    jitter: float

    @property
    def n(self) -> int:
        return self.graph.n

    def log_det(self) -> float:
        """log |Q| = -sum log F_i."""
        return float(-np.sum(np.log(self.F)))

    def B_matrix(self) -> csr_matrix:
        """B as a sparse matrix over ordered indices."""
        g = self.graph
        valid = g.nbr_idx >= 0
        indptr = np.concatenate([[0], np.cumsum(g.nbr_cnt)])
        return csr_matrix(
            (self.B[valid], g.nbr_idx[valid], indptr), shape=(g.n, g.n)
        )


def build_precision(
    graph: NngpGraph, theta: CovarianceParams, jitter: Optional[float] = None
) -> SparsePrecision:
    """Kriging weights plus the assembled sparse precision for a graph."""
    if jitter is None:
        jitter = default_jitter(theta)
    ws = graph_workspace(graph)
    B, F = kriging_weights(ws, theta, jitter)
    scatter = CliqueScatter(_clique_index_pad(graph.nbr_idx), graph.n)
    Q = csc_matrix(
        (scatter.values(B, F), scatter.indices, scatter.indptr),
        shape=(graph.n, graph.n),
    )
    return SparsePrecision(graph=graph, theta=theta, B=B, F=F, Q=Q, jitter=jitter)


def _conditional_residuals(graph: NngpGraph, B: np.ndarray, w_ordered: np.ndarray):
    safe = np.where(graph.nbr_idx >= 0, graph.nbr_idx, 0)
    neigh = w_ordered[safe]
    neigh[graph.nbr_idx < 0] = 0.0
    return w_ordered - np.einsum("ij,ij->i", B, neigh)


def weights_log_density(
    graph: NngpGraph, B: np.ndarray, F: np.ndarray, w_ordered: np.ndarray
) -> float:
    """Log density of an already-ordered field directly from kriging weights.

    Equals -0.5 (n log 2pi + sum log F_i + w^T Q w) with the quadratic form
    evaluated through the conditional residuals; no sparse matrix is built.
    """
    resid = _conditional_residuals(graph, B, w_ordered)
    quad = float(np.sum(resid * resid / F))
    return -0.5 * (graph.n * np.log(2.0 * np.pi) + float(np.sum(np.log(F))) + quad)


def vecchia_log_density(w, precision: SparsePrecision) -> float:
    """Log density of w under the NNGP prior.

    w is indexed like the coordinates originally passed to build_graph.
    """
    w = np.asarray(w, dtype=float)
    g = precision.graph
    if w.shape != (g.n,):
        raise ValidationError(f"w has shape {w.shape}, expected ({g.n},)")
    return weights_log_density(g, precision.B, precision.F, w[g.order])


@dataclass(frozen=True)
class PredictionProjection:
    """Kriging projection from observed points onto prediction points.

    w_pred = B_p w_obs + eta with eta ~ Normal(0, diag(F_p)). Neighbor
    indices refer to the observed coordinates in the order they were given.
    """

    nbr_idx: np.ndarray
    nbr_cnt: np.ndarray
    B: np.ndarray
    F: np.ndarray
    n_obs: int

    @property
    def n_pred(self) -> int:
        return self.F.shape[0]

    def matrix(self) -> csr_matrix:
        valid = self.nbr_idx >= 0
        indptr = np.concatenate([[0], np.cumsum(self.nbr_cnt)])
        return csr_matrix(
            (self.B[valid], self.nbr_idx[valid], indptr),
            shape=(self.n_pred, self.n_obs),
        )

    def project_mean(self, w_obs: np.ndarray) -> np.ndarray:
        safe = np.where(self.nbr_idx >= 0, self.nbr_idx, 0)
        vals = w_obs[safe]
        vals[self.nbr_idx < 0] = 0.0
        return np.einsum("ij,ij->i", self.B, vals)


def observation_neighbors(obs_coords, pred_coords, m: int):
    """Each prediction point's m nearest observed points, exact lexicographic."""
    obs = as_coord_array(obs_coords)
    pred = as_coord_array(pred_coords)
    n_obs = obs.shape[0]
    if n_obs == 0:
        raise ValidationError("prediction requires at least one observed point")
    mm = min(m, n_obs)
    p = pred.shape[0]
    nbr_idx = np.full((p, mm), -1, dtype=np.int32)
    nbr_cnt = np.full(p, mm, dtype=np.int32)
    xy = np.ascontiguousarray(obs[:, :2])
    t_obs = obs[:, 2]
    if n_obs <= _BRUTE_FORCE_LIMIT:
        for i in range(p):
            dx = xy[:, 0] - pred[i, 0]
            dy = xy[:, 1] - pred[i, 1]
            ds = np.sqrt(dx * dx + dy * dy)
            dt = np.abs(t_obs - pred[i, 2])
            nbr_idx[i] = _exact_select(ds, dt, np.arange(n_obs), mm)
        return nbr_idx, nbr_cnt
    tree = cKDTree(xy)
    k0 = min(n_obs, mm + 8)
    dist0, idx0 = tree.query(pred[:, :2], k=k0)
    idx0 = np.atleast_2d(idx0)
    dist0 = np.atleast_2d(dist0)
    for i in range(p):
        cand = idx0[i]
        cover = dist0[i, -1]
        dx = xy[cand, 0] - pred[i, 0]
        dy = xy[cand, 1] - pred[i, 1]
        ds = np.sqrt(dx * dx + dy * dy)
        dt = np.abs(t_obs[cand] - pred[i, 2])
        take = np.lexsort((cand, dt, ds))[:mm]
        boundary = ds[take[-1]]
        if k0 < n_obs and not boundary < cover * (1.0 - 1e-12):
            ball = np.asarray(
                tree.query_ball_point(pred[i, :2], boundary * (1 + 1e-9) + 1e-12)
            )
            dx = xy[ball, 0] - pred[i, 0]
            dy = xy[ball, 1] - pred[i, 1]
            ds = np.sqrt(dx * dx + dy * dy)
            dt = np.abs(t_obs[ball] - pred[i, 2])
            take = np.lexsort((ball, dt, ds))[:mm]
            cand = ball
        chosen = cand[take]
        chosen.sort()
        nbr_idx[i] = chosen
    return nbr_idx, nbr_cnt


def projection_workspace(obs_coords, pred_coords, m: int):
    """Neighbor structure plus lag arrays for repeated projection builds."""
    obs = as_coord_array(obs_coords)
    pred = as_coord_array(pred_coords)
    nbr_idx, nbr_cnt = observation_neighbors(obs, pred, m)
    return _weight_workspace(pred, obs, nbr_idx, nbr_cnt)


def projection_from_workspace(
    ws: _WeightWorkspace, n_obs: int, theta: CovarianceParams, jitter=None
) -> PredictionProjection:
    B, F = kriging_weights(ws, theta, jitter)
    return PredictionProjection(
        nbr_idx=ws.nbr_idx, nbr_cnt=ws.nbr_cnt, B=B, F=F, n_obs=n_obs
    )


def build_projection(
    obs_coords, pred_coords, theta: CovarianceParams, m: int, jitter=None
) -> PredictionProjection:
    """Projection (B_p, F_p) of the observed field onto prediction points."""
    obs = as_coord_array(obs_coords)
    ws = projection_workspace(obs, pred_coords, m)
    return projection_from_workspace(ws, obs.shape[0], theta, jitter)


def sample_predictive_field(
    projection: PredictionProjection, w_obs, rng: np.random.Generator
) -> np.ndarray:
    """Draw w_pred = B_p w_obs + sqrt(F_p) * standard normals."""
    w_obs = np.asarray(w_obs, dtype=float)
    if w_obs.shape != (projection.n_obs,):
        raise ValidationError(
            f"w_obs has shape {w_obs.shape}, expected ({projection.n_obs},)"
        )
    mean = projection.project_mean(w_obs)
    return mean + np.sqrt(projection.F) * rng.standard_normal(projection.n_pred)


_GRAPH_MAGIC = b"STLGMG1\x00"


def write_graph(graph: NngpGraph, path) -> None:
    """Binary dump of ordering and neighbor lists (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(_GRAPH_MAGIC)
        fh.write(struct.pack("<QQ", graph.n, graph.nbr_idx.shape[1]))
        fh.write(np.asarray(graph.order, dtype="<i8").tobytes())
        fh.write(np.asarray(graph.coords, dtype="<f8").tobytes())
        fh.write(np.asarray(graph.nbr_cnt, dtype="<i4").tobytes())
        fh.write(np.asarray(graph.nbr_idx, dtype="<i4").tobytes())
        fh.write(struct.pack("<q", graph.m))


def read_graph(path) -> NngpGraph:
    """Read a graph dump written by write_graph."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _GRAPH_MAGIC:
            raise ValidationError(f"not a graph dump: bad magic {magic!r}")
        n, mm = struct.unpack("<QQ", fh.read(16))
        order = np.frombuffer(fh.read(8 * n), dtype="<i8").astype(np.int64)
        coords = np.frombuffer(fh.read(8 * 3 * n), dtype="<f8").reshape(n, 3).copy()
        nbr_cnt = np.frombuffer(fh.read(4 * n), dtype="<i4").astype(np.int32)
        nbr_idx = (
            np.frombuffer(fh.read(4 * n * mm), dtype="<i4").reshape(n, mm).astype(np.int32)
        )
        (m,) = struct.unpack("<q", fh.read(8))
    return NngpGraph(
        coords=coords,
        order=order,
        rank=np.argsort(order),
        m=int(m),
        nbr_idx=nbr_idx,
        nbr_cnt=nbr_cnt,
    )
