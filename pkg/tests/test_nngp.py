import math

import numpy as np
import pytest
from scipy import stats

from stlgm.covariance import CovarianceParams
from stlgm.errors import NumericalError, ValidationError
from stlgm import nngp
from stlgm.nngp import (
    CliqueScatter,
    build_graph,
    build_precision,
    build_projection,
    order_points,
    read_graph,
    sample_predictive_field,
    vecchia_log_density,
    write_graph,
)

from conftest import dense_cov, random_coords, random_theta


def oracle_neighbor_sets(pts, m):
    """Predecessor neighbors by sorted (spatial, temporal, index) tuples."""
    out = []
    for i in range(len(pts)):
        keys = []
        for j in range(i):
            dx = pts[i, 0] - pts[j, 0]
            dy = pts[i, 1] - pts[j, 1]
            ds = math.sqrt(dx * dx + dy * dy)
            dt = abs(pts[i, 2] - pts[j, 2])
            keys.append((ds, dt, j))
        keys.sort()
        out.append(sorted(k[2] for k in keys[:m]))
    return out


def dense_weights(coords_ordered, nbr_sets, theta):
    """B and F row by row from the dense covariance."""
    K = dense_cov(coords_ordered, theta)
    n = len(coords_ordered)
    B = []
    F = np.empty(n)
    for i, nbrs in enumerate(nbr_sets):
        if not nbrs:
            B.append(np.zeros(0))
            F[i] = K[i, i]
            continue
        Knn = K[np.ix_(nbrs, nbrs)]
        kin = K[i, nbrs]
        w = np.linalg.solve(Knn, kin)
        B.append(w)
        F[i] = K[i, i] - w @ kin
    return B, F


class TestOrdering:
    def test_time_then_space(self):
        coords = np.array(
            [[5.0, 0.0, 2020.0], [1.0, 0.0, 2019.0], [0.0, 3.0, 2020.0], [0.0, 1.0, 2020.0]]
        )
        np.testing.assert_array_equal(order_points(coords), [1, 3, 2, 0])

    def test_input_position_breaks_full_ties(self):
        coords = np.array([[1.0, 1.0, 2020.0]] * 3)
        np.testing.assert_array_equal(order_points(coords), [0, 1, 2])

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            order_points(np.zeros((0, 3)))

    def test_rank_inverts_order(self, rng):
        coords = random_coords(rng, 60)
        g = build_graph(coords, m=5)
        np.testing.assert_array_equal(g.order[g.rank], np.arange(60))
        np.testing.assert_allclose(g.coords[g.rank], coords)


class TestNeighborSelection:
    @pytest.mark.parametrize("n,m", [(1, 3), (2, 3), (30, 4), (80, 10), (50, 60)])
    def test_small_matches_oracle(self, rng, n, m):
        coords = random_coords(rng, n)
        g = build_graph(coords, m=m)
        want = oracle_neighbor_sets(g.coords, m)
        for i in range(n):
            got = sorted(g.nbr_idx[i, : g.nbr_cnt[i]].tolist())
            assert got == want[i], f"point {i}"

    def test_tree_path_matches_oracle(self, rng):
        coords = random_coords(rng, 500)
        g = build_graph(coords, m=8)
        want = oracle_neighbor_sets(g.coords, 8)
        for i in range(500):
            got = sorted(g.nbr_idx[i, : g.nbr_cnt[i]].tolist())
            assert got == want[i], f"point {i}"

    def test_tree_path_with_heavy_ties(self, rng):
        # repeated grid locations over several years: many exact distance ties
        base = np.array([[i % 7, i // 7] for i in range(49)], dtype=float)
        reps = []
        for year in (2018.0, 2019.0, 2020.0, 2021.0, 2022.0, 2023.0):
            reps.append(np.column_stack([base, np.full(49, year)]))
        coords = np.vstack(reps)
        assert coords.shape[0] > 200
        g = build_graph(coords, m=6)
        want = oracle_neighbor_sets(g.coords, 6)
        for i in range(coords.shape[0]):
            got = sorted(g.nbr_idx[i, : g.nbr_cnt[i]].tolist())
            assert got == want[i], f"point {i}"

    def test_m_validation(self, rng):
        with pytest.raises(ValidationError):
            build_graph(random_coords(rng, 5), m=0)


class TestKrigingWeights:
    @pytest.mark.parametrize("n,m,L", [(25, 5, 1), (40, 8, 2), (30, 29, 2)])
    def test_matches_dense(self, rng, n, m, L):
        coords = random_coords(rng, n)
        th = random_theta(rng, L)
        g = build_graph(coords, m=m)
        prec = build_precision(g, th, jitter=0.0)
        nbr_sets = [g.nbr_idx[i, : g.nbr_cnt[i]].tolist() for i in range(n)]
        B_want, F_want = dense_weights(g.coords, nbr_sets, th)
        np.testing.assert_allclose(prec.F, F_want, rtol=1e-9)
        for i in range(n):
            np.testing.assert_allclose(
                prec.B[i, : g.nbr_cnt[i]], B_want[i], rtol=1e-8, atol=1e-12
            )
            assert np.all(prec.B[i, g.nbr_cnt[i] :] == 0.0)

    def test_full_conditioning_recovers_inverse(self, rng):
        # with m = n-1 the implied precision is exactly the dense inverse
        n = 40
        coords = random_coords(rng, n)
        th = random_theta(rng)
        g = build_graph(coords, m=n - 1)
        prec = build_precision(g, th, jitter=0.0)
        K = dense_cov(g.coords, th)
        Q_want = np.linalg.inv(K)
        Q_got = prec.Q.toarray()
        scale = np.abs(Q_want).max()
        assert np.abs(Q_got - Q_want).max() / scale < 1e-8

    def test_coincident_points_need_jitter(self, rng):
        coords = np.array([[1.0, 1.0, 2020.0]] * 3 + [[2.0, 2.0, 2020.0]])
        th = random_theta(rng)
        with pytest.raises(NumericalError):
            build_precision(build_graph(coords, m=3), th, jitter=0.0)
        prec = build_precision(build_graph(coords, m=3), th)  # default jitter
        assert np.all(prec.F > 0)


class TestSparsePrecision:
    def test_q_equals_factored_form(self, rng):
        coords = random_coords(rng, 60)
        th = random_theta(rng)
        g = build_graph(coords, m=6)
        prec = build_precision(g, th)
        Bmat = prec.B_matrix().toarray()
        IB = np.eye(g.n) - Bmat
        Q_want = IB.T @ np.diag(1.0 / prec.F) @ IB
        np.testing.assert_allclose(prec.Q.toarray(), Q_want, rtol=1e-10, atol=1e-12)

    def test_log_det(self, rng):
        coords = random_coords(rng, 50)
        th = random_theta(rng)
        prec = build_precision(build_graph(coords, m=5), th)
        sign, want = np.linalg.slogdet(prec.Q.toarray())
        assert sign == 1.0
        assert prec.log_det() == pytest.approx(want, rel=1e-10)

    def test_b_strictly_lower(self, rng):
        coords = random_coords(rng, 50)
        prec = build_precision(build_graph(coords, m=5), random_theta(rng))
        Bmat = prec.B_matrix().toarray()
        assert np.all(np.triu(Bmat) == 0.0)


class TestVecchiaLogDensity:
    def test_full_conditioning_matches_mvn(self, rng):
        n = 35
        coords = random_coords(rng, n)
        th = random_theta(rng)
        prec = build_precision(build_graph(coords, m=n - 1), th, jitter=0.0)
        w = rng.standard_normal(n)
        want = stats.multivariate_normal.logpdf(w, cov=dense_cov(coords, th))
        assert vecchia_log_density(w, prec) == pytest.approx(want, rel=1e-9)

    def test_sparse_case_matches_precision_density(self, rng):
        n = 60
        coords = random_coords(rng, n)
        th = random_theta(rng)
        g = build_graph(coords, m=6)
        prec = build_precision(g, th)
        w = rng.standard_normal(n)
        Q = prec.Q.toarray()
        w_ord = w[g.order]
        want = 0.5 * prec.log_det() - 0.5 * n * np.log(2 * np.pi) - 0.5 * w_ord @ Q @ w_ord
        assert vecchia_log_density(w, prec) == pytest.approx(want, rel=1e-10)

    def test_input_order_invariance(self, rng):
        coords = random_coords(rng, 40)
        th = random_theta(rng)
        w = rng.standard_normal(40)
        perm = rng.permutation(40)
        a = vecchia_log_density(w, build_precision(build_graph(coords, m=5), th))
        b = vecchia_log_density(
            w[perm], build_precision(build_graph(coords[perm], m=5), th)
        )
        assert a == pytest.approx(b, rel=1e-12)

    def test_shape_check(self, rng):
        prec = build_precision(build_graph(random_coords(rng, 10), m=3), random_theta(rng))
        with pytest.raises(ValidationError):
            vecchia_log_density(np.zeros(9), prec)


class TestCliqueScatter:
    def test_matches_dense_scatter(self, rng):
        n, m = 25, 4
        idx_pad = np.full((n, m + 1), -1, dtype=np.int64)
        idx_pad[:, 0] = np.arange(n)
        for i in range(1, n):
            k = min(m, i, rng.integers(0, m + 1))
            if k > 0:
                idx_pad[i, 1 : k + 1] = rng.choice(i, size=k, replace=False)
        B = rng.standard_normal((n, m))
        B[idx_pad[:, 1:] < 0] = 0.0
        F = rng.uniform(0.5, 2.0, n)
        sc = CliqueScatter(idx_pad, n)
        from scipy.sparse import csc_matrix

        got = csc_matrix((sc.values(B, F), sc.indices, sc.indptr), shape=(n, n)).toarray()
        want = np.zeros((n, n))
        for i in range(n):
            members = idx_pad[i][idx_pad[i] >= 0]
            v = np.concatenate([[1.0], -B[i, : members.size - 1]])
            want[np.ix_(members, members)] += np.outer(v, v) / F[i]
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


class TestProjection:
    def test_matches_dense_conditional(self, rng):
        n_obs, n_pred, m = 50, 15, 7
        obs = random_coords(rng, n_obs)
        pred = random_coords(rng, n_pred)
        th = random_theta(rng)
        proj = build_projection(obs, pred, th, m=m, jitter=0.0)
        K_oo = dense_cov(obs, th)
        for i in range(n_pred):
            nbrs = proj.nbr_idx[i, : proj.nbr_cnt[i]].tolist()
            k_po = np.array(
                [dense_cov(np.vstack([pred[i], obs[j]]), th)[0, 1] for j in nbrs]
            )
            w = np.linalg.solve(K_oo[np.ix_(nbrs, nbrs)], k_po)
            np.testing.assert_allclose(proj.B[i, : len(nbrs)], w, rtol=1e-8, atol=1e-12)
            assert proj.F[i] == pytest.approx(th.sill - w @ k_po, rel=1e-8)

    def test_all_observed_neighbors_is_exact_kriging(self, rng):
        n_obs, n_pred = 20, 6
        obs = random_coords(rng, n_obs)
        pred = random_coords(rng, n_pred)
        th = random_theta(rng)
        proj = build_projection(obs, pred, th, m=n_obs, jitter=0.0)
        K_oo = dense_cov(obs, th)
        K_po = np.array([[dense_cov(np.vstack([p, o]), th)[0, 1] for o in obs] for p in pred])
        W = K_po @ np.linalg.inv(K_oo)
        mean_w = rng.standard_normal(n_obs)
        np.testing.assert_allclose(
            proj.project_mean(mean_w), W @ mean_w, rtol=1e-7, atol=1e-10
        )
        F_want = th.sill - np.einsum("ij,ij->i", W, K_po)
        np.testing.assert_allclose(proj.F, F_want, rtol=1e-7)

    def test_neighbor_choice_is_exact(self, rng):
        obs = random_coords(rng, 300)
        pred = random_coords(rng, 40)
        got = nngp.observation_neighbors(obs, pred, m=6)[0]
        for i in range(40):
            keys = []
            for j in range(300):
                dx = pred[i, 0] - obs[j, 0]
                dy = pred[i, 1] - obs[j, 1]
                keys.append(
                    (math.sqrt(dx * dx + dy * dy), abs(pred[i, 2] - obs[j, 2]), j)
                )
            keys.sort()
            want = sorted(k[2] for k in keys[:6])
            assert sorted(got[i].tolist()) == want, f"pred point {i}"

    def test_sampling_moments(self, rng):
        obs = random_coords(rng, 30)
        pred = random_coords(rng, 5)
        th = random_theta(rng)
        proj = build_projection(obs, pred, th, m=10)
        w_obs = rng.standard_normal(30)
        draws = np.array(
            [sample_predictive_field(proj, w_obs, rng) for _ in range(4000)]
        )
        np.testing.assert_allclose(
            draws.mean(axis=0), proj.project_mean(w_obs), atol=4 * np.sqrt(proj.F.max() / 4000) + 0.05
        )
        np.testing.assert_allclose(draws.var(axis=0), proj.F, rtol=0.15)

    def test_sampling_deterministic_given_seed(self, rng):
        obs = random_coords(rng, 30)
        pred = random_coords(rng, 5)
        proj = build_projection(obs, pred, random_theta(rng), m=10)
        w_obs = rng.standard_normal(30)
        a = sample_predictive_field(proj, w_obs, np.random.default_rng(7))
        b = sample_predictive_field(proj, w_obs, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)


class TestGraphIO:
    def test_round_trip(self, rng, tmp_path):
        g = build_graph(random_coords(rng, 70), m=6)
        path = tmp_path / "graph.bin"
        write_graph(g, path)
        back = read_graph(path)
        np.testing.assert_array_equal(back.order, g.order)
        np.testing.assert_array_equal(back.rank, g.rank)
        np.testing.assert_allclose(back.coords, g.coords)
        np.testing.assert_array_equal(back.nbr_idx, g.nbr_idx)
        np.testing.assert_array_equal(back.nbr_cnt, g.nbr_cnt)
        assert back.m == g.m

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTAGRPH" + b"\x00" * 64)
        with pytest.raises(ValidationError):
            read_graph(path)
