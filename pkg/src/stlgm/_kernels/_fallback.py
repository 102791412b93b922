"""Pure numpy implementations of the hot kernels.

These mirror the compiled extension in stlgm._kernels._ext: batched kriging
weights for nearest-neighbor conditioning and an exact Polya-Gamma sampler.
The PG sampler draws scalar variates from the Generator in the same order as
the compiled code, so either lane is deterministic under a fixed seed.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["nngp_weights", "pg_draws"]


def nngp_weights(sigma2, phi, lam, nbr_cnt, ds_in, dt_in, ds_nn, dt_nn, jitter):
    """Kriging weights and conditional variances for padded neighbor systems.

    Parameters
    ----------
    sigma2, phi, lam : (L,) arrays of component variances and ranges.
    nbr_cnt : (n,) int array, number of active neighbors per row.
    ds_in, dt_in : (n, m) lags from each point to its neighbors.
    ds_nn, dt_nn : (n, m, m) pairwise lags among each point's neighbors.
    jitter : float added to the neighbor-system diagonal.

    Returns
    -------
    B : (n, m) weights, zero beyond each row's count.
    F : (n,) conditional variances, sill for rows with no neighbors.

    Raises
    ------
    np.linalg.LinAlgError if a neighbor system is not positive definite;
    callers translate this into a NumericalError naming the row.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    phi = np.asarray(phi, dtype=float)
    lam = np.asarray(lam, dtype=float)
    nbr_cnt = np.asarray(nbr_cnt)
    n, m = ds_in.shape
    sill = float(np.sum(sigma2))

    B = np.zeros((n, m))
    F = np.full(n, sill + 0.0)

    def _cov(ds, dt):
        out = np.zeros(ds.shape)
        for l in range(sigma2.size):
            out += sigma2[l] * np.exp(-ds / phi[l] - dt / lam[l])
        return out

    for c in np.unique(nbr_cnt):
        c = int(c)
        if c == 0:
            continue
        rows = np.flatnonzero(nbr_cnt == c)
        Knn = _cov(ds_nn[rows, :c, :c], dt_nn[rows, :c, :c])
        Knn[:, np.arange(c), np.arange(c)] += jitter
        kin = _cov(ds_in[rows, :c], dt_in[rows, :c])
        weights = np.linalg.solve(Knn, kin[:, :, None])[:, :, 0]
        B[rows, :c] = weights
        F[rows] = sill - np.einsum("ij,ij->i", weights, kin)
    return B, F


# Devroye-style exact sampler for PG(1, c): draw X ~ J*(1, |c|/2) by
# accept/reject between a truncated inverse-Gaussian body and an exponential
# tail split at t = 0.64, squeeze with the alternating series, return X/4.

_TRUNC = 0.64


def _log_norm_cdf(x):
    if x < -37.0:
        # erfc underflows; leading term of the Mills-ratio expansion
        return -0.5 * x * x - math.log(-x) - 0.5 * math.log(2.0 * math.pi)
    return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))


def _series_coef(k, x):
    half = k + 0.5
    if x <= _TRUNC:
        return (
            math.pi
            * half
            * (2.0 / (math.pi * x)) ** 1.5
            * math.exp(-2.0 * half * half / x)
        )
    return math.pi * half * math.exp(-half * half * math.pi * math.pi * x / 2.0)


def _truncated_inv_gauss(z, rng):
    """Draw from IG(1/z, 1) restricted to (0, t], t = 0.64."""
    t = _TRUNC
    if z < 1.0 / t:
        # small tilt: chi-squared-like proposal for the right tail shape
        while True:
            while True:
                e1 = rng.standard_exponential()
                e2 = rng.standard_exponential()
                if e1 * e1 <= 2.0 * e2 / t:
                    break
            x = t / ((1.0 + t * e1) * (1.0 + t * e1))
            if rng.random() <= math.exp(-0.5 * z * z * x):
                return x
    mu = 1.0 / z
    while True:
        y = rng.standard_normal()
        y *= y
        mu_y = mu * y
        x = mu + 0.5 * mu * mu_y - 0.5 * mu * math.sqrt(4.0 * mu_y + mu_y * mu_y)
        if rng.random() > mu / (mu + x):
            x = mu * mu / x
        if x <= t:
            return x


def _pg_draw_single(c, rng):
    z = 0.5 * abs(c)
    t = _TRUNC
    fz = math.pi * math.pi / 8.0 + z * z / 2.0
    # log masses of the two proposal branches, via the J*(1, z) tail split
    x0 = math.log(fz) + fz * t
    b = math.sqrt(1.0 / t) * (t * z - 1.0)
    a = -math.sqrt(1.0 / t) * (t * z + 1.0)
    xb = x0 - z + _log_norm_cdf(b)
    xa = x0 + z + _log_norm_cdf(a)
    if xb > 690.0 or xa > 690.0:
        ratio = 0.0
    else:
        ratio = 1.0 / (1.0 + 4.0 / math.pi * (math.exp(xb) + math.exp(xa)))
    while True:
        if rng.random() < ratio:
            x = t + rng.standard_exponential() / fz
        else:
            x = _truncated_inv_gauss(z, rng)
        s = _series_coef(0, x)
        y = rng.random() * s
        k = 0
        while True:
            k += 1
            if k % 2 == 1:
                s -= _series_coef(k, x)
                if y <= s:
                    return x / 4.0
            else:
                s += _series_coef(k, x)
                if y > s:
                    break


def pg_draws(c, rng):
    """Exact PG(1, c_i) draws, one per entry of c."""
    c = np.asarray(c, dtype=float)
    flat = c.ravel()
    out = np.empty(flat.size)
    for i in range(flat.size):
        out[i] = _pg_draw_single(flat[i], rng)
    return out.reshape(c.shape)
