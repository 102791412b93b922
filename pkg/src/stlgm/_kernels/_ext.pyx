# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: batched kriging weights, sparse LDL^T, Polya-Gamma draws.

Mirrors stlgm._kernels._fallback. The Polya-Gamma path pulls variates from
the bit generator through the same C distribution functions numpy's
Generator uses, in the same order, so a fixed seed yields the same draws on
either lane.
"""

import numpy as np

cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport M_PI, erfc, exp, fabs, log, pow, sqrt
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport (
    random_standard_exponential,
    random_standard_normal,
    random_standard_uniform,
)

cnp.import_array()


# ---------------------------------------------------------------- kriging

def nngp_weights(sigma2, phi, lam, nbr_cnt, ds_in, dt_in, ds_nn, dt_nn,
                 double jitter):
    """Kriging weights and conditional variances for padded neighbor systems.

    Same contract as the fallback: returns (B, F) with zero padding in B and
    the sill in F for rows without neighbors; raises LinAlgError when a
    neighbor system is not positive definite.
    """
    cdef double[::1] s2 = np.ascontiguousarray(sigma2, dtype=np.float64)
    cdef double[::1] ph = np.ascontiguousarray(phi, dtype=np.float64)
    cdef double[::1] lm = np.ascontiguousarray(lam, dtype=np.float64)
    cdef int[::1] cnt = np.ascontiguousarray(nbr_cnt, dtype=np.int32)
    cdef double[:, ::1] dsi = np.ascontiguousarray(ds_in, dtype=np.float64)
    cdef double[:, ::1] dti = np.ascontiguousarray(dt_in, dtype=np.float64)
    cdef double[:, :, ::1] dsn = np.ascontiguousarray(ds_nn, dtype=np.float64)
    cdef double[:, :, ::1] dtn = np.ascontiguousarray(dt_nn, dtype=np.float64)

    cdef Py_ssize_t n = dsi.shape[0]
    cdef Py_ssize_t m = dsi.shape[1]
    cdef Py_ssize_t L = s2.shape[0]

    B_arr = np.zeros((n, m))
    F_arr = np.empty(n)
    K_arr = np.empty((m, m))
    k_arr = np.empty(m)
    y_arr = np.empty(m)
    cdef double[:, ::1] B = B_arr
    cdef double[::1] F = F_arr
    cdef double[:, ::1] K = K_arr
    cdef double[::1] kv = k_arr
    cdef double[::1] yv = y_arr

    cdef double sill = 0.0
    cdef Py_ssize_t l
    for l in range(L):
        sill += s2[l]

    cdef Py_ssize_t row, i, j, kk, c
    cdef double acc, val
    cdef Py_ssize_t fail = -1

    with nogil:
        for row in range(n):
            c = cnt[row]
            if c == 0:
                F[row] = sill
                continue
            for i in range(c):
                for j in range(i + 1):
                    val = 0.0
                    for l in range(L):
                        val += s2[l] * exp(-dsn[row, i, j] / ph[l]
                                           - dtn[row, i, j] / lm[l])
                    K[i, j] = val
                K[i, i] += jitter
                val = 0.0
                for l in range(L):
                    val += s2[l] * exp(-dsi[row, i] / ph[l]
                                       - dti[row, i] / lm[l])
                kv[i] = val
            # lower Cholesky in place
            for j in range(c):
                acc = K[j, j]
                for kk in range(j):
                    acc -= K[j, kk] * K[j, kk]
                if acc <= 0.0:
                    fail = row
                    break
                K[j, j] = sqrt(acc)
                for i in range(j + 1, c):
                    acc = K[i, j]
                    for kk in range(j):
                        acc -= K[i, kk] * K[j, kk]
                    K[i, j] = acc / K[j, j]
            if fail >= 0:
                break
            # L y = k, then L^T w = y; F from the inner solve
            for i in range(c):
                acc = kv[i]
                for j in range(i):
                    acc -= K[i, j] * yv[j]
                yv[i] = acc / K[i, i]
            acc = sill
            for i in range(c):
                acc -= yv[i] * yv[i]
            F[row] = acc
            for i in range(c - 1, -1, -1):
                acc = yv[i]
                for j in range(i + 1, c):
                    acc -= K[j, i] * B[row, j]
                B[row, i] = acc / K[i, i]

    if fail >= 0:
        raise np.linalg.LinAlgError(
            f"neighbor system at row {fail} is not positive definite"
        )
    return B_arr, F_arr


# ---------------------------------------------------------------- sparse LDL

def ldl_symbolic(int n, int[::1] Ap, int[::1] Ai):
    """Elimination tree and column counts for an up-looking LDL^T.

    Ap/Ai hold the full symmetric CSC pattern; only upper-triangle entries
    (row < column) steer the analysis. Returns (Lp, parent).
    """
    Lp_arr = np.empty(n + 1, dtype=np.int32)
    parent_arr = np.empty(n, dtype=np.int32)
    lnz_arr = np.empty(n, dtype=np.int32)
    flag_arr = np.empty(n, dtype=np.int32)
    cdef int[::1] Lp = Lp_arr
    cdef int[::1] parent = parent_arr
    cdef int[::1] lnz = lnz_arr
    cdef int[::1] flag = flag_arr
    cdef int k, p, i
    with nogil:
        for k in range(n):
            parent[k] = -1
            flag[k] = k
            lnz[k] = 0
            for p in range(Ap[k], Ap[k + 1]):
                i = Ai[p]
                if i < k:
                    while flag[i] != k:
                        if parent[i] == -1:
                            parent[i] = k
                        lnz[i] += 1
                        flag[i] = k
                        i = parent[i]
        Lp[0] = 0
        for k in range(n):
            Lp[k + 1] = Lp[k] + lnz[k]
    return Lp_arr, parent_arr


def ldl_numeric(int n, int[::1] Ap, int[::1] Ai, double[::1] Ax,
                int[::1] Lp, int[::1] parent,
                int[::1] Li, double[::1] Lx, double[::1] D):
    """Numeric LDL^T refactorization onto a fixed symbolic structure.

    Fills Li, Lx, D. Returns n on success, or the index of the first pivot
    that is not strictly positive.
    """
    y_arr = np.zeros(n)
    pattern_arr = np.empty(n, dtype=np.int32)
    flag_arr = np.empty(n, dtype=np.int32)
    lnz_arr = np.empty(n, dtype=np.int32)
    cdef double[::1] Y = y_arr
    cdef int[::1] pattern = pattern_arr
    cdef int[::1] flag = flag_arr
    cdef int[::1] lnz = lnz_arr
    cdef int k, p, i, top, length, s, p2
    cdef double yi, l_ki
    cdef int status = n
    with nogil:
        for k in range(n):
            top = n
            flag[k] = k
            lnz[k] = 0
            for p in range(Ap[k], Ap[k + 1]):
                i = Ai[p]
                if i > k:
                    continue
                Y[i] += Ax[p]
                length = 0
                while flag[i] != k:
                    pattern[length] = i
                    length += 1
                    flag[i] = k
                    i = parent[i]
                while length > 0:
                    length -= 1
                    top -= 1
                    pattern[top] = pattern[length]
            D[k] = Y[k]
            Y[k] = 0.0
            for s in range(top, n):
                i = pattern[s]
                yi = Y[i]
                Y[i] = 0.0
                p2 = Lp[i] + lnz[i]
                for p in range(Lp[i], p2):
                    Y[Li[p]] -= Lx[p] * yi
                l_ki = yi / D[i]
                D[k] -= l_ki * yi
                Li[p2] = k
                Lx[p2] = l_ki
                lnz[i] += 1
            if D[k] <= 0.0:
                status = k
                break
    return status


def ldl_solve(int n, int[::1] Lp, int[::1] Li, double[::1] Lx,
              double[::1] D, double[::1] x):
    """Solve L D L^T x = b in place (b passed in x)."""
    cdef int j, p
    cdef double acc
    with nogil:
        for j in range(n):
            acc = x[j]
            for p in range(Lp[j], Lp[j + 1]):
                x[Li[p]] -= Lx[p] * acc
        for j in range(n):
            x[j] /= D[j]
        for j in range(n - 1, -1, -1):
            acc = x[j]
            for p in range(Lp[j], Lp[j + 1]):
                acc -= Lx[p] * x[Li[p]]
            x[j] = acc


def ldl_ltsolve(int n, int[::1] Lp, int[::1] Li, double[::1] Lx, double[::1] x):
    """Solve L^T x = b in place (b passed in x)."""
    cdef int j, p
    cdef double acc
    with nogil:
        for j in range(n - 1, -1, -1):
            acc = x[j]
            for p in range(Lp[j], Lp[j + 1]):
                acc -= Lx[p] * x[Li[p]]
            x[j] = acc


# ---------------------------------------------------------------- Polya-Gamma

cdef double _TRUNC = 0.64


cdef double _log_norm_cdf(double x) nogil:
    if x < -37.0:
        return -0.5 * x * x - log(-x) - 0.5 * log(2.0 * M_PI)
    return log(0.5 * erfc(-x / sqrt(2.0)))


cdef double _series_coef(long k, double x) nogil:
    cdef double half = k + 0.5
    if x <= _TRUNC:
        return (M_PI * half * pow(2.0 / (M_PI * x), 1.5)
                * exp(-2.0 * half * half / x))
    return M_PI * half * exp(-half * half * M_PI * M_PI * x / 2.0)


cdef double _truncated_inv_gauss(double z, bitgen_t *bg) nogil:
    cdef double t = _TRUNC
    cdef double e1, e2, x, mu, y, mu_y
    if z < 1.0 / t:
        while True:
            while True:
                e1 = random_standard_exponential(bg)
                e2 = random_standard_exponential(bg)
                if e1 * e1 <= 2.0 * e2 / t:
                    break
            x = t / ((1.0 + t * e1) * (1.0 + t * e1))
            if random_standard_uniform(bg) <= exp(-0.5 * z * z * x):
                return x
    mu = 1.0 / z
    while True:
        y = random_standard_normal(bg)
        y *= y
        mu_y = mu * y
        x = mu + 0.5 * mu * mu_y - 0.5 * mu * sqrt(4.0 * mu_y + mu_y * mu_y)
        if random_standard_uniform(bg) > mu / (mu + x):
            x = mu * mu / x
        if x <= t:
            return x


cdef double _pg_one(double c, bitgen_t *bg) nogil:
    cdef double z = 0.5 * fabs(c)
    cdef double t = _TRUNC
    cdef double fz = M_PI * M_PI / 8.0 + z * z / 2.0
    cdef double x0 = log(fz) + fz * t
    cdef double b = sqrt(1.0 / t) * (t * z - 1.0)
    cdef double a = -sqrt(1.0 / t) * (t * z + 1.0)
    cdef double xb = x0 - z + _log_norm_cdf(b)
    cdef double xa = x0 + z + _log_norm_cdf(a)
    cdef double ratio, x, s, y
    cdef long k
    if xb > 690.0 or xa > 690.0:
        ratio = 0.0
    else:
        ratio = 1.0 / (1.0 + 4.0 / M_PI * (exp(xb) + exp(xa)))
    while True:
        if random_standard_uniform(bg) < ratio:
            x = t + random_standard_exponential(bg) / fz
        else:
            x = _truncated_inv_gauss(z, bg)
        s = _series_coef(0, x)
        y = random_standard_uniform(bg) * s
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
    arr = np.asarray(c, dtype=np.float64)
    flat = np.ascontiguousarray(arr.ravel())
    out = np.empty(flat.size)
    cdef double[::1] cv = flat
    cdef double[::1] ov = out
    cdef Py_ssize_t i, N = cv.shape[0]
    bitgen = rng.bit_generator
    cdef bitgen_t *bg = <bitgen_t *> PyCapsule_GetPointer(
        bitgen.capsule, "BitGenerator"
    )
    with bitgen.lock, nogil:
        for i in range(N):
            ov[i] = _pg_one(cv[i], bg)
    return out.reshape(arr.shape)
