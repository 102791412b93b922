"""Gibbs samplers for the two model stages.

Continuous stage (run_gibbs_normal): y_i = alpha + w_i + eps_i with
eps ~ Normal(0, tau^2) and w an NNGP field. Each iteration updates
(theta, tau) by Metropolis-Hastings on the marginal likelihood with
(alpha, w) integrated out, then draws (alpha, w) jointly from their
Gaussian conditional under the new parameters. The sparse factorization
computed while scoring a proposal is kept when the proposal is accepted
and reused for the conjugate draw, so each iteration pays for exactly one
factorization per proposal.

Occupancy stage (run_gibbs_bernoulli): z_i ~ Bernoulli(logit^-1(alpha + w_i)).
Each iteration draws (alpha, w) given Polya-Gamma variables omega, redraws
omega, then updates theta by Metropolis-Hastings against the NNGP density
of the current field (no sparse factorization in that step).

Coefficient ordering, fixed throughout: the joint vector u stacks the w
coefficients under a fill-reducing permutation of the clique graph
(reverse Cuthill-McKee) with alpha last at position n. The permutation
keeps the sparse factor of the posterior precision from filling in; the
dense alpha border eliminates last, confining its coupling to one row.
_PosteriorPrecision.rows records which original data row occupies each
slot. In that layout the posterior precision is

    Qt = blockdiag(Q_w, q_alpha) + [[diag(nu), nu], [nu^T, sum(nu)]]

with nu_i = 1/tau^2 (continuous) or omega_i (occupancy), and the posterior
mean solves Qt m = [g, q_alpha m_alpha + sum(g)] with g_i = y_i/tau^2 or
z_i - 1/2.

Random-variate order per iteration, for reproducibility: continuous stage
draws d proposal normals, one acceptance uniform, then n+1 coefficient
normals. Occupancy stage draws n+1 coefficient normals, the Polya-Gamma
variates in original row order, d proposal normals, then one acceptance
uniform.
"""

from __future__ import annotations

import math
import struct
import time
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import _kernels
from .covariance import CovarianceParams, NormalPrior, PriorSpec, log_prior
from .data_model import as_coord_array
from .errors import NumericalError, ValidationError
from .nngp import (
    CliqueScatter,
    NngpGraph,
    _clique_index_pad,
    build_graph,
    graph_workspace,
    kriging_weights,
    weights_log_density,
)
from .spchol import SpdFactorizer

__all__ = [
    "AdaptiveProposal",
    "PosteriorSamples",
    "NormalEngine",
    "BernoulliEngine",
    "run_gibbs_normal",
    "run_gibbs_bernoulli",
    "marginal_log_likelihood_y",
    "write_posterior",
    "read_posterior",
    "posterior_map_theta",
]

_ADAPT_DECAY = 0.6
_ADAPT_FLOOR = 50  # iterations before the empirical covariance takes over
_COV_RIDGE = 1e-10


class AdaptiveProposal:
    """Adaptive multivariate-normal random walk on log parameters.

    The proposal covariance is scale * (2.38^2 / d) * (C + ridge I) with C
    the running covariance of the chain's log parameters, and scale tuned
    by Robbins-Monro toward a target acceptance probability. Until enough
    iterations have accumulated the covariance is a fixed diagonal. All
    adaptation stops once freeze() is called (at the end of burn-in).
    """

    def __init__(self, d: int, target: float = 0.25, init_step: float = 0.1):
        self.d = d
        self.target = target
        self.log_scale = 0.0
        self.frozen = False
        self._t = 0
        self._count = 0
        self._mean = np.zeros(d)
        self._m2 = np.zeros((d, d))
        self._init_cov = (init_step * init_step) * np.eye(d)

    def observe(self, log_params: np.ndarray) -> None:
        """Welford update with the chain state at the end of an iteration."""
        if self.frozen:
            return
        self._count += 1
        delta = log_params - self._mean
        self._mean += delta / self._count
        self._m2 += np.outer(delta, log_params - self._mean)

    def _covariance(self) -> np.ndarray:
        if self._count < max(_ADAPT_FLOOR, 2 * self.d):
            base = self._init_cov
        else:
            base = self._m2 / (self._count - 1)
        return base + _COV_RIDGE * np.eye(self.d)

    def propose(self, log_params: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """New log-parameter vector; always consumes exactly d normals."""
        chol = np.linalg.cholesky(self._covariance())
        step = math.sqrt(math.exp(self.log_scale) * 2.38**2 / self.d)
        return log_params + step * (chol @ rng.standard_normal(self.d))

    def adapt(self, acceptance_probability: float) -> None:
        """Robbins-Monro step on the global scale."""
        if self.frozen:
            return
        self._t += 1
        gamma = self._t ** (-_ADAPT_DECAY)
        self.log_scale += gamma * (acceptance_probability - self.target)

    def freeze(self) -> None:
        self.frozen = True


def _pg_mean(c: float) -> float:
    """E[PG(1, c)] = tanh(c/2) / (2c), with the c -> 0 limit 1/4."""
    if abs(c) < 1e-4:
        return 0.25 - c * c / 48.0
    return math.tanh(0.5 * c) / (2.0 * c)


def _fill_reducing_positions(idx_pad: np.ndarray, n: int) -> np.ndarray:
    """Slot for each ordered point, chosen to keep the factor sparse.

    The precision pattern connects every pair inside each clique
    {i} union N(i); reverse Cuthill-McKee on that graph concentrates the
    pattern near the diagonal, which bounds the Cholesky fill. Any fixed
    permutation is algebraically fine, so the choice only affects speed.
    """
    valid = idx_pad >= 0
    pair = valid[:, :, None] & valid[:, None, :]
    shape = pair.shape
    r = np.broadcast_to(idx_pad[:, :, None], shape)[pair]
    c = np.broadcast_to(idx_pad[:, None, :], shape)[pair]
    adj = coo_matrix(
        (np.ones(r.size, dtype=np.int8), (r, c)), shape=(n, n)
    ).tocsc()
    order = reverse_cuthill_mckee(adj, symmetric_mode=True).astype(np.int64)
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    return pos


class _PosteriorPrecision:
    """Sparsity pattern and value assembly for the joint (w, alpha) precision.

    Built once per graph. The w block is laid out under a fill-reducing
    permutation with alpha last; rows[p] names the original data row held
    by slot p, and assemble()/rhs() take their per-coefficient vectors in
    that slot order. assemble() scatters the NNGP clique products, adds the
    noise precisions nu on the diagonal, and writes the dense alpha border:
    column n holds nu with the corner q_alpha + sum(nu), and each w column
    carries its coupling in a trailing row-n slot.
    """

    def __init__(self, graph: NngpGraph):
        n = graph.n
        self.graph = graph
        self.n = n
        idx_pad = _clique_index_pad(graph.nbr_idx)
        pos = _fill_reducing_positions(idx_pad, n)
        perm = np.empty(n, dtype=np.int64)
        perm[pos] = np.arange(n)
        self.rows = graph.order[perm]
        pos_pad = np.where(idx_pad >= 0, pos[idx_pad], -1)
        self.scatter = CliqueScatter(pos_pad, n)
        counts = np.diff(self.scatter.indptr)
        indptr = np.empty(n + 2, dtype=np.int64)
        indptr[0] = 0
        indptr[1 : n + 1] = np.cumsum(counts + 1)
        indptr[n + 1] = indptr[n] + n + 1
        nnz = int(indptr[-1])
        indices = np.empty(nnz, dtype=np.int32)
        # clique entry p of scatter column j lands at p + j (one trailing
        # row-n slot per earlier column)
        self._dest = np.arange(self.scatter.nnz, dtype=np.int64) + np.repeat(
            np.arange(n, dtype=np.int64), counts
        )
        indices[self._dest] = self.scatter.indices
        self._coupling_slots = np.asarray(indptr[1 : n + 1]) - 1
        indices[self._coupling_slots] = n
        self._border_slots = indptr[n] + np.arange(n + 1, dtype=np.int64)
        indices[self._border_slots] = np.arange(n + 1, dtype=np.int32)
        sc_diag = np.empty(n, dtype=np.int64)
        for j in range(n):
            lo, hi = self.scatter.indptr[j], self.scatter.indptr[j + 1]
            block = self.scatter.indices[lo:hi]
            sc_diag[j] = lo + int(np.searchsorted(block, j))
        self._diag_slots = sc_diag + np.arange(n, dtype=np.int64)
        self.nnz = nnz
        self.indptr = indptr
        self.indices = indices
        self.factorizer = SpdFactorizer(n + 1, indptr.astype(np.int32), indices)

    def assemble(self, B, F, nu, q_alpha) -> np.ndarray:
        """Numeric values for Qt; nu is given in slot order."""
        vals = np.empty(self.nnz)
        vals[self._dest] = self.scatter.values(B, F)
        vals[self._diag_slots] += nu
        vals[self._coupling_slots] = nu
        vals[self._border_slots[:-1]] = nu
        vals[self._border_slots[-1]] = q_alpha + float(np.sum(nu))
        return vals

    def rhs(self, g, g_sum, q_alpha, m_alpha) -> np.ndarray:
        out = np.empty(self.n + 1)
        out[: self.n] = g
        out[self.n] = q_alpha * m_alpha + g_sum
        return out

    def unpack(self, u: np.ndarray):
        """Split a coefficient vector into (alpha, w in original row order)."""
        w = np.empty(self.n)
        w[self.rows] = u[: self.n]
        return float(u[self.n]), w


@dataclass
class _StateEval:
    """Everything the sampler caches about one (theta, tau) evaluation."""

    B: np.ndarray
    F: np.ndarray
    factor: object
    rhs: np.ndarray
    mean: np.ndarray
    log_lik: float


class NormalEngine:
    """Shared machinery for the continuous stage.

    evaluate() scores one (theta, tau): it builds the kriging weights, one
    sparse factorization of the joint precision, and the marginal
    log likelihood of y with (alpha, w) integrated out,

        log f(y | theta, tau) = -(n/2) log(2 pi tau^2)
            + (log q_alpha - sum log F_i) / 2 - log|Qt| / 2
            - (y'y / tau^2 + q_alpha m_alpha^2 - r' Qt^-1 r) / 2

    with r the conditional-mean right-hand side. The cached solve Qt^-1 r
    doubles as the conjugate mean for the (alpha, w) draw.
    """

    def __init__(self, y, coords, alpha_prior: NormalPrior, *, m: int = 25,
                 jitter: Optional[float] = None):
        self.y = np.asarray(y, dtype=float)
        coords = as_coord_array(coords)
        if self.y.shape != (coords.shape[0],):
            raise ValidationError(
                f"y has shape {self.y.shape}, expected ({coords.shape[0]},)"
            )
        if not np.all(np.isfinite(self.y)):
            raise ValidationError("y must be finite")
        self.n = coords.shape[0]
        self.graph = build_graph(coords, m)
        self.workspace = graph_workspace(self.graph)
        self.precision = _PosteriorPrecision(self.graph)
        self.q_alpha = alpha_prior.precision
        self.m_alpha = alpha_prior.mean
        self.jitter = jitter
        self._y_slots = np.ascontiguousarray(self.y[self.precision.rows])
        self._y_sum = float(np.sum(self.y))
        self._y_sq = float(self.y @ self.y)

    def evaluate(self, theta: CovarianceParams, tau: float) -> _StateEval:
        if not (tau > 0 and math.isfinite(tau)):
            raise NumericalError(f"tau must be positive finite, got {tau}")
        n = self.n
        B, F = kriging_weights(self.workspace, theta, self.jitter)
        inv_t2 = 1.0 / (tau * tau)
        nu = np.full(n, inv_t2)
        vals = self.precision.assemble(B, F, nu, self.q_alpha)
        factor = self.precision.factorizer.refactor(vals)
        r = self.precision.rhs(self._y_slots * inv_t2, self._y_sum * inv_t2,
                               self.q_alpha, self.m_alpha)
        mean = factor.solve(r)
        quad = self._y_sq * inv_t2 + self.q_alpha * self.m_alpha**2 - float(r @ mean)
        log_lik = (
            -0.5 * n * math.log(2.0 * math.pi * tau * tau)
            + 0.5 * (math.log(self.q_alpha) - float(np.sum(np.log(F))))
            - 0.5 * factor.log_det
            - 0.5 * quad
        )
        return _StateEval(B=B, F=F, factor=factor, rhs=r, mean=mean, log_lik=log_lik)

    def draw_coefficients(self, state: _StateEval, rng: np.random.Generator):
        """One (alpha, w) draw from the conditional; consumes n+1 normals."""
        eps = rng.standard_normal(self.n + 1)
        u = state.mean + state.factor.unwhiten(eps)
        return self.precision.unpack(u)


def marginal_log_likelihood_y(y, coords, theta: CovarianceParams, tau: float,
                              alpha_prior: NormalPrior, *, m: int = 25,
                              jitter: Optional[float] = None) -> float:
    """Marginal log likelihood of the continuous stage at one (theta, tau)."""
    engine = NormalEngine(y, coords, alpha_prior, m=m, jitter=jitter)
    return engine.evaluate(theta, tau).log_lik


class BernoulliEngine:
    """Shared machinery for the occupancy stage conditional draw."""

    def __init__(self, z, coords, alpha_prior: NormalPrior, *, m: int = 25,
                 jitter: Optional[float] = None):
        z = np.asarray(z)
        if not np.isin(z, (0, 1)).all():
            raise ValidationError("z entries must be 0 or 1")
        coords = as_coord_array(coords)
        if z.shape != (coords.shape[0],):
            raise ValidationError(
                f"z has shape {z.shape}, expected ({coords.shape[0]},)"
            )
        self.z = z.astype(np.uint8)
        self.n = coords.shape[0]
        self.graph = build_graph(coords, m)
        self.workspace = graph_workspace(self.graph)
        self.precision = _PosteriorPrecision(self.graph)
        self.q_alpha = alpha_prior.precision
        self.m_alpha = alpha_prior.mean
        self.jitter = jitter
        kappa = self.z.astype(float) - 0.5
        self._kappa_slots = np.ascontiguousarray(kappa[self.precision.rows])
        self._kappa_sum = float(np.sum(kappa))

    def weights(self, theta: CovarianceParams):
        return kriging_weights(self.workspace, theta, self.jitter)

    def conditional_factor(self, B, F, omega):
        """Factor and mean of (alpha, w) | z, omega. omega in original order."""
        nu = np.asarray(omega, dtype=float)[self.precision.rows]
        vals = self.precision.assemble(B, F, nu, self.q_alpha)
        factor = self.precision.factorizer.refactor(vals)
        r = self.precision.rhs(self._kappa_slots, self._kappa_sum,
                               self.q_alpha, self.m_alpha)
        return factor, factor.solve(r)

    def draw_coefficients(self, factor, mean, rng: np.random.Generator):
        eps = rng.standard_normal(self.n + 1)
        u = mean + factor.unwhiten(eps)
        return self.precision.unpack(u)


@dataclass
class PosteriorSamples:
    """Complete sampler output.

    Scalar traces cover every iteration; w holds only the retained draws
    (past burn-in, every thin-th), in original row order, with
    kept_iterations giving their 1-based iteration ids. For the continuous
    stage log_target is the marginal log likelihood of y at that
    iteration's (theta, tau); for the occupancy stage it is the NNGP log
    density of the current field plus the theta log prior.
    """

    kind: str
    L: int
    iterations: int
    burn_in: int
    thin: int
    alpha: np.ndarray
    theta: np.ndarray
    tau: Optional[np.ndarray]
    log_target: np.ndarray
    accept: np.ndarray
    kept_iterations: np.ndarray
    w: np.ndarray
    acceptance_rate: float
    elapsed_seconds: float

    @property
    def n_kept(self) -> int:
        return self.w.shape[0]

    def _kept_rows(self) -> np.ndarray:
        return self.kept_iterations - 1

    def retained_theta(self) -> np.ndarray:
        return self.theta[self._kept_rows()]

    def retained_alpha(self) -> np.ndarray:
        return self.alpha[self._kept_rows()]

    def retained_tau(self) -> Optional[np.ndarray]:
        return None if self.tau is None else self.tau[self._kept_rows()]

    def theta_draw(self, k: int) -> CovarianceParams:
        return CovarianceParams.from_vector(self.theta[self.kept_iterations[k] - 1])


def _resolve_schedule(iterations, burn_in, thin):
    if iterations < 1:
        raise ValidationError(f"iterations must be >= 1, got {iterations}")
    if burn_in is None:
        burn_in = iterations // 2
    if not 0 <= burn_in <= iterations:
        raise ValidationError(
            f"burn_in must lie in [0, iterations], got {burn_in} of {iterations}"
        )
    if thin < 1:
        raise ValidationError(f"thin must be >= 1, got {thin}")
    if (iterations - burn_in) % thin:
        raise ValidationError(
            f"iterations - burn_in ({iterations - burn_in}) must be divisible "
            f"by thin ({thin})"
        )
    if burn_in == iterations:
        warnings.warn("burn_in equals iterations; no draws will be retained")
    return burn_in


def _acceptance_probability(log_ratio: float) -> float:
    if not math.isfinite(log_ratio):
        return 0.0 if log_ratio < 0 else 1.0
    return min(1.0, math.exp(min(log_ratio, 0.0)))


def run_gibbs_normal(y, coords, priors: PriorSpec, *, iterations: int,
                     burn_in: Optional[int] = None, thin: int = 1,
                     rng: np.random.Generator, m: int = 25,
                     jitter: Optional[float] = None) -> PosteriorSamples:
    """Gibbs sampler for the continuous stage.

    Per iteration: one joint log-normal random-walk proposal for
    (theta, tau) scored on the marginal likelihood times priors, then a
    conjugate (alpha, w) draw under the current parameters reusing the
    accepted factorization. Proposal adaptation runs during burn-in only.
    """
    if priors.tau is None:
        raise ValidationError("continuous stage requires a tau prior")
    burn_in = _resolve_schedule(iterations, burn_in, thin)
    engine = NormalEngine(y, coords, priors.alpha, m=m, jitter=jitter)
    n = engine.n
    L = priors.L

    theta = priors.theta_mean()
    tau = priors.tau.mean
    log_params = np.log(np.concatenate([theta.as_vector(), [tau]]))
    state = engine.evaluate(theta, tau)
    cur_prior = log_prior(theta, tau=tau, alpha=None, priors=priors)
    proposal = AdaptiveProposal(d=3 * L + 1)

    alpha_tr = np.empty(iterations)
    theta_tr = np.empty((iterations, 3 * L))
    tau_tr = np.empty(iterations)
    target_tr = np.empty(iterations)
    accept_tr = np.zeros(iterations, dtype=np.uint8)
    kept = []
    w_rows = []

    t0 = time.perf_counter()
    for it in range(1, iterations + 1):
        prop_log = proposal.propose(log_params, rng)
        u_accept = rng.random()
        log_ratio = -math.inf
        cand = None
        if np.all(np.isfinite(prop_log)):
            vec = np.exp(prop_log)
            theta_prop = CovarianceParams.from_vector(vec[:-1])
            tau_prop = float(vec[-1])
            prop_prior = log_prior(theta_prop, tau=tau_prop, alpha=None,
                                   priors=priors)
            if math.isfinite(prop_prior):
                try:
                    cand = engine.evaluate(theta_prop, tau_prop)
                except NumericalError:
                    cand = None
                if cand is not None:
                    jacobian = float(np.sum(prop_log - log_params))
                    log_ratio = (cand.log_lik + prop_prior + jacobian
                                 - state.log_lik - cur_prior)
        acc_prob = _acceptance_probability(log_ratio)
        if cand is not None and math.log(u_accept) < log_ratio:
            theta, tau = theta_prop, tau_prop
            log_params = prop_log
            state = cand
            cur_prior = prop_prior
            accept_tr[it - 1] = 1
        if it <= burn_in:
            proposal.adapt(acc_prob)
            proposal.observe(log_params)
            if it == burn_in:
                proposal.freeze()

        alpha, w = engine.draw_coefficients(state, rng)

        alpha_tr[it - 1] = alpha
        theta_tr[it - 1] = theta.as_vector()
        tau_tr[it - 1] = tau
        target_tr[it - 1] = state.log_lik
        if it > burn_in and (it - burn_in) % thin == 0:
            kept.append(it)
            w_rows.append(w)

    elapsed = time.perf_counter() - t0
    return PosteriorSamples(
        kind="y", L=L, iterations=iterations, burn_in=burn_in, thin=thin,
        alpha=alpha_tr, theta=theta_tr, tau=tau_tr, log_target=target_tr,
        accept=accept_tr,
        kept_iterations=np.asarray(kept, dtype=np.int64),
        w=np.asarray(w_rows, dtype=float).reshape(len(kept), n),
        acceptance_rate=float(np.mean(accept_tr)),
        elapsed_seconds=elapsed,
    )


def run_gibbs_bernoulli(z, coords, priors: PriorSpec, *, iterations: int,
                        burn_in: Optional[int] = None, thin: int = 1,
                        rng: np.random.Generator, m: int = 25,
                        jitter: Optional[float] = None) -> PosteriorSamples:
    """Gibbs sampler for the occupancy stage.

    Per iteration: conjugate (alpha, w) draw given the Polya-Gamma
    variables, fresh Polya-Gamma draws at alpha + w, then a log-normal
    random-walk update of theta scored on the NNGP density of the current
    field plus its prior. omega starts at the Polya-Gamma mean for the
    prior-mean linear predictor; w starts at zero.
    """
    burn_in = _resolve_schedule(iterations, burn_in, thin)
    engine = BernoulliEngine(z, coords, priors.alpha, m=m, jitter=jitter)
    n = engine.n
    L = priors.L
    if engine.z.min() == engine.z.max():
        warnings.warn(
            "all occupancy responses are in one class; alpha is weakly identified"
        )

    theta = priors.theta_mean()
    log_params = np.log(theta.as_vector())
    alpha = priors.alpha.mean
    w = np.zeros(n)
    omega = np.full(n, _pg_mean(alpha))
    B, F = engine.weights(theta)
    cur_prior = log_prior(theta, tau=None, alpha=None, priors=priors)
    proposal = AdaptiveProposal(d=3 * L)

    alpha_tr = np.empty(iterations)
    theta_tr = np.empty((iterations, 3 * L))
    target_tr = np.empty(iterations)
    accept_tr = np.zeros(iterations, dtype=np.uint8)
    kept = []
    w_rows = []

    t0 = time.perf_counter()
    for it in range(1, iterations + 1):
        factor, mean = engine.conditional_factor(B, F, omega)
        alpha, w = engine.draw_coefficients(factor, mean, rng)

        omega = _kernels.pg_draws(alpha + w, rng)

        w_ord = w[engine.graph.order]
        cur_dens = weights_log_density(engine.graph, B, F, w_ord)
        prop_log = proposal.propose(log_params, rng)
        u_accept = rng.random()
        log_ratio = -math.inf
        cand = None
        if np.all(np.isfinite(prop_log)):
            theta_prop = CovarianceParams.from_vector(np.exp(prop_log))
            prop_prior = log_prior(theta_prop, tau=None, alpha=None, priors=priors)
            if math.isfinite(prop_prior):
                try:
                    cand = kriging_weights(engine.workspace, theta_prop,
                                           engine.jitter)
                except NumericalError:
                    cand = None
                if cand is not None:
                    prop_dens = weights_log_density(engine.graph, cand[0],
                                                    cand[1], w_ord)
                    jacobian = float(np.sum(prop_log - log_params))
                    log_ratio = (prop_dens + prop_prior + jacobian
                                 - cur_dens - cur_prior)
        acc_prob = _acceptance_probability(log_ratio)
        if cand is not None and math.log(u_accept) < log_ratio:
            theta = theta_prop
            log_params = prop_log
            B, F = cand
            cur_prior = prop_prior
            cur_dens = prop_dens
            accept_tr[it - 1] = 1
        if it <= burn_in:
            proposal.adapt(acc_prob)
            proposal.observe(log_params)
            if it == burn_in:
                proposal.freeze()

        alpha_tr[it - 1] = alpha
        theta_tr[it - 1] = theta.as_vector()
        target_tr[it - 1] = cur_dens + cur_prior
        if it > burn_in and (it - burn_in) % thin == 0:
            kept.append(it)
            w_rows.append(w)

    elapsed = time.perf_counter() - t0
    return PosteriorSamples(
        kind="z", L=L, iterations=iterations, burn_in=burn_in, thin=thin,
        alpha=alpha_tr, theta=theta_tr, tau=None, log_target=target_tr,
        accept=accept_tr,
        kept_iterations=np.asarray(kept, dtype=np.int64),
        w=np.asarray(w_rows, dtype=float).reshape(len(kept), n),
        acceptance_rate=float(np.mean(accept_tr)),
        elapsed_seconds=elapsed,
    )


def posterior_map_theta(samples: PosteriorSamples, priors: PriorSpec):
    """Highest-scoring retained draw: argmax of log target plus log prior.

    For the continuous stage the score is the marginal likelihood plus the
    (theta, tau) prior; the occupancy trace already includes its prior.
    Returns (theta, tau_or_None, alpha) at that iteration.
    """
    if samples.n_kept == 0:
        raise ValidationError("no retained draws to locate a maximum in")
    rows = samples.kept_iterations - 1
    score = samples.log_target[rows].copy()
    if samples.kind == "y":
        for i, row in enumerate(rows):
            theta = CovarianceParams.from_vector(samples.theta[row])
            score[i] += log_prior(theta, tau=float(samples.tau[row]),
                                  alpha=None, priors=priors)
    best = rows[int(np.argmax(score))]
    theta = CovarianceParams.from_vector(samples.theta[best])
    tau = None if samples.tau is None else float(samples.tau[best])
    return theta, tau, float(samples.alpha[best])


# ------------------------------------------------------------------ storage

_W_MAGIC = b"STLGMW01"


def _csv_header(kind: str, L: int):
    cols = ["iteration", "alpha"]
    for l in range(1, L + 1):
        cols += [f"sigma_{l}", f"phi_{l}", f"lambda_{l}"]
    if kind == "y":
        cols += ["tau", "log_marginal", "accept"]
    else:
        cols += ["log_target", "accept"]
    return cols


def write_posterior(samples: PosteriorSamples, csv_path, w_path) -> None:
    """Write the scalar trace CSV and the retained-field binary."""
    import csv as _csv

    with open(csv_path, "w", newline="") as fh:
        writer = _csv.writer(fh, lineterminator="\n")
        writer.writerow(_csv_header(samples.kind, samples.L))
        for i in range(samples.iterations):
            row = [str(i + 1), repr(float(samples.alpha[i]))]
            row += [repr(float(v)) for v in samples.theta[i]]
            if samples.kind == "y":
                row.append(repr(float(samples.tau[i])))
            row.append(repr(float(samples.log_target[i])))
            row.append(str(int(samples.accept[i])))
            writer.writerow(row)
    with open(w_path, "wb") as fh:
        fh.write(_W_MAGIC)
        fh.write(struct.pack("<QQ", samples.n_kept, samples.w.shape[1]))
        fh.write(struct.pack("<QQQ", samples.iterations, samples.burn_in,
                             samples.thin))
        fh.write(np.asarray(samples.kept_iterations, dtype="<i8").tobytes())
        fh.write(np.asarray(samples.w, dtype="<f8").tobytes())


def read_posterior(csv_path, w_path) -> PosteriorSamples:
    """Rebuild PosteriorSamples from write_posterior output."""
    import csv as _csv

    with open(csv_path, "r", newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    if header[:2] != ["iteration", "alpha"]:
        raise ValidationError(f"not a posterior trace: header starts {header[:2]}")
    if "tau" in header:
        kind = "y"
        L = (header.index("tau") - 2) // 3
    elif "log_target" in header:
        kind = "z"
        L = (header.index("log_target") - 2) // 3
    else:
        raise ValidationError("posterior trace lacks a tau or log_target column")
    if header != _csv_header(kind, L):
        raise ValidationError(f"unexpected posterior trace columns: {header}")
    iterations = len(rows)
    alpha = np.empty(iterations)
    theta = np.empty((iterations, 3 * L))
    tau = np.empty(iterations) if kind == "y" else None
    target = np.empty(iterations)
    accept = np.empty(iterations, dtype=np.uint8)
    for i, row in enumerate(rows):
        if int(row[0]) != i + 1:
            raise ValidationError(f"posterior trace row {i + 1} is out of order")
        alpha[i] = float(row[1])
        theta[i] = [float(v) for v in row[2 : 2 + 3 * L]]
        k = 2 + 3 * L
        if kind == "y":
            tau[i] = float(row[k])
            k += 1
        target[i] = float(row[k])
        accept[i] = int(row[k + 1])
    with open(w_path, "rb") as fh:
        magic = fh.read(8)
        if magic != _W_MAGIC:
            raise ValidationError(f"not a field dump: bad magic {magic!r}")
        n_kept, n = struct.unpack("<QQ", fh.read(16))
        iters_b, burn_in, thin = struct.unpack("<QQQ", fh.read(24))
        kept = np.frombuffer(fh.read(8 * n_kept), dtype="<i8").astype(np.int64)
        w = np.frombuffer(fh.read(8 * n_kept * n), dtype="<f8").reshape(
            n_kept, n
        ).copy()
    if iters_b != iterations:
        raise ValidationError(
            f"trace has {iterations} iterations but field dump says {iters_b}"
        )
    return PosteriorSamples(
        kind=kind, L=L, iterations=iterations, burn_in=int(burn_in),
        thin=int(thin), alpha=alpha, theta=theta, tau=tau, log_target=target,
        accept=accept, kept_iterations=kept, w=w,
        acceptance_rate=float(np.mean(accept)) if iterations else 0.0,
        elapsed_seconds=0.0,
    )
