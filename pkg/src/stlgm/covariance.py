"""Space-time covariance kernels, priors, and theoretical semivariograms.

The covariance is a sum of L independent separable components, each an
exponential spatial correlation times an exponential temporal correlation
scaled by a component variance:

    K(ds, dt) = sum_l sigma_l^2 * exp(-ds/phi_l) * exp(-dt/lambda_l)

With L >= 2 and distinct ranges the sum is non-separable, which is the whole
point: one component carries broad, slowly varying structure while another
carries short-range patchiness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .data_model import as_coord_array
from .errors import ValidationError

__all__ = [
    "CovarianceParams",
    "GammaPrior",
    "NormalPrior",
    "ComponentPriors",
    "PriorSpec",
    "exp_correlation",
    "cov_value",
    "cov_matrix",
    "gamma_hyper",
    "gamma_logpdf",
    "normal_logpdf",
    "log_prior",
    "theoretical_semivariogram",
]


@dataclass(frozen=True)
class CovarianceParams:
    """Parameters theta: per-component (sigma, phi, lambda) triples.

    sigma is the component standard deviation (latent-field units), phi the
    spatial range in km, lam the temporal range in years. Component 1 is by
    convention the largest-spatial-scale process; that convention lives in
    the priors, not in any hard constraint here.
    """

    sigma: tuple
    phi: tuple
    lam: tuple

    def __post_init__(self):
        sigma = tuple(float(v) for v in np.atleast_1d(self.sigma))
        phi = tuple(float(v) for v in np.atleast_1d(self.phi))
        lam = tuple(float(v) for v in np.atleast_1d(self.lam))
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "lam", lam)
        if not (len(sigma) == len(phi) == len(lam)):
            raise ValidationError("sigma, phi, lam must have equal lengths")
        if len(sigma) < 1:
            raise ValidationError("at least one covariance component is required")
        for name, values in (("sigma", sigma), ("phi", phi), ("lam", lam)):
            for v in values:
                if not math.isfinite(v) or v <= 0:
                    raise ValidationError(f"{name} entries must be positive finite, got {v}")

    @classmethod
    def from_components(cls, components) -> "CovarianceParams":
        """Build from an iterable of (sigma, phi, lam) triples."""
        triples = [tuple(c) for c in components]
        if any(len(t) != 3 for t in triples):
            raise ValidationError("each component must be a (sigma, phi, lam) triple")
        return cls(
            sigma=tuple(t[0] for t in triples),
            phi=tuple(t[1] for t in triples),
            lam=tuple(t[2] for t in triples),
        )

    @property
    def components(self):
        return list(zip(self.sigma, self.phi, self.lam))

    @property
    def L(self) -> int:
        return len(self.sigma)

    @property
    def sill(self) -> float:
        """Total variance sum_l sigma_l^2."""
        return float(sum(s * s for s in self.sigma))

    def as_vector(self) -> np.ndarray:
        """Flatten to [sigma_1, phi_1, lam_1, sigma_2, ...]."""
        out = np.empty(3 * self.L)
        for l in range(self.L):
            out[3 * l : 3 * l + 3] = (self.sigma[l], self.phi[l], self.lam[l])
        return out

    @classmethod
    def from_vector(cls, vec) -> "CovarianceParams":
        vec = np.asarray(vec, dtype=float)
        if vec.ndim != 1 or vec.size % 3:
            raise ValidationError("parameter vector length must be a multiple of 3")
        return cls(sigma=tuple(vec[0::3]), phi=tuple(vec[1::3]), lam=tuple(vec[2::3]))


@dataclass(frozen=True)
class GammaPrior:
    """Gamma prior in mean/sd form; shape = mean^2/sd^2, rate = mean/sd^2."""

    mean: float
    sd: float

    def __post_init__(self):
        if not (self.mean > 0 and math.isfinite(self.mean)):
            raise ValidationError(f"gamma prior mean must be positive, got {self.mean}")
        if not (self.sd > 0 and math.isfinite(self.sd)):
            raise ValidationError(f"gamma prior sd must be positive, got {self.sd}")


@dataclass(frozen=True)
class NormalPrior:
    """Normal prior with mean and sd; precision = 1/sd^2."""

    mean: float
    sd: float

    def __post_init__(self):
        if not (self.sd > 0 and math.isfinite(self.sd)):
            raise ValidationError(f"normal prior sd must be positive, got {self.sd}")
        if not math.isfinite(self.mean):
            raise ValidationError(f"normal prior mean must be finite, got {self.mean}")

    @property
    def precision(self) -> float:
        return 1.0 / (self.sd * self.sd)


@dataclass(frozen=True)
class ComponentPriors:
    sigma: GammaPrior
    phi: GammaPrior
    lam: GammaPrior


@dataclass(frozen=True)
class PriorSpec:
    """One prior per free parameter of a model stage.

    tau is present for the normal stage and None for the Bernoulli stage.
    """

    alpha: NormalPrior
    components: tuple
    tau: Optional[GammaPrior] = None

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if len(comps) < 1:
            raise ValidationError("priors must cover at least one covariance component")
        for c in comps:
            if not isinstance(c, ComponentPriors):
                raise ValidationError("components must be ComponentPriors instances")

    @property
    def L(self) -> int:
        return len(self.components)

    def theta_mean(self) -> CovarianceParams:
        """Covariance parameters at their prior means (chain initialization)."""
        return CovarianceParams(
            sigma=tuple(c.sigma.mean for c in self.components),
            phi=tuple(c.phi.mean for c in self.components),
            lam=tuple(c.lam.mean for c in self.components),
        )


def exp_correlation(delta, rng):
    """Exponential correlation exp(-delta/rng) for lag delta >= 0."""
    if not (rng > 0 and math.isfinite(rng)):
        raise ValidationError(f"correlation range must be positive finite, got {rng}")
    delta = np.asarray(delta, dtype=float)
    out = np.exp(-delta / rng)
    if out.ndim == 0:
        return float(out)
    return out


def cov_value(theta: CovarianceParams, delta_s, delta_t):
    """Sum-of-separables covariance at spatial lag delta_s, temporal lag delta_t.

    Broadcasts over array lags. At (0, 0) this equals the sill.
    """
    ds = np.asarray(delta_s, dtype=float)
    dt = np.asarray(delta_t, dtype=float)
    out = np.zeros(np.broadcast_shapes(ds.shape, dt.shape))
    for sigma, phi, lam in theta.components:
        out += (sigma * sigma) * np.exp(-ds / phi - dt / lam)
    if out.ndim == 0:
        return float(out)
    return out


def cov_matrix(theta: CovarianceParams, coords_a, coords_b=None) -> np.ndarray:
    """Dense covariance between two coordinate sets (symmetric when b is a)."""
    a = as_coord_array(coords_a)
    b = a if coords_b is None else as_coord_array(coords_b)
    ds = cdist(a[:, :2], b[:, :2])
    dt = np.abs(a[:, 2][:, None] - b[:, 2][None, :])
    return cov_value(theta, ds, dt)


def gamma_hyper(mean: float, sd: float) -> tuple:
    """Translate a mean/sd gamma parameterization to (shape, rate)."""
    if not (mean > 0 and math.isfinite(mean)):
        raise ValidationError(f"gamma mean must be positive finite, got {mean}")
    if not (sd > 0 and math.isfinite(sd)):
        raise ValidationError(f"gamma sd must be positive finite, got {sd}")
    shape = mean * mean / (sd * sd)
    rate = mean / (sd * sd)
    return shape, rate


def gamma_logpdf(x: float, shape: float, rate: float) -> float:
    """Log density of Gamma(shape, rate) at x; -inf outside the support."""
    if x <= 0 or not math.isfinite(x):
        return -math.inf
    return shape * math.log(rate) - math.lgamma(shape) + (shape - 1.0) * math.log(x) - rate * x


def normal_logpdf(x: float, mean: float, sd: float) -> float:
    z = (x - mean) / sd
    return -0.5 * z * z - math.log(sd) - 0.5 * math.log(2.0 * math.pi)


def log_prior(
    theta: CovarianceParams,
    tau: Optional[float],
    alpha: Optional[float],
    priors: PriorSpec,
) -> float:
    """Joint log prior of (theta, tau, alpha); -inf outside any support.

    tau and alpha may be None to drop their terms, which is how the samplers
    score targets that have already marginalized or conditioned them away.
    """
    if theta.L != priors.L:
        raise ValidationError(
            f"theta has {theta.L} components but priors cover {priors.L}"
        )
    total = 0.0
    for (sigma, phi, lam), comp in zip(theta.components, priors.components):
        for value, prior in ((sigma, comp.sigma), (phi, comp.phi), (lam, comp.lam)):
            shape, rate = gamma_hyper(prior.mean, prior.sd)
            lp = gamma_logpdf(value, shape, rate)
            if lp == -math.inf:
                return -math.inf
            total += lp
    if tau is not None:
        if priors.tau is None:
            raise ValidationError("tau supplied but priors have no tau entry")
        shape, rate = gamma_hyper(priors.tau.mean, priors.tau.sd)
        lp = gamma_logpdf(tau, shape, rate)
        if lp == -math.inf:
            return -math.inf
        total += lp
    if alpha is not None:
        total += normal_logpdf(alpha, priors.alpha.mean, priors.alpha.sd)
    return total


def theoretical_semivariogram(theta: CovarianceParams, bin_pairs, normalize=False):
    """Binned theoretical semivariogram over observed lag pairs.

    Parameters
    ----------
    theta : CovarianceParams
    bin_pairs : sequence of arrays, each of shape (n_pairs, 2)
        The (delta_s, delta_t) lags of the pairs falling in each bin; an
        empty array marks the bin missing and yields NaN rather than zero.
    normalize : bool
        Divide all bins by the maximum bin value.

    Returns
    -------
    ndarray of per-bin gamma values with NaN for empty bins.
    """
    sill = theta.sill
    out = np.full(len(bin_pairs), np.nan)
    for k, lags in enumerate(bin_pairs):
        lags = np.asarray(lags, dtype=float)
        if lags.size == 0:
            continue
        if lags.ndim != 2 or lags.shape[1] != 2:
            raise ValidationError(f"bin {k}: lag array must be (n_pairs, 2)")
        out[k] = float(np.mean(sill - cov_value(theta, lags[:, 0], lags[:, 1])))
    if normalize:
        top = np.nanmax(out) if np.any(np.isfinite(out)) else np.nan
        if top and math.isfinite(top):
            out = out / top
    return out
