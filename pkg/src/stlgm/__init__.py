"""Two-stage spatial-temporal latent Gaussian models for semi-continuous forest attributes.

A Bernoulli stage models forest presence and a normal stage models transformed
biomass on the forested subset; both ride on multiscale sum-of-separable
space-time covariances approximated with nearest-neighbor Gaussian processes.
"""

__version__ = "0.1.0"
