"""Kernels and exact Gaussian-process inference."""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DomainError, NumericalError

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-4
FAMILIES = ("rbf", "periodic")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and its single hyperparameter (lengthscale or period)."""

    family: str
    ell: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown kernel family {self.family!r}")
        if not self.ell > 0:
            raise DomainError("kernel hyperparameter must be positive")

    def __call__(self, x1, x2):
        return kernel_matrix(self, x1, x2)

    def to_dict(self):
        return {"family": self.family, "ell": float(self.ell)}


def _distance(x1, x2):
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1)
    return x1[:, None] - x2[None, :]


def kernel_matrix(spec, x1, x2):
    """Unit-variance kernel matrix between 1-D input arrays.

    RBF: ``exp(-r^2 / (2 ell^2))``. Periodic: ``exp(-2 sin^2(pi r / ell))``.
    """
    r = _distance(x1, x2)
    if spec.family == "rbf":
        return np.exp(-0.5 * (r / spec.ell) ** 2)
    s = np.sin(np.pi * r / spec.ell)
    return np.exp(-2.0 * s * s)


def kernel_eval(spec, x, xp):
    return float(kernel_matrix(spec, [x], [xp])[0, 0])


def cholesky_jitter(K):
    """Cholesky factor of ``K``, adding diagonal jitter 1e-10, 2e-10, ... up to 1e-4."""
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    eye = np.eye(K.shape[0])
    while jitter <= JITTER_MAX:
        try:
            L = np.linalg.cholesky(K + jitter * eye)
            log.debug("cholesky needed jitter %.1e", jitter)
            return L
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise NumericalError(f"Cholesky failed even with jitter {JITTER_MAX:g}")


def gp_sample(spec, xs, noise_std, rng, size=None):
    """Draw ``y ~ N(0, K + noise_std^2 I)`` at the inputs ``xs``.

    Returns shape ``[N]``, or ``[size, N]`` when ``size`` is given.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    if xs.size < 1:
        raise DomainError("gp_sample needs at least one input")
    K = kernel_matrix(spec, xs, xs) + noise_std ** 2 * np.eye(xs.size)
    L = cholesky_jitter(K)
    z = rng.standard_normal(xs.size if size is None else (size, xs.size))
    return z @ L.T


def gp_posterior(spec, x, y, x_star, noise_std, include_noise=False):
    """Posterior mean and variance of ``f(x_star)`` given noisy observations.

    With an empty dataset the prior (mean 0, variance 1) is returned. Set
    ``include_noise`` for the predictive of a new noisy observation.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    x_star = np.asarray(x_star, dtype=np.float64).reshape(-1)
    prior_var = np.ones(x_star.size)
    extra = noise_std ** 2 if include_noise else 0.0
    if x.size == 0:
        return np.zeros(x_star.size), prior_var + extra
    K = kernel_matrix(spec, x, x) + noise_std ** 2 * np.eye(x.size)
    L = cholesky_jitter(K)
    Ks = kernel_matrix(spec, x, x_star)
    alpha = solve_triangular(L, y, lower=True)
    V = solve_triangular(L, Ks, lower=True)
    mean = V.T @ alpha
    var = np.maximum(prior_var - np.sum(V * V, axis=0), 0.0)
    return mean, var + extra


def log_marginal_likelihood(spec, x, y, noise_std):
    """``log N(y; 0, K + noise_std^2 I)``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size < 1:
        raise DomainError("log marginal likelihood needs at least one observation")
    K = kernel_matrix(spec, x, x) + noise_std ** 2 * np.eye(x.size)
    L = cholesky_jitter(K)
    alpha = solve_triangular(L, y, lower=True)
    return float(-0.5 * alpha @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * x.size * math.log(2 * math.pi))
