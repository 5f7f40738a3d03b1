"""Exact Bayesian predictives over a discrete grid of GP kernels.

When datasets are generated by first drawing a kernel and then drawing
functions from the GP with that kernel, the Bayes-optimal predictive given
observed datasets is a finite mixture of GP posteriors, weighted by how well
each kernel explains the data. This module computes those mixtures exactly and
uses them to check, by Monte Carlo, that conditioning on extra datasets from
the same process brings the predictive closer (in expected KL) to the
posterior under the true kernel.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import Dataset
from .errors import DomainError, NumericalError
from .gp import KernelSpec, gp_posterior, gp_sample, log_marginal_likelihood

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LatentGrid:
    specs: list
    weights: np.ndarray = None

    def __post_init__(self):
        if not self.specs:
            raise DomainError("latent grid must be non-empty")
        if self.weights is None:
            self.weights = np.full(len(self.specs), 1.0 / len(self.specs))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.specs),) or np.any(self.weights < 0):
            raise DomainError("grid weights must be one non-negative value per spec")
        total = self.weights.sum()
        if not abs(total - 1.0) < 1e-9:
            raise DomainError(f"grid weights sum to {total}, not 1")

    def __len__(self):
        return len(self.specs)

    def sample(self, rng):
        return self.specs[rng.choice(len(self.specs), p=self.weights)]

    def describe(self):
        return [{"family": s.family, "ell": float(s.ell), "weight": float(w)}
                for s, w in zip(self.specs, self.weights)]


def default_grid(n_ell=8, ell_range=(0.25, 4.0), families=("rbf", "periodic")):
    """``families x n_ell`` log-spaced hyperparameters with uniform prior weight."""
    ells = np.geomspace(ell_range[0], ell_range[1], n_ell)
    return LatentGrid([KernelSpec(f, float(e)) for f in families for e in ells])


@dataclass
class PosteriorMixture:
    """Per-point Gaussian mixture predictive: weights ``[K]``, means/vars ``[K, N]``."""

    weights: np.ndarray
    means: np.ndarray
    vars: np.ndarray
    log_weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.vars = np.atleast_2d(np.asarray(self.vars, dtype=np.float64))
        if self.log_weights is None:
            with np.errstate(divide="ignore"):
                self.log_weights = np.log(self.weights)
        if np.any(self.vars <= 0):
            raise DomainError("mixture component variances must be positive")

    @classmethod
    def gaussian(cls, mean, var):
        return cls(np.ones(1), np.asarray(mean)[None], np.asarray(var)[None])

    @property
    def n_points(self):
        return self.means.shape[1]

    def logpdf(self, y):
        """Log density at ``y [S, N]`` per point, shape ``[S, N]``."""
        y = np.asarray(y, dtype=np.float64)[..., None, :]
        comp = -0.5 * (_LOG_2PI + np.log(self.vars) + (y - self.means) ** 2 / self.vars)
        return logsumexp(comp + self.log_weights[:, None], axis=-2)

    def sample(self, n, rng):
        """``[n, N]`` independent draws at every point."""
        k = rng.choice(len(self.weights), size=(n, self.n_points), p=self.weights)
        cols = np.arange(self.n_points)
        return self.means[k, cols] + np.sqrt(self.vars[k, cols]) * rng.standard_normal((n, self.n_points))


def gaussian_kl(m1, v1, m2, v2):
    """Closed-form ``KL(N(m1, v1) || N(m2, v2))``, elementwise."""
    return 0.5 * (np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / v2 - 1.0)


def mixture_posterior(grid, dataset, extra, x_star, noise_std, include_noise=True):
    """Predictive at ``x_star`` given ``dataset`` and the additional datasets ``extra``.

    Component weights are ``prior_k * p(dataset | k) * prod_j p(extra_j | k)``,
    normalised in log space; component predictives condition on ``dataset``
    only, since the extra datasets are independent function draws.
    """
    logw = np.log(np.maximum(grid.weights, 1e-300))
    means, vars_ = [], []
    for k, spec in enumerate(grid.specs):
        if len(dataset):
            logw[k] += log_marginal_likelihood(spec, dataset.x, dataset.y, noise_std)
        for ds in extra:
            logw[k] += log_marginal_likelihood(spec, ds.x, ds.y, noise_std)
        m, v = gp_posterior(spec, dataset.x, dataset.y, x_star, noise_std, include_noise)
        means.append(m)
        vars_.append(v)
    logw = np.where(grid.weights > 0, logw, -np.inf)
    logw = logw - logsumexp(logw)
    w = np.exp(logw)
    if not np.isfinite(w).all() or w.sum() <= 0:
        raise NumericalError("mixture weights underflowed")
    return PosteriorMixture(w, np.array(means), np.array(vars_), log_weights=logw)


def mc_kl_predictive(p, q, n_samples, rng):
    """Monte-Carlo ``KL(p || q)`` averaged over target points.

    ``p`` and ``q`` are :class:`PosteriorMixture` (a plain Gaussian is a one-
    component mixture). Returns ``(estimate, standard_error)``.
    """
    if n_samples < 1000:
        raise ValueError("use at least 1000 samples")
    y = p.sample(n_samples, rng)
    vals = (p.logpdf(y) - q.logpdf(y)).mean(axis=1)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))


def mc_entropy(q, n_samples, rng):
    """Monte-Carlo differential entropy per point, with standard error."""
    y = q.sample(n_samples, rng)
    vals = -q.logpdf(y).mean(axis=1)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))


@dataclass
class GridTaskSampler:
    """Draws ``(spec, context, in_context, x_star)`` with the kernel taken from ``grid``."""

    grid: LatentGrid
    n_context: tuple = (1, 10)
    n_ic: tuple = (1, 3)
    n_ic_points: int = 64
    n_target: int = 16
    context_range: tuple = (-2.0, 2.0)
    input_range: tuple = (-4.0, 4.0)
    noise_std: float = 0.2

    def __call__(self, rng):
        spec = self.grid.sample(rng)
        nc = int(rng.integers(self.n_context[0], self.n_context[1] + 1))
        xc = rng.uniform(*self.context_range, size=nc)
        ctx = Dataset(xc, gp_sample(spec, xc, self.noise_std, rng))
        extra = []
        for _ in range(int(rng.integers(self.n_ic[0], self.n_ic[1] + 1))):
            x = rng.uniform(*self.input_range, size=self.n_ic_points)
            extra.append(Dataset(x, gp_sample(spec, x, self.noise_std, rng)))
        x_star = rng.uniform(*self.input_range, size=self.n_target)
        return spec, ctx, extra, x_star


@dataclass
class TheoremReport:
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    n_tasks: int
    n_samples: int
    grid: list

    @property
    def combined_se(self):
        return math.sqrt(self.lhs_se ** 2 + self.rhs_se ** 2)

    @property
    def holds(self):
        """``LHS <= RHS`` up to three combined standard errors."""
        return self.lhs <= self.rhs + 3 * self.combined_se

    @property
    def strict(self):
        """``LHS < RHS`` by more than three combined standard errors."""
        return self.rhs - self.lhs > 3 * self.combined_se

    def to_dict(self):
        return {"lhs": self.lhs, "lhs_se": self.lhs_se, "rhs": self.rhs, "rhs_se": self.rhs_se,
                "combined_se": self.combined_se, "n_tasks": self.n_tasks,
                "n_samples": self.n_samples, "grid": self.grid,
                "holds": self.holds, "strict": self.strict}

    def to_text(self):
        lines = [
            f"lhs = {self.lhs:.6f} +/- {self.lhs_se:.6f}  (KL to predictive given context and in-context datasets)",
            f"rhs = {self.rhs:.6f} +/- {self.rhs_se:.6f}  (KL to predictive given context only)",
            f"combined_se = {self.combined_se:.6f}",
            f"n_tasks = {self.n_tasks}",
            f"n_samples = {self.n_samples}",
            "grid = " + ", ".join(f"{g['family']}({g['ell']:.4g}):{g['weight']:.4g}" for g in self.grid),
            f"result = {'PASS' if self.holds else 'FAIL'} (lhs <= rhs + 3 se)",
            f"strict = {'yes' if self.strict else 'no'} (rhs - lhs > 3 se)",
        ]
        return "\n".join(lines) + "\n"


def verify_theorem1(grid, task_sampler, n_tasks, n_samples, rng, use_extra=True):
    """Estimate both sides of the in-context conditioning KL inequality.

    For each task the reference predictive is the GP posterior under the true
    kernel given the context set. ``lhs`` averages its KL to the grid-mixture
    predictive given the context and in-context datasets; ``rhs`` averages
    its KL to the mixture given the context alone. Both KLs at a task share
    the same samples. ``use_extra=False`` drops the in-context datasets from
    the left-hand side, which makes both sides the same quantity.
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be positive")
    lhs, rhs = np.empty(n_tasks), np.empty(n_tasks)
    noise = task_sampler.noise_std
    for t in range(n_tasks):
        spec, ctx, extra, x_star = task_sampler(rng)
        m, v = gp_posterior(spec, ctx.x, ctx.y, x_star, noise, include_noise=True)
        p = PosteriorMixture.gaussian(m, v)
        q_with = mixture_posterior(grid, ctx, extra if use_extra else [], x_star, noise)
        q_without = mixture_posterior(grid, ctx, [], x_star, noise)
        y = p.sample(n_samples, rng)
        log_p = p.logpdf(y)
        lhs[t] = (log_p - q_with.logpdf(y)).mean()
        rhs[t] = (log_p - q_without.logpdf(y)).mean()
    se = lambda a: float(a.std(ddof=1) / math.sqrt(n_tasks)) if n_tasks > 1 else 0.0
    return TheoremReport(float(lhs.mean()), se(lhs), float(rhs.mean()), se(rhs),
                         n_tasks, n_samples, grid.describe())


def oracle_log_likelihood(task, spec, noise_std):
    """Mean per-target log-likelihood of ``task`` under the exact GP posterior for ``spec``."""
    m, v = gp_posterior(spec, task.context.x, task.context.y, task.target_x, noise_std,
                        include_noise=True)
    y = task.target_y.reshape(-1)
    return float(np.mean(-0.5 * (_LOG_2PI + np.log(v) + (y - m) ** 2 / v)))
