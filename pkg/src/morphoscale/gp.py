"""One-dimensional GP regression with an RBF plus white-noise kernel.

The length scale is fixed (0.6 by default) and is interpreted in whatever
units the caller passes for ``X``; nothing is rescaled here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

DEFAULT_LENGTH_SCALE = 0.6
JITTER_START = 1e-10
JITTER_MAX = 1e-6


class GPError(ValueError):
    pass


@dataclass(frozen=True)
class Kernel:
    signal_variance: float = 1.0
    length_scale: float = DEFAULT_LENGTH_SCALE
    noise_variance: float = 0.0

    def __post_init__(self):
        if not self.signal_variance > 0:
            raise GPError(f"signal_variance must be positive, got {self.signal_variance}")
        if not self.length_scale > 0:
            raise GPError(f"length_scale must be positive, got {self.length_scale}")
        if not self.noise_variance >= 0:
            raise GPError(f"noise_variance must be non-negative, got {self.noise_variance}")

    def rbf(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d = np.subtract.outer(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
        return self.signal_variance * np.exp(-0.5 * (d / self.length_scale) ** 2)

    @property
    def prior_variance(self) -> float:
        return self.signal_variance + self.noise_variance


@dataclass(frozen=True)
class GPFit:
    X: np.ndarray
    y: np.ndarray
    kernel: Kernel
    chol: tuple  # scipy cho_factor output of K_XX + (noise + jitter) I
    weights: np.ndarray  # (K + noise I)^-1 (y - y_mean) / y_scale
    jitter: float
    y_mean: float = 0.0
    y_scale: float = 1.0

    def log_marginal_likelihood(self) -> float:
        """Log evidence of the (standardised) targets under the kernel."""
        z = (self.y - self.y_mean) / self.y_scale
        L = self.chol[0]
        n = z.size
        return float(-0.5 * z @ self.weights - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi))


def gp_fit(X, y, kernel: Kernel, standardize: bool = False) -> GPFit:
    """Condition a zero-mean GP on (X, y).

    With ``standardize=True`` the targets are shifted to zero mean and unit
    variance before fitting and predictions are mapped back, so the prior
    mean becomes the sample mean of ``y``.

    Cholesky failures are retried with diagonal jitter 1e-10, 1e-9, ...,
    1e-6. Duplicate inputs with zero noise variance are rejected up front,
    since jitter would otherwise mask the exact singularity.
    """
    X = np.asarray(X, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.size != y.size or X.size == 0:
        raise GPError(f"need equal, nonzero numbers of inputs and targets, got {X.size} and {y.size}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise GPError("inputs and targets must be finite")
    if kernel.noise_variance == 0 and np.unique(X).size < X.size:
        raise GPError("duplicate inputs with zero noise variance make the kernel matrix singular")

    y_mean, y_scale = 0.0, 1.0
    if standardize:
        y_mean = float(y.mean())
        std = float(y.std())
        y_scale = std if std > 0 else 1.0
    z = (y - y_mean) / y_scale

    K = kernel.rbf(X, X) + kernel.noise_variance * np.eye(X.size)
    jitter = 0.0
    while True:
        try:
            chol = cho_factor(K + jitter * np.eye(X.size), lower=True, check_finite=False)
            if np.all(np.diag(chol[0]) > 0):
                break
        except LinAlgError:
            pass
        jitter = JITTER_START if jitter == 0 else jitter * 10
        if jitter > JITTER_MAX * (1 + 1e-9):
            raise GPError("kernel matrix is not positive definite even with maximum jitter")
    weights = cho_solve(chol, z, check_finite=False)
    return GPFit(X, y, kernel, chol, weights, jitter, y_mean, y_scale)


def gp_predict(fit: GPFit, x_star, include_noise: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at ``x_star``.

    The variance is for a new noisy observation when ``include_noise`` is
    set (bounded above by signal + noise variance) and for the latent
    function otherwise.
    """
    x_star = np.asarray(x_star, dtype=np.float64).ravel()
    Ks = fit.kernel.rbf(x_star, fit.X)
    mean = Ks @ fit.weights
    v = solve_triangular(fit.chol[0], Ks.T, lower=True, check_finite=False)
    var = fit.kernel.signal_variance - np.sum(v**2, axis=0)
    var = np.clip(var, 0.0, fit.kernel.signal_variance)
    if include_noise:
        var = var + fit.kernel.noise_variance
    return mean * fit.y_scale + fit.y_mean, var * fit.y_scale**2


def select_hyperparameters(
    X,
    y,
    length_scale: float = DEFAULT_LENGTH_SCALE,
    signal_grid: np.ndarray | None = None,
    noise_grid: np.ndarray | None = None,
    standardize: bool = True,
) -> tuple[Kernel, float]:
    """Grid search of signal and noise variance by log marginal likelihood.

    The default grids are 25 log-spaced points on [1e-3, 10] for the signal
    variance and on [1e-6, 1] for the noise variance. The length scale is
    held fixed. Returns the best kernel and its log marginal likelihood.
    """
    signal_grid = np.logspace(-3, 1, 25) if signal_grid is None else np.asarray(signal_grid)
    noise_grid = np.logspace(-6, 0, 25) if noise_grid is None else np.asarray(noise_grid)
    best: tuple[Kernel, float] | None = None
    for s in signal_grid:
        for n in noise_grid:
            kernel = Kernel(float(s), length_scale, float(n))
            try:
                lml = gp_fit(X, y, kernel, standardize=standardize).log_marginal_likelihood()
            except GPError:
                continue
            if best is None or lml > best[1]:
                best = (kernel, lml)
    if best is None:
        raise GPError("no grid point produced a valid fit")
    return best


def band(fit: GPFit, x_grid, width: float = 2.0) -> np.ndarray:
    """Rows of (x, mean, mean - width*sd, mean + width*sd)."""
    mean, var = gp_predict(fit, x_grid)
    sd = np.sqrt(var)
    x_grid = np.asarray(x_grid, dtype=np.float64).ravel()
    return np.column_stack([x_grid, mean, mean - width * sd, mean + width * sd])
