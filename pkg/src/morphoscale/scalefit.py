"""Bayesian fits of test loss against log dataset size.

The model is ``loss = m * log(N) + b + eps`` with ``eps ~ Normal(0, sigma)``
and a single, fixed ``sigma`` shared by every run. ``log`` is base 10 by
default; the fitted gradient and intercept depend on that choice.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from morphoscale import ensemble

DEFAULT_SIGMA = 0.052


class NonIdentifiableError(ValueError):
    """Raised when the data cannot constrain both gradient and intercept."""


@dataclass(frozen=True)
class RunObservation:
    family: str
    variant: str
    parameter_count: int
    dataset_size: int
    seed: int
    test_loss: float

    def __post_init__(self):
        if self.dataset_size < 1:
            raise ValueError(f"dataset_size must be >= 1, got {self.dataset_size}")
        if not math.isfinite(self.test_loss):
            raise ValueError(f"test_loss must be finite, got {self.test_loss}")


@dataclass(frozen=True)
class LinearScalingModel:
    m: float
    b: float
    sigma: float = DEFAULT_SIGMA
    log_base: float = 10.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def predict(self, dataset_size):
        return self.m * log_size(dataset_size, self.log_base) + self.b


@dataclass(frozen=True)
class FlatPrior:
    """Uniform prior on a box of (m, b)."""

    m_range: tuple[float, float] = (-10.0, 10.0)
    b_range: tuple[float, float] = (-100.0, 100.0)

    def log_prob(self, m, b):
        m = np.asarray(m, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        inside = (
            (m >= self.m_range[0]) & (m <= self.m_range[1]) & (b >= self.b_range[0]) & (b <= self.b_range[1])
        )
        area = (self.m_range[1] - self.m_range[0]) * (self.b_range[1] - self.b_range[0])
        return np.where(inside, -math.log(area), -np.inf)


def log_size(n, base: float = 10.0):
    n = np.asarray(n, dtype=np.float64)
    if base == math.e:
        return np.log(n)
    return np.log(n) / math.log(base)


def _arrays(data: Sequence[RunObservation]) -> tuple[np.ndarray, np.ndarray]:
    sizes = np.array([r.dataset_size for r in data], dtype=np.float64)
    losses = np.array([r.test_loss for r in data], dtype=np.float64)
    return sizes, losses


def log_likelihood(m, b, data: Sequence[RunObservation], sigma: float, log_base: float = 10.0):
    """Gaussian log-likelihood; ``m`` and ``b`` may be arrays of equal shape."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not data:
        raise ValueError("need at least one observation")
    sizes, losses = _arrays(data)
    x = log_size(sizes, log_base)
    m = np.asarray(m, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    resid = losses - (m[..., None] * x + b[..., None])
    n = losses.size
    return -0.5 * np.sum(resid**2, axis=-1) / sigma**2 - 0.5 * n * math.log(2 * math.pi * sigma**2)


def log_posterior(
    m,
    b,
    data: Sequence[RunObservation],
    sigma: float = DEFAULT_SIGMA,
    prior: FlatPrior | None = None,
    log_base: float = 10.0,
    normalize_prior: bool = False,
):
    """Unnormalised log posterior of (m, b).

    With the default ``normalize_prior=False`` the flat prior contributes 0
    inside its support and ``-inf`` outside, so a single point on the line
    scores exactly ``-0.5 * log(2 pi sigma^2)``.
    """
    prior = FlatPrior() if prior is None else prior
    lp_prior = prior.log_prob(m, b)
    if not normalize_prior:
        lp_prior = np.where(np.isfinite(lp_prior), 0.0, -np.inf)
    ll = log_likelihood(m, b, data, sigma, log_base)
    out = np.where(np.isfinite(lp_prior), ll + lp_prior, -np.inf)
    return float(out) if out.ndim == 0 else out


def least_squares(data: Sequence[RunObservation], log_base: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """Ordinary least squares (m, b) and the unit-variance parameter covariance (X^T X)^-1."""
    sizes, losses = _arrays(data)
    if np.unique(sizes).size < 2:
        raise NonIdentifiableError("need at least two distinct dataset sizes to fit a gradient and intercept")
    X = np.column_stack([log_size(sizes, log_base), np.ones_like(sizes)])
    coef, *_ = np.linalg.lstsq(X, losses, rcond=None)
    return coef, np.linalg.inv(X.T @ X)


@dataclass(frozen=True)
class ParamSummary:
    median: float
    q05: float
    q95: float

    def as_dict(self) -> dict:
        return {"median": self.median, "q05": self.q05, "q95": self.q95}


@dataclass(frozen=True)
class PosteriorSummary:
    params: dict[str, ParamSummary]
    acceptance_fraction: float = float("nan")
    effective_sample_size: float = float("nan")
    n_samples: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            if not p.q05 <= p.median <= p.q95:
                raise ValueError(f"quantiles out of order for {name}: {p}")


def summarize_samples(samples: np.ndarray, names: Sequence[str] = ("m", "b"), **extra) -> PosteriorSummary:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("samples must be a nonempty (n, dim) array")
    q = np.quantile(samples, [0.05, 0.5, 0.95], axis=0)
    params = {
        name: ParamSummary(median=float(q[1, j]), q05=float(q[0, j]), q95=float(q[2, j]))
        for j, name in enumerate(names)
    }
    return PosteriorSummary(params, n_samples=samples.shape[0], **extra)


def format_summary(summary: PosteriorSummary, digits: int = 2) -> str:
    """Render as ``median (q05, q95)`` per parameter, comma separated."""

    def fmt(x: float) -> str:
        text = f"{x:.{digits}f}"
        return "0." + "0" * digits if float(text) == 0 else text

    return ", ".join(f"{fmt(p.median)} ({fmt(p.q05)}, {fmt(p.q95)})" for p in summary.params.values())


@dataclass(frozen=True)
class SamplerConfig:
    walkers: int = 32
    steps: int = 2500
    burn_in_fraction: float = 0.2
    stretch: float = 2.0
    seed: int = 0
    init_scale: float = 0.1  # ball radius, in units of the least-squares standard errors

    @property
    def burn_in(self) -> int:
        return int(self.burn_in_fraction * self.steps)


@dataclass
class ScalingFit:
    summary: PosteriorSummary
    samples: np.ndarray
    sigma: float
    log_base: float
    autocorr_time: np.ndarray
    run: ensemble.EnsembleRun = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "params": {k: v.as_dict() for k, v in self.summary.params.items()},
            "sigma": self.sigma,
            "log_base": self.log_base,
            "acceptance_fraction": self.summary.acceptance_fraction,
            "effective_sample_size": self.summary.effective_sample_size,
            "autocorr_time": [float(t) for t in self.autocorr_time],
            "n_samples": self.summary.n_samples,
        }


def fit_scaling_law(
    data: Sequence[RunObservation],
    sigma: float = DEFAULT_SIGMA,
    prior: FlatPrior | None = None,
    config: SamplerConfig | None = None,
    log_base: float = 10.0,
    warn_short_chain: bool = True,
) -> ScalingFit:
    """Sample the (m, b) posterior with the stretch-move ensemble.

    Walkers start in a Gaussian ball around the least-squares solution,
    scaled by ``config.init_scale`` standard errors.
    """
    config = SamplerConfig() if config is None else config
    prior = FlatPrior() if prior is None else prior
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    data = list(data)
    coef, unit_cov = least_squares(data, log_base)

    sizes, losses = _arrays(data)
    x = log_size(sizes, log_base)

    def target(points: np.ndarray) -> np.ndarray:
        m, b = points[:, 0], points[:, 1]
        resid = losses - (m[:, None] * x + b[:, None])
        ll = -0.5 * np.sum(resid**2, axis=1) / sigma**2
        return np.where(np.isfinite(prior.log_prob(m, b)), ll, -np.inf)

    rng = np.random.default_rng(config.seed)
    scale = config.init_scale * sigma * np.sqrt(np.diag(unit_cov))
    init = ensemble.gaussian_ball(coef, scale, config.walkers, rng)
    run = ensemble.run_ensemble(target, init, config.steps, config.burn_in, rng, a=config.stretch)

    tau = run.autocorr_time()
    kept = config.steps - config.burn_in
    if warn_short_chain and np.any(kept < 50 * tau):
        warnings.warn(
            f"chain of {kept} steps is shorter than 50 autocorrelation times (tau={np.round(tau, 1)})",
            RuntimeWarning,
            stacklevel=2,
        )
    samples = run.samples
    ess = float(samples.shape[0] / np.max(tau))
    summary = summarize_samples(
        samples,
        acceptance_fraction=float(np.mean(run.acceptance_fraction)),
        effective_sample_size=ess,
    )
    return ScalingFit(summary, samples, float(sigma), float(log_base), tau, run)


@dataclass
class PredictiveResult:
    dataset_size: float
    samples: np.ndarray
    mean: float
    median: float
    q05: float
    q95: float


def posterior_predictive(
    samples: np.ndarray,
    dataset_size: float,
    sigma: float,
    rng: np.random.Generator,
    log_base: float = 10.0,
) -> PredictiveResult:
    """Push every posterior (m, b) sample through the noise model at one dataset size."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("need a nonempty (n, 2) array of posterior samples")
    if dataset_size < 1:
        raise ValueError(f"dataset size must be >= 1, got {dataset_size}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    mu = samples[:, 0] * log_size(dataset_size, log_base) + samples[:, 1]
    draws = mu + sigma * rng.standard_normal(mu.size)
    q05, q50, q95 = np.quantile(draws, [0.05, 0.5, 0.95])
    return PredictiveResult(float(dataset_size), draws, float(draws.mean()), float(q50), float(q05), float(q95))


def group_runs(data: Iterable[RunObservation], by: str = "none") -> dict[str, list[RunObservation]]:
    """Split runs for separate fits. ``by`` is ``none``, ``family`` or ``variant``."""
    groups: dict[str, list[RunObservation]] = defaultdict(list)
    for r in data:
        if by == "none":
            key = "all"
        elif by == "family":
            key = r.family
        elif by == "variant":
            key = f"{r.family}/{r.variant}"
        else:
            raise ValueError(f"unknown grouping {by!r}")
        groups[key].append(r)
    return dict(sorted(groups.items()))


def estimate_noise_sigma(data: Sequence[RunObservation]) -> float:
    """Pooled within-group standard deviation of seed-to-seed scatter.

    Groups are (family, variant, dataset_size). Each replicated group
    contributes its squared deviations from the group mean; the pooled
    denominator is ``sum(n_g - 1)``.
    """
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in data:
        groups[(r.family, r.variant, r.dataset_size)].append(r.test_loss)
    ss = 0.0
    dof = 0
    for losses in groups.values():
        if len(losses) < 2:
            continue
        arr = np.asarray(losses)
        ss += float(np.sum((arr - arr.mean()) ** 2))
        dof += arr.size - 1
    if dof == 0:
        raise ValueError("no (family, variant, dataset_size) group has more than one seed")
    sigma = math.sqrt(ss / dof)
    if sigma == 0:
        warnings.warn("all replicates are identical; sigma = 0 cannot be used for fitting", RuntimeWarning, stacklevel=2)
    return sigma


def synthetic_runs(
    m: float,
    b: float,
    sigma: float,
    dataset_sizes: Sequence[int],
    seeds: int,
    rng: np.random.Generator,
    family: str = "synthetic",
    variant: str = "base",
    parameter_count: int = 1,
    log_base: float = 10.0,
) -> list[RunObservation]:
    """Runs drawn from the linear model, one per (dataset size, seed)."""
    runs = []
    for size in dataset_sizes:
        mean = m * float(log_size(size, log_base)) + b
        for s in range(seeds):
            loss = mean + sigma * float(rng.standard_normal())
            runs.append(RunObservation(family, variant, parameter_count, int(size), s, loss))
    return runs


# -- samples files ---------------------------------------------------------------

def write_samples(samples: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "b"])
        for m, b in np.asarray(samples):
            w.writerow([repr(float(m)), repr(float(b))])


def read_samples(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no samples")
    return np.array([[float(r["m"]), float(r["b"])] for r in rows])
