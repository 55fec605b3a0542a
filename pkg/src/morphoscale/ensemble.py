"""Affine-invariant ensemble sampler using the stretch move.

Each step splits the W walkers into two halves. Every walker ``X`` in the
active half picks a companion ``X'`` uniformly from the other (frozen)
half, draws ``z`` from g(z) proportional to 1/sqrt(z) on [1/a, a], and
proposes ``Y = X' + z (X - X')``. The proposal is accepted with probability
``min(1, z**(d-1) p(Y) / p(X))``.

The random draws for a half-step are taken in a fixed order (companion
indices, then z, then acceptance uniforms) so results do not depend on
whether the walkers of a half are evaluated one by one or vectorised.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

LogProb = Callable[[np.ndarray], np.ndarray]


class SamplerError(ValueError):
    pass


def sample_stretch_z(a: float, size, rng: np.random.Generator) -> np.ndarray:
    """Draw stretch factors by inverting the CDF of g(z) ~ 1/sqrt(z) on [1/a, a]."""
    if a <= 1:
        raise SamplerError(f"stretch parameter must exceed 1, got {a}")
    u = rng.random(size)
    return ((a - 1.0) * u + 1.0) ** 2 / a


def stretch_z_cdf(z, a: float) -> np.ndarray:
    z = np.clip(np.asarray(z, dtype=np.float64), 1.0 / a, a)
    return (np.sqrt(a * z) - 1.0) / (a - 1.0)


@dataclass
class StretchProposal:
    proposal: np.ndarray
    log_prob: float
    log_accept_ratio: float
    accepted: bool

    @property
    def accept_probability(self) -> float:
        return float(min(1.0, np.exp(self.log_accept_ratio)))


def stretch_move(
    x: np.ndarray,
    companion: np.ndarray,
    log_prob_x: float,
    log_prob: Callable[[np.ndarray], float],
    a: float = 2.0,
    rng: np.random.Generator | None = None,
    z: float | None = None,
) -> StretchProposal:
    """Single-walker stretch move.

    ``z`` may be passed to pin the stretch factor; otherwise it is drawn
    from ``rng``, which also supplies the acceptance uniform.
    """
    if a <= 1:
        raise SamplerError(f"stretch parameter must exceed 1, got {a}")
    x = np.asarray(x, dtype=np.float64)
    companion = np.asarray(companion, dtype=np.float64)
    if z is None:
        z = float(sample_stretch_z(a, None, rng))
    d = x.size
    # written so that z == 1 reproduces x exactly
    y = z * x + (1.0 - z) * companion
    lp_y = float(log_prob(y))
    if np.isneginf(lp_y) or np.isnan(lp_y):
        return StretchProposal(y, lp_y, -np.inf, False)
    log_ratio = (d - 1) * np.log(z) + lp_y - log_prob_x
    if log_ratio >= 0:
        accepted = True
    else:
        if rng is None:
            raise SamplerError("an rng is needed to decide a move with acceptance probability < 1")
        u = rng.random()
        accepted = bool(np.log(u) < log_ratio)
    return StretchProposal(y, lp_y, float(log_ratio), accepted)


@dataclass
class EnsembleRun:
    chain: np.ndarray         # (steps, walkers, dim)
    log_prob: np.ndarray      # (steps, walkers)
    accepted: np.ndarray      # (walkers,) count of accepted moves
    burn_in: int

    @property
    def n_steps(self) -> int:
        return self.chain.shape[0]

    @property
    def acceptance_fraction(self) -> np.ndarray:
        return self.accepted / self.n_steps

    @property
    def samples(self) -> np.ndarray:
        """Post-burn-in samples flattened to (n, dim), step-major."""
        kept = self.chain[self.burn_in:]
        return kept.reshape(-1, kept.shape[-1])

    def autocorr_time(self) -> np.ndarray:
        return integrated_autocorr_time(self.chain[self.burn_in:])


def _evaluate(log_prob: LogProb, points: np.ndarray) -> np.ndarray:
    lp = np.asarray(log_prob(points), dtype=np.float64)
    if lp.shape != (points.shape[0],):
        raise SamplerError(f"log_prob must return shape ({points.shape[0]},), got {lp.shape}")
    return np.where(np.isnan(lp), -np.inf, lp)


def run_ensemble(
    log_prob: LogProb,
    init: np.ndarray,
    steps: int,
    burn_in: int,
    rng: np.random.Generator,
    a: float = 2.0,
) -> EnsembleRun:
    """Run the stretch-move ensemble.

    Args:
        log_prob: vectorised log density, mapping (n, d) points to (n,).
        init: (W, d) starting positions; W even and at least 2d + 2.
        steps: total number of ensemble steps, including burn-in.
        burn_in: leading steps dropped from ``samples``.
        rng: source of all randomness.
        a: stretch scale.
    """
    walkers = np.array(init, dtype=np.float64)
    if walkers.ndim != 2:
        raise SamplerError("init must be a (walkers, dim) array")
    W, d = walkers.shape
    if W % 2 or W < 2 * d + 2:
        raise SamplerError(f"need an even number of walkers >= {2 * d + 2}, got {W}")
    if not 0 <= burn_in < steps:
        raise SamplerError(f"need 0 <= burn_in < steps, got burn_in={burn_in}, steps={steps}")
    if a <= 1:
        raise SamplerError(f"stretch parameter must exceed 1, got {a}")

    lp = _evaluate(log_prob, walkers)
    if not np.any(np.isfinite(lp)):
        raise SamplerError("log posterior is non-finite at every initial walker")
    if not np.all(np.isfinite(lp)):
        bad = int(np.sum(~np.isfinite(lp)))
        raise SamplerError(f"log posterior is non-finite at {bad} of {W} initial walkers")

    half = W // 2
    halves = (np.arange(half), np.arange(half, W))
    chain = np.empty((steps, W, d))
    lp_chain = np.empty((steps, W))
    accepted = np.zeros(W, dtype=np.int64)

    for step in range(steps):
        for active, other in (halves, halves[::-1]):
            partners = walkers[other[rng.integers(0, half, size=half)]]
            z = sample_stretch_z(a, half, rng)
            u = rng.random(half)
            proposals = z[:, None] * walkers[active] + (1.0 - z[:, None]) * partners
            lp_new = _evaluate(log_prob, proposals)
            log_ratio = (d - 1) * np.log(z) + lp_new - lp[active]
            accept = np.isfinite(lp_new) & (np.log(u) < log_ratio)
            idx = active[accept]
            walkers[idx] = proposals[accept]
            lp[idx] = lp_new[accept]
            accepted[idx] += 1
        chain[step] = walkers
        lp_chain[step] = lp

    return EnsembleRun(chain, lp_chain, accepted, burn_in)


def _autocorr_1d(x: np.ndarray) -> np.ndarray:
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), n=size)
    acf = np.fft.irfft(f * np.conjugate(f), n=size)[:n]
    return acf / acf[0] if acf[0] > 0 else np.zeros(n)


def integrated_autocorr_time(chain: np.ndarray, c: float = 5.0) -> np.ndarray:
    """Integrated autocorrelation time per parameter.

    The normalised autocorrelation is averaged over walkers and summed up
    to the first window M with M >= c * tau(M) (Sokal's automatic
    windowing). ``chain`` has shape (steps, walkers, dim).
    """
    chain = np.asarray(chain, dtype=np.float64)
    steps, W, d = chain.shape
    taus = np.empty(d)
    for j in range(d):
        rho = np.mean([_autocorr_1d(chain[:, w, j]) for w in range(W)], axis=0)
        tau_m = 2.0 * np.cumsum(rho) - 1.0
        window = np.arange(tau_m.size) >= c * tau_m
        m = int(np.argmax(window)) if np.any(window) else tau_m.size - 1
        taus[j] = max(tau_m[m], 1.0)
    return taus


def check_chain_length(run: EnsembleRun, factor: float = 50.0) -> np.ndarray:
    """Warn when the post-burn-in chain is shorter than ``factor`` autocorrelation times."""
    tau = run.autocorr_time()
    kept = run.n_steps - run.burn_in
    if np.any(kept < factor * tau):
        warnings.warn(
            f"chain of {kept} steps is shorter than {factor:g} autocorrelation times (tau={np.round(tau, 1)})",
            RuntimeWarning,
            stacklevel=2,
        )
    return tau


def gaussian_ball(center, scale, walkers: int, rng: np.random.Generator) -> np.ndarray:
    center = np.asarray(center, dtype=np.float64)
    return center + np.asarray(scale) * rng.standard_normal((walkers, center.size))


def uniform_box(lower, upper, walkers: int, rng: np.random.Generator) -> np.ndarray:
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    return lower + (upper - lower) * rng.random((walkers, lower.size))
