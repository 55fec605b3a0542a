"""Dirichlet-Multinomial likelihood for crowd votes, summed over questions.

Each question's votes ``k`` (total ``N``) are modelled as Multinomial draws
whose probability vector is itself Dirichlet(``alpha``). Integrating the
probabilities out gives

    p(k | alpha, N) = N! / prod(k_i!) * G(A) / G(N + A) * prod G(k_i + alpha_i) / G(alpha_i)

with ``A = sum(alpha)``. Everything here is evaluated through log-gamma and
digamma. A question with ``N = 0`` has probability exactly one for every
``alpha``; its log-likelihood and gradient are constructed as exact zeros,
which is what lets galaxies labelled in different campaigns share one
output vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import digamma, gammaln

from morphoscale.schema import GlobalAnswerIndex

ALPHA_FLOOR = 1e-12


class DirMultError(ValueError):
    pass


@dataclass(frozen=True)
class VoteCounts:
    k: np.ndarray
    N: int

    def __post_init__(self):
        k = np.asarray(self.k)
        if k.ndim != 1:
            raise DirMultError("vote counts must be a 1-D vector")
        if k.size and (np.any(k < 0) or np.any(k != np.floor(k))):
            raise DirMultError(f"vote counts must be non-negative integers, got {k}")
        k = k.astype(np.int64)
        if int(k.sum()) != int(self.N):
            raise DirMultError(f"sum(k)={int(k.sum())} does not match N={self.N}")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "N", int(self.N))

    @classmethod
    def from_counts(cls, k: Sequence[int]) -> "VoteCounts":
        k = np.asarray(k)
        return cls(k, int(k.sum()))


@dataclass(frozen=True)
class Concentrations:
    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        _check_alpha(alpha)
        object.__setattr__(self, "alpha", alpha)


def _check_alpha(alpha: np.ndarray) -> None:
    if not np.all(np.isfinite(alpha)):
        raise DirMultError("concentrations must be finite")
    if np.any(alpha <= ALPHA_FLOOR):
        raise DirMultError(f"concentrations must exceed {ALPHA_FLOOR:g}, got min {alpha.min()!r}")


def _coerce(votes, conc) -> tuple[np.ndarray, int, np.ndarray]:
    if not isinstance(votes, VoteCounts):
        votes = VoteCounts.from_counts(votes)
    if not isinstance(conc, Concentrations):
        conc = Concentrations(conc)
    if votes.k.shape != conc.alpha.shape:
        raise DirMultError(f"length mismatch: {votes.k.size} counts vs {conc.alpha.size} concentrations")
    return votes.k, votes.N, conc.alpha


def log_dirmult(votes, conc, include_coefficient: bool = True) -> float:
    """Dirichlet-Multinomial log-likelihood of one question's votes.

    Args:
        votes: ``VoteCounts`` or a plain sequence of counts.
        conc: ``Concentrations`` or a plain sequence of positive reals.
        include_coefficient: keep the multinomial coefficient
            ``N!/prod(k_i!)``. It is constant in ``alpha`` so training can
            drop it; with it the result is a true log-probability (<= 0).
    """
    k, N, alpha = _coerce(votes, conc)
    if N == 0:
        return 0.0
    A = alpha.sum()
    value = gammaln(A) - gammaln(N + A) + np.sum(gammaln(k + alpha) - gammaln(alpha))
    if include_coefficient:
        value += gammaln(N + 1) - np.sum(gammaln(k + 1))
    return float(value)


def grad_log_dirmult(votes, conc) -> np.ndarray:
    """Gradient of :func:`log_dirmult` with respect to ``alpha``.

    Component i is ``psi(A) - psi(N + A) + psi(k_i + alpha_i) - psi(alpha_i)``.
    """
    k, N, alpha = _coerce(votes, conc)
    if N == 0:
        return np.zeros_like(alpha)
    A = alpha.sum()
    return digamma(A) - digamma(N + A) + digamma(k + alpha) - digamma(alpha)


# -- multi-question / multi-campaign ------------------------------------------

def _check_sizes(K: np.ndarray, alpha: np.ndarray, index: GlobalAnswerIndex) -> None:
    if K.shape[-1] != index.size or alpha.shape[-1] != index.size:
        raise DirMultError(
            f"vectors must have length {index.size}, got votes {K.shape[-1]} and alpha {alpha.shape[-1]}"
        )


def question_totals(K, index: GlobalAnswerIndex) -> dict[tuple[str, str], int]:
    """Per-question vote totals N_q for a global vote vector."""
    K = np.asarray(K)
    return {key: int(K[sl].sum()) for key, sl in index.question_slices.items()}


def per_question_log_likelihood(
    K, alpha, index: GlobalAnswerIndex, include_coefficient: bool = True
) -> dict[tuple[str, str], float]:
    K = np.asarray(K)
    alpha = np.asarray(alpha, dtype=np.float64)
    _check_sizes(K, alpha, index)
    return {
        key: log_dirmult(K[sl], alpha[sl], include_coefficient)
        for key, sl in index.question_slices.items()
    }


def multi_task_log_likelihood(K, alpha, index: GlobalAnswerIndex, include_coefficient: bool = True) -> float:
    """Sum of per-question log-likelihoods over the whole global index.

    Questions without votes add exactly zero, so a galaxy labelled in one
    campaign scores the same as it would against that campaign alone.
    """
    return float(sum(per_question_log_likelihood(K, alpha, index, include_coefficient).values()))


def multi_task_gradient(K, alpha, index: GlobalAnswerIndex) -> np.ndarray:
    K = np.asarray(K)
    alpha = np.asarray(alpha, dtype=np.float64)
    _check_sizes(K, alpha, index)
    grad = np.zeros(index.size)
    for sl in index.question_slices.values():
        if K[sl].sum() > 0:
            grad[sl] = grad_log_dirmult(K[sl], alpha[sl])
    return grad


def mean_negative_log_likelihood(
    batch: Iterable[tuple[np.ndarray, np.ndarray]],
    index: GlobalAnswerIndex,
    include_coefficient: bool = True,
) -> float:
    """Mean over galaxies of the negated multi-question log-likelihood."""
    values = [-multi_task_log_likelihood(K, a, index, include_coefficient) for K, a in batch]
    if not values:
        raise DirMultError("cannot average over an empty batch")
    return float(np.mean(values))


# -- batched forms used by the trainer ----------------------------------------

def batch_log_likelihood(
    K: np.ndarray, alpha: np.ndarray, index: GlobalAnswerIndex, include_coefficient: bool = True
) -> np.ndarray:
    """Per-galaxy multi-question log-likelihood for (B, A_total) arrays."""
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    _check_sizes(K, alpha, index)
    _check_alpha(alpha)
    out = np.zeros(K.shape[0])
    for sl in index.question_slices.values():
        k, a = K[:, sl], alpha[:, sl]
        N = k.sum(axis=1)
        A = a.sum(axis=1)
        ll = gammaln(A) - gammaln(N + A) + np.sum(gammaln(k + a) - gammaln(a), axis=1)
        if include_coefficient:
            ll = ll + gammaln(N + 1) - np.sum(gammaln(k + 1), axis=1)
        out += np.where(N > 0, ll, 0.0)
    return out


def batch_gradient(K: np.ndarray, alpha: np.ndarray, index: GlobalAnswerIndex) -> np.ndarray:
    """d(log-likelihood)/d(alpha) for (B, A_total) arrays; unanswered slices are exact zeros."""
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    _check_sizes(K, alpha, index)
    _check_alpha(alpha)
    grad = np.zeros_like(alpha)
    for sl in index.question_slices.values():
        k, a = K[:, sl], alpha[:, sl]
        N = k.sum(axis=1, keepdims=True)
        A = a.sum(axis=1, keepdims=True)
        g = digamma(A) - digamma(N + A) + digamma(k + a) - digamma(a)
        grad[:, sl] = np.where(N > 0, g, 0.0)
    return grad
