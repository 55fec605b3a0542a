"""Linear head trained on multi-campaign votes through the Dirichlet-Multinomial loss.

The head maps a feature vector to one concentration per global answer:
``alpha = link(x @ W + c)``. The link is ``1 + g(softplus(raw))`` where
``g`` is the identity up to a knee at half the cap and then saturates
smoothly (tanh) so that ``alpha`` stays in ``(1, alpha_max)``.

Training is plain mini-batch gradient descent with optional decoupled
weight decay on ``W``. Batch gradients are reduced by sorting the
per-galaxy contributions before summing, which makes the sum independent
of galaxy order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from morphoscale import dirmult
from morphoscale.schema import GlobalAnswerIndex
from morphoscale.votesim import GroundTruthGalaxy

ALPHA_MAX = 100.0


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_finite_loss: float | None):
        super().__init__(message)
        self.last_finite_loss = last_finite_loss


def _link_parts(raw: np.ndarray, alpha_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Concentrations and d(alpha)/d(raw)."""
    cap = alpha_max - 1.0
    knee = 0.5 * cap
    s = np.logaddexp(0.0, raw)
    over = s > knee
    t = np.tanh((s - knee) / (cap - knee))
    g = np.where(over, knee + (cap - knee) * t, s)
    dg = np.where(over, 1.0 - t**2, 1.0)
    return 1.0 + g, dg * expit(raw)


def link(raw, alpha_max: float = ALPHA_MAX) -> np.ndarray:
    return _link_parts(np.asarray(raw, dtype=np.float64), alpha_max)[0]


@dataclass
class LinearHead:
    weights: np.ndarray  # (features, A_total)
    bias: np.ndarray     # (A_total,)
    alpha_max: float = ALPHA_MAX

    @classmethod
    def zeros(cls, n_features: int, n_answers: int, alpha_max: float = ALPHA_MAX) -> "LinearHead":
        return cls(np.zeros((n_features, n_answers)), np.zeros(n_answers), alpha_max)

    @classmethod
    def initialise(cls, n_features: int, n_answers: int, rng: np.random.Generator, scale: float = 0.01):
        return cls(scale * rng.standard_normal((n_features, n_answers)), np.zeros(n_answers))

    def copy(self) -> "LinearHead":
        return LinearHead(self.weights.copy(), self.bias.copy(), self.alpha_max)

    def raw(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "alpha_max": self.alpha_max,
            "link": "1+softplus, tanh-saturated above the knee",
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearHead":
        return cls(np.array(doc["weights"], dtype=np.float64), np.array(doc["bias"], dtype=np.float64), doc["alpha_max"])


def forward(head: LinearHead, features) -> np.ndarray:
    """Concentrations for one feature vector (or a (B, F) batch)."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != head.weights.shape[0]:
        raise ValueError(f"expected {head.weights.shape[0]} features, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    return link(head.raw(x), head.alpha_max)


def _ordered_sum(terms: np.ndarray) -> np.ndarray:
    # sorting along the batch axis fixes the summation order regardless of input order
    return np.sort(terms, axis=0).sum(axis=0)


def loss_and_grad(
    head: LinearHead, features: np.ndarray, K: np.ndarray, index: GlobalAnswerIndex, include_coefficient: bool = False
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean negative log-likelihood and its gradient with respect to (W, c)."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    K = np.atleast_2d(K)
    B = X.shape[0]
    alpha, dalpha = _link_parts(head.raw(X), head.alpha_max)
    ll = dirmult.batch_log_likelihood(K, alpha, index, include_coefficient)
    g_alpha = dirmult.batch_gradient(K, alpha, index)
    g_raw = -g_alpha * dalpha / B
    grad_w = _ordered_sum(X[:, :, None] * g_raw[:, None, :])
    grad_c = _ordered_sum(g_raw)
    loss = -float(_ordered_sum(ll)) / B
    return loss, grad_w, grad_c


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2.0
    epochs: int = 50
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        # lr = 0 is allowed so that a no-op training run can be checked exactly
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class TrainResult:
    head: LinearHead
    trace: list[tuple[int, float]] = field(default_factory=list)  # (epoch, mean NLL), epoch 0 = before training


def mean_nll(head: LinearHead, features: np.ndarray, K: np.ndarray, index: GlobalAnswerIndex) -> float:
    alpha = forward(head, np.atleast_2d(features))
    ll = dirmult.batch_log_likelihood(np.atleast_2d(K), alpha, index, include_coefficient=True)
    return -float(_ordered_sum(ll)) / ll.size


def train(
    head: LinearHead,
    features: np.ndarray,
    K: np.ndarray,
    index: GlobalAnswerIndex,
    config: TrainConfig,
) -> TrainResult:
    """Mini-batch gradient descent on the mean negative log-likelihood.

    Each epoch visits the galaxies in an order drawn from ``config.seed``.
    The trace records the full-dataset mean NLL (multinomial coefficient
    included) before training and after every epoch.

    Raises:
        TrainingDiverged: if the loss or parameters become non-finite.
    """
    X = np.asarray(features, dtype=np.float64)
    K = np.asarray(K)
    if X.ndim != 2 or K.ndim != 2 or X.shape[0] != K.shape[0]:
        raise ValueError("features and votes must be (B, F) and (B, A) arrays with matching B")
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if X.shape[1] != head.weights.shape[0] or K.shape[1] != head.weights.shape[1] or K.shape[1] != index.size:
        raise ValueError("dimension mismatch between head, features, votes and index")

    head = head.copy()
    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    trace = [(0, mean_nll(head, X, K, index))]
    last = trace[0][1]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, gw, gc = loss_and_grad(head, X[batch], K[batch], index)
            if not np.isfinite(loss) or not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gc))):
                raise TrainingDiverged(f"non-finite loss or gradient in epoch {epoch}", last)
            lr = config.learning_rate
            if config.weight_decay:
                head.weights -= lr * config.weight_decay * head.weights
            head.weights -= lr * gw
            head.bias -= lr * gc
            if not (np.all(np.isfinite(head.weights)) and np.all(np.isfinite(head.bias))):
                raise TrainingDiverged(f"parameters became non-finite in epoch {epoch}", last)
        value = mean_nll(head, X, K, index)
        if not np.isfinite(value):
            raise TrainingDiverged(f"mean NLL became non-finite after epoch {epoch}", last)
        trace.append((epoch, value))
        last = value
    return TrainResult(head, trace)


@dataclass
class Evaluation:
    mean_nll: float
    calibration: dict[tuple[str, str], float]  # per-question mean |alpha/sum(alpha) - k/N| over answered galaxies


def evaluate(head: LinearHead, features: np.ndarray, K: np.ndarray, index: GlobalAnswerIndex) -> Evaluation:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    alpha = forward(head, X)
    calibration = {}
    for key, sl in index.question_slices.items():
        N = K[:, sl].sum(axis=1)
        answered = N > 0
        if not np.any(answered):
            continue
        predicted = alpha[answered, sl] / alpha[answered, sl].sum(axis=1, keepdims=True)
        observed = K[answered, sl] / N[answered, None]
        per_galaxy = np.abs(predicted - observed).mean(axis=1)
        calibration[key] = float(np.sort(per_galaxy).sum() / per_galaxy.size)
    return Evaluation(mean_nll(head, X, K, index), calibration)


def predicted_fractions(head: LinearHead, features: np.ndarray, index: GlobalAnswerIndex) -> np.ndarray:
    alpha = forward(head, np.atleast_2d(features))
    out = np.empty_like(alpha)
    for sl in index.question_slices.values():
        out[:, sl] = alpha[:, sl] / alpha[:, sl].sum(axis=1, keepdims=True)
    return out


def truth_fractions(truths: Sequence[GroundTruthGalaxy], index: GlobalAnswerIndex) -> np.ndarray:
    """Ground-truth answer probabilities on the global index; zero outside each galaxy's campaign."""
    out = np.zeros((len(truths), index.size))
    for i, t in enumerate(truths):
        for cid, qid in index.campaign_questions(t.campaign_id):
            out[i, index.slice_of(cid, qid)] = t.expected_fractions(qid)
    return out


def fraction_mae(head: LinearHead, features: np.ndarray, truths: Sequence[GroundTruthGalaxy], index: GlobalAnswerIndex) -> float:
    """Mean absolute error of predicted vote fractions over each galaxy's own campaign answers."""
    predicted = predicted_fractions(head, features, index)
    target = truth_fractions(truths, index)
    mask = np.stack([index.campaign_mask(t.campaign_id) for t in truths])
    return float(np.abs(predicted - target)[mask].mean())


def make_features(
    truths: Sequence[GroundTruthGalaxy], index: GlobalAnswerIndex, rng: np.random.Generator, noise: float = 0.05
) -> np.ndarray:
    """Synthetic features: the galaxy's true answer probabilities plus Gaussian noise."""
    base = truth_fractions(truths, index)
    return base + noise * rng.standard_normal(base.shape)


def save_head(head: LinearHead, path: str | Path) -> None:
    Path(path).write_text(json.dumps(head.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_head(path: str | Path) -> LinearHead:
    return LinearHead.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
