"""Multinomial logistic regression used as the shared federated model.

Weights are a single (classes, features+1) matrix with the bias in the last
column, which keeps model averaging and byte-size accounting trivial.
"""

from __future__ import annotations

import numpy as np


def init_weights(class_count: int, feature_dim: int) -> np.ndarray:
    if class_count < 2 or feature_dim < 1:
        raise ValueError("need at least 2 classes and 1 feature")
    return np.zeros((class_count, feature_dim + 1))


def model_bytes(weights: np.ndarray) -> int:
    return int(weights.size * weights.itemsize)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _logits(weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    return features @ weights[:, :-1].T + weights[:, -1]


def per_sample_losses(weights: np.ndarray, features: np.ndarray,
                      labels: np.ndarray) -> np.ndarray:
    """Cross-entropy of each sample under the current weights."""
    log_probs = _log_softmax(_logits(weights, features))
    return -log_probs[np.arange(labels.size), labels]


def mean_loss(weights: np.ndarray, features: np.ndarray,
              labels: np.ndarray) -> float:
    return float(per_sample_losses(weights, features, labels).mean())


def mean_loss_gradient(weights: np.ndarray, features: np.ndarray,
                       labels: np.ndarray) -> np.ndarray:
    """Analytic gradient of the mean cross-entropy, same shape as weights."""
    n = labels.size
    probs = np.exp(_log_softmax(_logits(weights, features)))
    probs[np.arange(n), labels] -= 1.0
    grad = np.empty_like(weights)
    grad[:, :-1] = probs.T @ features / n
    grad[:, -1] = probs.mean(axis=0)
    return grad


def predict(weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    return _logits(weights, features).argmax(axis=1)


def accuracy(weights: np.ndarray, features: np.ndarray,
             labels: np.ndarray) -> float:
    return float((predict(weights, features) == labels).mean())


def local_epoch(weights: np.ndarray, features: np.ndarray, labels: np.ndarray,
                learning_rate: float, batch_size: int,
                rng: np.random.Generator,
                ) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """One epoch of minibatch gradient descent from the given weights.

    Returns the updated weights, the per-sample training losses observed as
    each minibatch was processed, and the squared update norm of every batch
    step (the alternative utility signal).
    """
    if learning_rate <= 0 or batch_size < 1:
        raise ValueError("learning_rate must be > 0 and batch_size >= 1")
    n = labels.size
    w = weights.copy()
    losses = np.empty(n)
    batch_sq_norms: list[float] = []
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        fx, fy = features[idx], labels[idx]
        losses[idx] = per_sample_losses(w, fx, fy)
        step = learning_rate * mean_loss_gradient(w, fx, fy)
        w -= step
        batch_sq_norms.append(float(np.sum(step * step)))
    return w, losses, batch_sq_norms
