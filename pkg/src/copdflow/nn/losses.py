import numpy as np

from ..errors import ContractError, ShapeError

BCE_EPS = 1e-7


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Returns ``(loss, grad_logits)`` with ``grad = (softmax - onehot) / batch``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not match")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k or not np.issubdtype(labels.dtype, np.integer)):
        raise ContractError(f"labels must be integers in [0, {k})")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1
    return loss, grad / n


def binary_cross_entropy(prob, target):
    """Mean BCE of probabilities clamped to [1e-7, 1 - 1e-7].

    The gradient is taken w.r.t. the clamped probability.
    """
    p = np.clip(np.asarray(prob, dtype=np.float64), BCE_EPS, 1 - BCE_EPS)
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    loss = float(np.mean(-(t * np.log(p) + (1 - t) * np.log1p(-p))))
    grad = (p - t) / (p * (1 - p)) / p.size
    return loss, grad.astype(np.result_type(prob, np.float32), copy=False)


def bce_with_logits(logits, target):
    """BCE of ``sigmoid(logits)``, evaluated without forming the probability.

    Same value as ``binary_cross_entropy(sigmoid(z), t)`` away from the clamp,
    but the gradient ``(sigmoid(z) - t) / n`` does not vanish when the sigmoid
    saturates in float32.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), z.shape)
    loss = float(np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))))
    p = np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))
    grad = (p - t) / z.size
    return loss, grad.astype(np.asarray(logits).dtype, copy=False)
