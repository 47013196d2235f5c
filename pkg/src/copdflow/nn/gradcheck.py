"""Central finite-difference checks for layers and models."""

import numpy as np

from ..tensor import Rng


def numerical_gradient(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place, restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b, floor=1e-6):
    """max |a - b| / max(|a|, |b|, floor).

    The floor keeps gradients that are exactly zero in theory (a bias feeding
    a BatchNorm) from turning finite-difference roundoff into a large ratio.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_layer(layer, x, mode="train", seed=0, h=1e-5):
    """Compare analytic input/parameter gradients of ``sum(w * layer(x))`` with finite differences.

    A fixed random projection ``w`` makes the scalar objective sensitive to every
    output.  Stochastic layers get a freshly seeded stream on every evaluation.
    Returns a dict of relative errors keyed by "input" and parameter name.
    """
    x = np.array(x, dtype=np.float64)
    out, _ = layer.forward(x, mode=mode, rng=Rng(seed))
    w = Rng(seed + 1).normal(out.shape)

    def objective():
        y, _ = layer.forward(x, mode=mode, rng=Rng(seed))
        return float(np.sum(w * y))

    saved = {k: v.copy() for k, v in layer.buffers.items()}
    _, cache = layer.forward(x, mode=mode, rng=Rng(seed))
    dx, grads = layer.backward(w, cache)
    errors = {"input": relative_error(dx, numerical_gradient(objective, x, h))}
    for name, p in layer.params.items():
        errors[name] = relative_error(grads[name], numerical_gradient(objective, p, h))
    for k, v in saved.items():
        layer.buffers[k][...] = v
    return errors


def check_loss(loss_fn, x, *args, h=1e-5):
    """Relative error of a ``(loss, grad)`` function's gradient w.r.t. ``x``."""
    x = np.array(x, dtype=np.float64)
    _, grad = loss_fn(x, *args)
    num = numerical_gradient(lambda: loss_fn(x, *args)[0], x, h)
    return relative_error(grad, num)
