"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic, numeric):
    """``|analytic - numeric| / max(1, |numeric|)``, elementwise."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def numeric_grad(
    fn: Callable[[], float],
    tensor: Tensor,
    indices: Optional[Sequence[int]] = None,
    step: float = 1e-5,
) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``tensor``.

    ``indices`` are flat positions into ``tensor.data``; all entries are
    perturbed when omitted. ``tensor.data`` is modified in place and restored.
    """
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        out.append((up - down) / (2 * step))
    return np.asarray(out)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    samples: Optional[int] = None,
    step: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Largest relative error between backprop and finite differences.

    ``loss_fn`` must rebuild the graph from scratch on every call. With
    ``samples`` set, at most that many entries per tensor are checked.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size)
        if samples is None or samples >= t.size:
            idx = np.arange(t.size)
        else:
            idx = rng.choice(t.size, size=samples, replace=False)
        numeric = numeric_grad(lambda: loss_fn().item(), t, idx, step)
        worst = max(worst, float(relative_error(analytic[idx], numeric).max()))
    return worst
