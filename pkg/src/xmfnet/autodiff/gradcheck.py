"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5, coords=None) -> np.ndarray:
    """d fn / d x by central differences, at all coordinates or only ``coords`` (flat indices)."""
    flat = x.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    grad = np.zeros(flat.size)
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = fn().item()
        flat[i] = old - h
        fm = fn().item()
        flat[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list:
    for t in inputs:
        t.zero_grad()
    backward(fn())
    return [t.grad.copy() for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise worst case."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(fn, inputs: Sequence[Tensor], h: float = 1e-5, coords=None) -> float:
    """Worst relative error between backward() and finite differences over ``inputs``."""
    analytic = analytic_grads(fn, inputs)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        gn = numerical_grad(fn, t, h, coords)
        if coords is not None:
            ga = ga.reshape(-1)[list(coords)]
            gn = gn.reshape(-1)[list(coords)]
        worst = max(worst, relative_error(ga, gn))
    return worst


def probe_gradients(fn: Callable[[], Tensor], x: Tensor, coords, h: float = 1e-5, kink_rtol: float = 1e-4):
    """Relative errors at the probed flat coordinates of ``x`` that lie away from kinks.

    A probe counts as smooth when central differences at ``h`` and ``h/4``
    agree; otherwise the stencil straddles a non-differentiable point (a
    relu/abs kink, a splat support boundary, a nearest-neighbour switch) and
    the probe is skipped. Returns ``(errors, n_skipped)``.
    """
    coords = list(coords)
    ga = analytic_grads(fn, [x])[0].reshape(-1)
    coarse = numerical_grad(fn, x, h, coords).reshape(-1)
    fine = numerical_grad(fn, x, h / 4, coords).reshape(-1)
    errors = []
    skipped = 0
    for i in coords:
        if abs(coarse[i] - fine[i]) > kink_rtol * max(abs(coarse[i]), abs(fine[i]), 1e-6):
            skipped += 1
            continue
        errors.append(relative_error(ga[i], coarse[i]))
    return np.array(errors), skipped
