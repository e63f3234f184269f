"""Central finite-difference oracle for the autodiff engine.

The oracle re-evaluates the function in float64 with perturbed inputs, so it
never touches the backward rules it is checking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, float64_mode, grad


def numerical_grad(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-3,
                   max_entries: int | None = None,
                   rng: np.random.Generator | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Return ``(flat_indices, estimates)`` per tensor.

    When ``max_entries`` is set, large tensors are probed at a random subset of
    coordinates.
    """
    rng = rng or np.random.default_rng(0)
    originals = [t.data for t in tensors]
    results = []
    try:
        with float64_mode():
            for t in tensors:
                t.data = t.data.astype(np.float64)
            for t in tensors:
                n = t.data.size
                if max_entries is not None and n > max_entries:
                    idx = np.sort(rng.choice(n, size=max_entries, replace=False))
                else:
                    idx = np.arange(n)
                est = np.empty(len(idx))
                flat = t.data.reshape(-1)
                for j, i in enumerate(idx):
                    keep = flat[i]
                    flat[i] = keep + h
                    up = float(fn().data)
                    flat[i] = keep - h
                    down = float(fn().data)
                    flat[i] = keep
                    est[j] = (up - down) / (2 * h)
                results.append((idx, est))
    finally:
        for t, data in zip(tensors, originals):
            t.data = data
    return results


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], rtol: float = 1e-3,
                    atol: float = 1e-5, h: float = 1e-3, max_entries: int | None = None,
                    seed: int = 0) -> float:
    """Compare analytic gradients of ``fn()`` against central differences.

    Returns the worst ``|analytic - numeric| - rtol*|numeric|`` excess (<= atol
    means pass); raises AssertionError with details otherwise.
    """
    analytic = [g.data.astype(np.float64) for g in grad(fn(), tensors)]
    numeric = numerical_grad(fn, tensors, h=h, max_entries=max_entries,
                             rng=np.random.default_rng(seed))
    worst = -np.inf
    for k, (a, (idx, est)) in enumerate(zip(analytic, numeric)):
        got = a.reshape(-1)[idx]
        excess = np.abs(got - est) - rtol * np.abs(est)
        worst = max(worst, float(excess.max(initial=-np.inf)))
        if np.any(excess > atol):
            bad = int(np.argmax(excess))
            raise AssertionError(
                f"gradient mismatch in tensor {k} {tensors[k].shape} at flat index {idx[bad]}: "
                f"analytic {got[bad]:.6g} vs numeric {est[bad]:.6g}")
    return worst
