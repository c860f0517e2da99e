"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Tensor, gradients_for


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """‖a − n‖ / max(‖a‖, ‖n‖), with ``floor`` guarding all-zero gradients."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def numeric_gradient(fn: Callable[[], float], tensor: Tensor, h: float = 1e-6,
                     indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``tensor.data``, perturbed in place.

    With ``indices`` only those entries are evaluated and the rest of the
    returned array is zero.
    """
    data = tensor.data
    grad = np.zeros_like(data)
    if indices is None:
        indices = list(np.ndindex(data.shape))
    for idx in indices:
        orig = data[idx]
        data[idx] = orig + h
        up = fn()
        data[idx] = orig - h
        down = fn()
        data[idx] = orig
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
                    max_entries: int | None = None, seed: int = 0,
                    names: Sequence[str] | None = None) -> dict[str, float]:
    """Compare autodiff and central-difference gradients of a scalar loss.

    ``loss_fn`` rebuilds the loss from the current parameter values. Groups
    larger than ``max_entries`` are checked on a seeded random subset of
    entries (the analytic gradient is compared on the same subset). Returns the
    relative error per parameter group.
    """
    with Graph() as graph:
        loss = loss_fn()
    analytic = gradients_for(loss, graph, params)

    def value() -> float:
        return loss_fn().item()

    rng = np.random.default_rng(seed)
    names = names or [p.name or f"param{i}" for i, p in enumerate(params)]
    errors = {}
    for name, p, a in zip(names, params, analytic):
        all_idx = list(np.ndindex(p.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            idx = [all_idx[i] for i in sorted(pick)]
        else:
            idx = all_idx
        num = numeric_gradient(value, p, h, idx)
        sel = tuple(np.array(idx).T)
        errors[name] = relative_error(a[sel], num[sel])
    return errors
