"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Sequence, Union

import numpy as np

from gazemoe.tensor import Tensor, no_grad

DEFAULT_STEP = 1e-3


def analytic_gradients(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list:
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every element of ``param`` (modified in place, restored)."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = float(f().data)
            flat[i] = orig - h
            minus = float(f().data)
            flat[i] = orig
            out[i] = (plus - minus) / (2.0 * h)
    return out.reshape(param.shape)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)


def finite_diff_check(f: Callable[[], Tensor], params: Union[Sequence[Tensor], Mapping[str, Tensor]],
                      h: float = DEFAULT_STEP) -> float:
    """Max relative error between backprop and central-difference gradients.

    ``f`` must rebuild the graph on every call and be deterministic. Run it
    under ``default_dtype(np.float64)`` with float64 parameters, otherwise the
    finite differences are dominated by rounding noise.
    """
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    analytic = analytic_gradients(f, tensors)
    worst = 0.0
    for p, a in zip(tensors, analytic):
        worst = max(worst, float(relative_errors(a, numeric_gradient(f, p, h)).max(initial=0.0)))
    return worst


def grouped_check(f: Callable[[], Tensor], groups: Mapping[str, Mapping[str, Tensor]],
                  h: float = DEFAULT_STEP) -> Dict[str, float]:
    """Max relative error per named parameter group."""
    names = [(g, n) for g, members in groups.items() for n in members]
    tensors = [groups[g][n] for g, n in names]
    analytic = analytic_gradients(f, tensors)
    report: Dict[str, float] = {g: 0.0 for g in groups}
    for (group, _), p, a in zip(names, tensors, analytic):
        err = float(relative_errors(a, numeric_gradient(f, p, h)).max(initial=0.0))
        report[group] = max(report[group], err)
    return report
