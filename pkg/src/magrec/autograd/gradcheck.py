"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from magrec.autograd.tensor import Tensor, backward, no_grad


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param.data`` in place."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``‖a - n‖ / max(‖a‖, ‖n‖)``; zero when both norms are below ``floor``."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def roundoff_floor(value: float, step: float) -> float:
    """Gradient magnitude indistinguishable from rounding noise in ``(f(x+h) - f(x-h)) / 2h``."""
    return 100.0 * np.finfo(np.float64).eps * max(1.0, abs(value)) / step


def check_gradients(
    fn: Callable[[], Tensor], params: Sequence[Tensor] | Mapping[str, Tensor], step: float = 1e-5
) -> dict[str, float]:
    """Relative error of reverse-mode vs finite-difference gradients per parameter.

    ``fn`` must rebuild the computation from scratch on every call. ``params``
    may be a name-to-tensor mapping, which then keys the result. Gradients
    whose norm is below the roundoff level of the central difference at this
    loss value count as matching zero.
    """
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = []
        for i, p in enumerate(params):
            key = p.name or f"param{i}"
            named.append((f"{key}#{i}" if any(k == key for k, _ in named) else key, p))
    for _, p in named:
        p.grad = None
    loss = fn()
    floor = roundoff_floor(loss.item(), step)
    backward(loss)
    errors = {}
    for key, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[key] = relative_error(analytic, numerical_gradient(fn, p, step), floor)
    return errors
