"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .errors import GraphFuseError, UsageError
from .tensor import Precision, Tensor


class GradCheckError(GraphFuseError, FloatingPointError):
    """A function produced a non-finite value while being checked."""


def _relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if g_ad.size else 0.0


def _scalar(out: Tensor, where: str) -> float:
    if out.size != 1:
        raise UsageError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    val = float(out.data.reshape(-1)[0])
    if not np.isfinite(val):
        raise GradCheckError(f"non-finite function value {val} {where}")
    return val


def _check_leaf(f: Callable[[], Tensor], leaf: Tensor, h: float, name: str) -> float:
    leaf.grad = None
    out = f()
    _scalar(out, "at the base point")
    out.backward()
    g_ad = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
    if not np.all(np.isfinite(g_ad)):
        bad = tuple(int(v) for v in np.unravel_index(int(np.argmax(~np.isfinite(g_ad))), g_ad.shape))
        raise GradCheckError(f"non-finite analytic gradient for {name} at coordinate {bad}")

    g_fd = np.empty_like(g_ad)
    flat = leaf.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        idx = tuple(int(v) for v in np.unravel_index(i, leaf.shape))
        flat[i] = orig + h
        fp = _scalar(f(), f"for {name} at coordinate {idx} (+h)")
        flat[i] = orig - h
        fm = _scalar(f(), f"for {name} at coordinate {idx} (-h)")
        flat[i] = orig
        g_fd.reshape(-1)[i] = (fp - fm) / (2 * h)
    leaf.grad = None
    return _relative_error(g_ad, g_fd)


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients of ``f`` at ``x``.

    The error per coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    ``x`` is promoted to double precision before checking.
    """
    if not 1e-7 <= h <= 1e-4:
        raise UsageError(f"step h={h} outside [1e-7, 1e-4]")
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    leaf = Tensor(np.array(data, dtype=Precision.DOUBLE.dtype), requires_grad=True)
    return _check_leaf(lambda: f(leaf), leaf, h, "input")


def grad_check_params(
    f: Callable[[], Tensor],
    params: Iterable,
    h: float = 1e-6,
    max_coords: Optional[int] = None,
) -> dict:
    """Check every (named) parameter of a closure ``f`` that returns a scalar loss.

    ``params`` yields ``(name, tensor)`` pairs whose tensors must already be
    double precision. With ``max_coords`` only the first that many coordinates
    of each parameter are perturbed, but the analytic gradient is still full.
    Returns ``{name: max relative error}``.
    """
    if not 1e-7 <= h <= 1e-4:
        raise UsageError(f"step h={h} outside [1e-7, 1e-4]")
    errors = {}
    params = list(params)
    for _, p in params:
        if p.dtype != np.float64:
            raise UsageError("grad_check_params requires double-precision parameters")
    for name, p in params:
        for _, q in params:
            q.grad = None
        if max_coords is None or p.size <= max_coords:
            errors[name] = _check_leaf(f, p, h, name)
        else:
            errors[name] = _check_leaf_subset(f, p, h, name, max_coords)
    for _, q in params:
        q.grad = None
    return errors


def _check_leaf_subset(f, leaf: Tensor, h: float, name: str, count: int) -> float:
    leaf.grad = None
    out = f()
    _scalar(out, "at the base point")
    out.backward()
    g_ad = leaf.grad.reshape(-1)[:count].copy()
    flat = leaf.data.reshape(-1)
    g_fd = np.empty(count)
    for i in range(count):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(), f"for {name} at coordinate {i} (+h)")
        flat[i] = orig - h
        fm = _scalar(f(), f"for {name} at coordinate {i} (-h)")
        flat[i] = orig
        g_fd[i] = (fp - fm) / (2 * h)
    leaf.grad = None
    return _relative_error(g_ad, g_fd)
