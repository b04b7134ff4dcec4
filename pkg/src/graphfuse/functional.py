"""Differentiable neural-network primitives built on :mod:`graphfuse.tensor`."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, _make, add, reshape

Pair = Union[int, Tuple[int, int]]


def _pair(v: Pair) -> Tuple[int, int]:
    if isinstance(v, int):
        return v, v
    return int(v[0]), int(v[1])


def conv2d_output_shape(h: int, w: int, kernel: Pair, stride: Pair = 1, padding: Pair = 0):
    (kh, kw), (sh, sw), (ph, pw) = _pair(kernel), _pair(stride), _pair(padding)
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: Pair = 1,
    padding: Pair = 0,
) -> Tensor:
    """2-D cross-correlation of ``x`` (B, C_in, H, W) with ``w`` (C_out, C_in, kh, kw).

    The loop runs over kernel taps rather than output pixels, so a (9, 1)
    temporal kernel costs nine tensor contractions.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    b, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin} ({w.shape})")
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    if kh > h + 2 * ph or kw > wd + 2 * pw:
        raise ShapeError(
            f"conv2d: kernel {(kh, kw)} larger than padded input {(h + 2 * ph, wd + 2 * pw)}"
        )
    ho, wo = conv2d_output_shape(h, wd, (kh, kw), (sh, sw), (ph, pw))
    xd, wdat = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd

    def window(arr, i, j):
        return arr[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]

    out = np.zeros((b, cout, ho, wo), dtype=np.result_type(xd, wdat))
    for i in range(kh):
        for j in range(kw):
            # (B, C, Ho, Wo) x (O, C) -> (B, O, Ho, Wo)
            out += np.einsum("bchw,oc->bohw", window(xp, i, j), wdat[:, :, i, j], optimize=True)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wdat)
        for i in range(kh):
            for j in range(kw):
                window(gxp, i, j)[...] += np.einsum("bohw,oc->bchw", g, wdat[:, :, i, j], optimize=True)
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, window(xp, i, j), optimize=True)
        gx = gxp[:, :, ph : ph + h, pw : pw + wd] if (ph or pw) else gxp
        return gx, gw

    y = _make(out, (x, w), backward)
    if bias is not None:
        y = add(y, reshape(bias, (1, cout, 1, 1)))
    return y


def linear(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + bias`` for ``x`` of shape (..., in) and ``w`` of shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {w.shape[1]}")
    xd, wdat = x.data, w.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g @ wdat, g2.T @ xd.reshape(-1, xd.shape[-1]))

    y = _make(xd @ wdat.T, (x, w), backward)
    if bias is not None:
        y = add(y, bias)
    return y


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over every axis except axis 1 (the feature axis).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional). In eval mode the
    running buffers are used.
    """
    if eps <= 0:
        raise ConfigError(f"batch_norm eps must be positive, got {eps}")
    if x.ndim < 2:
        raise ShapeError(f"batch_norm expects (B, F, ...) input, got {x.shape}")
    feat = x.shape[1]
    if gamma.shape != (feat,) or beta.shape != (feat,):
        raise ShapeError(
            f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {feat} features"
        )
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = (1, feat) + (1,) * (x.ndim - 2)
    xd = x.data
    n = xd.size // feat

    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    g_d, b_d = gamma.data, beta.data
    out = xhat * g_d.reshape(bshape) + b_d.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * g_d.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / n) * (
                n * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _make(out.astype(xd.dtype), (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, K) logits, got {logits.shape}")
    bsz, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != bsz:
        raise ShapeError(f"got {labels.shape[0]} labels for a batch of {bsz}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(bsz)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / bsz),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


__all__ = [
    "batch_norm",
    "conv2d",
    "conv2d_output_shape",
    "linear",
    "log_softmax",
    "softmax",
    "softmax_cross_entropy",
]
