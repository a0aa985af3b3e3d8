"""Layer primitives with explicit forward/backward passes.

Tensors are C-contiguous float32 numpy arrays in NCHW layout. Every
``*_forward`` returns ``(output, cache)``; the matching ``*_backward`` takes
the upstream gradient and that cache.
"""
from __future__ import annotations

import numpy as np

from . import kernels

F32 = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class MissingCacheError(RuntimeError):
    """A backward pass was requested without the forward activations."""


def _need(cache, op):
    if cache is None:
        raise MissingCacheError(f"{op}: backward called without a forward cache")
    return cache


def _pad_amount(kernel, padding):
    if padding == "same":
        if kernel % 2 == 0:
            raise ShapeError(f"'same' padding needs an odd kernel, got {kernel}")
        return (kernel - 1) // 2
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding {padding!r}")


# -- convolution -----------------------------------------------------------

def conv2d_forward(x, weight, bias, stride=1, padding="same"):
    """Cross-correlation of ``x (N,C,H,W)`` with ``weight (K,C,kh,kw)``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {k} output channels")
    ph = _pad_amount(kh, padding)
    pw = _pad_amount(kw, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = kernels.im2col(xp, kh, kw, stride)
    wmat = weight.reshape(k, -1)
    out = cols @ wmat.T
    out += bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))
    return out, (cols, xp.shape, weight, stride, ph, pw)


def conv2d_backward(dout, cache):
    cols, pshape, weight, stride, ph, pw = _need(cache, "conv2d")
    k, c, kh, kw = weight.shape
    dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, k)
    dweight = (dmat.T @ cols).reshape(weight.shape)
    dbias = dmat.sum(axis=0)
    dcols = dmat @ weight.reshape(k, -1)
    dxp = kernels.col2im(dcols, pshape, kh, kw, stride)
    hp, wp = pshape[2], pshape[3]
    dx = dxp[:, :, ph:hp - ph, pw:wp - pw]
    return np.ascontiguousarray(dx), dweight.astype(dout.dtype), dbias.astype(dout.dtype)


# -- batch normalization ---------------------------------------------------

def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps=1e-5,
                      momentum=0.9, mode="infer"):
    """Per-channel normalization followed by learnable scale and shift.

    In ``train`` mode batch statistics are used and the running statistics
    are updated in place as ``r <- momentum*r + (1-momentum)*batch``.
    """
    axes, bshape = _bn_axes(x)
    c = x.shape[1]
    if c == 0:
        raise ShapeError("batchnorm over zero channels")
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm: {name} has shape {arr.shape}, expected ({c},)")
    if mode == "train":
        mean = x.mean(axis=axes, dtype=np.float64).astype(x.dtype)
        var = x.var(axis=axes, dtype=np.float64).astype(x.dtype)
        count = x.size // c
        unbiased = var * F32(count / max(count - 1, 1))
        running_mean *= F32(momentum)
        running_mean += F32(1.0 - momentum) * mean
        running_var *= F32(momentum)
        running_var += F32(1.0 - momentum) * unbiased
    elif mode == "infer":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + F32(eps))).astype(x.dtype)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    cache = (xhat, inv_std, gamma, mode)
    return out.astype(x.dtype, copy=False), cache


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, mode = _need(cache, "batchnorm")
    axes, bshape = _bn_axes(dout)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    g = (gamma * inv_std).reshape(bshape)
    if mode == "infer":
        dx = dout * g
    else:
        m = dout.size // dout.shape[1]
        dx = g / m * (m * dout - dbeta.reshape(bshape) - xhat * dgamma.reshape(bshape))
    dt = dout.dtype
    return dx.astype(dt, copy=False), dgamma.astype(dt), dbeta.astype(dt)


# -- elementwise, pooling, affine -------------------------------------------

def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), mask


def relu_backward(dout, cache):
    mask = _need(cache, "relu")
    return np.where(mask, dout, dout.dtype.type(0))


def maxpool2d_forward(x, pool=2):
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-d input, got {x.shape}")
    if x.shape[2] < pool or x.shape[3] < pool:
        raise ShapeError(f"maxpool2d: window {pool} larger than input {x.shape[2:]}")
    out, arg = kernels.maxpool_forward(x, pool)
    return out, (arg, x.shape, pool)


def maxpool2d_backward(dout, cache):
    arg, shape, pool = _need(cache, "maxpool2d")
    return kernels.maxpool_backward(dout, arg, shape, pool)


def dense_forward(x, weight, bias):
    """Affine map ``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    return x @ weight.T + bias, (x, weight)


def dense_backward(dout, cache):
    x, weight = _need(cache, "dense")
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def flatten_forward(x):
    return np.ascontiguousarray(x).reshape(x.shape[0], -1), x.shape


def flatten_backward(dout, cache):
    return dout.reshape(_need(cache, "flatten"))


def concat_channels_forward(xs):
    if not xs:
        raise ShapeError("concat_channels needs at least one operand")
    rest = xs[0].shape[:1] + xs[0].shape[2:]
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or x.shape[:1] + x.shape[2:] != rest:
            raise ShapeError(f"concat_channels: non-channel dims differ: {[a.shape for a in xs]}")
    sizes = [x.shape[1] for x in xs]
    return np.concatenate(xs, axis=1), sizes


def concat_channels_backward(dout, cache):
    sizes = _need(cache, "concat_channels")
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(d) for d in np.split(dout, bounds, axis=1)]


def weighted_sum_forward(a, b, lam):
    """``lam*a + (1-lam)*b`` for a scalar ``lam`` stored as a 1-element array."""
    if a.shape != b.shape:
        raise ShapeError(f"weighted_sum: shapes differ {a.shape} vs {b.shape}")
    lv = lam.reshape(-1)[0]
    out = lv * a + (1 - lv) * b
    return out.astype(a.dtype, copy=False), (a, b, lv)


def weighted_sum_backward(dout, cache):
    a, b, lv = _need(cache, "weighted_sum")
    dt = dout.dtype
    dlam = np.array([np.sum(dout * (a - b), dtype=np.float64)], dtype=lv.dtype)
    return (lv * dout).astype(dt), ((1 - lv) * dout).astype(dt), dlam


# -- classifier output -------------------------------------------------------

def softmax_forward(logits):
    if logits.ndim != 2 or logits.shape[1] == 0:
        raise ShapeError(f"softmax expects (N, K) with K > 0, got {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p, p


def softmax_backward(dout, cache):
    p = _need(cache, "softmax")
    inner = (dout * p).sum(axis=1, keepdims=True)
    return p * (dout - inner)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(probs, labels, floor=1e-12):
    """Mean negative log-probability of the true labels."""
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(f"cross_entropy: probs {probs.shape} vs labels {labels.shape}")
    picked = probs[np.arange(len(labels)), labels].astype(np.float64)
    return float(-np.mean(np.log(np.maximum(picked, floor))))


def cross_entropy_backward(probs, labels, floor=1e-12):
    n = probs.shape[0]
    grad = np.zeros_like(probs)
    picked = np.maximum(probs[np.arange(n), labels], probs.dtype.type(floor))
    grad[np.arange(n), labels] = -1 / (picked * n)
    return grad


def softmax_cross_entropy(logits, labels):
    """Fused loss from logits; returns ``(loss, dlogits)``."""
    n = logits.shape[0]
    logp = log_softmax(logits.astype(np.float64))
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)
