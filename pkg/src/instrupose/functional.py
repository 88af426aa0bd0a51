"""Neural-network primitives on :class:`~instrupose.tensor.Tensor`.

All image tensors use the ``(batch, channels, height, width)`` layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Tensor, as_tensor, concat, make_result, matmul  # noqa: F401

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def conv2d(x, kernel, bias=None) -> Tensor:
    """Zero-padded "same" convolution with stride 1 and an odd square kernel.

    Implemented as an im2col matrix product; the backward pass scatters the
    column gradients back with one strided add per kernel offset.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ValueError(f"conv2d channel mismatch: input has {C} channels, kernel expects {Ck}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if H < 1 or W < 1:
        raise ValueError("conv2d needs non-empty spatial dimensions")
    k, p = kh, kh // 2

    if k == 1:
        cols = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B,C,H,W,k,k
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)
    wmat = kernel.data.reshape(F, C * k * k)
    out = cols @ wmat.T
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (F,):
            raise ValueError(f"conv2d bias must have shape ({F},), got {bias.shape}")
        out += bias.data
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(B, H, W, F).transpose(0, 3, 1, 2))

    def backward(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * H * W, F)
        gk = (gf.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = gf @ wmat
            if k == 1:
                gx = np.ascontiguousarray(dcols.reshape(B, H, W, C).transpose(0, 3, 1, 2))
            else:
                dcols = dcols.reshape(B, H, W, C, k, k).transpose(0, 3, 4, 5, 1, 2)
                gxp = np.zeros((B, C, H + 2 * p, W + 2 * p))
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + H, j : j + W] += dcols[:, :, i, j]
                gx = gxp[:, :, p : p + H, p : p + W].copy()
        grads = [gx, gk]
        if bias is not None:
            grads.append(gf.sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, backward)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer.

    ``mean``/``var`` stay ``None`` until initialized; inference with
    uninitialized statistics is an error.
    """

    num_channels: int
    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def initialized(cls, num_channels: int, **kw) -> "BatchNormState":
        return cls(num_channels, np.zeros(num_channels), np.ones(num_channels), **kw)

    @property
    def ready(self) -> bool:
        return self.mean is not None and self.var is not None


def batch_norm(x, gamma, beta, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel batch normalization over the batch and spatial axes.

    In ``"train"`` mode the batch statistics are used (and differentiated
    through) and the running averages in ``state`` are updated. In
    ``"infer"`` mode the stored running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm parameters must have shape ({C},)")
    eps = state.eps
    g4, b4 = gamma.data.reshape(1, C, 1, 1), beta.data.reshape(1, C, 1, 1)

    if mode == "infer":
        if not state.ready:
            raise ValueError("batch_norm in infer mode needs initialized running statistics")
        inv_std = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - state.mean.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)

        def backward_infer(g):
            return (
                g * (g4 * inv_std.reshape(1, C, 1, 1)),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return make_result(xhat * g4 + b4, (x, gamma, beta), backward_infer)

    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    n = B * H * W
    if n < 2:
        raise ValueError("batch_norm in train mode needs at least 2 values per channel")
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(1, C, 1, 1)
    xhat = (x.data - mu.reshape(1, C, 1, 1)) * inv_std

    m = state.momentum
    if state.ready:
        state.mean = m * state.mean + (1 - m) * mu
        state.var = m * state.var + (1 - m) * var * (n / (n - 1))
    else:
        state.mean, state.var = mu.copy(), var * (n / (n - 1))

    def backward(g):
        dxhat = g * g4
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = (inv_std / n) * (n * dxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(xhat * g4 + b4, (x, gamma, beta), backward)


def max_pool2(x) -> Tensor:
    """2x2 max pooling, stride 2. Ties go to the first element in row-major order."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2 needs even spatial dimensions, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros((B, C, H // 2, W // 2, 4))
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        routed = routed.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(B, C, H, W),)

    return make_result(out, (x,), backward)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return make_result(
        out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)
    )


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape (B, D)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape}, weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}")
        out = out + bias
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def spatial_softmax(x) -> Tensor:
    """Softmax over the H*W pixels of every (batch, channel) map."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"spatial_softmax expects (B, K, H, W), got {x.shape}")
    B, K, H, W = x.shape
    flat = x.data.reshape(B, K, H * W)
    e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gf = g.reshape(B, K, H * W)
        return ((s * (gf - (gf * s).sum(axis=-1, keepdims=True))).reshape(B, K, H, W),)

    return make_result(s.reshape(B, K, H, W), (x,), backward)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return x.reshape(x.shape[0], -1)
