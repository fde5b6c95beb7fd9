"""Differentiable layer primitives on dense NCHW arrays.

Every operation is a pure function over its inputs: it returns the output
together with a backward closure that maps an upstream gradient to input and
parameter gradients. Closures may be invoked repeatedly; nothing is consumed.
All math runs in the dtype of the inputs (float32 in training, float64 in
numerical test harnesses).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Tensor = np.ndarray

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class LayerGrads:
    """Gradients produced by one layer's backward pass.

    d_params maps parameter names to gradients with matching shapes; it is
    empty for parameter-free layers.
    """

    d_input: Optional[Tensor]
    d_params: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class BatchNormState:
    """Running statistics carried across batches (one entry per channel)."""

    running_mean: Tensor
    running_var: Tensor


def _im2col(padded: Tensor, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> Tensor:
    """Gather sliding k×k patches into a (N·out_h·out_w, C·kh·kw) matrix."""
    n, c, _, _ = padded.shape
    sn, sc, sh, sw = padded.strides
    view = np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, c, out_h, out_w, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    return view.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kh * kw)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> tuple[Tensor, Callable[..., LayerGrads]]:
    """2D cross-correlation of x (N,C,H,W) with kernel (O,C,kh,kw).

    Returns (output, backward). backward(upstream, want_input=True) yields
    LayerGrads with d_input (None when want_input is False) and d_params
    {"kernel": ..., "bias": ...} (bias entry only when a bias was given).
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    out_c, k_in, kh, kw = kernel.shape
    if c != k_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {x.shape}, kernel {kernel.shape}, "
            f"stride={stride}, pad={pad}"
        )
    if bias is not None and bias.shape != (out_c,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match out channels {out_c}")

    if pad > 0:
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        padded = x
    cols = _im2col(padded, kh, kw, stride, out_h, out_w)
    wmat = kernel.reshape(out_c, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias
    out = np.ascontiguousarray(out.reshape(n, out_h, out_w, out_c).transpose(0, 3, 1, 2))

    def backward(upstream: Tensor, want_input: bool = True) -> LayerGrads:
        if upstream.shape != out.shape:
            raise ShapeError(f"conv2d upstream shape {upstream.shape} != output {out.shape}")
        up_rows = upstream.transpose(0, 2, 3, 1).reshape(-1, out_c)
        d_params = {"kernel": (up_rows.T @ cols).reshape(kernel.shape)}
        if bias is not None:
            d_params["bias"] = upstream.sum(axis=(0, 2, 3))
        d_input = None
        if want_input:
            d_cols = (up_rows @ wmat).reshape(n, out_h, out_w, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            d_padded = np.zeros((n, c, hp, wp), dtype=x.dtype)
            for a in range(kh):
                for b in range(kw):
                    d_padded[:, :, a : a + stride * out_h : stride, b : b + stride * out_w : stride] += d_cols[
                        :, :, :, :, a, b
                    ]
            d_input = d_padded[:, :, pad : pad + h, pad : pad + w] if pad > 0 else d_padded
        return LayerGrads(d_input, d_params)

    return out, backward


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> tuple[Tensor, Callable[..., LayerGrads]]:
    """Per-channel batch normalization over (N,H,W).

    Train mode normalizes by batch statistics and updates state in place
    (running_var uses the unbiased estimate); eval mode normalizes by the
    running statistics and leaves them untouched. The backward closure is the
    exact adjoint of whichever forward mode ran.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")

    if mode == "train":
        m = n * h * w
        if m == 0:
            raise ValueError("batchnorm2d: zero-size batch in train mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean *= 1.0 - momentum
        state.running_mean += momentum * mean
        state.running_var *= 1.0 - momentum
        state.running_var += momentum * unbiased
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]

    def backward(upstream: Tensor, want_input: bool = True) -> LayerGrads:
        if upstream.shape != x.shape:
            raise ShapeError(f"batchnorm2d upstream shape {upstream.shape} != input {x.shape}")
        d_params = {
            "gamma": (upstream * xhat).sum(axis=(0, 2, 3)),
            "beta": upstream.sum(axis=(0, 2, 3)),
        }
        d_input = None
        if want_input:
            d_xhat = upstream * gamma[None, :, None, None]
            if mode == "train":
                # Batch statistics depend on x, which adds the two mean terms.
                d_input = inv_std[None, :, None, None] * (
                    d_xhat
                    - d_xhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (d_xhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                d_input = d_xhat * inv_std[None, :, None, None]
        return LayerGrads(d_input, d_params)

    return out, backward


def relu(x: Tensor) -> tuple[Tensor, Callable[[Tensor], Tensor]]:
    """Elementwise max(0, x); backward masks the upstream gradient."""
    out = np.maximum(x, 0)
    mask = x > 0

    def backward(upstream: Tensor) -> Tensor:
        if upstream.shape != x.shape:
            raise ShapeError(f"relu upstream shape {upstream.shape} != input {x.shape}")
        return upstream * mask

    return out, backward


def global_avg_pool(x: Tensor) -> tuple[Tensor, Callable[[Tensor], Tensor]]:
    """Spatial mean reducing (N,C,H,W) to (N,C,1,1)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.mean(axis=(2, 3), keepdims=True)

    def backward(upstream: Tensor) -> Tensor:
        if upstream.shape != out.shape:
            raise ShapeError(f"global_avg_pool upstream shape {upstream.shape} != output {out.shape}")
        scale = np.asarray(1.0 / (h * w), dtype=x.dtype)
        return np.broadcast_to(upstream * scale, x.shape).copy()

    return out, backward


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, Callable[..., LayerGrads]]:
    """Affine map x (N,F) @ weight.T (F,O) + bias (O,)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear feature mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x @ weight.T + bias

    def backward(upstream: Tensor, want_input: bool = True) -> LayerGrads:
        if upstream.shape != out.shape:
            raise ShapeError(f"linear upstream shape {upstream.shape} != output {out.shape}")
        d_params = {"weight": upstream.T @ x, "bias": upstream.sum(axis=0)}
        d_input = upstream @ weight if want_input else None
        return LayerGrads(d_input, d_params)

    return out, backward


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Tensor) -> tuple[float, Tensor]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits.

    loss = mean_b(-log softmax(logits)[b, labels[b]]);
    d_logits = (softmax - onehot) / batch.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects 2-d logits, got {logits.shape}")
    batch, n_classes = logits.shape
    if batch < 1:
        raise ValueError("softmax_cross_entropy: empty batch")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} != ({batch},)")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range [0, {n_classes}): {labels.min()}..{labels.max()}")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(batch), labels]))
    d_logits = softmax(logits)
    d_logits[np.arange(batch), labels] -= 1.0
    d_logits /= batch
    return loss, d_logits.astype(logits.dtype, copy=False)
