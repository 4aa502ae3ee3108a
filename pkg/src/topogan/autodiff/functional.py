"""Differentiable operations used by the generator, discriminator and classifier."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, make_node

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


# -- convolution helpers ----------------------------------------------------
def _phases(xp: np.ndarray, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (stride, stride, C, N, ceil(Hp/stride), ceil(Wp/stride)) polyphase copy."""
    n, c, hp, wp = xp.shape
    hq, wq = -(-hp // stride), -(-wp // stride)
    if (hq * stride, wq * stride) != (hp, wp):
        xp = np.pad(xp, ((0, 0), (0, 0), (0, hq * stride - hp), (0, wq * stride - wp)))
    return np.ascontiguousarray(xp.reshape(n, c, hq, stride, wq, stride).transpose(3, 5, 1, 0, 2, 4))


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (C*k*k, N*out_h*out_w) channel-major patch matrix.

    Working on the polyphase copy turns every kernel tap into one dense
    block copy regardless of the stride.
    """
    n, c = xp.shape[:2]
    ph = _phases(xp, stride)
    cols = np.empty((c, k, k, n, out_h, out_w), dtype=xp.dtype)
    for i in range(k):
        qi, ri = divmod(i, stride)
        for j in range(k):
            qj, rj = divmod(j, stride)
            cols[:, i, j] = ph[ri, rj, :, :, qi : qi + out_h, qj : qj + out_w]
    return cols.reshape(c * k * k, n * out_h * out_w)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Scatter-add patches (C, k, k, N, out_h, out_w) into an (N, C, Hp, Wp) buffer.

    Accumulation happens in a polyphase buffer indexed by (row phase, column
    phase) so that each kernel tap adds one dense block; the phases are
    interleaved back into image order once at the end.
    """
    n, c, hp, wp = shape
    hq, wq = -(-hp // stride), -(-wp // stride)
    buf = np.zeros((stride, stride, c, n, hq, wq), dtype=cols.dtype)
    for i in range(k):
        qi, ri = divmod(i, stride)
        for j in range(k):
            qj, rj = divmod(j, stride)
            buf[ri, rj, :, :, qi : qi + out_h, qj : qj + out_w] += cols[:, i, j]
    full = buf.transpose(3, 2, 4, 0, 5, 1).reshape(n, c, hq * stride, wq * stride)
    return full[:, :, :hp, :wp]


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def transposed_output_size(size: int, k: int, stride: int, pad: int, output_pad: int = 0) -> int:
    return (size - 1) * stride - 2 * pad + k + output_pad


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    Args:
        x: input batch, N x Cin x H x W.
        weight: kernels, Cout x Cin x k x k.
        bias: per-output-channel offset of length Cout, or None.
        stride: step between window positions (>= 1).
        pad: zero padding added to each spatial border.

    Returns:
        Tensor of shape N x Cout x H' x W' with H' = floor((H + 2 pad - k) / stride) + 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin} ({weight.shape})")
    if k != k2:
        raise ShapeError(f"conv2d: only square kernels are supported, got {k}x{k2}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    oh, ow = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, oh, ow)
    wmat = weight.data.reshape(cout, -1)
    out_cm = wmat @ cols
    if bias is not None:
        out_cm += bias.data[:, None]
    out = np.ascontiguousarray(out_cm.reshape(cout, n, oh, ow).transpose(1, 0, 2, 3))

    def backward(g):
        g_cm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g_cm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g_cm.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g_cm).reshape(cin, k, k, n, oh, ow)
            gxp = _col2im(dcols, xp.shape, k, stride, oh, ow)
            gx = np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w])
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, lambda g: backward(g)[: len(parents)])


def transposed_conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    output_pad: int = 0,
) -> Tensor:
    """Fractionally strided convolution, the adjoint of :func:`conv2d`.

    ``weight`` has shape Cin x Cout x k x k, i.e. the same array a forward
    convolution mapping Cout -> Cin would use. Output spatial size is
    (H - 1) * stride - 2 * pad + k + output_pad.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if not 0 <= output_pad < stride:
        raise ValueError(f"output_pad must satisfy 0 <= output_pad < stride, got {output_pad} (stride {stride})")
    n, cin, h, w = x.shape
    wcin, cout, k, _ = weight.shape
    if wcin != cin:
        raise ShapeError(f"transposed_conv2d: input has {cin} channels but weight expects {wcin}")
    oh = transposed_output_size(h, k, stride, pad, output_pad)
    ow = transposed_output_size(w, k, stride, pad, output_pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"transposed_conv2d: non-positive output size {oh}x{ow}")
    buf_shape = (n, cout, (h - 1) * stride + k + output_pad, (w - 1) * stride + k + output_pad)

    wmat = weight.data.reshape(cin, -1)
    x_cm = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    cols = (wmat.T @ x_cm).reshape(cout, k, k, n, h, w)
    buf = _col2im(cols, buf_shape, k, stride, h, w)
    out = np.ascontiguousarray(buf[:, :, pad : pad + oh, pad : pad + ow])
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gbuf = np.zeros(buf_shape, dtype=g.dtype)
        gbuf[:, :, pad : pad + oh, pad : pad + ow] = g
        gcols = _im2col(gbuf, k, stride, h, w)  # (Cout*k*k, N*h*w)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wmat @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3))
        gw = (x_cm @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, lambda g: backward(g)[: len(parents)])


# -- normalization ----------------------------------------------------------
class RunningStats:
    """Per-channel running mean/variance used by batch normalization in eval mode."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_stats: Optional[RunningStats] = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over N x H x W for every channel of an N x C x H x W batch.

    In training mode the batch statistics normalize the input and update
    ``running_stats`` in place (unbiased variance, exponential average with
    ``momentum``). In eval mode the running statistics are used instead.
    Inputs of shape N x F are treated as N x F x 1 x 1.
    """
    flat = x.ndim == 2
    data = x.data[:, :, None, None] if flat else x.data
    if data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 2-D or 4-D input, got {x.shape}")
    n, c, h, w = data.shape
    if n == 0:
        raise ValueError("batchnorm2d: empty batch")
    count = n * h * w
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)

    if training:
        if count == 1:
            raise ValueError("batchnorm2d: training mode needs more than one value per channel")
        mu = data.mean(axis=axes)
        centered = data - mu.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        if running_stats is not None:
            running_stats.mean[...] = (1 - momentum) * running_stats.mean + momentum * mu
            running_stats.var[...] = (1 - momentum) * running_stats.var + momentum * var * count / (count - 1)
    else:
        if running_stats is None:
            raise ValueError("batchnorm2d: eval mode requires running statistics")
        mu = running_stats.mean.astype(data.dtype)
        var = running_stats.var.astype(data.dtype)
        centered = data - mu.reshape(bshape)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    if flat:
        out = out[:, :, 0, 0]

    def backward(g):
        g4 = g[:, :, None, None] if flat else g
        ggamma = (g4 * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g4.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g4 * gamma.data.reshape(bshape)
            if training:
                mean_g = gxhat.mean(axis=axes, keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (gxhat - mean_g - xhat * mean_gx) * inv_std.reshape(bshape)
            else:
                gx = gxhat * inv_std.reshape(bshape)
            if flat:
                gx = gx[:, :, 0, 0]
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), backward)


# -- activations ------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_node(out, (x,), backward)


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    """Dispatch by name: relu, leaky_relu, tanh, sigmoid or softmax."""
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- dense / structural -----------------------------------------------------
def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with x: N x F, weight: F x O, bias: O."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: cannot multiply {x.shape} by {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense: bias shape {bias.shape} does not match output width {weight.shape[1]}")
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, lambda g: backward(g)[: len(parents)])


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_node(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


# -- losses -------------------------------------------------------------------
def binary_cross_entropy(prediction: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean of -[t ln p + (1 - t) ln(1 - p)] with p clamped to [eps, 1 - eps].

    Raises:
        ValueError: if any prediction lies outside [0, 1] before clamping.
    """
    p = prediction.data
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ValueError("binary_cross_entropy: predictions must lie in [0, 1]")
    t = np.broadcast_to(np.asarray(target, dtype=p.dtype), p.shape)
    pc = np.clip(p, eps, 1 - eps)
    n = p.size
    loss = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)).sum() / n
    inside = (p >= eps) & (p <= 1 - eps)

    def backward(g):
        return (g * inside * (-(t / pc) + (1 - t) / (1 - pc)) / n,)

    return make_node(np.asarray(loss, dtype=p.dtype), (prediction,), backward)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels or one-hot rows."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects N x K logits, got {z.shape}")
    target = np.asarray(target)
    if target.ndim == 1:
        onehot = np.zeros_like(z)
        onehot[np.arange(len(z)), target.astype(int)] = 1
    else:
        onehot = target.astype(z.dtype)
    if onehot.shape != z.shape:
        raise ShapeError(f"softmax_cross_entropy: target {onehot.shape} does not match logits {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    n = len(z)
    loss = -(onehot * log_probs).sum() / n

    def backward(g):
        probs = np.exp(log_probs)
        return (g * (probs * onehot.sum(axis=1, keepdims=True) - onehot) / n,)

    return make_node(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def loss(kind: str, prediction: Tensor, target) -> Tensor:
    if kind == "binary_cross_entropy":
        return binary_cross_entropy(prediction, target)
    if kind == "softmax_cross_entropy":
        return softmax_cross_entropy(prediction, target)
    raise ValueError(f"unknown loss {kind!r}")
