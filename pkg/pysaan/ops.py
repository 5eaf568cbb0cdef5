"""
神经网络原语
Neural Network Primitives

卷积、线性层、池化、归一化、上采样、拼接以及批归一化
Convolution, linear maps, pooling, channel normalization, bilinear
upsampling, concat/split and batch normalization, each with its backward.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, add_flops, apply_op, relu, sigmoid, stable_sigmoid
from .errors import DimensionError, UsageError

logger = logging.getLogger(__name__)

# 批归一化默认值
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f'{op} expects an N,C,H,W tensor', {'shape': list(x.shape)})


def _strided(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation via im2col.

    Args:
        x: Input of shape N,Cin,H,W.
        weight: Kernel of shape Cout,Cin,kH,kW.
        bias: Optional Cout vector.
        stride: Positive step.
        padding: Zero padding on every border.
    """
    _require_4d(x, 'conv2d')
    _require_4d(weight, 'conv2d')
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise DimensionError('conv2d input channels do not match the kernel',
                             {'input': list(x.shape), 'weight': list(weight.shape)})
    if stride < 1 or padding < 0:
        raise DimensionError('conv2d needs stride >= 1 and padding >= 0',
                             {'stride': stride, 'padding': padding})
    if bias is not None and bias.shape != (cout,):
        raise DimensionError('conv2d bias must have Cout entries',
                             {'bias': list(bias.shape), 'cout': cout})
    hp, wp = h + 2 * padding, w + 2 * padding
    if h < 1 or w < 1 or hp < kh or wp < kw:
        raise DimensionError('conv2d output would be empty',
                             {'input': list(x.shape), 'kernel': [kh, kw], 'padding': padding})
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    add_flops('conv2d', n * ho * wo * cout * cin * kh * kw)

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, _strided(i, ho, stride), _strided(j, wo, stride)] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op('conv2d', inputs, out, _backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ W^T + b for x of shape N,Din and W of shape Dout,Din."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError('linear shape mismatch', {'x': list(x.shape), 'weight': list(weight.shape)})
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError('linear bias must have Dout entries', {'bias': list(bias.shape)})
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    add_flops('linear', x.shape[0] * weight.shape[0] * weight.shape[1])

    def _backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op('linear', inputs, out, _backward)


def pool2d(x: Tensor, mode: str = 'max', k: int = 2, stride: Optional[int] = None) -> Tensor:
    """Windowed max/avg pooling; max routes its gradient to the first argmax in row-major order."""
    _require_4d(x, 'pool2d')
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k < 1 or stride < 1 or k > h or k > w:
        raise DimensionError('pool2d window larger than input', {'shape': list(x.shape), 'k': k})
    if mode not in ('max', 'avg'):
        raise UsageError(f'unknown pool mode {mode!r}')
    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, ho, wo, k * k)
    if mode == 'max':
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    else:
        idx = None
        out = flat.mean(axis=-1)

    def _backward(g):
        gx = np.zeros_like(x.data)
        for t in range(k * k):
            i, j = divmod(t, k)
            contrib = g * (idx == t) if mode == 'max' else g / (k * k)
            gx[:, :, _strided(i, ho, stride), _strided(j, wo, stride)] += contrib
        return (gx,)

    return apply_op(f'{mode}_pool2d', (x,), out, _backward)


def global_pool(x: Tensor, mode: str = 'avg') -> Tensor:
    """Reduce every channel over all spatial positions to N,C,1,1."""
    _require_4d(x, 'global_pool')
    n, c, h, w = x.shape
    if mode == 'avg':
        out = x.data.mean(axis=(2, 3), keepdims=True)
        return apply_op('global_avg_pool', (x,), out,
                        lambda g: (np.broadcast_to(g / (h * w), x.shape),))
    if mode != 'max':
        raise UsageError(f'unknown pool mode {mode!r}')
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, c, 1, 1)

    def _backward(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=-1)
        return (gx.reshape(x.shape),)

    return apply_op('global_max_pool', (x,), out, _backward)


def channel_mean(x: Tensor) -> Tensor:
    """Per-pixel mean across channels, N,1,H,W."""
    _require_4d(x, 'channel_mean')
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)
    return apply_op('channel_mean', (x,), out, lambda g: (np.broadcast_to(g / c, x.shape),))


def channel_max(x: Tensor) -> Tensor:
    """Per-pixel max across channels, N,1,H,W; gradient to the first argmax."""
    _require_4d(x, 'channel_max')
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def _backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return apply_op('channel_max', (x,), out, _backward)


def channel_l2_normalize(f: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide every pixel's channel vector by max(||v||_2, eps)."""
    _require_4d(f, 'channel_l2_normalize')
    norm = np.sqrt(np.sum(f.data * f.data, axis=1, keepdims=True))
    denom = np.maximum(norm, np.asarray(eps, dtype=f.dtype))
    out = f.data / denom

    def _backward(g):
        proj = np.sum(g * out, axis=1, keepdims=True)
        return (np.where(norm >= eps, (g - out * proj) / denom, g / denom),)

    return apply_op('channel_l2_normalize', (f,), out, _backward)


def _upsample_matrix(size: int, dtype) -> np.ndarray:
    # align_corners=False 的双线性插值权重
    rows = np.arange(2 * size)
    src = np.maximum((rows + 0.5) / 2.0 - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    lam = src - i0
    m = np.zeros((2 * size, size), dtype=np.float64)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def upsample2x_bilinear(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling with align_corners=False."""
    _require_4d(x, 'upsample2x_bilinear')
    _, _, h, w = x.shape
    mh = _upsample_matrix(h, x.dtype)
    mw = _upsample_matrix(w, x.dtype)
    out = mh @ (x.data @ mw.T)
    return apply_op('upsample2x_bilinear', (x,), out, lambda g: (mh.T @ (g @ mw),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == 'relu':
        return relu(x)
    if kind == 'sigmoid':
        return sigmoid(x)
    raise UsageError(f'unknown activation {kind!r}')


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; the gradient is split back in order."""
    tensors = list(tensors)
    if not tensors:
        raise DimensionError('concat needs at least one tensor')
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis):
            raise DimensionError('concat shapes differ off the concat axis',
                                 {'shapes': [list(t.shape) for t in tensors], 'axis': axis})
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return apply_op('concat', tuple(tensors), out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> List[Tensor]:
    """Inverse of concat: cut ``x`` into consecutive pieces along ``axis``."""
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise DimensionError('split sizes do not add up', {'sizes': list(sizes), 'dim': x.shape[axis]})
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def _backward(g, index=index):
            gx = np.zeros_like(x.data)
            gx[index] = g
            return (gx,)

        pieces.append(apply_op('split', (x,), x.data[index].copy(), _backward))
        start += size
    return pieces


@dataclass
class BatchNormState:
    """Running statistics of one batchnorm layer."""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> 'BatchNormState':
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """
    Batch normalization over N,H,W per channel.

    Training mode normalizes with batch statistics and folds them into
    ``state`` by momentum; eval mode uses the running statistics.
    """
    _require_4d(x, 'batchnorm2d')
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError('batchnorm2d affine parameters must have C entries',
                             {'x': list(x.shape), 'gamma': list(gamma.shape)})
    axes = (0, 2, 3)
    count = n * h * w
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        state.running_mean = ((1 - state.momentum) * state.running_mean + state.momentum * mean).astype(x.dtype)
        state.running_var = ((1 - state.momentum) * state.running_var + state.momentum * unbiased).astype(x.dtype)
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    invstd = (1.0 / np.sqrt(var + np.asarray(state.eps, dtype=x.dtype)))[None, :, None, None]
    xhat = (x.data - mean[None, :, None, None]) * invstd
    g4 = gamma.data[None, :, None, None]
    out = g4 * xhat + beta.data[None, :, None, None]

    def _backward(g):
        dgamma = np.sum(g * xhat, axis=axes)
        dbeta = np.sum(g, axis=axes)
        dxhat = g * g4
        if training:
            dx = invstd / count * (count * dxhat
                                   - np.sum(dxhat, axis=axes, keepdims=True)
                                   - xhat * np.sum(dxhat * xhat, axis=axes, keepdims=True))
        else:
            dx = dxhat * invstd
        return dx, dgamma, dbeta

    return apply_op('batchnorm2d', (x, gamma, beta), out, _backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy in the log-sum-exp stable form."""
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError('bce_with_logits shape mismatch', {'logits': list(logits.shape), 'targets': list(y.shape)})
    x = logits.data
    out = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return apply_op('bce_with_logits', (logits,), out, lambda g: (g * (stable_sigmoid(x) - y),))
