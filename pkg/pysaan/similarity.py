"""
相似度计算
Similarity Mathematics

余弦相似度/距离图、边界对比损失以及标签下采样
Cosine similarity and distance maps, the margin contrastive loss on the
deepest encoder features, and label downsampling.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, clip, relu, sqrt
from .errors import DimensionError, LabelError, UsageError
from .ops import channel_l2_normalize

logger = logging.getLogger(__name__)

# 默认边界: 变化像素的夹角超过 60 度后不再优化
DEFAULT_MARGIN = 1.0
SQRT_EPS = 1e-12
NORM_EPS = 1e-6


@dataclass
class ContrastiveConfig:
    """对比损失配置"""
    margin: float = DEFAULT_MARGIN
    sqrt_eps: float = SQRT_EPS
    reduction: str = 'mean'
    norm_eps: float = NORM_EPS

    def __post_init__(self):
        if not 0 < self.margin <= math.sqrt(2.0):
            raise UsageError('margin must lie in (0, sqrt(2)]', {'margin': self.margin})
        if self.sqrt_eps <= 0 or self.norm_eps <= 0:
            raise UsageError('sqrt_eps and norm_eps must be positive')
        if self.reduction not in ('mean', 'sum'):
            raise UsageError(f'unknown reduction {self.reduction!r}')


def _check_pair(f1: Tensor, f2: Tensor) -> None:
    if f1.shape != f2.shape or f1.ndim != 4 or f1.shape[1] < 1:
        raise DimensionError('bi-temporal features must share an N,C,H,W shape',
                             {'f1': list(f1.shape), 'f2': list(f2.shape)})


def cosine_similarity_map(f1: Tensor, f2: Tensor, eps: float = NORM_EPS) -> Tensor:
    """
    Per-pixel cosine similarity of channel-normalized features, N,1,H,W.

    Zero-vector pixels yield 0. Values are clipped into [-1, 1].
    """
    _check_pair(f1, f2)
    prod = channel_l2_normalize(f1, eps) * channel_l2_normalize(f2, eps)
    return clip(prod.sum(axis=1, keepdims=True), -1.0, 1.0)


def cosine_distance_map(f1: Tensor, f2: Tensor, cfg: ContrastiveConfig = None) -> Tensor:
    """d = sqrt(2 - 2*cos + sqrt_eps); monotone decreasing in the similarity."""
    cfg = cfg or ContrastiveConfig()
    sim = cosine_similarity_map(f1, f2, cfg.norm_eps)
    return sqrt(2.0 - 2.0 * sim + cfg.sqrt_eps)


def _check_labels(labels: np.ndarray) -> None:
    if not np.all((labels == 0) | (labels == 1)):
        bad = np.unique(labels[(labels != 0) & (labels != 1)])[:5]
        raise LabelError('labels must be 0 or 1', {'examples': bad.tolist()})


def contrastive_loss(f1: Tensor, f2: Tensor, labels, cfg: ContrastiveConfig = None) -> Tensor:
    """
    Margin contrastive loss on the deepest bi-temporal features.

    Unchanged pixels (y=0) pay 0.5*d^2, changed pixels (y=1) pay
    0.5*max(m-d, 0)^2; changed pixels with d >= m contribute neither loss
    nor gradient.

    Args:
        f1, f2: Deepest-stage features, N,C,h,w.
        labels: Change mask N,1,h,w already at feature resolution.
        cfg: Margin, eps guards and reduction.
    """
    cfg = cfg or ContrastiveConfig()
    _check_pair(f1, f2)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    n, _, h, w = f1.shape
    if y.shape != (n, 1, h, w):
        raise DimensionError('labels must match the feature map spatially',
                             {'labels': list(y.shape), 'features': list(f1.shape)})
    _check_labels(y)
    y = y.astype(f1.dtype)

    sim = cosine_similarity_map(f1, f2, cfg.norm_eps)
    d_sq = 2.0 - 2.0 * sim + cfg.sqrt_eps
    d = sqrt(d_sq)
    hinge = relu(cfg.margin - d)
    per_pixel = 0.5 * (1.0 - y) * d_sq + 0.5 * y * hinge * hinge
    if cfg.reduction == 'sum':
        return per_pixel.sum()
    return per_pixel.mean()


def downsample_labels(y, factor: int) -> np.ndarray:
    """
    Block-average a binary mask by ``factor`` and threshold at 0.5 (ties count as changed).

    Returns a float array N,1,H/f,W/f in {0,1}.
    """
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if factor < 1 or factor & (factor - 1):
        raise DimensionError('downsample factor must be a power of two', {'factor': factor})
    if y.ndim != 4:
        raise DimensionError('labels must be N,1,H,W', {'shape': list(y.shape)})
    n, c, h, w = y.shape
    if h % factor or w % factor:
        raise DimensionError('label size not divisible by factor', {'shape': list(y.shape), 'factor': factor})
    if factor == 1:
        return y.astype(np.float32, copy=True)
    blocks = y.reshape(n, c, h // factor, factor, w // factor, factor)
    changed = blocks.sum(axis=(3, 5))
    return (2 * changed >= factor * factor).astype(np.float32)
