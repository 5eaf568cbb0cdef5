"""
损失函数与评估指标
Losses and Metrics

Dice + 交叉熵分割损失、深度监督辅助损失、总目标以及二值变化检测指标
Dice plus cross-entropy segmentation loss, deep-supervision auxiliary loss,
the weighted total objective and binary change-detection metrics.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np
import orjson

from .autodiff import Tensor, sigmoid, stable_sigmoid
from .errors import DimensionError, UsageError
from .ops import bce_with_logits
from .similarity import ContrastiveConfig, _check_labels, contrastive_loss, downsample_labels

logger = logging.getLogger(__name__)

# 主任务与辅助任务的平衡系数
DEFAULT_AUX_WEIGHT = 0.3
DICE_SMOOTH = 1.0


@dataclass
class LossConfig:
    """损失配置"""
    w: float = DEFAULT_AUX_WEIGHT
    dice_smooth: float = DICE_SMOOTH
    prediction_threshold: float = 0.5

    def __post_init__(self):
        if self.w < 0:
            raise UsageError('loss weight w must be >= 0', {'w': self.w})
        if self.dice_smooth <= 0:
            raise UsageError('dice_smooth must be > 0', {'dice_smooth': self.dice_smooth})
        if not 0 < self.prediction_threshold < 1:
            raise UsageError('prediction_threshold must lie in (0, 1)', {'threshold': self.prediction_threshold})


def _targets(logits: Tensor, targets) -> np.ndarray:
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if y.shape != logits.shape:
        raise DimensionError('logits and targets differ in shape',
                             {'logits': list(logits.shape), 'targets': list(y.shape)})
    return y.astype(logits.dtype, copy=False)


def dice_loss(logits: Tensor, targets, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s), p = sigmoid(logits), over the whole batch."""
    y = _targets(logits, targets)
    p = sigmoid(logits)
    inter = (p * y).sum()
    return 1.0 - (2.0 * inter + smooth) / (p.sum() + float(y.sum()) + smooth)


def cross_entropy_loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits."""
    y = _targets(logits, targets)
    return bce_with_logits(logits, y).mean()


def aux_loss(aux_logits: Tensor, y, factor: int, smooth: float = DICE_SMOOTH) -> Tensor:
    """Dice + CE of one decoder-stage head against labels downsampled by ``factor``."""
    coarse = downsample_labels(y, factor)
    if coarse.shape != aux_logits.shape:
        raise DimensionError('auxiliary head resolution does not match downsampled labels',
                             {'logits': list(aux_logits.shape), 'labels': list(coarse.shape), 'factor': factor})
    return dice_loss(aux_logits, coarse, smooth) + cross_entropy_loss(aux_logits, coarse)


@dataclass
class LossBreakdown:
    """总损失及各项分量 (l_aux 为各阶段之和)"""
    total: Tensor
    l_seg: float
    l_con: float
    l_aux: float

    def as_row(self) -> dict:
        return {'loss': self.total.item(), 'l_seg': self.l_seg, 'l_con': self.l_con, 'l_aux': self.l_aux}


def total_loss(final_logits: Tensor, aux_logits: Sequence[Tensor], deepest: Sequence[Tensor], y,
               flags, cfg: LossConfig = None, contrastive: ContrastiveConfig = None) -> LossBreakdown:
    """
    L = L_seg + w*L_con + w*sum_i L_aux_i.

    The contrastive term is dropped unless ``flags.sim_loss``; the auxiliary
    terms are dropped unless ``flags.deep_supervision``.

    Args:
        final_logits: N,1,H,W output logits.
        aux_logits: Per-stage head logits, deepest stage first.
        deepest: (f_t1, f_t2) deepest encoder features.
        y: N,1,H,W binary change mask.
        flags: AblationFlags.
    """
    cfg = cfg or LossConfig()
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    _check_labels(y)
    size = final_logits.shape[2]

    l_seg = dice_loss(final_logits, y, cfg.dice_smooth) + cross_entropy_loss(final_logits, y)
    total = l_seg
    l_con_value = l_aux_value = 0.0

    if flags.sim_loss:
        f1, f2 = deepest
        l_con = contrastive_loss(f1, f2, downsample_labels(y, size // f1.shape[2]), contrastive)
        l_con_value = l_con.item()
        total = total + cfg.w * l_con

    if flags.deep_supervision and aux_logits:
        l_aux = None
        for logits in aux_logits:
            term = aux_loss(logits, y, size // logits.shape[2], cfg.dice_smooth)
            l_aux = term if l_aux is None else l_aux + term
        l_aux_value = l_aux.item()
        total = total + cfg.w * l_aux

    return LossBreakdown(total, l_seg.item(), l_con_value, l_aux_value)


# ==================== 评估指标 ====================

def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else 0.0


@dataclass(frozen=True)
class MetricsReport:
    """混淆矩阵计数及派生指标"""
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    iou: float
    accuracy: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> 'MetricsReport':
        tp, fp, fn, tn = int(tp), int(fp), int(fn), int(tn)
        total = tp + fp + fn + tn
        accuracy = _ratio(tp + tn, total)
        if tp == fp == fn == 0:
            # 无变化且全部预测正确
            return cls(tp, fp, fn, tn, 1.0, 1.0, 1.0, 1.0, accuracy if total else 1.0)
        return cls(tp, fp, fn, tn,
                   precision=_ratio(tp, tp + fp),
                   recall=_ratio(tp, tp + fn),
                   f1=_ratio(2 * tp, 2 * tp + fp + fn),
                   iou=_ratio(tp, tp + fp + fn),
                   accuracy=accuracy)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def merge(self, other: 'MetricsReport') -> 'MetricsReport':
        return MetricsReport.from_counts(self.tp + other.tp, self.fp + other.fp,
                                         self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def aggregate(cls, reports: Iterable['MetricsReport']) -> 'MetricsReport':
        merged = cls.from_counts(0, 0, 0, 0)
        for report in reports:
            merged = merged.merge(report)
        return merged

    def to_dict(self) -> dict:
        return {'tp': self.tp, 'fp': self.fp, 'fn': self.fn, 'tn': self.tn,
                'precision': self.precision, 'recall': self.recall, 'f1': self.f1, 'iou': self.iou,
                'accuracy': self.accuracy}

    def to_json(self) -> str:
        return orjson.dumps(self.to_dict()).decode()


def confusion_counts(pred: np.ndarray, y: np.ndarray) -> tuple:
    pred = np.asarray(pred, dtype=bool)
    y = np.asarray(y, dtype=bool)
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    fn = int(np.count_nonzero(~pred & y))
    tn = int(pred.size - tp - fp - fn)
    return tp, fp, fn, tn


def compute_metrics(pred_logits, y, threshold: float = 0.5) -> MetricsReport:
    """
    Binarize sigmoid(logits) at ``threshold`` and score against the mask.

    Mask values above 0.5 count as changed, so soft or resampled masks are scored without error.
    """
    logits = pred_logits.data if isinstance(pred_logits, Tensor) else np.asarray(pred_logits)
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if logits.shape != y.shape:
        raise DimensionError('prediction and mask differ in shape', {'pred': list(logits.shape), 'mask': list(y.shape)})
    probs = stable_sigmoid(np.asarray(logits, dtype=np.float64))
    return MetricsReport.from_counts(*confusion_counts(probs > threshold, y > 0.5))


def evaluate_binary_masks(predictions: List[np.ndarray], masks: List[np.ndarray],
                          threshold: float = 0.5) -> MetricsReport:
    """Score already-binarized prediction maps (values in [0,1]) against ground truth."""
    if len(predictions) != len(masks):
        raise DimensionError('prediction and mask counts differ', {'predictions': len(predictions), 'masks': len(masks)})
    report = MetricsReport.from_counts(0, 0, 0, 0)
    for pred, mask in zip(predictions, masks):
        pred, mask = np.asarray(pred), np.asarray(mask)
        if pred.shape != mask.shape:
            raise DimensionError('prediction and mask differ in shape', {'pred': list(pred.shape), 'mask': list(mask.shape)})
        report = report.merge(MetricsReport.from_counts(*confusion_counts(pred > threshold, mask > 0.5)))
    return report


def summarize_reports(reports: Sequence[MetricsReport], key: str = 'f1') -> Optional[float]:
    """Mean of one metric over per-tile reports (None for an empty list)."""
    if not reports:
        return None
    return float(np.mean([getattr(r, key) for r in reports]))
