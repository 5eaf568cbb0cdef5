"""
PySAAN - 相似度感知注意力变化检测
Similarity-Aware Attention Change Detection

纯 numpy 自动微分、孪生编码器-解码器网络、合成数据与训练工具
A numpy-only autodiff engine, the Siamese encoder-decoder with
similarity-guided attention, synthetic bi-temporal data and training tools.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, default_dtype, no_grad
from .errors import (
    CheckpointError,
    DimensionError,
    FormatError,
    GradientError,
    LabelError,
    NumericalError,
    SaanError,
    UsageError,
)
from .losses import LossConfig, MetricsReport, compute_metrics, total_loss
from .model import AblationFlags, DecoderConfig, EncoderConfig, SaanModel, param_count
from .similarity import ContrastiveConfig, contrastive_loss, cosine_distance_map, cosine_similarity_map

__all__ = [
    '__version__',
    'Tape',
    'Tensor',
    'backward',
    'default_dtype',
    'no_grad',
    'SaanError',
    'UsageError',
    'DimensionError',
    'LabelError',
    'FormatError',
    'CheckpointError',
    'GradientError',
    'NumericalError',
    'LossConfig',
    'MetricsReport',
    'compute_metrics',
    'total_loss',
    'AblationFlags',
    'DecoderConfig',
    'EncoderConfig',
    'SaanModel',
    'param_count',
    'ContrastiveConfig',
    'contrastive_loss',
    'cosine_distance_map',
    'cosine_similarity_map',
]
