"""
SAAN 网络
SAAN Network

权重共享的孪生编码器、相似度引导的通道/空间注意力、注意力流、深度监督头
Weight-sharing Siamese encoder, similarity-guided channel and spatial
attention with attention flow, decoder fusion, deep-supervision heads and
the output head. Also parameter/FLOP accounting and attention-map export.
"""

import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from .autodiff import Tensor, count_flops, no_grad, relu, sigmoid, stable_sigmoid
from .errors import DimensionError, UsageError
from .layers import BasicBlock, Conv2d, ConvBNAct, Linear, Module
from .netpbm import write_image
from .ops import channel_max, channel_mean, concat, global_pool, pool2d, upsample2x_bilinear
from .similarity import NORM_EPS, cosine_similarity_map

logger = logging.getLogger(__name__)

ATTENTION_KERNEL = 7
FLOW_NEUTRAL = 0.5


@dataclass
class EncoderConfig:
    """编码器配置 (默认是桌面规模的 mini 变体)"""
    stage_channels: Tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    input_channels: int = 3
    variant: str = 'mini'

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) < 2:
            raise UsageError('encoder needs at least two stages', {'stage_channels': self.stage_channels})
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise UsageError('stage channels must be strictly increasing', {'stage_channels': self.stage_channels})
        if self.blocks_per_stage < 1 or self.input_channels < 1:
            raise UsageError('blocks_per_stage and input_channels must be positive')
        if self.variant not in ('mini', 'resnet18'):
            raise UsageError(f'unknown encoder variant {self.variant!r}')

    @classmethod
    def resnet18(cls, input_channels: int = 3) -> 'EncoderConfig':
        return cls(stage_channels=(64, 128, 256, 512), blocks_per_stage=2,
                   input_channels=input_channels, variant='resnet18')

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def stem_factor(self) -> int:
        return 4 if self.variant == 'resnet18' else 2

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.num_stages + 1)

    def stage_sizes(self, size: int) -> List[int]:
        return [size // (self.stem_factor * 2 ** i) for i in range(self.num_stages)]


@dataclass
class AblationFlags:
    """消融开关"""
    sim_loss: bool = True
    deep_supervision: bool = True
    sca: bool = True
    ssa: bool = True
    flow: bool = True

    def __post_init__(self):
        if self.flow and not (self.sca or self.ssa):
            raise UsageError('attention flow needs sca or ssa enabled', asdict(self))

    @classmethod
    def preset(cls, name: str) -> 'AblationFlags':
        key = name.lower()
        if key not in ABLATION_PRESETS:
            raise UsageError(f'unknown ablation preset {name!r}', {'known': list(ABLATION_PRESETS)})
        return cls(**ABLATION_PRESETS[key])


def _flags(sim=False, ds=False, sca=False, ssa=False, flow=False) -> dict:
    return dict(sim_loss=sim, deep_supervision=ds, sca=sca, ssa=ssa, flow=flow)


# 优化策略与注意力消融的行结构
ABLATION_PRESETS: Dict[str, dict] = {
    'opt-a': _flags(),
    'opt-b': _flags(sim=True),
    'opt-c': _flags(ds=True),
    'opt-d': _flags(sim=True, ds=True),
    'opt-d+sca': _flags(sim=True, ds=True, sca=True),
    'opt-d+sca+flow': _flags(sim=True, ds=True, sca=True, flow=True),
    'opt-d+ssa': _flags(sim=True, ds=True, ssa=True),
    'opt-d+ssa+flow': _flags(sim=True, ds=True, ssa=True, flow=True),
    'opt-d+sca+ssa': _flags(sim=True, ds=True, sca=True, ssa=True),
    'full': _flags(sim=True, ds=True, sca=True, ssa=True, flow=True),
}


@dataclass
class DecoderConfig:
    """解码器细节: 注意力 MLP 宽度与注意力流初值"""
    mlp_ratio: int = 4
    mlp_floor: int = 8
    flow_init: str = 'constant'
    channel_attention_input: str = 'weighted'
    norm_eps: float = NORM_EPS

    def __post_init__(self):
        if self.flow_init not in ('constant', 'omit'):
            raise UsageError(f'unknown flow_init {self.flow_init!r}')
        if self.channel_attention_input not in ('weighted', 'raw'):
            raise UsageError(f'unknown channel_attention_input {self.channel_attention_input!r}')
        if self.mlp_ratio < 1 or self.mlp_floor < 1:
            raise UsageError('mlp_ratio and mlp_floor must be positive')

    def hidden_width(self, channels: int) -> int:
        return max(channels // self.mlp_ratio, self.mlp_floor)


@dataclass
class FeaturePyramid:
    """Per-stage encoder features of one time point, deepest last."""
    stages: List[Tensor]

    @property
    def deepest(self) -> Tensor:
        return self.stages[-1]

    def shapes(self) -> List[Tuple[int, ...]]:
        return [f.shape for f in self.stages]


@dataclass
class StageAttention:
    """一个解码阶段的注意力图"""
    sim: Tensor
    dsa: Optional[Tensor] = None
    a_c: Optional[Tensor] = None
    a_s: Optional[Tensor] = None


@dataclass
class AttentionState:
    """Attention maps of every decoder stage, deepest stage first."""
    stages: List[StageAttention] = field(default_factory=list)


class ScaOutput(NamedTuple):
    attended: Tensor
    sim: Tensor
    dsa: Optional[Tensor]
    a_c: Optional[Tensor]


class StageOutput(NamedTuple):
    features: Tensor
    aux_logits: Optional[Tensor]
    attention: StageAttention


@dataclass
class ForwardOutput:
    final_logits: Tensor
    aux_logits: List[Tensor]
    deepest: Tuple[Tensor, Tensor]
    attention: AttentionState


# ==================== 编码器 ====================

class EncoderStage(Module):
    def __init__(self, cin: int, cout: int, blocks: int, stride: int, rng, dtype):
        super().__init__()
        self.blocks = [BasicBlock(cin, cout, rng, stride=stride, dtype=dtype)]
        self.blocks += [BasicBlock(cout, cout, rng, dtype=dtype) for _ in range(blocks - 1)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class SiameseEncoder(Module):
    """ResNet-style encoder shared by both time points."""

    def __init__(self, cfg: EncoderConfig, rng, dtype):
        super().__init__()
        c0 = cfg.stage_channels[0]
        if cfg.variant == 'resnet18':
            self.stem = ConvBNAct(cfg.input_channels, c0, 7, rng, stride=2, dtype=dtype)
        else:
            self.stem = ConvBNAct(cfg.input_channels, c0, 3, rng, dtype=dtype)
        cins = (c0,) + cfg.stage_channels[:-1]
        self.stages = [EncoderStage(cin, cout, cfg.blocks_per_stage, 1 if i == 0 else 2, rng, dtype)
                       for i, (cin, cout) in enumerate(zip(cins, cfg.stage_channels))]

    def forward(self, x: Tensor) -> FeaturePyramid:
        x = pool2d(self.stem(x), 'max', 2)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(feats)


# ==================== 注意力模块 ====================

class SharedMLP(Module):
    """One-hidden-layer MLP applied to both pooled vectors."""

    def __init__(self, channels: int, hidden: int, rng, dtype):
        super().__init__()
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class SimilarityChannelAttention(Module):
    """SCA parameters: 7x7 DSA conv plus the shared MLP."""

    def __init__(self, channels: int, guide_channels: int, hidden: int, rng, dtype):
        super().__init__()
        self.dsa_conv = Conv2d(guide_channels, 1, ATTENTION_KERNEL, rng, dtype=dtype)
        self.mlp = SharedMLP(channels, hidden, rng, dtype)


class SimilaritySpatialAttention(Module):
    """SSA parameters: one 7x7 conv to a single channel."""

    def __init__(self, in_channels: int, rng, dtype):
        super().__init__()
        self.conv = Conv2d(in_channels, 1, ATTENTION_KERNEL, rng, dtype=dtype)


def sca_block(f1: Tensor, f2: Tensor, f_prev: Optional[Tensor], dsa_prev: Optional[Tensor],
              params: Optional[SimilarityChannelAttention], flow: bool = True,
              channel_input: str = 'weighted', norm_eps: float = NORM_EPS) -> ScaOutput:
    """
    Similarity-guided channel attention.

    DSA_i = sigmoid(conv7x7([Sim_i, DSA_{i-1}])) weights [f_t1, f_t2, f_prev];
    A_c = sigmoid(MLP(avgpool) + MLP(maxpool)) of the weighted concatenation.
    With ``params`` None (SCA disabled) the plain concatenation is returned.
    """
    if f1.shape != f2.shape:
        raise DimensionError('sca_block needs equal bi-temporal shapes', {'f1': list(f1.shape), 'f2': list(f2.shape)})
    sim = cosine_similarity_map(f1, f2, norm_eps)
    raw = concat([f1, f2] if f_prev is None else [f1, f2, f_prev], axis=1)
    if params is None:
        return ScaOutput(raw, sim, None, None)

    guide = [sim] if (not flow or dsa_prev is None) else [sim, dsa_prev]
    dsa = sigmoid(params.dsa_conv(concat(guide, axis=1)))
    weighted = raw * dsa
    n, ccat = weighted.shape[:2]
    avg = global_pool(weighted, 'avg').reshape(n, ccat)
    mx = global_pool(weighted, 'max').reshape(n, ccat)
    a_c = sigmoid(params.mlp(avg) + params.mlp(mx)).reshape(n, ccat, 1, 1)
    base = weighted if channel_input == 'weighted' else raw
    return ScaOutput(base * a_c, sim, dsa, a_c)


def ssa_block(f_fused: Tensor, a_s_prev: Optional[Tensor], guidance: Tensor,
              params: SimilaritySpatialAttention, flow: bool = True) -> Tuple[Tensor, Tensor]:
    """
    Similarity-guided spatial attention.

    A_s = sigmoid(conv7x7([mean_c(f), max_c(f), A_s_prev, DSA_i])); returns (f * A_s, A_s).
    Without flow the A_s_prev channel is left out.
    """
    parts = [channel_mean(f_fused), channel_max(f_fused)]
    if flow and a_s_prev is not None:
        parts.append(a_s_prev)
    parts.append(guidance)
    a_s = sigmoid(params.conv(concat(parts, axis=1)))
    return f_fused * a_s, a_s


class DecoderStage(Module):
    """SCA -> double conv -> SSA -> optional 1x1 aux head."""

    def __init__(self, ccat: int, width: int, sca: Optional[SimilarityChannelAttention],
                 ssa: Optional[SimilaritySpatialAttention], aux_head: bool, rng, dtype):
        super().__init__()
        self.sca = sca
        self.fuse1 = ConvBNAct(ccat, width, 3, rng, dtype=dtype)
        self.fuse2 = ConvBNAct(width, width, 3, rng, dtype=dtype)
        self.ssa = ssa
        self.aux_head = Conv2d(width, 1, 1, rng, dtype=dtype) if aux_head else None


# ==================== SAAN ====================

class SaanModel(Module):
    """
    Siamese encoder + similarity-guided decoder.

    Decoder stages are indexed from the deepest (0) to the finest; stage i
    works at the resolution of encoder level ``num_stages - 1 - i``.
    """

    def __init__(self, encoder_cfg: EncoderConfig = None, flags: AblationFlags = None,
                 decoder_cfg: DecoderConfig = None, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.flags = flags or AblationFlags()
        self.decoder_cfg = decoder_cfg or DecoderConfig()
        self.dtype = np.dtype(dtype)
        self.seed = seed
        rng = np.random.default_rng(seed)

        self.encoder = SiameseEncoder(self.encoder_cfg, rng, self.dtype)
        chans = self.encoder_cfg.stage_channels
        levels = len(chans)
        self.decoder = []
        for i in range(levels):
            level = levels - 1 - i
            width = chans[level]
            ccat = 2 * width + (chans[level + 1] if i > 0 else 0)
            has_flow_input = self.flags.flow and (i > 0 or self.decoder_cfg.flow_init == 'constant')
            sca = None
            if self.flags.sca:
                sca = SimilarityChannelAttention(ccat, 2 if has_flow_input else 1,
                                                 self.decoder_cfg.hidden_width(ccat), rng, self.dtype)
            ssa = None
            if self.flags.ssa:
                ssa = SimilaritySpatialAttention(4 if has_flow_input else 3, rng, self.dtype)
            self.decoder.append(DecoderStage(ccat, width, sca, ssa, self.flags.deep_supervision, rng, self.dtype))
        self.head = Conv2d(chans[0], 1, 1, rng, dtype=self.dtype)
        logger.debug(f"SaanModel built: {param_count(self)['total']} parameters, flags={asdict(self.flags)}")

    @property
    def num_stages(self) -> int:
        return self.encoder_cfg.num_stages

    def _check_input(self, t1: Tensor, t2: Tensor) -> None:
        if t1.shape != t2.shape or t1.ndim != 4:
            raise DimensionError('bi-temporal images must share an N,C,H,W shape',
                                 {'t1': list(t1.shape), 't2': list(t2.shape)})
        _, c, h, w = t1.shape
        if c != self.encoder_cfg.input_channels:
            raise DimensionError('image channels do not match the encoder config',
                                 {'channels': c, 'expected': self.encoder_cfg.input_channels})
        multiple = self.encoder_cfg.size_multiple
        if h % multiple or w % multiple:
            raise DimensionError(f'input size must be divisible by {multiple}', {'height': h, 'width': w})

    def encode(self, t1: Tensor, t2: Tensor) -> Tuple[FeaturePyramid, FeaturePyramid]:
        """Run the shared encoder on each time point separately."""
        if t1.shape != t2.shape:
            raise DimensionError('bi-temporal images must share a shape', {'t1': list(t1.shape), 't2': list(t2.shape)})
        if t1.ndim != 4 or t1.shape[1] != self.encoder_cfg.input_channels:
            raise DimensionError('image channels do not match the encoder config', {'shape': list(t1.shape)})
        return self.encoder(t1), self.encoder(t2)

    def _initial_flow(self, like: Tensor) -> Optional[Tensor]:
        if not self.flags.flow or self.decoder_cfg.flow_init == 'omit':
            return None
        n, _, h, w = like.shape
        return Tensor(np.full((n, 1, h, w), FLOW_NEUTRAL, dtype=self.dtype))

    def decode_stage(self, i: int, pyr1: FeaturePyramid, pyr2: FeaturePyramid, f_prev: Optional[Tensor],
                     dsa_prev: Optional[Tensor], as_prev: Optional[Tensor]) -> StageOutput:
        """
        One decoder stage. ``f_prev``, ``dsa_prev`` and ``as_prev`` must already be
        at this stage's resolution; stage 0 has no ``f_prev``.
        """
        level = self.num_stages - 1 - i
        f1, f2 = pyr1.stages[level], pyr2.stages[level]
        if f_prev is not None and f_prev.shape[2:] != f1.shape[2:]:
            raise DimensionError('previous decoder output not at stage resolution',
                                 {'f_prev': list(f_prev.shape), 'stage': list(f1.shape)})
        stage = self.decoder[i]
        flow = self.flags.flow
        sca = sca_block(f1, f2, f_prev, dsa_prev, stage.sca, flow=flow,
                        channel_input=self.decoder_cfg.channel_attention_input,
                        norm_eps=self.decoder_cfg.norm_eps)
        fused = stage.fuse2(stage.fuse1(sca.attended))
        a_s = None
        if stage.ssa is not None:
            guidance = sca.dsa if sca.dsa is not None else sca.sim
            fused, a_s = ssa_block(fused, as_prev, guidance, stage.ssa, flow=flow)
        aux = stage.aux_head(fused) if stage.aux_head is not None else None
        return StageOutput(fused, aux, StageAttention(sca.sim, sca.dsa, sca.a_c, a_s))

    def forward(self, t1: Tensor, t2: Tensor) -> ForwardOutput:
        self._check_input(t1, t2)
        pyr1, pyr2 = self.encode(t1, t2)
        deepest = pyr1.deepest
        f_prev = None
        dsa_prev = as_prev = self._initial_flow(deepest)
        aux, attention = [], AttentionState()
        out = None
        for i in range(self.num_stages):
            if out is not None:
                f_prev = upsample2x_bilinear(out.features)
                prev = out.attention
                dsa_prev = upsample2x_bilinear(prev.dsa) if self.flags.flow and prev.dsa is not None else None
                as_prev = upsample2x_bilinear(prev.a_s) if self.flags.flow and prev.a_s is not None else None
            out = self.decode_stage(i, pyr1, pyr2, f_prev, dsa_prev, as_prev)
            attention.stages.append(out.attention)
            if out.aux_logits is not None:
                aux.append(out.aux_logits)
        x = out.features
        while x.shape[2] < t1.shape[2]:
            x = upsample2x_bilinear(x)
        return ForwardOutput(self.head(x), aux, (pyr1.deepest, pyr2.deepest), attention)


# ==================== 统计与导出 ====================

def _component(name: str) -> str:
    if name.startswith('encoder.'):
        return 'encoder'
    if name.startswith('head.'):
        return 'head'
    part = name.split('.')[2]
    return {'sca': 'sca', 'ssa': 'ssa', 'aux_head': 'aux_heads'}.get(part, 'fusion')


def param_count(model: SaanModel) -> Dict[str, int]:
    """Exact parameter totals per component (batchnorm running stats excluded)."""
    totals = {'encoder': 0, 'sca': 0, 'fusion': 0, 'ssa': 0, 'aux_heads': 0, 'head': 0}
    for name, p in model.named_parameters():
        totals[_component(name)] += p.size
    totals['total'] = sum(totals.values())
    return totals


@dataclass
class CostReport:
    """参数量、计算量与耗时"""
    params: int
    flops: int
    sec_per_iter: float


def profile_cost(model: SaanModel, image_size: int = 64, repeats: int = 3) -> CostReport:
    """Parameters, multiply-adds and wall time of one eval-mode forward on a single pair."""
    was_training = model.training
    model.eval()
    c = model.encoder_cfg.input_channels
    x = Tensor(np.zeros((1, c, image_size, image_size), dtype=model.dtype))
    try:
        with no_grad(), count_flops() as counter:
            model(x, x)
        start = time.perf_counter()
        with no_grad():
            for _ in range(repeats):
                model(x, x)
        elapsed = (time.perf_counter() - start) / max(repeats, 1)
    finally:
        model.train(was_training)
    return CostReport(param_count(model)['total'], counter.total, elapsed)


def predict_proba(model: SaanModel, t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    """Eval-mode change probabilities N,1,H,W."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = model(Tensor(np.asarray(t1, dtype=model.dtype)), Tensor(np.asarray(t2, dtype=model.dtype)))
    finally:
        model.train(was_training)
    return stable_sigmoid(out.final_logits.data)


# 每种注意力图的固定取值范围
EXPORT_RANGES = {'sim': (-1.0, 1.0), 'dsa': (0.0, 1.0), 'as': (0.0, 1.0)}


def export_attention_maps(state: AttentionState, directory: str, sample: int = 0) -> List[str]:
    """
    Write one grayscale PGM per stage and map kind plus ``attention_manifest.txt``.

    Values are mapped linearly from the kind's range (sim: [-1,1], dsa/as: [0,1])
    onto [0,255]; the manifest records that range as min/max so readers can
    invert the quantization.
    """
    os.makedirs(directory, exist_ok=True)
    lines, written = [], []
    for i, stage in enumerate(state.stages):
        for kind, tensor in (('sim', stage.sim), ('dsa', stage.dsa), ('as', stage.a_s)):
            if tensor is None:
                continue
            lo, hi = EXPORT_RANGES[kind]
            values = (tensor.data[sample].astype(np.float64) - lo) / (hi - lo)
            name = f'stage{i}_{kind}.pgm'
            path = os.path.join(directory, name)
            write_image(path, values)
            written.append(path)
            lines.append(f'stage={i} kind={kind} min={lo!r} max={hi!r} file={name}\n')
    manifest = os.path.join(directory, 'attention_manifest.txt')
    with open(manifest, 'w', encoding='utf-8') as fh:
        fh.writelines(lines)
    written.append(manifest)
    logger.info(f"✅ exported {len(written) - 1} attention maps to {directory}")
    return written
