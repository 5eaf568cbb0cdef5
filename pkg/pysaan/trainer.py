"""
训练循环
Training Loop

Adam 优化器、按验证分数降学习率、早停、检查点保存和消融实验驱动
Adam with weight decay, reduce-on-plateau schedule with the learning-rate
floor as stop rule, checkpointing, evaluation and the ablation-grid driver.
"""

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

from .autodiff import Tape, Tensor, backward, no_grad
from .checkpoint import Checkpoint, load_checkpoint, model_meta, restore_model, save_checkpoint
from .data import DatasetManifest, SamplePair, random_augment, stack_batch
from .errors import CheckpointError, DimensionError, NumericalError, UsageError
from .losses import LossConfig, MetricsReport, compute_metrics, total_loss
from .model import AblationFlags, DecoderConfig, EncoderConfig, SaanModel, param_count, profile_cost
from .similarity import ContrastiveConfig, cosine_distance_map, downsample_labels

logger = logging.getLogger(__name__)

# 训练超参数默认值
DEFAULT_LR = 5e-4
DEFAULT_WEIGHT_DECAY = 1e-5
DEFAULT_BATCH_SIZE = 8
PLATEAU_PATIENCE = 5
PLATEAU_FACTOR = 1.0 / 3.0
MIN_LR = 1e-7
MAX_EPOCHS = 200
IMPROVEMENT_TOL = 1e-6

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

EPOCH_LOG_HEADER = ('epoch', 'lr', 'loss', 'l_seg', 'l_con', 'l_aux', 'val_f1', 'val_iou')


@dataclass
class TrainConfig:
    """训练配置"""
    lr0: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    batch_size: int = DEFAULT_BATCH_SIZE
    plateau_patience: int = PLATEAU_PATIENCE
    plateau_factor: float = PLATEAU_FACTOR
    min_lr: float = MIN_LR
    max_epochs: int = MAX_EPOCHS
    seed: int = 0
    w: float = 0.3
    margin: float = 1.0
    flags: AblationFlags = field(default_factory=AblationFlags)
    decoupled_weight_decay: bool = False
    val_metric: str = 'f1'
    augment: bool = True
    max_steps_per_epoch: int = 0
    plot: bool = False

    def __post_init__(self):
        if isinstance(self.flags, dict):
            self.flags = AblationFlags(**self.flags)
        if not 0 < self.plateau_factor < 1:
            raise UsageError('plateau_factor must lie in (0, 1)', {'plateau_factor': self.plateau_factor})
        if not 0 < self.min_lr < self.lr0:
            raise UsageError('need 0 < min_lr < lr0', {'min_lr': self.min_lr, 'lr0': self.lr0})
        if self.plateau_patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise UsageError('patience, batch_size and max_epochs must be >= 1')
        if self.weight_decay < 0 or self.max_steps_per_epoch < 0:
            raise UsageError('weight_decay and max_steps_per_epoch must be >= 0')
        if self.val_metric not in ('f1', 'accuracy'):
            raise UsageError(f'unknown val_metric {self.val_metric!r}')

    def loss_config(self) -> LossConfig:
        return LossConfig(w=self.w)

    def contrastive_config(self) -> ContrastiveConfig:
        return ContrastiveConfig(margin=self.margin)


# ==================== Adam ====================

@dataclass
class AdamState:
    """每个参数的一阶/二阶矩与步数"""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, params: Dict[str, Tensor]) -> 'AdamState':
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out = {f'adam.m.{k}': a for k, a in self.m.items()}
        out.update({f'adam.v.{k}': a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], params: Dict[str, Tensor], step: int = 0) -> 'AdamState':
        """Moments come from the checkpoint tensors, ``step`` from its meta."""
        state = cls.create(params)
        for k in params:
            m, v = arrays.get(f'adam.m.{k}'), arrays.get(f'adam.v.{k}')
            if m is None or v is None or m.shape != state.m[k].shape or v.shape != state.v[k].shape:
                raise CheckpointError('optimizer state does not match the model', {'parameter': k})
            state.m[k] = m.astype(state.m[k].dtype)
            state.v[k] = v.astype(state.v[k].dtype)
        state.step = int(step)
        return state

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, params: Dict[str, Tensor]) -> 'AdamState':
        return cls.from_arrays(ckpt.optimizer, params, ckpt.meta.get('adam_step', 0))


def adam_step(params: Dict[str, Tensor], state: AdamState, lr: float, weight_decay: float = 0.0,
              decoupled: bool = False, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> None:
    """
    One bias-corrected Adam update, in place.

    Coupled weight decay adds ``weight_decay * p`` to the gradient; decoupled
    decay shrinks the parameter by ``lr * weight_decay * p`` instead. A
    parameter without a gradient is treated as having a zero gradient.
    """
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape or name not in state.m:
            raise DimensionError('gradient or optimizer state shape mismatch', {'parameter': name})
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericalError('non-finite gradient', {'parameter': name, 'non_finite': bad, 'step': state.step})
        grads[name] = g

    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if weight_decay and not decoupled:
            g = g + weight_decay * p.data
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new = p.data - update
        if weight_decay and decoupled:
            new = new - lr * weight_decay * p.data
        p.data = np.asarray(new, dtype=p.dtype)


# ==================== 学习率调度 ====================

def plateau_schedule(history: Sequence[float], lr: float, patience: int = PLATEAU_PATIENCE,
                     factor: float = PLATEAU_FACTOR, min_lr: float = MIN_LR,
                     tol: float = IMPROVEMENT_TOL) -> Tuple[float, bool]:
    """
    Learning rate after the last entry of ``history`` (validation scores, higher is better).

    A score improves when it exceeds the best earlier score by more than
    ``tol``. Every ``patience`` consecutive non-improving epochs multiply the
    rate by ``factor``; ``stop`` is set once the new rate is below ``min_lr``.
    """
    if not history:
        raise UsageError('plateau_schedule needs at least one validation score')
    best = -math.inf
    stale = 0
    for score in history:
        if score > best + tol:
            best, stale = score, 0
        else:
            stale += 1
    new_lr = lr * factor if stale > 0 and stale % patience == 0 else lr
    return new_lr, new_lr < min_lr


class PlateauScheduler:
    """Stateful wrapper of plateau_schedule."""

    def __init__(self, lr: float, patience: int = PLATEAU_PATIENCE, factor: float = PLATEAU_FACTOR,
                 min_lr: float = MIN_LR):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.history: List[float] = []
        self.stopped = False

    def step(self, score: float) -> Tuple[float, bool]:
        self.history.append(float(score))
        self.lr, self.stopped = plateau_schedule(self.history, self.lr, self.patience, self.factor, self.min_lr)
        return self.lr, self.stopped


# ==================== 训练 ====================

@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    l_seg: float
    l_con: float
    l_aux: float
    val_f1: float
    val_iou: float

    def row(self) -> Tuple:
        return tuple(getattr(self, k) for k in EPOCH_LOG_HEADER)


@dataclass
class TrainResult:
    best: Checkpoint
    epochs: List[EpochLog]
    step_losses: List[float]
    model: SaanModel
    stopped_early: bool = False


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Shuffle/augment stream for one epoch; restartable from (seed, epoch)."""
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | (int(epoch) + (1 << 63))))


def _batches(samples: Sequence[SamplePair], size: int):
    for start in range(0, len(samples), size):
        yield samples[start:start + size]


def _snapshot(model: SaanModel) -> Dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def make_checkpoint(model: SaanModel, config: TrainConfig, epoch: int, best_score: Optional[float],
                    adam: Optional[AdamState] = None, state: Dict[str, np.ndarray] = None) -> Checkpoint:
    meta = model_meta(model)
    meta.update({'train': asdict(config), 'epoch': epoch, 'best_score': best_score,
                 'val_metric': config.val_metric,
                 'adam_step': adam.step if adam is not None else 0,
                 'rng_state': {'algorithm': 'philox', 'seed': config.seed, 'next_epoch': epoch + 1}})
    return Checkpoint(state if state is not None else _snapshot(model),
                      adam.to_arrays() if adam is not None else {}, meta)


@dataclass
class DistanceSeparation:
    """深层特征余弦距离 (变化像素 vs 未变化像素)"""
    changed_sum: float = 0.0
    changed_count: int = 0
    unchanged_sum: float = 0.0
    unchanged_count: int = 0

    def add(self, distance: np.ndarray, labels: np.ndarray) -> None:
        changed = labels > 0.5
        self.changed_sum += float(distance[changed].sum())
        self.changed_count += int(changed.sum())
        self.unchanged_sum += float(distance[~changed].sum())
        self.unchanged_count += int((~changed).sum())

    @property
    def changed(self) -> Optional[float]:
        return self.changed_sum / self.changed_count if self.changed_count else None

    @property
    def unchanged(self) -> Optional[float]:
        return self.unchanged_sum / self.unchanged_count if self.unchanged_count else None

    @property
    def gap(self) -> Optional[float]:
        if self.changed is None or self.unchanged is None:
            return None
        return self.changed - self.unchanged

    def to_dict(self) -> dict:
        return {'changed': self.changed, 'unchanged': self.unchanged, 'gap': self.gap}


def evaluate_samples(model: SaanModel, samples: Sequence[SamplePair], batch_size: int = DEFAULT_BATCH_SIZE,
                     threshold: float = 0.5) -> Tuple[MetricsReport, List[MetricsReport], DistanceSeparation]:
    """
    Eval-mode metrics: aggregate counts, one report per sample and the mean
    deepest-stage cosine distance over changed and unchanged pixels.
    """
    was_training = model.training
    model.eval()
    per_tile: List[MetricsReport] = []
    separation = DistanceSeparation()
    try:
        with no_grad():
            for batch in _batches(samples, batch_size):
                t1, t2, y = stack_batch(batch)
                out = model(Tensor(t1.astype(model.dtype)), Tensor(t2.astype(model.dtype)))
                logits = out.final_logits.data
                per_tile.extend(compute_metrics(logits[i:i + 1], y[i:i + 1], threshold) for i in range(len(batch)))
                f1, f2 = out.deepest
                distance = cosine_distance_map(f1, f2).data
                separation.add(distance, downsample_labels(y, y.shape[-1] // distance.shape[-1]))
    finally:
        model.train(was_training)
    return MetricsReport.aggregate(per_tile), per_tile, separation


@dataclass
class EvaluationResult:
    aggregate: MetricsReport
    per_tile: List[MetricsReport]
    indices: List[int]
    separation: DistanceSeparation = field(default_factory=DistanceSeparation)


def evaluate(source: Union[str, Checkpoint, SaanModel], manifest: DatasetManifest, split: str = 'test',
             batch_size: int = DEFAULT_BATCH_SIZE, threshold: float = 0.5) -> EvaluationResult:
    """Score a checkpoint path, decoded checkpoint or in-memory model on one split."""
    if isinstance(source, str):
        source = load_checkpoint(source)
    model = restore_model(source) if isinstance(source, Checkpoint) else source
    samples = list(manifest.iter_pairs(split))
    if not samples:
        raise UsageError(f'split {split!r} is empty')
    aggregate, per_tile, separation = evaluate_samples(model, samples, batch_size, threshold)
    logger.info(f"📊 {split}: f1={aggregate.f1:.4f} iou={aggregate.iou:.4f} ({len(samples)} tiles)")
    if separation.gap is not None:
        logger.info(f"📏 deepest-stage distance: changed {separation.changed:.4f} vs unchanged "
                    f"{separation.unchanged:.4f} (gap {separation.gap:.4f})")
    return EvaluationResult(aggregate, per_tile, [s.index for s in samples], separation)


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)


def plot_history(epochs: Sequence[EpochLog], path: str) -> None:
    """Loss components and validation scores per epoch."""
    x = [e.epoch for e in epochs]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ('loss', 'l_seg', 'l_con', 'l_aux'):
        ax_loss.plot(x, [getattr(e, key) for e in epochs], label=key)
    ax_loss.set_xlabel('epoch')
    ax_loss.set_title('training loss')
    ax_loss.legend()
    ax_val.plot(x, [e.val_f1 for e in epochs], label='val_f1')
    ax_val.plot(x, [e.val_iou for e in epochs], label='val_iou')
    ax_val.set_xlabel('epoch')
    ax_val.set_title('validation')
    ax_val.grid(linestyle='--')
    ax_val.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def train(config: TrainConfig, manifest: DatasetManifest, out_dir: Optional[str] = None,
          encoder_cfg: EncoderConfig = None, decoder_cfg: DecoderConfig = None) -> TrainResult:
    """
    Train on the manifest's train split, validating on ``val`` after every epoch.

    With ``out_dir`` set, writes epochs.csv, steps.csv, best.ckpt, last.ckpt
    (and history.png when ``config.plot``). A numerical abort writes
    last_good.ckpt from the state before the failing step and re-raises.
    """
    model = SaanModel(encoder_cfg, config.flags, decoder_cfg, seed=config.seed)
    train_set = list(manifest.iter_pairs('train'))
    val_set = list(manifest.iter_pairs('val'))
    if not train_set or not val_set:
        raise UsageError('manifest needs non-empty train and val splits', manifest.counts())
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    params = model.parameters()
    adam = AdamState.create(params)
    scheduler = PlateauScheduler(config.lr0, config.plateau_patience, config.plateau_factor, config.min_lr)
    loss_cfg, con_cfg = config.loss_config(), config.contrastive_config()
    logger.info(f"🚀 training: {param_count(model)['total']} params, {len(train_set)} train / "
                f"{len(val_set)} val pairs, flags={asdict(config.flags)}")

    epochs: List[EpochLog] = []
    step_losses: List[float] = []
    best: Optional[Checkpoint] = None
    best_score = -math.inf
    lr = config.lr0
    stopped = False

    for epoch in range(config.max_epochs):
        rng = epoch_rng(config.seed, epoch)
        order = rng.permutation(len(train_set))
        samples = [train_set[i] for i in order]
        sums = np.zeros(4)
        steps = 0
        model.train()
        for batch in _batches(samples, config.batch_size):
            if config.max_steps_per_epoch and steps >= config.max_steps_per_epoch:
                break
            if config.augment:
                batch = [random_augment(s, rng) for s in batch]
            t1, t2, y = stack_batch(batch)
            good_state = _snapshot(model)
            try:
                model.zero_grad()
                with Tape() as tape:
                    out = model(Tensor(t1.astype(model.dtype)), Tensor(t2.astype(model.dtype)))
                    br = total_loss(out.final_logits, out.aux_logits, out.deepest, y, config.flags,
                                    loss_cfg, con_cfg)
                backward(br.total, tape)
                adam_step(params, adam, lr, config.weight_decay, config.decoupled_weight_decay)
            except NumericalError as e:
                logger.error(f"❌ numerical abort at epoch {epoch} step {len(step_losses)}: {e}")
                if out_dir:
                    save_checkpoint(os.path.join(out_dir, 'last_good.ckpt'),
                                    make_checkpoint(model, config, epoch - 1, None, state=good_state))
                raise
            loss = br.total.item()
            step_losses.append(loss)
            sums += (loss, br.l_seg, br.l_con, br.l_aux)
            steps += 1
            logger.debug(f"step {len(step_losses)}: loss={loss:.6f} l_seg={br.l_seg:.6f} "
                         f"l_con={br.l_con:.6f} l_aux={br.l_aux:.6f}")

        report, _, _ = evaluate_samples(model, val_set, config.batch_size)
        score = report.f1 if config.val_metric == 'f1' else report.accuracy
        means = sums / max(steps, 1)
        log = EpochLog(epoch, lr, *(float(v) for v in means), report.f1, report.iou)
        epochs.append(log)
        logger.info(f"📈 epoch {epoch}: lr={lr:.3e} loss={log.loss:.4f} (seg {log.l_seg:.4f} "
                    f"con {log.l_con:.4f} aux {log.l_aux:.4f}) val_f1={report.f1:.4f} val_iou={report.iou:.4f}")

        if score > best_score:
            best_score = score
            best = make_checkpoint(model, config, epoch, score, adam)
            if out_dir:
                save_checkpoint(os.path.join(out_dir, 'best.ckpt'), best)

        lr, stopped = scheduler.step(score)
        if out_dir:
            save_checkpoint(os.path.join(out_dir, 'last.ckpt'), make_checkpoint(model, config, epoch, best_score, adam))
            _write_csv(os.path.join(out_dir, 'epochs.csv'), EPOCH_LOG_HEADER, [e.row() for e in epochs])
            _write_csv(os.path.join(out_dir, 'steps.csv'), ('step', 'loss'), list(enumerate(step_losses, 1)))
        if stopped:
            logger.info(f"⏹️ learning rate {lr:.3e} fell below {config.min_lr:.1e}, stopping")
            break

    if out_dir and config.plot:
        plot_history(epochs, os.path.join(out_dir, 'history.png'))
    return TrainResult(best, epochs, step_losses, model, stopped)


# ==================== 消融实验 ====================

ABLATION_COLUMNS = ('preset', 'f1', 'iou', 'params', 'sec_per_iter', 'f1_std', 'iou_std', 'repeats')


@dataclass
class AblationRow:
    preset: str
    f1: float
    iou: float
    params: int
    sec_per_iter: float
    f1_std: float = 0.0
    iou_std: float = 0.0
    repeats: int = 1

    def row(self) -> Tuple:
        return tuple(getattr(self, k) for k in ABLATION_COLUMNS)


def run_ablation(config: TrainConfig, manifest: DatasetManifest, presets: Sequence[str],
                 repeats: int = 1, split: str = 'test', encoder_cfg: EncoderConfig = None,
                 decoder_cfg: DecoderConfig = None, out_dir: Optional[str] = None) -> List[AblationRow]:
    """
    Train and score one model per flag preset, sequentially.

    Repeats reuse the preset with seeds ``config.seed + r`` and report mean
    and standard deviation.
    """
    if repeats < 1:
        raise UsageError('repeats must be >= 1', {'repeats': repeats})
    spec = manifest.scene_spec()
    image_size = spec.size if spec is not None else 64
    rows = []
    for name in presets:
        flags = AblationFlags.preset(name)
        f1s, ious = [], []
        cost = None
        for r in range(repeats):
            cfg = TrainConfig(**{**asdict(config), 'flags': flags, 'seed': config.seed + r})
            run_dir = os.path.join(out_dir, f'{name}_r{r}') if out_dir else None
            result = train(cfg, manifest, run_dir, encoder_cfg, decoder_cfg)
            report = evaluate(result.best, manifest, split, cfg.batch_size).aggregate
            f1s.append(report.f1)
            ious.append(report.iou)
            if cost is None:
                cost = profile_cost(result.model, image_size)
        rows.append(AblationRow(name, float(np.mean(f1s)), float(np.mean(ious)), cost.params, cost.sec_per_iter,
                                float(np.std(f1s)), float(np.std(ious)), repeats))
        logger.info(f"🧪 {name}: f1={rows[-1].f1:.4f} iou={rows[-1].iou:.4f} params={cost.params}")
    if out_dir:
        _write_csv(os.path.join(out_dir, 'ablation.csv'), ABLATION_COLUMNS, [r.row() for r in rows])
    return rows
