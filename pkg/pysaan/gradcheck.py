"""
梯度校验工具
Gradient Verification Utility

用中心差分验证自动微分梯度，失败以报告形式返回而不是抛出
Compares autodiff gradients against central finite differences; failures are
reported, not raised.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward, no_grad

logger = logging.getLogger(__name__)


@dataclass
class ProbeResult:
    """单个探测点的结果"""
    input_index: int
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    """Per-element comparison of autodiff and finite-difference gradients."""
    probes: List[ProbeResult] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.probes)

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.probes), default=0.0)

    def failures(self) -> List[ProbeResult]:
        return [p for p in self.probes if not p.passed]


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


# 不可导点判定: (数据, 间隔) -> 需要避开的元素掩码
KinkPredicate = Callable[[np.ndarray, float], np.ndarray]


def near_zero(data: np.ndarray, margin: float) -> np.ndarray:
    """Elements within ``margin`` of the relu/clip kink at 0."""
    return np.abs(data) <= margin


def near_window_tie(k: int, stride: Optional[int] = None) -> KinkPredicate:
    """
    Predicate for max pooling over N,C,H,W inputs: every element of a window
    whose two largest values lie within ``margin`` of each other.
    """
    stride = k if stride is None else stride

    def _predicate(data: np.ndarray, margin: float) -> np.ndarray:
        n, c, h, w = data.shape
        mask = np.zeros(data.shape, dtype=bool)
        for i in range(0, h - k + 1, stride):
            for j in range(0, w - k + 1, stride):
                window = data[:, :, i:i + k, j:j + k].reshape(n, c, -1)
                top = np.sort(window, axis=-1)[..., -2:]
                tied = (top[..., 1] - top[..., 0]) <= margin
                mask[:, :, i:i + k, j:j + k] |= tied[..., None, None]
        return mask

    return _predicate


def _scalarize(out: Tensor, projection: Optional[np.ndarray]) -> Tensor:
    if projection is None:
        return out.sum()
    return (out * Tensor(projection)).sum()


def finite_difference_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                            tol: float = 1e-4, probes: int = 20,
                            seed: int = 0, check: Optional[Sequence[int]] = None,
                            avoid: Optional[KinkPredicate] = None,
                            kink_margin: Optional[float] = None) -> GradCheckReport:
    """
    Probe ``fn`` around ``inputs`` and compare gradients.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes. Up to ``probes`` elements per input are
    sampled without replacement. With ``avoid`` set, samples are drawn only
    from elements farther than ``kink_margin`` from a kink.

    Args:
        fn: Callable taking ``inputs`` and returning a Tensor.
        inputs: Tensors to differentiate with respect to (their dtype should be float64).
        h: Central difference step.
        tol: Relative error tolerance, |a-n| / max(|a|,|n|,1e-8).
        probes: Elements sampled per input.
        seed: Seed of the probe/projection generator.
        check: Indices of the inputs to probe (default: all).
        avoid: Marks elements near a non-differentiable point; those are never probed.
        kink_margin: Distance kept from the kink, default ``10 * h``.
    """
    rng = np.random.default_rng(seed)
    margin = 10.0 * h if kink_margin is None else kink_margin
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()

    with no_grad():
        probe_out = fn(*inputs)
    projection = None if probe_out.size == 1 else rng.standard_normal(probe_out.shape).astype(probe_out.dtype)

    with Tape() as tape:
        loss = _scalarize(fn(*inputs), projection)
    backward(loss, tape)

    def _evaluate() -> float:
        with no_grad():
            return float(_scalarize(fn(*inputs), projection).item())

    report = GradCheckReport(tol=tol)
    targets = range(len(inputs)) if check is None else check
    for k in targets:
        t = inputs[k]
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        candidates = np.arange(t.size)
        if avoid is not None:
            candidates = candidates[~avoid(t.data, margin).reshape(-1)]
            if candidates.size < min(probes, t.size):
                logger.debug(f"gradient check: input {k} has {candidates.size} elements clear of kinks")
        count = min(probes, candidates.size)
        for flat in rng.choice(candidates, size=count, replace=False):
            flat = int(flat)
            view = t.data.reshape(-1)
            orig = view[flat]
            view[flat] = orig + h
            f_plus = _evaluate()
            view[flat] = orig - h
            f_minus = _evaluate()
            view[flat] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[flat])
            err = relative_error(a, numeric)
            report.probes.append(ProbeResult(k, flat, a, numeric, err, err <= tol))

    if not report.passed:
        logger.debug(f"gradient check: {len(report.failures())} of {len(report.probes)} probes failed, "
                     f"max rel error {report.max_rel_error:.3e}")
    return report
