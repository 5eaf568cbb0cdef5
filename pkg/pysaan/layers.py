"""
网络层构件
Layer Building Blocks

带参数注册的 Module 基类以及卷积、批归一化、线性层和残差块
Module base class with parameter registration, plus the conv, batchnorm,
linear and residual blocks the encoder and decoder are assembled from.
"""

import logging
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .autodiff import Tensor, relu
from .errors import CheckpointError
from .ops import BatchNormState, batchnorm2d, conv2d, linear

logger = logging.getLogger(__name__)


def kaiming_parameter(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype) -> Tensor:
    """He-normal initialization, std = sqrt(2 / fan_in)."""
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True, dtype=dtype)


def constant_parameter(shape: Tuple[int, ...], value: float, dtype) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, dtype=dtype)


class Module:
    """Minimal container: parameters are requires_grad Tensors held as attributes."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f'{key}.{i}', item
            else:
                yield key, value

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for key, value in self._children():
            name = f'{prefix}{key}'
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f'{name}.')

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, BatchNormState]]:
        for key, value in self._children():
            name = f'{prefix}{key}'
            if isinstance(value, BatchNormState):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f'{name}.')

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def train(self, mode: bool = True) -> 'Module':
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters plus batchnorm running statistics, by dotted name."""
        state = {name: p.data for name, p in self.named_parameters()}
        for name, bn in self.named_buffers():
            state[f'{name}.running_mean'] = bn.running_mean
            state[f'{name}.running_var'] = bn.running_var
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Strict load; mismatched names or shapes raise CheckpointError listing all of them."""
        own = self.state_dict()
        unexpected = sorted(set(state) - set(own))
        missing = sorted(set(own) - set(state))
        wrong_shape = sorted(k for k in set(own) & set(state) if own[k].shape != np.shape(state[k]))
        if unexpected or missing or wrong_shape:
            raise CheckpointError('checkpoint does not match the model configuration', {
                'unexpected': unexpected, 'missing': missing, 'wrong_shape': wrong_shape})
        params = dict(self.named_parameters())
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.dtype)
        for name, bn in self.named_buffers():
            bn.running_mean = np.array(state[f'{name}.running_mean'], dtype=bn.running_mean.dtype)
            bn.running_var = np.array(state[f'{name}.running_var'], dtype=bn.running_var.dtype)


class Conv2d(Module):
    """卷积层 (Kaiming 初始化, 偏置为零)"""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = kaiming_parameter((cout, cin, k, k), cin * k * k, rng, dtype)
        self.bias = constant_parameter((cout,), 0.0, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """批归一化层"""

    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.gamma = constant_parameter((channels,), 1.0, dtype)
        self.beta = constant_parameter((channels,), 0.0, dtype)
        self.state = BatchNormState.create(channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.state, self.training)


class Linear(Module):
    """Applies y = x W^T + b."""

    def __init__(self, din: int, dout: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = kaiming_parameter((dout, din), din, rng, dtype)
        self.bias = constant_parameter((dout,), 0.0, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class ConvBNAct(Module):
    """Conv (no bias) -> batchnorm -> optional ReLU."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 act: bool = True, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn(self.conv(x))
        return relu(out) if self.act else out


class BasicBlock(Module):
    """ResNet basic block: two 3x3 conv-bn pairs plus an identity or 1x1 projection shortcut."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1, dtype=np.float32):
        super().__init__()
        self.conv1 = ConvBNAct(cin, cout, 3, rng, stride=stride, dtype=dtype)
        self.conv2 = ConvBNAct(cout, cout, 3, rng, act=False, dtype=dtype)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = ConvBNAct(cin, cout, 1, rng, stride=stride, act=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        identity = x if self.shortcut is None else self.shortcut(x)
        return relu(self.conv2(self.conv1(x)) + identity)
