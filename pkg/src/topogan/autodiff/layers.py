"""Layer modules composing the differentiable operations into networks."""
from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor


class Module:
    """Base class: holds named parameters, buffers and child modules."""

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, target in own.items():
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise ValueError(f"{name}: expected shape {target.shape}, got {value.shape}")
            target[...] = value

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    @contextmanager
    def frozen(self):
        """Temporarily exclude this module's parameters from gradient computation.

        Gradients still flow through the module to its inputs.
        """
        params = self.parameters()
        previous = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, previous):
                p.requires_grad = flag


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(np.zeros((in_features, out_features), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x):
        return F.dense(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, pad: int = 0, dtype=np.float32):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.weight = Parameter(np.zeros((cout, cin, kernel, kernel), dtype=dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, pad=0, output_pad=0, dtype=np.float32):
        super().__init__()
        if not 0 <= output_pad < stride:
            raise ValueError(f"output_pad must be < stride, got {output_pad} >= {stride}")
        self.stride, self.pad, self.output_pad = stride, pad, output_pad
        self.weight = Parameter(np.zeros((cin, cout, kernel, kernel), dtype=dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))

    def forward(self, x):
        return F.transposed_conv2d(x, self.weight, self.bias, self.stride, self.pad, self.output_pad)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.stats = F.RunningStats(channels, dtype=dtype)

    def named_buffers(self, prefix=""):
        yield prefix + "running_mean", self.stats.mean
        yield prefix + "running_var", self.stats.var

    def forward(self, x):
        return F.batchnorm2d(x, self.gamma, self.beta, self.stats, self.training, self.momentum, self.eps)


class Activation(Module):
    def __init__(self, kind: str, slope: float = 0.2):
        super().__init__()
        self.kind, self.slope = kind, slope

    def forward(self, x):
        return F.activation(x, self.kind, self.slope)


class Reshape(Module):
    def __init__(self, *shape: int):
        super().__init__()
        self.shape = shape

    def forward(self, x):
        return x.reshape((x.shape[0],) + self.shape)


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


class GlobalAvgPool(Module):
    def forward(self, x):
        return x.mean(axis=(2, 3))


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def forward_stages(self, x) -> List[Tensor]:
        """Return the output of every layer in order."""
        outs = []
        for layer in self.layers:
            x = layer(x)
            outs.append(x)
        return outs

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]
