"""
Layer containers built on the tensor engine.
"""
import math
from typing import Dict, Iterator, List, Tuple
import numpy as np
from m2former.tensor import (
    Tensor,
    Parameter,
    conv2d,
    dropout,
    layer_norm,
    masked_fill,
    relu,
    softmax,
)
from m2former.exc import ShapeError

# Logit assigned to disallowed attention pairs. exp() of it underflows to exactly 0.
NEG_INF = -1e30


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """ Fan-in scaled uniform initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in)). """
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """
    Base class for layers. Parameters are discovered from attributes (Parameter, Module, or
    list of Modules) in assignment order, and named by their dotted attribute path.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Parameter]]:
        seen = set()
        for name, value in vars(self).items():
            path = f'{prefix}{name}'
            if isinstance(value, Parameter):
                children = [(path, value)]
            elif isinstance(value, Module):
                children = value.named_parameters(prefix=f'{path}.')
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                children = (
                    item
                    for index, module in enumerate(value)
                    for item in module.named_parameters(prefix=f'{path}.{index}.')
                )
            else:
                continue
            for child_name, parameter in children:
                if id(parameter) not in seen:
                    seen.add(id(parameter))
                    yield child_name, parameter

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.numpy() for name, p in self.named_parameters()}

    def name_parameters(self, prefix: str = ''):
        """ Store each parameter's dotted path in Parameter.name. """
        for name, p in self.named_parameters(prefix=prefix):
            p.name = name

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        for module in self.modules():
            module.training = mode

    def eval(self):
        self.train(False)

    def modules(self) -> Iterator['Module']:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for module in value:
                    yield from module.modules()


class Linear(Module):
    """ y = x W + b with W of shape (in, out), applied to the last axis. """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_init(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f'Linear expects last axis {self.in_features}, got shape {x.shape}')
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        kernel: Tuple[int, int] = (3, 3),
        stride: Tuple[int, int] = (1, 1),
        padding: Tuple[int, int] = (1, 1),
    ):
        fan_in = in_channels * kernel[0] * kernel[1]
        self.kernels = Parameter(uniform_init(rng, (out_channels, in_channels) + tuple(kernel), fan_in))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = tuple(stride)
        self.padding = tuple(padding)

    def forward(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.kernels, stride=self.stride, padding=self.padding)
        return y + self.bias.reshape(-1, 1, 1)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, eps=self.eps)


class FeedForward(Module):
    """ Position-wise d_model -> d_ff -> d_model with ReLU. """

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        self.w1 = Linear(d_model, d_ff, rng)
        self.w2 = Linear(d_ff, d_model, rng)
        self.dropout_rate = dropout_rate
        self._rng = rng

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.w1(x))
        if self.training:
            h = dropout(h, self.dropout_rate, self._rng)
        return self.w2(h)


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention with h heads over the second-to-last axis.

    Queries come from `query` (B x T x d), keys and values from `memory` (B x S x d).
    `allowed` is an optional boolean T x S (or B x T x S) matrix; False entries get zero weight.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ShapeError(f'd_model {d_model} is not divisible by {heads} heads')
        self.heads = heads
        self.d_k = d_model // heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.d_k).transpose(0, 2, 1, 3)

    def attention_weights(self, query: Tensor, memory: Tensor, allowed: np.ndarray = None) -> Tensor:
        q = self._split(self.wq(query))
        k = self._split(self.wk(memory))
        scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(self.d_k)
        if allowed is not None:
            allowed = np.asarray(allowed, dtype=bool)
            if allowed.ndim == 3:
                allowed = allowed[:, None, :, :]
            scores = masked_fill(scores, ~allowed, NEG_INF)
        return softmax(scores, axis=-1)

    def forward(self, query: Tensor, memory: Tensor, allowed: np.ndarray = None) -> Tensor:
        if query.shape[-1] != self.heads * self.d_k or memory.shape[-1] != self.heads * self.d_k:
            raise ShapeError(
                f'attention d_model mismatch: query {query.shape}, memory {memory.shape}'
            )
        weights = self.attention_weights(query, memory, allowed)
        context = weights @ self._split(self.wv(memory))
        b, t, _ = query.shape
        return self.wo(context.transpose(0, 2, 1, 3).reshape(b, t, self.heads * self.d_k))


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """
    Sinusoidal position table: row t, column 2i holds sin(t / 10000^(2i/dim)), column 2i+1 the cosine.
    """
    positions = np.arange(length)[:, None]
    rates = 1.0 / 10000.0 ** (np.arange(0, dim, 2) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)[:, : dim // 2]
    return table
