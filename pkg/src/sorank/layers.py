"""Parameterized layers on top of the autodiff tensor.

Weights use Glorot-uniform init (+-sqrt(6/(fan_in+fan_out))), biases start
at zero, layer-norm affine at (1, 0). Every layer draws its init from an
explicit generator so runs are reproducible from one seed.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, layer_norm, matmul


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Base with recursive (name, parameter) discovery."""

    def named_parameters(self):
        out = []
        for attr, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((attr, val))
            elif isinstance(val, Module):
                out.extend((f"{attr}.{n}", p) for n, p in val.named_parameters())
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend((f"{attr}.{i}.{n}", p)
                                   for n, p in item.named_parameters())
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32):
        self.weight = Tensor(
            glorot_uniform(rng, (d_in, d_out), d_in, d_out, dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng, stride: int = 1,
                 pad: int = 0, dtype=np.float32):
        fan_in = c_in * k * k
        fan_out = c_out * k * k
        self.weight = Tensor(
            glorot_uniform(rng, (c_out, c_in, k, k), fan_in, fan_out, dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      pad=self.pad)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class EmbeddingTable(Module):
    def __init__(self, rows: int, d: int, rng, dtype=np.float32,
                 zero_init: bool = False):
        if zero_init:
            data = np.zeros((rows, d), dtype=dtype)
        else:
            data = glorot_uniform(rng, (rows, d), rows, d, dtype)
        self.table = Tensor(data, requires_grad=True)
