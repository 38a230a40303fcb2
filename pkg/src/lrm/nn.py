"""Small module system on top of :mod:`lrm.tensor`.

Parameters are plain tensors with ``requires_grad=True``. Each carries a
``tag`` (``"weight"``, ``"bias"``, ``"norm"`` or ``"embedding"``) that the
optimizer uses to decide which parameters receive weight decay.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ("tag",)

    def __init__(self, data, tag: str = "weight"):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.tag = tag


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples truncated to +/- 2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: Optional[float] = 0.02, zero: bool = False):
        if zero:
            w = np.zeros((d_in, d_out))
        elif std is None:
            # fan-in uniform init, used for the small NeRF MLP
            bound = 1.0 / math.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        else:
            w = trunc_normal(rng, (d_in, d_out), std)
        self.weight = Parameter(w, "weight")
        self.bias = Parameter(np.zeros(d_out), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(d), "norm")
        self.bias = Parameter(np.zeros(d), "norm")
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    """Two linear layers with GELU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 zero_out: bool = False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention of queries [M, d] over keys/values [N, d]."""
    M, d = q.shape
    N = k.shape[0]
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    qh = q.reshape(M, heads, dh).transpose(1, 0, 2)
    kt = k.reshape(N, heads, dh).transpose(1, 2, 0)
    vh = v.reshape(N, heads, dh).transpose(1, 0, 2)
    scores = ops.matmul(qh, kt) * (1.0 / math.sqrt(dh))
    attn = ops.softmax(scores)
    out = ops.matmul(attn, vh)  # [heads, M, dh]
    return out.transpose(1, 0, 2).reshape(M, d)


class Attention(Module):
    """Bias-free multi-head attention; keys and values come from ``context``."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, d_context: Optional[int] = None):
        d_context = d_context or d
        self.heads = heads
        self.wq = Linear(d, d, rng, bias=False)
        self.wk = Linear(d_context, d, rng, bias=False)
        self.wv = Linear(d_context, d, rng, bias=False)
        self.wo = Linear(d, d, rng, bias=False)

    def forward(self, x: Tensor, context: Optional[Tensor] = None) -> Tensor:
        context = x if context is None else context
        o = multi_head_attention(self.wq(x), self.wk(context), self.wv(context), self.heads)
        return self.wo(o)
