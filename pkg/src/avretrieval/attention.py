"""Multi-head attention and feed-forward blocks.

All functions accept leading batch dimensions: ``x`` may be ``[N, D]`` or
``[B, N, D]``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


class ParamGroup:
    """Mixin for dataclasses whose fields are tensors or nested groups."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            key = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield key, value
            elif isinstance(value, ParamGroup):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, ParamGroup):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


@dataclass
class LayerNormParams(ParamGroup):
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, dim: int) -> LayerNormParams:
        return cls(nx.parameter(np.ones(dim)), nx.parameter(np.zeros(dim)))

    def __call__(self, x: Tensor, eps: float = 1e-5) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, eps)


@dataclass
class MhaParams(ParamGroup):
    """Packed projections; head ``i`` uses columns ``i*D_h:(i+1)*D_h`` of each of
    ``w_q``, ``w_k``, ``w_v``.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int
    b_q: Tensor | None = None
    b_k: Tensor | None = None
    b_v: Tensor | None = None
    b_o: Tensor | None = None

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.n_heads < 1 or d % self.n_heads:
            raise ValueError(f"model dim {d} not divisible by {self.n_heads} heads")
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            if w.shape != (d, d):
                raise ShapeError(f"attention projection shape {w.shape}, expected {(d, d)}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @classmethod
    def init(cls, dim: int, n_heads: int, rng: np.random.Generator, std: float = 0.02,
             bias: bool = False) -> MhaParams:
        ws = [nx.parameter(rng.normal(0.0, std, (dim, dim))) for _ in range(4)]
        bs = [nx.parameter(np.zeros(dim)) if bias else None for _ in range(4)]
        return cls(*ws, n_heads, *bs)


@dataclass
class FfnParams(ParamGroup):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        d, h = self.w1.shape
        if h < 1 or self.w2.shape != (h, d) or self.b1.shape != (h,) or self.b2.shape != (d,):
            raise ShapeError("inconsistent feed-forward parameter shapes")

    @classmethod
    def init(cls, dim: int, hidden: int, rng: np.random.Generator, std: float = 0.02) -> FfnParams:
        return cls(
            nx.parameter(rng.normal(0.0, std, (dim, hidden))),
            nx.parameter(np.zeros(hidden)),
            nx.parameter(rng.normal(0.0, std, (hidden, dim))),
            nx.parameter(np.zeros(dim)),
        )


def _project(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    out = nx.matmul(x, w)
    return out if b is None else out + b


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # [..., N, D] -> [..., n, N, D_h]
    *lead, n, d = x.shape
    return nx.swapaxes(nx.reshape(x, (*lead, n, n_heads, d // n_heads)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    # [..., n, N, D_h] -> [..., N, D]
    x = nx.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return nx.reshape(x, (*lead, n, h * dh))


def attention_weights(x: Tensor, y: Tensor, p: MhaParams) -> Tensor:
    """Per-head attention matrices ``[..., n, N_x, N_y]`` (rows sum to one)."""
    _check_dims(x, y, p)
    q = _split_heads(_project(x, p.w_q, p.b_q), p.n_heads)
    k = _split_heads(_project(y, p.w_k, p.b_k), p.n_heads)
    scores = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(p.head_dim))
    return nx.softmax(scores, axis=-1)


def _check_dims(x: Tensor, y: Tensor, p: MhaParams) -> None:
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != p.dim or y.shape[-1] != p.dim:
        raise ShapeError(f"mha: inputs {x.shape}, {y.shape} incompatible with model dim {p.dim}")


def mha(x: Tensor, y: Tensor, p: MhaParams) -> Tensor:
    """Multi-head attention of queries ``x [..., N_x, D]`` over keys/values ``y [..., N_y, D]``."""
    x, y = nx.as_tensor(x), nx.as_tensor(y)
    attn = attention_weights(x, y, p)
    v = _split_heads(_project(y, p.w_v, p.b_v), p.n_heads)
    heads = _merge_heads(nx.matmul(attn, v))
    return _project(heads, p.w_o, p.b_o)


def mhsa(x: Tensor, p: MhaParams) -> Tensor:
    return mha(x, x, p)


def ffn(x: Tensor, p: FfnParams) -> Tensor:
    x = nx.as_tensor(x)
    if x.shape[-1] != p.w1.shape[0]:
        raise ShapeError(f"ffn: input last dim {x.shape[-1]} != {p.w1.shape[0]}")
    hidden = nx.quick_gelu(nx.matmul(x, p.w1) + p.b1)
    return nx.matmul(hidden, p.w2) + p.b2
