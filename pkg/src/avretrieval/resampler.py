"""Learnable-query audio resampler: ``N_a`` raw audio tokens -> ``M`` embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import FfnParams, LayerNormParams, MhaParams, ParamGroup, ffn, mha, mhsa
from .numerics import ShapeError, Tensor


@dataclass
class RawAudioTokens:
    tokens: np.ndarray
    present: bool = True

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise ShapeError(f"raw audio tokens must be [N_a, D_ast], got {self.tokens.shape}")
        if not self.present and np.any(self.tokens):
            raise ValueError("absent audio must be the zero matrix")


def missing_audio_embedding(d_ast: int, n_tokens: int) -> RawAudioTokens:
    """Zero tokens flagged absent; videos without sound are encoded this way."""
    return RawAudioTokens(np.zeros((n_tokens, d_ast)), present=False)


@dataclass
class ResamplerBlockParams(ParamGroup):
    ln_self: LayerNormParams
    self_mhsa: MhaParams
    ln_query: LayerNormParams
    ln_tokens: LayerNormParams
    cross_mha: MhaParams
    ln_ffn: LayerNormParams
    ffn: FfnParams

    @classmethod
    def init(cls, dim: int, n_heads: int, rng: np.random.Generator, hidden: int | None = None,
             std: float = 0.02) -> ResamplerBlockParams:
        return cls(
            ln_self=LayerNormParams.init(dim),
            self_mhsa=MhaParams.init(dim, n_heads, rng, std),
            ln_query=LayerNormParams.init(dim),
            ln_tokens=LayerNormParams.init(dim),
            cross_mha=MhaParams.init(dim, n_heads, rng, std),
            ln_ffn=LayerNormParams.init(dim),
            ffn=FfnParams.init(dim, hidden or 4 * dim, rng, std),
        )


@dataclass
class ResamplerParams(ParamGroup):
    queries: Tensor
    input_proj: Tensor
    blocks: list[ResamplerBlockParams] = field(default_factory=list)

    def __post_init__(self):
        if self.queries.ndim != 2 or self.queries.shape[0] < 1:
            raise ShapeError("queries must be [M, D] with M >= 1")
        if not self.blocks:
            raise ValueError("resampler needs at least one block")
        if self.input_proj.shape[1] != self.queries.shape[1]:
            raise ShapeError("input projection output width must equal the model width")

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def dim(self) -> int:
        return self.queries.shape[1]

    @property
    def token_dim(self) -> int:
        return self.input_proj.shape[0]

    @classmethod
    def init(cls, dim: int, n_queries: int, n_blocks: int, n_heads: int, rng: np.random.Generator,
             token_dim: int | None = None, hidden: int | None = None,
             std: float = 0.02) -> ResamplerParams:
        token_dim = token_dim or dim
        if token_dim == dim:
            proj = np.eye(dim)
        else:
            proj = rng.normal(0.0, 1.0 / np.sqrt(token_dim), (token_dim, dim))
        return cls(
            queries=nx.parameter(rng.normal(0.0, std, (n_queries, dim))),
            input_proj=nx.parameter(proj),
            blocks=[ResamplerBlockParams.init(dim, n_heads, rng, hidden, std) for _ in range(n_blocks)],
        )


def resample_tokens(tokens: Tensor, p: ResamplerParams) -> Tensor:
    """Resample ``tokens [..., N_a, D_ast]`` to ``[..., M, D]``."""
    tokens = nx.as_tensor(tokens)
    if tokens.ndim < 2 or tokens.shape[-1] != p.token_dim:
        raise ShapeError(f"resampler expects token width {p.token_dim}, got {tokens.shape}")
    kv = nx.matmul(tokens, p.input_proj)
    q = nx.broadcast_to(p.queries, (*tokens.shape[:-2], p.n_queries, p.dim))
    for blk in p.blocks:
        q = mhsa(blk.ln_self(q), blk.self_mhsa) + q
        q = mha(blk.ln_query(q), blk.ln_tokens(kv), blk.cross_mha) + q
        q = ffn(blk.ln_ffn(q), blk.ffn) + q
    return q


def resample(raw: RawAudioTokens, p: ResamplerParams) -> Tensor:
    return resample_tokens(Tensor(raw.tokens), p)
