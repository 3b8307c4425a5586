"""Gated audio-visual fusion transformer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import FfnParams, LayerNormParams, MhaParams, ParamGroup, ffn, mha, mhsa
from .numerics import ContractError, ShapeError, Tensor

GATE_MODES = ("soft", "ungated", "hard")


@dataclass
class GatingMlpParams(ParamGroup):
    """Two independent ``2D -> D/2 -> 1`` MLPs, one per gated branch."""

    mha_w1: Tensor
    mha_b1: Tensor
    mha_w2: Tensor
    mha_b2: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, std: float = 0.02) -> GatingMlpParams:
        hidden = max(dim // 2, 1)

        def branch():
            # output layer starts at zero so every gate starts closed
            return [
                nx.parameter(rng.normal(0.0, std, (2 * dim, hidden))),
                nx.parameter(np.zeros(hidden)),
                nx.parameter(np.zeros((hidden, 1))),
                nx.parameter(np.zeros(1)),
            ]

        return cls(*branch(), *branch())

    def zero_(self) -> None:
        for p in self.parameters():
            p.data[...] = 0.0


@dataclass
class GatedFusionLayerParams(ParamGroup):
    cross_mha: MhaParams
    ffn1: FfnParams
    self_mhsa: MhaParams
    ffn2: FfnParams
    ln_frames: LayerNormParams
    ln_audio: LayerNormParams
    ln_fused: LayerNormParams
    ln_refine_attn: LayerNormParams
    ln_refine_ffn: LayerNormParams
    gating: GatingMlpParams

    @classmethod
    def init(cls, dim: int, n_heads: int, rng: np.random.Generator, hidden: int | None = None,
             std: float = 0.02) -> GatedFusionLayerParams:
        hidden = hidden or 4 * dim
        return cls(
            cross_mha=MhaParams.init(dim, n_heads, rng, std),
            ffn1=FfnParams.init(dim, hidden, rng, std),
            self_mhsa=MhaParams.init(dim, n_heads, rng, std),
            ffn2=FfnParams.init(dim, hidden, rng, std),
            ln_frames=LayerNormParams.init(dim),
            ln_audio=LayerNormParams.init(dim),
            ln_fused=LayerNormParams.init(dim),
            ln_refine_attn=LayerNormParams.init(dim),
            ln_refine_ffn=LayerNormParams.init(dim),
            gating=GatingMlpParams.init(dim, rng, std),
        )


@dataclass
class GateTrace:
    """Per-layer gate values; each entry has one value per sample (shape ``[...]``)."""

    mha: list[np.ndarray] = field(default_factory=list)
    ffn: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.mha)

    def append(self, g_mha: np.ndarray, g_ffn: np.ndarray) -> None:
        self.mha.append(np.asarray(g_mha))
        self.ffn.append(np.asarray(g_ffn))


def _mlp(u: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return nx.matmul(nx.quick_gelu(nx.matmul(u, w1) + b1), w2) + b2


def gating_scores(a: Tensor, f_prev: Tensor, p: GatingMlpParams) -> tuple[Tensor, Tensor]:
    """Return ``(g_mha, g_ffn)``, each shaped ``[..., 1]`` with values in (-1, 1).

    Audio and frames are mean-pooled over their token axis and concatenated
    (audio first) before entering the two MLPs.
    """
    a, f_prev = nx.as_tensor(a), nx.as_tensor(f_prev)
    if a.shape[-1] != f_prev.shape[-1] or 2 * a.shape[-1] != p.mha_w1.shape[0]:
        raise ShapeError(f"gating: audio {a.shape} / frames {f_prev.shape} width mismatch")
    u = nx.concat([nx.mean(a, axis=-2), nx.mean(f_prev, axis=-2)], axis=-1)
    u = nx.reshape(u, (*u.shape[:-1], 1, u.shape[-1]))
    g_mha = nx.tanh(_mlp(u, p.mha_w1, p.mha_b1, p.mha_w2, p.mha_b2))
    g_ffn = nx.tanh(_mlp(u, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2))
    # [..., 1, 1] -> [..., 1]
    return nx.reshape(g_mha, g_mha.shape[:-1]), nx.reshape(g_ffn, g_ffn.shape[:-1])


def hard_gate(g: float | np.ndarray, threshold: float) -> np.ndarray:
    """1 where the gate exceeds ``threshold``, else 0."""
    if not -1.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (-1, 1)")
    return (np.asarray(g) > threshold).astype(np.float64)


def _resolve_gate(g: Tensor, mode: str, threshold: float) -> Tensor:
    if mode == "soft":
        return g
    if mode == "ungated":
        return nx.Tensor(np.ones(g.shape))
    if mode == "hard":
        return nx.straight_through(hard_gate(g.data, threshold), g)
    raise ValueError(f"unknown gate mode {mode!r}; expected one of {GATE_MODES}")


def gated_fusion_layer(
    f_prev: Tensor,
    a: Tensor,
    p: GatedFusionLayerParams,
    gate_mode: str = "soft",
    threshold: float = 0.0,
) -> tuple[Tensor, tuple[np.ndarray, np.ndarray]]:
    """One fusion + refinement layer. Returns the next frame states and the
    (g_mha, g_ffn) values actually applied.
    """
    f_prev, a = nx.as_tensor(f_prev), nx.as_tensor(a)
    if f_prev.shape[-1] != a.shape[-1] or f_prev.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"fusion layer: frames {f_prev.shape} and audio {a.shape} disagree")
    g_mha, g_ffn = gating_scores(a, f_prev, p.gating)
    g_mha = _resolve_gate(g_mha, gate_mode, threshold)
    g_ffn = _resolve_gate(g_ffn, gate_mode, threshold)
    # broadcast one scalar per sample over tokens and channels
    gm = nx.reshape(g_mha, (*g_mha.shape, 1))
    gf = nx.reshape(g_ffn, (*g_ffn.shape, 1))

    z = gm * mha(p.ln_frames(f_prev), p.ln_audio(a), p.cross_mha) + f_prev
    z_bar = gf * ffn(p.ln_fused(z), p.ffn1) + z
    z_tilde = mhsa(p.ln_refine_attn(z_bar), p.self_mhsa) + z_bar
    f_next = ffn(p.ln_refine_ffn(z_tilde), p.ffn2) + z_tilde
    return f_next, (g_mha.data[..., 0].copy(), g_ffn.data[..., 0].copy())


def gated_fusion_forward(
    f: Tensor,
    a: Tensor,
    layers: list[GatedFusionLayerParams],
    gate_mode: str = "soft",
    threshold: float = 0.0,
) -> tuple[Tensor, GateTrace]:
    """Run the full stack; returns the video representation and the gate trace."""
    if not layers:
        raise ContractError("gated fusion needs at least one layer")
    trace = GateTrace()
    out = nx.as_tensor(f)
    for layer in layers:
        out, (g_mha, g_ffn) = gated_fusion_layer(out, a, layer, gate_mode, threshold)
        trace.append(g_mha, g_ffn)
    return out, trace
