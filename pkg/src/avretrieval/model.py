"""Parameter container tying resampler, fusion stack and temperature together."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .alignment import Temperature
from .attention import ParamGroup
from .fusion import GatedFusionLayerParams, GateTrace, gated_fusion_forward
from .resampler import ResamplerParams, resample_tokens


@dataclass(frozen=True)
class ModelDims:
    dim: int = 512
    n_layers: int = 4
    n_blocks: int = 4
    n_queries: int = 12
    n_heads: int = 8
    hidden: int = 0
    token_dim: int = 0

    def __post_init__(self):
        for name in ("dim", "n_layers", "n_blocks", "n_queries", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        # 0 means "derive from dim"
        if self.hidden == 0:
            object.__setattr__(self, "hidden", 4 * self.dim)
        if self.token_dim == 0:
            object.__setattr__(self, "token_dim", self.dim)

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(asdict(self).values())


class AVModel(ParamGroup):
    """All trainable state. ``videos_encoded`` counts per-video fusion passes."""

    def __init__(self, dims: ModelDims, seed: int = 0, tau_init: float = 0.01):
        rng = np.random.default_rng(seed)
        self.dims = dims
        self.resampler = ResamplerParams.init(
            dims.dim, dims.n_queries, dims.n_blocks, dims.n_heads, rng,
            token_dim=dims.token_dim, hidden=dims.hidden,
        )
        self.fusion = [
            GatedFusionLayerParams.init(dims.dim, dims.n_heads, rng, hidden=dims.hidden)
            for _ in range(dims.n_layers)
        ]
        self.temperature = Temperature(tau_init)
        self.videos_encoded = 0

    def named_parameters(self, prefix: str = ""):
        yield from self.resampler.named_parameters(f"{prefix}resampler.")
        for i, layer in enumerate(self.fusion):
            yield from layer.named_parameters(f"{prefix}fusion.{i}.")
        yield f"{prefix}log_tau", self.temperature.log_tau

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def encode(self, frames, audio_tokens, gate_mode: str = "soft",
               threshold: float = 0.0) -> tuple[nx.Tensor, GateTrace]:
        """Fuse ``frames [B, N, D]`` with raw ``audio_tokens [B, N_a, D_ast]``."""
        frames = nx.as_tensor(frames)
        self.videos_encoded += frames.shape[0] if frames.ndim == 3 else 1
        audio = resample_tokens(nx.as_tensor(audio_tokens), self.resampler)
        return gated_fusion_forward(frames, audio, self.fusion, gate_mode, threshold)
