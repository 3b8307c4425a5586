"""Global/local video-text similarity and the margin contrastive objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, ShapeError, Tensor

ALIGNMENT_MODES = ("global_only", "local_only", "global_local")
MARGIN_MODES = ("adaptive", "fixed", "none")


@dataclass(frozen=True)
class AlignmentConfig:
    alpha: float = 50.0
    mode: str = "global_local"
    lse_normalized: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.mode not in ALIGNMENT_MODES:
            raise ValueError(f"alignment mode must be one of {ALIGNMENT_MODES}")


@dataclass(frozen=True)
class MarginConfig:
    lam: float = 0.2
    delta: float = 0.1
    mode: str = "adaptive"
    fixed_value: float = 0.1

    def __post_init__(self):
        if self.lam < 0 or self.delta < 0 or self.fixed_value < 0:
            raise ValueError("margin parameters must be non-negative")
        if self.mode not in MARGIN_MODES:
            raise ValueError(f"margin mode must be one of {MARGIN_MODES}")


class Temperature:
    """Trainable temperature stored as ``log(tau)`` and clamped on read."""

    def __init__(self, init: float = 0.01, lo: float = 1e-3, hi: float = 0.5):
        if not lo <= init <= hi:
            raise ValueError(f"initial temperature {init} outside [{lo}, {hi}]")
        self.log_tau = nx.parameter(np.array(math.log(init)), name="log_tau")
        self.lo, self.hi = lo, hi

    def value(self) -> Tensor:
        return nx.clip(nx.exp(self.log_tau), self.lo, self.hi)

    def __float__(self) -> float:
        return float(self.value().data)


def _frame_scores(v: Tensor, t: Tensor) -> Tensor:
    """Cosine between every text and every frame: ``[B_t, B_v, N]``."""
    vn = nx.l2_normalize(v, axis=-1)
    tn = nx.l2_normalize(t, axis=-1)
    bv, n, d = vn.shape
    flat = nx.matmul(nx.reshape(vn, (bv * n, d)), nx.swapaxes(tn, 0, 1))
    # [B_v, N, B_t] -> [B_t, N, B_v] -> [B_t, B_v, N]
    return nx.swapaxes(nx.swapaxes(nx.reshape(flat, (bv, n, t.shape[0])), 0, 2), 1, 2)


def similarity_matrix(v, t, cfg: AlignmentConfig) -> Tensor:
    """Scores ``[B_t, B_v]`` of every text row against every video.

    ``v`` is ``[B_v, N, D]`` (video token states), ``t`` is ``[B_t, D]``.
    """
    v, t = nx.as_tensor(v), nx.as_tensor(t)
    if v.ndim != 3 or t.ndim != 2 or v.shape[-1] != t.shape[-1]:
        raise ShapeError(f"similarity: videos {v.shape} and texts {t.shape} are incompatible")
    s_g = s_l = None
    if cfg.mode != "local_only":
        vg = nx.l2_normalize(nx.mean(v, axis=1), axis=-1)
        s_g = nx.matmul(nx.l2_normalize(t, axis=-1), nx.swapaxes(vg, 0, 1))
    if cfg.mode != "global_only":
        s_l = nx.logsumexp(_frame_scores(v, t) * cfg.alpha, axis=-1)
        if cfg.lse_normalized:
            s_l = s_l * (1.0 / cfg.alpha)
    if s_l is None:
        return s_g
    if s_g is None:
        return s_l
    return (s_g + s_l) * 0.5


def _pair(v, t, cfg) -> Tensor:
    v, t = nx.as_tensor(v), nx.as_tensor(t)
    if v.ndim != 2 or t.ndim != 1:
        raise ShapeError(f"expected v [N, D] and t [D], got {v.shape} and {t.shape}")
    s = similarity_matrix(nx.reshape(v, (1, *v.shape)), nx.reshape(t, (1, t.shape[0])), cfg)
    return nx.reshape(s, ())


def global_similarity(v, t) -> Tensor:
    """Cosine between the mean frame state and the text."""
    return _pair(v, t, AlignmentConfig(mode="global_only"))


def local_similarity(v, t, cfg: AlignmentConfig = AlignmentConfig()) -> Tensor:
    return _pair(v, t, AlignmentConfig(cfg.alpha, "local_only", cfg.lse_normalized))


def combined_similarity(v, t, cfg: AlignmentConfig = AlignmentConfig()) -> Tensor:
    return _pair(v, t, cfg)


def _cosine_matrix(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ContractError("zero-norm embedding in margin computation")
    xn = x / norms
    return xn @ xn.T


def adaptive_margin_matrix(frames, texts, cfg: MarginConfig = MarginConfig()) -> np.ndarray:
    """Per-negative-pair margins ``[B, B]`` from pre-fusion frames and texts.

    Inputs are treated as constants (no gradient path). The diagonal is zero.
    """
    frames = np.asarray(getattr(frames, "data", frames), dtype=np.float64)
    texts = np.asarray(getattr(texts, "data", texts), dtype=np.float64)
    if frames.ndim != 3 or texts.ndim != 2 or frames.shape[0] != texts.shape[0]:
        raise ShapeError(f"margins: frames {frames.shape} / texts {texts.shape}")
    b = frames.shape[0]
    if cfg.mode == "none":
        return np.zeros((b, b))
    if cfg.mode == "fixed":
        m = np.full((b, b), cfg.fixed_value)
    else:
        c_v = _cosine_matrix(frames.mean(axis=1))
        c_t = _cosine_matrix(texts)
        m = np.minimum(cfg.lam * (1.0 - (c_v + c_t) / 2.0), cfg.delta)
    np.fill_diagonal(m, 0.0)
    return m


def margin_contrastive_loss(sim: Tensor, margins: np.ndarray, tau) -> Tensor:
    """Symmetric contrastive loss with additive negative-pair margins (summed over the batch).

    ``sim[i, j]`` scores pair (i, j); positives sit on the diagonal. ``tau`` may be a
    float, a tensor, or a :class:`Temperature`.
    """
    sim = nx.as_tensor(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sim.shape}")
    margins = np.asarray(margins, dtype=np.float64)
    if margins.shape != sim.shape:
        raise ShapeError(f"margin matrix {margins.shape} does not match {sim.shape}")
    margins = margins.copy()
    np.fill_diagonal(margins, 0.0)
    if isinstance(tau, Temperature):
        tau = tau.value()
    logits = (sim + margins) / tau
    b = sim.shape[0]
    eye = np.eye(b)
    positives = nx.sum(logits * eye)
    row = nx.sum(nx.logsumexp(logits, axis=1))
    col = nx.sum(nx.logsumexp(logits, axis=0))
    return row + col - positives * 2.0
