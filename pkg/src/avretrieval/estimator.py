"""scikit-learn style front end: ``fit`` trains, ``transform`` precomputes video representations."""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import numerics as nx
from .alignment import (ALIGNMENT_MODES, MARGIN_MODES, AlignmentConfig, MarginConfig,
                        adaptive_margin_matrix, margin_contrastive_loss, similarity_matrix)
from .data_io import EmbeddingBundle, stack_bundles
from .fusion import GATE_MODES, GateTrace
from .model import AVModel, ModelDims
from .retrieval import PrecomputedGallery, RetrievalReport, dsl_postprocess, recall_at_k

logger = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


def check_bundles(X, dim: int | None = None) -> list[EmbeddingBundle]:
    """Validate a sequence of bundles: non-empty, uniform shapes, optional width check."""
    if isinstance(X, EmbeddingBundle):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("expected at least one EmbeddingBundle")
    for b in X:
        if not isinstance(b, EmbeddingBundle):
            raise TypeError(f"expected EmbeddingBundle, got {type(b).__name__}")
    ref = X[0]
    for b in X[1:]:
        if b.frames.shape != ref.frames.shape or b.audio_raw.tokens.shape != ref.audio_raw.tokens.shape:
            raise ValueError(f"bundle {b.id} shapes differ from {ref.id}")
    if dim is not None and ref.frames.shape[1] != dim:
        raise ValueError(f"bundles have width {ref.frames.shape[1]}, model expects {dim}")
    return X


class AVRetriever(TransformerMixin, BaseEstimator):
    """Gated audio-visual fusion retriever trained with a margin contrastive loss.

    ``fit`` takes a list of :class:`EmbeddingBundle`; ``transform`` returns the fused
    video representations ``[B, N, D]`` that the gallery is scored against.
    """

    def __init__(
        self,
        dim: int = 512,
        n_layers: int = 4,
        n_blocks: int = 4,
        n_queries: int = 12,
        n_heads: int = 8,
        hidden: int = 0,
        alpha: float = 50.0,
        alignment_mode: str = "global_local",
        lse_normalized: bool = True,
        margin_mode: str = "adaptive",
        lam: float = 0.2,
        delta: float = 0.1,
        fixed_margin: float = 0.1,
        tau_init: float = 0.01,
        gate_mode: str = "soft",
        gate_threshold: float = 0.0,
        optimizer: str = "adam",
        learning_rate: float = 1e-4,
        epochs: int = 5,
        batch_size: int = 128,
        seed: int = 0,
    ):
        self.dim = dim
        self.n_layers = n_layers
        self.n_blocks = n_blocks
        self.n_queries = n_queries
        self.n_heads = n_heads
        self.hidden = hidden
        self.alpha = alpha
        self.alignment_mode = alignment_mode
        self.lse_normalized = lse_normalized
        self.margin_mode = margin_mode
        self.lam = lam
        self.delta = delta
        self.fixed_margin = fixed_margin
        self.tau_init = tau_init
        self.gate_mode = gate_mode
        self.gate_threshold = gate_threshold
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    # -- configuration -----------------------------------------------------

    def _validate_params(self) -> None:
        if self.alignment_mode not in ALIGNMENT_MODES:
            raise ValueError(f"alignment_mode must be one of {ALIGNMENT_MODES}")
        if self.margin_mode not in MARGIN_MODES:
            raise ValueError(f"margin_mode must be one of {MARGIN_MODES}")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not -1.0 < self.gate_threshold < 1.0:
            raise ValueError("gate_threshold must lie in (-1, 1)")

    @property
    def alignment_config(self) -> AlignmentConfig:
        return AlignmentConfig(self.alpha, self.alignment_mode, self.lse_normalized)

    @property
    def margin_config(self) -> MarginConfig:
        return MarginConfig(self.lam, self.delta, self.margin_mode, self.fixed_margin)

    def model_dims(self, token_dim: int = 0) -> ModelDims:
        return ModelDims(self.dim, self.n_layers, self.n_blocks, self.n_queries, self.n_heads,
                         self.hidden, token_dim)

    @classmethod
    def from_model(cls, model: AVModel, **params) -> AVRetriever:
        """Wrap an already trained (e.g. checkpoint-loaded) model; dims come from the model."""
        d = model.dims
        est = cls(dim=d.dim, n_layers=d.n_layers, n_blocks=d.n_blocks, n_queries=d.n_queries,
                  n_heads=d.n_heads, hidden=d.hidden, **params)
        est._validate_params()
        est.model_ = model
        est.history_ = []
        return est

    def _check_fitted(self) -> AVModel:
        model = getattr(self, "model_", None)
        if model is None:
            raise NotFittedError("AVRetriever is not fitted yet; call fit or load a checkpoint")
        return model

    # -- training ----------------------------------------------------------

    def init_model(self, token_dim: int = 0) -> AVModel:
        self._validate_params()
        self.model_ = AVModel(self.model_dims(token_dim), seed=self.seed, tau_init=self.tau_init)
        self.history_ = []
        return self.model_

    def fit(self, X: Sequence[EmbeddingBundle], y=None,
            callback: Callable[[dict], None] | None = None) -> AVRetriever:
        X = check_bundles(X, self.dim)
        self.init_model(X[0].audio_raw.tokens.shape[1])
        frames, audio, texts = stack_bundles(X)
        state = nx.OptimizerState(self.learning_rate, self.optimizer)
        rng = np.random.default_rng(self.seed)
        for epoch in range(self.epochs):
            record = self._run_epoch(frames, audio, texts, state, rng)
            record["epoch"] = epoch
            self.history_.append(record)
            logger.info("epoch=%d loss=%.6f r1=%.2f", epoch, record["loss"], record["r1"])
            if callback is not None:
                callback(record)
        return self

    def _run_epoch(self, frames, audio, texts, state, rng) -> dict:
        params = self.trainable_parameters()
        order = rng.permutation(len(frames))
        losses, hits = [], []
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            loss, sim = self.batch_loss(frames[idx], audio[idx], texts[idx])
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss at step {state.step_count}")
            nx.zero_grad(params)
            nx.backward(loss)
            nx.optimizer_step(params, state)
            losses.append(float(loss.data))
            hits.extend(sim.data.argmax(axis=1) == np.arange(len(idx)))
        return {"loss": float(np.mean(losses)), "r1": 100.0 * float(np.mean(hits))}

    def trainable_parameters(self) -> list[nx.Tensor]:
        # constant gates leave the gating MLPs outside the graph
        named = self._check_fitted().named_parameters()
        if self.gate_mode == "ungated":
            return [p for k, p in named if ".gating." not in k]
        return [p for _, p in named]

    def batch_loss(self, frames, audio, texts) -> tuple[nx.Tensor, nx.Tensor]:
        """Loss on one batch plus the ``[B, B]`` text-by-video similarity matrix."""
        model = self.model_
        v, _ = model.encode(frames, audio, self.gate_mode, self.gate_threshold)
        sim = similarity_matrix(v, texts, self.alignment_config)
        margins = adaptive_margin_matrix(frames, texts, self.margin_config)
        return margin_contrastive_loss(sim, margins, model.temperature), sim

    # -- inference ---------------------------------------------------------

    def _encode(self, X, batch: int = 256) -> tuple[np.ndarray, GateTrace]:
        model = self._check_fitted()
        X = check_bundles(X, self.dim)
        frames, audio, _ = stack_bundles(X)
        if audio.shape[-1] != model.dims.token_dim:
            raise ValueError(f"audio tokens have width {audio.shape[-1]}, model expects {model.dims.token_dim}")
        outs, trace = [], GateTrace()
        for start in range(0, len(frames), batch):
            v, tr = model.encode(frames[start:start + batch], audio[start:start + batch],
                                 self.gate_mode, self.gate_threshold)
            outs.append(v.data)
            if not trace.mha:
                trace = tr
            else:
                for layer in range(len(tr)):
                    trace.mha[layer] = np.concatenate([trace.mha[layer], tr.mha[layer]])
                    trace.ffn[layer] = np.concatenate([trace.ffn[layer], tr.ffn[layer]])
        return np.concatenate(outs), trace

    def transform(self, X) -> np.ndarray:
        """Fused video representations ``[B, N, D]``."""
        return self._encode(X)[0]

    def gate_trace(self, X) -> GateTrace:
        return self._encode(X)[1]

    def similarity(self, X, gallery: np.ndarray | None = None) -> np.ndarray:
        """Text-by-video scores ``[B, G]``; ``gallery`` defaults to ``transform(X)``."""
        X = check_bundles(X, self.dim)
        if gallery is None:
            gallery = self.transform(X)
        texts = np.stack([b.text for b in X])
        return PrecomputedGallery(gallery, self.alignment_config).score(texts)

    def predict(self, X) -> np.ndarray:
        """Index of the best-scoring video in ``X`` for each text in ``X``."""
        return self.similarity(X).argmax(axis=1)

    def evaluate(self, X, dsl: bool = False, beta: float = 100.0) -> tuple[RetrievalReport, RetrievalReport]:
        """Text-to-video and video-to-text reports with pair ``i`` as ground truth."""
        scores = self.similarity(X)
        t2v = scores
        v2t = scores.T
        if dsl:
            # normalise over the competing queries of each direction
            t2v = dsl_postprocess(scores, beta)
            v2t = dsl_postprocess(scores.T, beta)
        return (recall_at_k(t2v), _with_direction(recall_at_k(v2t), "video_to_text"))

    def score(self, X, y=None) -> float:
        """Text-to-video R@1 as a fraction."""
        return self.evaluate(X)[0].r_at[1] / 100.0


def _with_direction(report: RetrievalReport, direction: str) -> RetrievalReport:
    report.direction = direction
    return report
