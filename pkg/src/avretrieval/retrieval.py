"""Gallery scoring, ranking metrics and dual-softmax post-processing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alignment import AlignmentConfig
from .numerics import ContractError, ShapeError

DIRECTIONS = ("text_to_video", "video_to_text")


@dataclass
class SimilarityMatrix:
    scores: np.ndarray
    direction: str = "text_to_video"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if not np.all(np.isfinite(self.scores)):
            raise ContractError("similarity matrix contains non-finite entries")

    def transposed(self) -> SimilarityMatrix:
        other = DIRECTIONS[1 - DIRECTIONS.index(self.direction)]
        return SimilarityMatrix(self.scores.T.copy(), other)


class PrecomputedGallery:
    """Video representations normalised once so each query costs one pass over the gallery."""

    def __init__(self, videos: np.ndarray, cfg: AlignmentConfig = AlignmentConfig(), dtype=np.float64):
        videos = np.asarray(videos, dtype=dtype)
        if videos.ndim != 3:
            raise ShapeError(f"gallery must be [G, N, D], got {videos.shape}")
        if videos.shape[0] == 0:
            raise ContractError("empty gallery")
        self.cfg = cfg
        self.dtype = dtype
        pooled = videos.mean(axis=1)
        self.pooled = pooled / _safe_norm(pooled)
        g, n, d = videos.shape
        frames = videos / _safe_norm(videos)
        self.frames = frames.reshape(g * n, d)
        self.shape = (g, n, d)

    def __len__(self) -> int:
        return self.shape[0]

    def score(self, texts: np.ndarray, block: int | None = None) -> np.ndarray:
        """Scores ``[Q, G]`` for text embeddings ``[Q, D]`` (or a single ``[D]`` row).

        ``block`` streams the gallery in chunks of that many videos, bounding the
        ``[Q, block, N]`` intermediate.
        """
        texts = np.atleast_2d(np.asarray(texts, dtype=self.dtype))
        t = texts / _safe_norm(texts)
        g = self.shape[0]
        if block is None or block >= g:
            return self._score_range(t, 0, g)
        if block < 1:
            raise ValueError("block must be >= 1")
        return np.concatenate([self._score_range(t, lo, min(lo + block, g)) for lo in range(0, g, block)],
                              axis=1)

    def _score_range(self, t: np.ndarray, lo: int, hi: int) -> np.ndarray:
        cfg = self.cfg
        n = self.shape[1]
        s_g = s_l = None
        if cfg.mode != "local_only":
            s_g = t @ self.pooled[lo:hi].T
        if cfg.mode != "global_only":
            z = (t @ self.frames[lo * n:hi * n].T).reshape(len(t), hi - lo, n) * cfg.alpha
            top = z.max(axis=-1)
            s_l = top + np.log(np.exp(z - top[..., None]).sum(axis=-1))
            if cfg.lse_normalized:
                s_l = s_l / cfg.alpha
        if s_l is None:
            return s_g
        if s_g is None:
            return s_l
        return (s_g + s_l) / 2


def _safe_norm(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ContractError("zero-norm representation")
    return norms


def score_gallery(queries: np.ndarray, gallery: np.ndarray, cfg: AlignmentConfig = AlignmentConfig(),
                  direction: str = "text_to_video") -> SimilarityMatrix:
    """Score text ``queries [Q, D]`` against fused videos ``gallery [G, N, D]``."""
    return SimilarityMatrix(PrecomputedGallery(gallery, cfg).score(queries), direction)


@dataclass
class RetrievalReport:
    r_at: dict[int, float]
    median_rank: float
    mean_rank: float
    direction: str = "text_to_video"
    ranks: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def rsum_contrib(self) -> float:
        return float(sum(self.r_at.values()))

    def to_dict(self) -> dict[str, float]:
        prefix = "t2v" if self.direction == "text_to_video" else "v2t"
        out = {f"{prefix}_r{k}": v for k, v in sorted(self.r_at.items())}
        out[f"{prefix}_medr"] = self.median_rank
        out[f"{prefix}_meanr"] = self.mean_rank
        return out


def truth_ranks(scores: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """1-based rank of each query's true item; equal scores rank lower gallery indices first."""
    scores = np.asarray(scores)
    truth = np.asarray(truth, dtype=np.int64)
    q, g = scores.shape
    if truth.shape != (q,):
        raise ShapeError(f"need one truth index per query, got {truth.shape}")
    if np.any(truth < 0) or np.any(truth >= g):
        raise ContractError(f"ground-truth index out of range for gallery of {g}")
    target = scores[np.arange(q), truth][:, None]
    above = (scores > target).sum(axis=1)
    tied_before = ((scores == target) & (np.arange(g)[None, :] < truth[:, None])).sum(axis=1)
    return 1 + above + tied_before


def recall_at_k(sim, truth=None, ks=(1, 5, 10)) -> RetrievalReport:
    """R@K (percent), median and mean rank of the true item.

    ``truth`` defaults to the diagonal (query ``i`` matches gallery item ``i``).
    """
    if isinstance(sim, SimilarityMatrix):
        scores, direction = sim.scores, sim.direction
    else:
        scores, direction = np.asarray(sim), "text_to_video"
    if truth is None:
        truth = np.arange(scores.shape[0])
    ranks = truth_ranks(scores, truth)
    r_at = {int(k): float(100.0 * np.mean(ranks <= k)) for k in ks}
    return RetrievalReport(r_at, float(np.median(ranks)), float(np.mean(ranks)), direction, ranks)


def rsum(*reports: RetrievalReport) -> float:
    return float(sum(r.rsum_contrib for r in reports))


def dsl_postprocess(scores: np.ndarray, beta: float = 100.0) -> np.ndarray:
    """Dual-softmax reweighting: each score is multiplied by a softmax over the query axis."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    z = beta * scores
    z = z - z.max(axis=0, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=0, keepdims=True)
    return scores * w


def format_report(*reports: RetrievalReport) -> str:
    """Flat ``name=value`` lines, one metric per line, with a trailing rsum."""
    lines = []
    for r in reports:
        lines.extend(f"{k}={v:.4f}" for k, v in r.to_dict().items())
    lines.append(f"rsum={rsum(*reports):.4f}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line:
            key, _, value = line.partition("=")
            out[key] = float(value)
    return out
