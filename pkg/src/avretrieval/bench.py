"""Per-query retrieval latency: precomputed gallery vs a text-conditioned joint scorer.

Both paths share the same text-side cost ``t_ex``, one pass of a small query encoder. The precompute path fuses every
gallery video once up front and then scores a query against the stored
representations. The joint path has nothing to store: each query runs a
cross-attention pass from the text over every video's frames before scoring.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .alignment import AlignmentConfig
from .attention import FfnParams, LayerNormParams, MhaParams, ffn, mha, mhsa
from .model import AVModel, ModelDims
from .retrieval import PrecomputedGallery

PATHS = ("precompute", "joint")


@dataclass
class BenchResult:
    """Per-size medians in milliseconds, keyed by path then ``t_ex``/``t_sim``/``total``."""

    sizes: list[int]
    reps: int
    timings: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    videos_encoded: int = 0
    queries: int = 0

    def __post_init__(self):
        if self.reps < 5:
            raise ValueError("need at least 5 repetitions")

    def series(self, path: str, what: str) -> np.ndarray:
        return np.asarray(self.timings[path][what])

    def ratios(self) -> np.ndarray:
        return self.series("joint", "total") / self.series("precompute", "total")

    def sim_slope(self, path: str = "precompute") -> float:
        """Least-squares slope of log t_sim against log gallery size."""
        return float(np.polyfit(np.log(self.sizes), np.log(self.series(path, "t_sim")), 1)[0])

    def to_text(self) -> str:
        lines = [f"# reps={self.reps} queries={self.queries} videos_encoded={self.videos_encoded}",
                 "size path t_ex_ms t_sim_ms total_ms"]
        for i, v in enumerate(self.sizes):
            for path in PATHS:
                t = self.timings[path]
                lines.append(f"{v} {path} {t['t_ex'][i]:.4f} {t['t_sim'][i]:.4f} {t['total'][i]:.4f}")
        lines.append(f"precompute_sim_slope={self.sim_slope():.3f}")
        lines.append("joint_over_precompute=" + ",".join(f"{r:.2f}" for r in self.ratios()))
        return "\n".join(lines) + "\n"


class TextEncoder:
    """Stand-in for the query encoder: token lookup, one pre-norm transformer block,
    mean pooling and a projection to a unit vector."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, vocab: int = 1000):
        self.table = rng.normal(0, 1.0, (vocab, dim))
        self.ln1, self.ln2 = LayerNormParams.init(dim), LayerNormParams.init(dim)
        self.attn = MhaParams.init(dim, n_heads, rng, std=dim ** -0.5)
        self.ffn = FfnParams.init(dim, 4 * dim, rng, std=dim ** -0.5)
        self.proj = rng.normal(0, dim ** -0.5, (dim, dim))

    def __call__(self, token_ids: np.ndarray) -> np.ndarray:
        x = nx.Tensor(self.table[token_ids])
        x = x + mhsa(self.ln1(x), self.attn)
        x = x + ffn(self.ln2(x), self.ffn)
        t = x.data.mean(axis=0) @ self.proj
        return t / np.linalg.norm(t)


class JointScorer:
    """One text-conditioned cross-attention pass per (query, video) pair, then cosine."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        self.attn = MhaParams.init(dim, n_heads, rng, std=dim ** -0.5)

    def __call__(self, text: np.ndarray, frames: np.ndarray) -> np.ndarray:
        q = np.broadcast_to(text, (frames.shape[0], 1, text.shape[-1]))
        pooled = mha(nx.Tensor(q), nx.Tensor(frames), self.attn).data[:, 0]
        return pooled @ text / np.linalg.norm(pooled, axis=-1)


def _clock_ms(fn, *args, warm: bool = False):
    """Milliseconds for one call; ``warm`` runs an untimed call first to load the working set."""
    if warm:
        fn(*args)
    start = time.perf_counter_ns()
    out = fn(*args)
    return (time.perf_counter_ns() - start) / 1e6, out


def run_bench(dims: ModelDims, sizes, reps: int = 5, n_frames: int = 12, n_audio_tokens: int = 16,
              n_text_tokens: int = 32,
              cfg: AlignmentConfig = AlignmentConfig(), warmup: int = 2, seed: int = 0,
              block: int | None = None) -> BenchResult:
    """Sweep gallery sizes; ``block`` is the gallery chunk used by the precompute scorer."""
    sizes = [int(v) for v in sizes]
    if not sizes or min(sizes) < 1:
        raise ValueError("gallery sizes must be >= 1")
    rng = np.random.default_rng(seed)
    model = AVModel(dims, seed=seed)
    encode_text = TextEncoder(dims.dim, dims.n_heads, rng)
    joint = JointScorer(dims.dim, dims.n_heads, rng)
    result = BenchResult(sizes, reps, {p: {"t_ex": [], "t_sim": [], "total": []} for p in PATHS})
    galleries = []
    for v in sizes:
        frames = rng.normal(size=(v, n_frames, dims.dim))
        audio = rng.normal(size=(v, n_audio_tokens, dims.token_dim))
        fused = np.concatenate([model.encode(frames[i:i + 32], audio[i:i + 32])[0].data
                                for i in range(0, v, 32)])
        galleries.append((frames, PrecomputedGallery(fused, cfg)))
    queries = rng.integers(0, len(encode_text.table), (warmup + reps, n_text_tokens))
    texts = [encode_text(q) for q in queries]
    # Stages run in separate loops, and every timed call follows an untimed one on the
    # same inputs, so timings reflect a resident gallery. Within a stage every repetition
    # visits all sizes in turn, so a slow spell on the host spreads over the sweep
    # instead of landing on one size.
    t_ex = np.zeros((len(queries), len(sizes)))
    t_sim = {path: np.zeros_like(t_ex) for path in PATHS}
    for r, q in enumerate(queries):
        for i in range(len(sizes)):
            t_ex[r, i] = _clock_ms(encode_text, q, warm=True)[0]
    for r, text in enumerate(texts):
        for i, (_, gallery) in enumerate(galleries):
            t_sim["precompute"][r, i] = _clock_ms(gallery.score, text, block, warm=True)[0]
    for r, text in enumerate(texts):
        for i, (frames, _) in enumerate(galleries):
            t_sim["joint"][r, i] = _clock_ms(joint, text, frames, warm=True)[0]
    ex = t_ex[warmup:]
    for path in PATHS:
        sim = t_sim[path][warmup:]
        for key, vals in (("t_ex", ex), ("t_sim", sim), ("total", ex + sim)):
            result.timings[path][key] = [float(x) for x in np.median(vals, axis=0)]
    result.queries = reps * len(sizes)
    result.videos_encoded = model.videos_encoded
    return result
