"""Embedding bundles, synthetic data, and the on-disk formats.

Bundle file (little-endian)::

    b"AVGE" | u32 version
    repeated until EOF:
        u32 id_len | id (UTF-8) | u32 N | u32 N_a | u32 D
        f32[N*D] frames | f32[N_a*D] audio | f32[D] text | u8 audio_present

Checkpoint file (little-endian)::

    b"AVCK" | u32 version | u32[7] dims (D, L, K, M, H, hidden, token_dim) | u32 count
    repeated count times:
        u32 name_len | name (UTF-8) | u32 ndim | u32[ndim] shape | f64[prod(shape)] data
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import AVModel, ModelDims
from .resampler import RawAudioTokens

BUNDLE_MAGIC = b"AVGE"
BUNDLE_VERSION = 1
CKPT_MAGIC = b"AVCK"
CKPT_VERSION = 1

AUDIO_KINDS = ("informative", "misleading", "missing")


class FormatError(ValueError):
    """Malformed bundle file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(ValueError):
    def __init__(self, message: str, missing=(), unexpected=(), mismatched=()):
        parts = [message]
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if unexpected:
            parts.append("unexpected: " + ", ".join(unexpected))
        if mismatched:
            parts.append("shape mismatch: " + ", ".join(mismatched))
        super().__init__("; ".join(parts))
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        self.mismatched = list(mismatched)


@dataclass
class EmbeddingBundle:
    """One video-text pair. ``kind`` records how the audio was synthesised and is not persisted."""

    frames: np.ndarray
    audio_raw: RawAudioTokens
    text: np.ndarray
    id: str
    kind: str = field(default="", compare=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be [N>=1, D], got {self.frames.shape}")
        if self.text.shape != (self.frames.shape[1],):
            raise ValueError(f"text shape {self.text.shape} does not match frame width {self.frames.shape[1]}")


def stack_bundles(bundles: list[EmbeddingBundle]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(frames [B,N,D], audio [B,N_a,D_ast], texts [B,D])``."""
    if not bundles:
        raise ValueError("no bundles")
    try:
        frames = np.stack([b.frames for b in bundles])
        audio = np.stack([b.audio_raw.tokens for b in bundles])
    except ValueError as exc:
        raise ValueError("bundles have inconsistent shapes") from exc
    texts = np.stack([b.text for b in bundles])
    return frames, audio, texts


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    pair_count: int = 64
    n_frames: int = 4
    n_queries: int = 4
    n_audio_tokens: int = 8
    dim: int = 64
    audio_informative_fraction: float = 0.5
    audio_missing_fraction: float = 0.0
    noise_scale: float = 0.1
    frame_distractor: float = 50.0
    latent_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("audio_informative_fraction", "audio_missing_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.noise_scale < 0 or self.frame_distractor < 0:
            raise ValueError("noise scales must be non-negative")
        if min(self.pair_count, self.n_frames, self.n_audio_tokens, self.dim) < 1:
            raise ValueError("counts and dims must be positive")
        if not 0 <= self.latent_dim <= self.dim:
            raise ValueError("latent_dim must be in [0, dim]")


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_synthetic(spec: SyntheticDatasetSpec) -> list[EmbeddingBundle]:
    """Draw pairs around random unit concepts.

    Concepts live in a random ``latent_dim``-dimensional subspace (the full space when
    0). Texts and frames are noisy copies of the concept. Informative audio carries the
    concept while the frames of that pair are pushed off it by a shared distractor
    concept of size ``noise_scale * frame_distractor``; misleading audio carries an
    unrelated concept. Missing audio is the zero matrix.
    """
    rng = np.random.default_rng(spec.seed)
    d, n, na = spec.dim, spec.n_frames, spec.n_audio_tokens
    sd = spec.noise_scale / np.sqrt(d)
    k = spec.latent_dim or d
    basis = np.eye(d) if k == d else np.linalg.qr(rng.standard_normal((d, k)))[0]

    def draw_concept():
        return _unit(basis @ rng.standard_normal(k))

    out = []
    for i in range(spec.pair_count):
        concept = draw_concept()
        text = _unit(concept + sd * rng.standard_normal(d))
        frames = concept + sd * rng.standard_normal((n, d))
        if rng.random() < spec.audio_missing_fraction:
            kind = "missing"
        elif rng.random() < spec.audio_informative_fraction:
            kind = "informative"
        else:
            kind = "misleading"
        if kind == "missing":
            audio = RawAudioTokens(np.zeros((na, d)), present=False)
        else:
            if kind == "informative":
                source = concept
                frames = frames + spec.noise_scale * spec.frame_distractor * draw_concept()
            else:
                source = draw_concept()
            audio = RawAudioTokens(source + sd * rng.standard_normal((na, d)), present=True)
        out.append(EmbeddingBundle(frames, audio, text, f"pair{i:05d}", kind))
    return out


# ---------------------------------------------------------------------------
# Bundle files
# ---------------------------------------------------------------------------


def save_bundles(path, bundles: list[EmbeddingBundle]) -> None:
    chunks = [BUNDLE_MAGIC, struct.pack("<I", BUNDLE_VERSION)]
    for b in bundles:
        n, d = b.frames.shape
        na, da = b.audio_raw.tokens.shape
        if da != d:
            raise ValueError(f"bundle {b.id}: audio width {da} != frame width {d}; cannot store")
        ident = b.id.encode("utf-8")
        chunks.append(struct.pack("<I", len(ident)))
        chunks.append(ident)
        chunks.append(struct.pack("<III", n, na, d))
        for arr in (b.frames, b.audio_raw.tokens, b.text):
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        chunks.append(bytes([1 if b.audio_raw.present else 0]))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def floats(self, count: int, what: str, dtype="<f4") -> np.ndarray:
        width = np.dtype(dtype).itemsize
        start = self.pos
        raw = np.frombuffer(self.take(count * width, what), dtype=dtype)
        if not np.all(np.isfinite(raw)):
            raise FormatError(f"non-finite value in {what}", start)
        return raw.astype(np.float64)

    def done(self) -> bool:
        return self.pos >= len(self.buf)


def load_bundles(path) -> list[EmbeddingBundle]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != BUNDLE_MAGIC:
        raise FormatError("bad magic, expected AVGE", 0)
    version = r.u32("version")
    if version != BUNDLE_VERSION:
        raise FormatError(f"unsupported bundle version {version}", 4)
    out = []
    while not r.done():
        start = r.pos
        ident_len = r.u32("id length")
        try:
            ident = r.take(ident_len, "id").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("id is not valid UTF-8", start + 4) from exc
        n, na, d = (r.u32(w) for w in ("N", "N_a", "D"))
        if n < 1 or d < 1:
            raise FormatError(f"invalid dims N={n} D={d}", start)
        frames = r.floats(n * d, "frames").reshape(n, d)
        audio = r.floats(na * d, "audio").reshape(na, d)
        text = r.floats(d, "text")
        flag_at = r.pos
        flag = r.take(1, "audio-present flag")[0]
        if flag not in (0, 1):
            raise FormatError(f"audio-present flag must be 0 or 1, got {flag}", flag_at)
        present = bool(flag)
        if not present and np.any(audio):
            raise FormatError("audio flagged absent but not zero", flag_at)
        out.append(EmbeddingBundle(frames, RawAudioTokens(audio, present), text, ident))
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: AVModel) -> None:
    entries = list(model.named_parameters())
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<7I", *model.dims.as_tuple()),
              struct.pack("<I", len(entries))]
    for name, tensor in entries:
        raw = name.encode("utf-8")
        shape = tensor.data.shape
        chunks.append(struct.pack(f"<I{len(raw)}sI{len(shape)}I", len(raw), raw, len(shape), *shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[ModelDims, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes())
    try:
        if r.take(4, "magic") != CKPT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version = r.u32("version")
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        dims = ModelDims(*struct.unpack("<7I", r.take(28, "dims")))
        table = {}
        for _ in range(r.u32("entry count")):
            name = r.take(r.u32("name length"), "name").decode("utf-8")
            ndim = r.u32("ndim")
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
            count = int(np.prod(shape)) if shape else 1
            table[name] = r.floats(count, name, dtype="<f8").reshape(shape)
    except FormatError as exc:
        raise CheckpointError(str(exc)) from exc
    return dims, table


def load_checkpoint(path, model: AVModel | None = None) -> AVModel:
    """Load into ``model`` (validated against it) or into a freshly built one."""
    dims, table = read_checkpoint(path)
    if model is None:
        model = AVModel(dims)
    own = dict(model.named_parameters())
    missing = [k for k in own if k not in table]
    unexpected = [k for k in table if k not in own]
    mismatched = [f"{k} {table[k].shape} vs {own[k].shape}" for k in own
                  if k in table and table[k].shape != own[k].shape]
    if missing or unexpected or mismatched or dims != model.dims:
        msg = "checkpoint does not match model"
        if dims != model.dims:
            msg += f" (file dims {dims.as_tuple()} vs model {model.dims.as_tuple()})"
        raise CheckpointError(msg, missing, unexpected, mismatched)
    for k, tensor in own.items():
        tensor.data[...] = table[k]
    return model
