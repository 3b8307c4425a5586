import struct

import numpy as np
import pytest

from avretrieval.data_io import (CheckpointError, EmbeddingBundle, FormatError, SyntheticDatasetSpec,
                                 generate_synthetic, load_bundles, load_checkpoint, read_checkpoint,
                                 save_bundles, save_checkpoint, stack_bundles)
from avretrieval.model import AVModel, ModelDims
from avretrieval.resampler import RawAudioTokens

SMALL = ModelDims(dim=8, n_layers=2, n_blocks=1, n_queries=2, n_heads=2)


def small_spec(**kw):
    base = dict(pair_count=10, n_frames=3, n_audio_tokens=5, dim=8, latent_dim=4)
    base.update(kw)
    return SyntheticDatasetSpec(**base)


def assert_same(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.id == y.id and x.audio_raw.present == y.audio_raw.present
        for u, v in ((x.frames, y.frames), (x.audio_raw.tokens, y.audio_raw.tokens), (x.text, y.text)):
            np.testing.assert_array_equal(u.astype(np.float32), v)


class TestSynthetic:
    def test_noiseless_text_matches_frames(self):
        for b in generate_synthetic(small_spec(audio_informative_fraction=1.0, noise_scale=0.0)):
            pooled = b.frames.mean(axis=0)
            assert pooled @ b.text / np.linalg.norm(pooled) == pytest.approx(1.0, abs=1e-15)

    def test_deterministic(self):
        a, b = generate_synthetic(small_spec(seed=3)), generate_synthetic(small_spec(seed=3))
        for x, y in zip(a, b):
            assert np.array_equal(x.frames, y.frames) and np.array_equal(x.audio_raw.tokens, y.audio_raw.tokens)
            assert x.kind == y.kind

    def test_seeds_independent(self):
        spec = dict(pair_count=200, n_frames=1, dim=50, latent_dim=0)
        a = np.concatenate([b.frames.ravel() for b in generate_synthetic(small_spec(seed=1, **spec))])
        b = np.concatenate([b.frames.ravel() for b in generate_synthetic(small_spec(seed=2, **spec))])
        assert a.size == 10_000
        # null sd of the sample correlation is 1/sqrt(10000) = 0.01
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.05

    def test_all_missing(self):
        for b in generate_synthetic(small_spec(audio_missing_fraction=1.0)):
            assert not b.audio_raw.present and not np.any(b.audio_raw.tokens) and b.kind == "missing"

    def test_kinds_follow_fraction(self):
        ds = generate_synthetic(small_spec(pair_count=400, audio_informative_fraction=0.25))
        frac = np.mean([b.kind == "informative" for b in ds])
        assert 0.18 < frac < 0.32

    def test_informative_audio_carries_text(self):
        ds = generate_synthetic(small_spec(pair_count=200))
        for b in ds:
            c = b.audio_raw.tokens.mean(axis=0) @ b.text / np.linalg.norm(b.audio_raw.tokens.mean(axis=0))
            if b.kind == "informative":
                assert c > 0.9

    @pytest.mark.parametrize("kw", [dict(audio_informative_fraction=1.5), dict(audio_missing_fraction=-0.1),
                                    dict(noise_scale=-1.0), dict(latent_dim=9), dict(pair_count=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small_spec(**kw)


class TestBundles:
    def test_round_trip(self, tmp_path):
        ds = generate_synthetic(small_spec(audio_missing_fraction=0.3))
        save_bundles(tmp_path / "d.avge", ds)
        assert_same(ds, load_bundles(tmp_path / "d.avge"))

    def test_empty(self, tmp_path):
        save_bundles(tmp_path / "e.avge", [])
        assert (tmp_path / "e.avge").read_bytes() == b"AVGE" + struct.pack("<I", 1)
        assert load_bundles(tmp_path / "e.avge") == []

    def test_unicode_id(self, tmp_path):
        b = EmbeddingBundle(np.ones((1, 2)), RawAudioTokens(np.ones((1, 2))), np.ones(2), "clip-é")
        save_bundles(tmp_path / "u.avge", [b])
        assert load_bundles(tmp_path / "u.avge")[0].id == "clip-é"

    def test_layout(self, tmp_path):
        b = EmbeddingBundle(np.array([[1.0, 2.0]]), RawAudioTokens(np.array([[3.0, 4.0]])), np.array([5.0, 6.0]), "a")
        save_bundles(tmp_path / "l.avge", [b])
        expected = (b"AVGE" + struct.pack("<II", 1, 1) + b"a" + struct.pack("<III", 1, 1, 2)
                    + struct.pack("<6f", 1, 2, 3, 4, 5, 6) + b"\x01")
        assert (tmp_path / "l.avge").read_bytes() == expected

    def test_truncated(self, tmp_path):
        save_bundles(tmp_path / "t.avge", generate_synthetic(small_spec()))
        raw = (tmp_path / "t.avge").read_bytes()
        (tmp_path / "t.avge").write_bytes(raw[:-3])
        with pytest.raises(FormatError) as exc:
            load_bundles(tmp_path / "t.avge")
        assert exc.value.offset > 8

    def test_bad_magic_and_version(self, tmp_path):
        (tmp_path / "m").write_bytes(b"XXXX" + struct.pack("<I", 1))
        with pytest.raises(FormatError, match="magic"):
            load_bundles(tmp_path / "m")
        (tmp_path / "v").write_bytes(b"AVGE" + struct.pack("<I", 2))
        with pytest.raises(FormatError, match="version"):
            load_bundles(tmp_path / "v")

    def test_fuzz_never_crashes(self, tmp_path):
        save_bundles(tmp_path / "f.avge", generate_synthetic(small_spec(pair_count=3)))
        raw = bytearray((tmp_path / "f.avge").read_bytes())
        rng = np.random.default_rng(0)
        for _ in range(1000):
            mutated = bytearray(raw)
            for pos in rng.integers(0, len(raw), int(rng.integers(1, 4))):
                mutated[pos] = int(rng.integers(0, 256))
            if rng.random() < 0.3:
                mutated = mutated[:int(rng.integers(0, len(mutated)))]
            (tmp_path / "x").write_bytes(bytes(mutated))
            try:
                load_bundles(tmp_path / "x")
            except FormatError:
                pass

    def test_stack(self):
        frames, audio, texts = stack_bundles(generate_synthetic(small_spec()))
        assert frames.shape == (10, 3, 8) and audio.shape == (10, 5, 8) and texts.shape == (10, 8)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = AVModel(SMALL, seed=1)
        for _, p in model.named_parameters():
            p.data[...] = np.random.default_rng(2).normal(size=p.shape)
        save_checkpoint(tmp_path / "c.ckpt", model)
        loaded = load_checkpoint(tmp_path / "c.ckpt")
        assert loaded.dims == SMALL
        for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
            assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()

    def test_mismatched_layers(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", AVModel(SMALL))
        bigger = AVModel(ModelDims(dim=8, n_layers=3, n_blocks=1, n_queries=2, n_heads=2))
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(tmp_path / "c.ckpt", bigger)
        assert exc.value.missing and all(k.startswith("fusion.2.") for k in exc.value.missing)
        assert "fusion.2." in str(exc.value)

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", AVModel(SMALL))
        other = AVModel(ModelDims(dim=8, n_layers=2, n_blocks=1, n_queries=3, n_heads=2))
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(tmp_path / "c.ckpt", other)
        assert any(m.startswith("resampler.queries") for m in exc.value.mismatched)

    def test_version_bump(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", AVModel(SMALL))
        raw = bytearray((tmp_path / "c.ckpt").read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        (tmp_path / "c.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="unsupported checkpoint version 2"):
            read_checkpoint(tmp_path / "c.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", AVModel(SMALL))
        raw = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "c.ckpt").write_bytes(raw[:len(raw) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(tmp_path / "c.ckpt")


def test_non_finite_payload(tmp_path):
    b = EmbeddingBundle(np.ones((1, 2)), RawAudioTokens(np.ones((1, 2))), np.ones(2), "a")
    save_bundles(tmp_path / "n.avge", [b])
    raw = bytearray((tmp_path / "n.avge").read_bytes())
    raw[25:29] = struct.pack("<f", np.nan)
    (tmp_path / "n.avge").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="non-finite") as exc:
        load_bundles(tmp_path / "n.avge")
    assert exc.value.offset == 25
