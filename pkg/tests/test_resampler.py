import numpy as np
import pytest

from avretrieval import numerics as nx
from avretrieval.attention import ffn, mha, mhsa
from avretrieval.numerics import ShapeError, Tensor
from avretrieval.resampler import RawAudioTokens, ResamplerParams, missing_audio_embedding, resample


def small(rng, d=8, m=2, k=1, n=2, token_dim=None, std=0.3):
    return ResamplerParams.init(d, m, k, n, rng, token_dim=token_dim, std=std)


def test_manual_composition():
    rng = np.random.default_rng(0)
    p = small(rng)
    raw = RawAudioTokens(rng.normal(size=(5, 8)))
    blk = p.blocks[0]
    q = p.queries
    q = mhsa(blk.ln_self(q), blk.self_mhsa) + q
    q = mha(blk.ln_query(q), blk.ln_tokens(Tensor(raw.tokens)), blk.cross_mha) + q
    q = ffn(blk.ln_ffn(q), blk.ffn) + q
    np.testing.assert_allclose(resample(raw, p).data, q.data, atol=1e-13)


@pytest.mark.parametrize("n_tokens", [1, 3, 17])
def test_output_length_is_fixed(n_tokens):
    rng = np.random.default_rng(1)
    p = small(rng, m=3)
    assert resample(RawAudioTokens(rng.normal(size=(n_tokens, 8))), p).shape == (3, 8)


def test_default_dims_run():
    rng = np.random.default_rng(2)
    p = ResamplerParams.init(512, 12, 4, 8, rng)
    out = resample(RawAudioTokens(rng.normal(size=(30, 512))), p)
    assert out.shape == (12, 512) and np.all(np.isfinite(out.data))


def test_missing_audio():
    raw = missing_audio_embedding(8, 5)
    assert not raw.present and not np.any(raw.tokens) and raw.tokens.shape == (5, 8)
    rng = np.random.default_rng(3)
    p = small(rng)
    for blk in p.blocks:
        blk.cross_mha.w_v.data[...] = 0.0
    a = resample(raw, p).data
    b = resample(missing_audio_embedding(8, 5), p).data
    assert a.shape == (2, 8) and np.all(np.isfinite(a))
    assert np.array_equal(a, b)


def test_absent_flag_requires_zero_tokens():
    with pytest.raises(ValueError):
        RawAudioTokens(np.ones((2, 3)), present=False)


@pytest.mark.parametrize("seed", range(5))
def test_token_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p = small(rng, k=2)
    tokens = rng.normal(size=(7, 8))
    base = resample(RawAudioTokens(tokens), p).data
    np.testing.assert_allclose(resample(RawAudioTokens(tokens[rng.permutation(7)]), p).data, base, atol=1e-12)


def test_projection_for_wider_tokens():
    rng = np.random.default_rng(4)
    p = small(rng, token_dim=12)
    assert resample(RawAudioTokens(rng.normal(size=(4, 12))), p).shape == (2, 8)
    with pytest.raises(ShapeError):
        resample(RawAudioTokens(rng.normal(size=(4, 8))), p)


def test_batched_equals_per_sample():
    from avretrieval.resampler import resample_tokens
    rng = np.random.default_rng(5)
    p = small(rng)
    tokens = rng.normal(size=(3, 5, 8))
    out = resample_tokens(Tensor(tokens), p).data
    for b in range(3):
        np.testing.assert_allclose(out[b], resample(RawAudioTokens(tokens[b]), p).data, atol=1e-13)


@pytest.mark.parametrize("seed", range(3))
def test_gradient(seed):
    rng = np.random.default_rng(seed)
    p = small(rng)
    tokens = nx.parameter(rng.uniform(-1, 1, (3, 8)))
    w = Tensor(rng.uniform(-1, 1, (2, 8)))
    from avretrieval.resampler import resample_tokens
    assert nx.gradcheck(lambda: nx.sum(resample_tokens(tokens, p) * w), [tokens, *p.parameters()]) < 1e-4
