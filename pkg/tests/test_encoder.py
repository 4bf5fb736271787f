import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from instrument_embedding.encoder import (EmbeddingExtractor, EncoderConfig, LDEPooling,
                                          ResNetEncoder, lde_pool)

SMALL = EncoderConfig(block_counts=(1, 1), base_width=4, num_clusters=3, embedding_dim=8)


def _lde_reference(r, mu, s):
    """Loop implementation straight from the definition."""
    T, D = r.shape
    C = mu.shape[0]
    out = np.zeros((C, D))
    for c in range(C):
        num, den = np.zeros(D), 0.0
        for t in range(T):
            logits = -s * ((r[t] - mu) ** 2).sum(1)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            num += w[c] * (r[t] - mu[c])
            den += w[c]
        out[c] = num / (den + 1e-8)
    return out


def test_lde_matches_reference():
    rng = np.random.default_rng(0)
    r, mu, s = rng.standard_normal((7, 3)), rng.standard_normal((4, 3)), rng.uniform(0.2, 2, 4)
    got = lde_pool(*(torch.from_numpy(a) for a in (r, mu, s))).numpy()
    np.testing.assert_allclose(got, _lde_reference(r, mu, s), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10_000))
def test_lde_permutation_invariant(T, seed):
    g = torch.Generator().manual_seed(seed)
    r = torch.randn(T, 5, generator=g, dtype=torch.float64)
    mu = torch.randn(3, 5, generator=g, dtype=torch.float64)
    s = torch.rand(3, generator=g, dtype=torch.float64) + 0.1
    perm = torch.randperm(T, generator=g)
    a, w = lde_pool(r, mu, s, return_weights=True)
    b = lde_pool(r[perm], mu, s)
    assert torch.allclose(a, b, atol=1e-12, rtol=0)
    assert torch.allclose(w.sum(-1), torch.ones(T, dtype=torch.float64), atol=1e-12)


def test_lde_empty_cluster_is_finite():
    r = torch.zeros(4, 2, dtype=torch.float64)
    mu = torch.tensor([[0.0, 0.0], [1e3, 1e3]], dtype=torch.float64)
    out = lde_pool(r, mu, torch.ones(2, dtype=torch.float64))
    assert torch.all(torch.isfinite(out))


def test_scales_positive():
    pool = LDEPooling(32, 8)
    assert torch.allclose(pool.scales, torch.ones(32), atol=1e-4)
    with torch.no_grad():
        pool.raw_scales.fill_(-50.0)
    assert torch.all(pool.scales > 0)


def test_lde_gradients_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(5):
        r = torch.tensor(rng.standard_normal((6, 3)), requires_grad=True)
        mu = torch.tensor(rng.standard_normal((3, 3)), requires_grad=True)
        s = torch.tensor(rng.uniform(0.3, 1.5, 3), requires_grad=True)
        proj = torch.from_numpy(rng.standard_normal((3, 3)))
        fn = lambda r, mu, s: (lde_pool(r, mu, s) * proj).sum()
        assert torch.autograd.gradcheck(fn, (r, mu, s), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_encoder_shapes_and_strides():
    enc = ResNetEncoder(SMALL)
    out = enc(torch.randn(2, 16, 40))
    assert out.shape[0] == 2 and out.shape[2] == SMALL.frame_dim == 8
    assert SMALL.total_stride == 8
    with pytest.raises(ValueError):
        enc(torch.randn(1, 16, 4))
    with pytest.raises(ValueError):
        ResNetEncoder(EncoderConfig(block_counts=(1, 0)))
    assert EncoderConfig().frame_dim == 128 and EncoderConfig().total_stride == 32


def test_variable_length_same_dimension():
    ext = EmbeddingExtractor(SMALL).eval()
    with torch.no_grad():
        a = ext(torch.randn(1, 16, 298))  # 3 s of frames
        b = ext(torch.randn(1, 16, 498))  # 5 s
    assert a.shape == b.shape == (1, 8)


def test_projection_is_affine():
    ext = EmbeddingExtractor(SMALL)
    a, b = torch.randn(2, 3 * 8), torch.randn(2, 3 * 8)
    p = ext.project
    assert torch.allclose(p(a + b), p(a) + p(b) - p.bias, atol=1e-5)
