import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ohubert.model import (ModelConfig, NonFiniteError, OHubert, apply_mask, frame_count,
                           project_logits, sample_mask, sinusoidal_positions)

SMALL = ModelConfig(d_model=16, n_heads=2, ffn_dim=32, n_layers=2, C=5)


def analytic_coverage(t: int, p: float, span: int) -> float:
    # frame j is covered unless none of the min(j+1, span) preceding starts fire
    j = np.arange(t)
    return float(np.mean(1.0 - (1.0 - p) ** np.minimum(j + 1, span)))


@given(n=st.integers(1200, 6000))
@settings(max_examples=25, deadline=None)
def test_frame_count_matches_conv_output(n):
    model = OHubert(SMALL)
    with torch.no_grad():
        U = model.feature_encoder(torch.zeros(1, n))
    assert U.shape == (1, frame_count(n, SMALL), 16)


def test_frame_count_floor_composition():
    cfg = ModelConfig()
    assert frame_count(16000, cfg) == 50
    assert cfg.downsample == 320
    with pytest.raises(ValueError, match="receptive"):
        frame_count(3, cfg)


def test_mask_coverage_against_analytic_and_monte_carlo():
    cfg = ModelConfig()
    expect = analytic_coverage(500, cfg.mask_prob_per_frame, cfg.mask_span)
    r = np.random.default_rng(0)
    mc = np.mean([sample_mask(500, cfg, rng=r).coverage for _ in range(1000)])
    assert abs(mc - expect) < 0.01
    assert 0.45 <= expect <= 0.55


def test_mask_spans_and_errors():
    cfg = ModelConfig(mask_span=4, mask_prob_per_frame=0.2)
    m = sample_mask(40, cfg, seed=3)
    covered = np.zeros(40, bool)
    for s in m.span_starts:
        covered[s:s + 4] = True
    np.testing.assert_array_equal(covered, m.as_bool())
    np.testing.assert_array_equal(sample_mask(40, cfg, seed=3).masked, m.masked)
    with pytest.raises(ValueError, match="exceed"):
        sample_mask(4, cfg)


def test_apply_mask_replaces_only_flagged_rows(rng):
    U = torch.randn(2, 6, 4)
    masked = torch.tensor([[1, 0, 0, 1, 0, 0], [0] * 6], dtype=torch.bool)
    emb = torch.arange(4.0)
    out = apply_mask(U, masked, emb)
    assert torch.equal(out[0, 0], emb) and torch.equal(out[0, 3], emb)
    assert torch.equal(out[~masked], U[~masked])


def test_usp_token_adds_one_position_and_is_never_masked():
    model = OHubert(SMALL)
    wav = torch.randn(3, 4800)
    t = frame_count(4800, SMALL)
    masked = torch.ones(3, t, dtype=torch.bool)
    hs, U = model.encode(wav, masked)
    assert hs.layers.shape == (2, 3, t + 1, 16)
    assert hs.embedded.shape[1] == t + 1
    # USP row of the input is the USP embedding plus its position, even with everything masked
    expect = model.usp_embedding + model.encoder.usp_position
    assert torch.allclose(hs.embedded[:, 0], expect.expand(3, -1))
    assert hs.usp.shape == (2, 3, 16) and hs.content.shape == (2, 3, t, 16)


def test_attention_rows_are_distributions():
    model = OHubert(SMALL)
    hs, _ = model.encode(torch.randn(1, 3200), return_attention=True)
    for w in hs.attention:
        assert torch.allclose(w.sum(-1), torch.ones(()), atol=1e-6)


def test_project_logits_is_scaled_cosine():
    model = OHubert(SMALL)
    h = torch.randn(7, 16)
    logits = project_logits(h, model.proj, 0.1)
    z = model.proj.A(h)
    ref = torch.nn.functional.cosine_similarity(z[:, None], model.proj.E[None], dim=-1) / 0.1
    assert torch.allclose(logits, ref, atol=1e-5)
    with pytest.raises(ValueError):
        project_logits(h, model.proj, 0.0)


def test_nan_is_reported_with_layer():
    model = OHubert(SMALL)
    with torch.no_grad():
        model.encoder.blocks[1].ffn[0].weight.fill_(float("nan"))
    with pytest.raises(NonFiniteError, match="layer 2"):
        model.encode(torch.randn(1, 3200))


def test_seeded_init_leaves_global_rng_alone():
    torch.manual_seed(5)
    before = torch.random.get_rng_state()
    a, b = OHubert(SMALL, seed=1), OHubert(SMALL, seed=1)
    assert torch.equal(torch.random.get_rng_state(), before)
    for (n, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), n
    c = OHubert(SMALL, seed=2)
    assert not torch.equal(a.proj.E, c.proj.E)


def test_zero_layer_model_returns_embedded_as_last():
    model = OHubert(ModelConfig(d_model=16, n_heads=2, n_layers=0))
    hs, _ = model.encode(torch.randn(1, 3200))
    assert hs.n_layers == 0
    assert torch.equal(hs.last, hs.embedded)


def test_sinusoidal_positions():
    pe = sinusoidal_positions(5, 8, torch.float64)
    assert torch.allclose(pe[0, 0::2], torch.zeros(4, dtype=torch.float64))
    assert torch.allclose(pe[0, 1::2], torch.ones(4, dtype=torch.float64))
    assert pe[3, 0] == pytest.approx(np.sin(3.0))


@pytest.mark.parametrize("kw", [
    {"d_model": 10, "n_heads": 3},
    {"conv_strides": [5], "conv_kernels": [4]},
    {"conv_strides": [2], "conv_kernels": [5]},
    {"tau": 0.0},
    {"conv_norm": "batch"},
    {"pair_features": "bilinear"},
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)
