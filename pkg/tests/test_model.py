import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from torch.utils._python_dispatch import TorchDispatchMode

import oracles
from obiformer.errors import ConfigurationError, InputError, ShapeError
from obiformer.model import (
    CSAB, GSNB, OFB, SKFF, ChannelSelfAttention, ModelConfig, OBIFormer, build_model,
    channel_self_attention, count_parameters, csab_forward, forward, gsnb_forward, init_parameters,
    no_decay, ofb_forward, parameter_store, resample, skff_fuse,
)


def seeded(module, seed=0):
    init_parameters(module, seed)
    return module.double()


def randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class ShapeRecorder(TorchDispatchMode):
    def __init__(self):
        super().__init__()
        self.calls = []

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if isinstance(out, torch.Tensor):
            self.calls.append((str(func.overloadpacket.__name__), tuple(out.shape)))
        return out


# -- channel attention --------------------------------------------------------------

@given(c=st.integers(1, 6), h=st.integers(1, 5), w=st.integers(1, 5), seed=st.integers(0, 2 ** 16),
       temp=st.floats(0.3, 3.0), normalize=st.booleans())
def test_attention_matches_double_loop_oracle(c, h, w, seed, temp, normalize):
    attn = seeded(ChannelSelfAttention(c, temp, normalize), seed)
    with torch.no_grad():
        attn.temperature.fill_(temp)
    x = randn(1, c, h, w, seed=seed)
    expected, expected_map = oracles.channel_attention(x[0].numpy(), oracles.w(attn.qkv.weight),
                                                       oracles.w(attn.qkv_dw.weight), temp, normalize)
    with torch.no_grad():
        got = channel_self_attention(x, attn)[0].numpy()
        got_map = attn.attention_map(x)[0].numpy()
    np.testing.assert_allclose(got, expected, atol=1e-10)
    np.testing.assert_allclose(got_map, expected_map, atol=1e-12)


@pytest.mark.parametrize("h,w", [(4, 4), (8, 16), (32, 32)])
def test_attention_map_is_channel_by_channel(h, w):
    c = 5
    attn = seeded(ChannelSelfAttention(c))
    with ShapeRecorder() as rec, torch.no_grad():
        attn(randn(2, c, h, w))
    softmaxes = [shape for name, shape in rec.calls if "softmax" in name]
    assert softmaxes == [(2, c, c)]
    # no op ever produces a spatial-by-spatial map
    assert not any(len(shape) >= 2 and shape[-2:] == (h * w, h * w) for _, shape in rec.calls)


def test_attention_rows_are_stochastic():
    attn = seeded(ChannelSelfAttention(6))
    with torch.no_grad():
        a = attn.attention_map(randn(3, 6, 5, 7))
    assert torch.all(a >= 0)
    torch.testing.assert_close(a.sum(-1), torch.ones(3, 6, dtype=a.dtype))


def test_attention_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        ChannelSelfAttention(4)(torch.zeros(1, 3, 4, 4))


def test_temperature_is_learnable_scalar():
    attn = ChannelSelfAttention(4, temperature=1.0)
    assert attn.temperature.shape == (1,) and attn.temperature.requires_grad
    x = torch.randn(1, 4, 6, 6)
    attn(x).square().sum().backward()
    assert attn.temperature.grad is not None and torch.isfinite(attn.temperature.grad).all()


# -- SKFF -------------------------------------------------------------------------------

@given(c=st.integers(1, 40), seed=st.integers(0, 2 ** 16), scale=st.floats(0.01, 50.0))
def test_skff_weights_sum_to_one(c, seed, scale):
    skff = seeded(SKFF(c), seed)
    r, g = scale * randn(2, c, 3, 4, seed=seed), scale * randn(2, c, 3, 4, seed=seed + 1)
    with torch.no_grad():
        ar, ag = skff.branch_weights(r, g)
    assert torch.all((ar >= 0) & (ag >= 0))
    assert torch.max(torch.abs(ar + ag - 1)) < 1e-6


@given(c=st.integers(1, 24), seed=st.integers(0, 2 ** 16))
def test_skff_matches_transcription_oracle(c, seed):
    skff = seeded(SKFF(c), seed)
    r, g = randn(1, c, 5, 3, seed=seed), randn(1, c, 5, 3, seed=seed + 7)
    with torch.no_grad():
        fr, fg, fused = skff_fuse(r, g, skff)
    efr, efg, efused, _, _ = oracles.skff(r[0].numpy(), g[0].numpy(), skff)
    np.testing.assert_allclose(fr[0].numpy(), efr, atol=1e-12)
    np.testing.assert_allclose(fg[0].numpy(), efg, atol=1e-12)
    np.testing.assert_allclose(fused[0].numpy(), efused, atol=1e-12)


def test_skff_of_identical_streams_with_zero_logits_is_identity():
    skff = SKFF(8).double()
    for conv in (skff.recon_logits, skff.glyph_logits):
        torch.nn.init.zeros_(conv.weight)
    x = randn(1, 8, 4, 4)
    _, _, fused = skff(x, x)
    torch.testing.assert_close(fused, x)


def test_skff_squeeze_width_has_floor():
    assert SKFF(16).squeeze.out_channels == 4
    assert SKFF(64).squeeze.out_channels == 8


def test_skff_rejects_mismatched_streams():
    with pytest.raises(ShapeError):
        SKFF(4)(torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 4, 2))


# -- CSAB / GSNB / OFB --------------------------------------------------------------

@given(c=st.integers(1, 5), seed=st.integers(0, 2 ** 16))
def test_csab_matches_oracle(c, seed):
    block = seeded(CSAB(c, ModelConfig()), seed)
    x = randn(1, c, 4, 5, seed=seed)
    with torch.no_grad():
        got = csab_forward(x, block)[0].numpy()
    np.testing.assert_allclose(got, oracles.csab(x[0].numpy(), block), atol=1e-10)


@given(c=st.integers(1, 5), seed=st.integers(0, 2 ** 16))
def test_gsnb_matches_oracle_in_eval_mode(c, seed):
    block = seeded(GSNB(c), seed)
    rng = np.random.default_rng(seed)
    for bn in (block.bn1, block.bn2):
        bn.running_mean.copy_(torch.from_numpy(rng.normal(size=c)))
        bn.running_var.copy_(torch.from_numpy(rng.uniform(0.5, 2.0, size=c)))
    block.eval()
    x = randn(1, c, 5, 4, seed=seed)
    with torch.no_grad():
        got = gsnb_forward(x, block)[0].numpy()
    np.testing.assert_allclose(got, oracles.gsnb_eval(x[0].numpy(), block), atol=1e-10)


def test_ofb_equals_manual_composition():
    cfg = ModelConfig()
    block = seeded(OFB(4, cfg), 3).eval()
    x = randn(1, 4, 8, 8, seed=3)
    with torch.no_grad():
        fused, streams = ofb_forward(x, block)
        r = csab_forward(csab_forward(x, block.recon[0]), block.recon[1])
        g = gsnb_forward(gsnb_forward(x, block.glyph[0]), block.glyph[1])
        fr, fg, f = skff_fuse(r, g, block.skff)
    torch.testing.assert_close(fused, f, rtol=0, atol=1e-12)
    torch.testing.assert_close(streams.recon, fr, rtol=0, atol=1e-12)
    torch.testing.assert_close(streams.glyph, fg, rtol=0, atol=1e-12)


@pytest.mark.parametrize("n_csab,n_gsnb", [(1, 1), (1, 3), (3, 2)])
def test_ofb_chain_lengths_follow_config(n_csab, n_gsnb):
    block = OFB(4, ModelConfig(csab_per_ofb=n_csab, gsnb_per_ofb=n_gsnb))
    assert len(block.recon) == n_csab and len(block.glyph) == n_gsnb


# -- whole network ---------------------------------------------------------------------

def test_network_matches_numpy_oracle():
    model = build_model(ModelConfig(encoder_depth=1, base_channels=4), seed=5).double().eval()
    x = torch.rand(1, 3, 8, 8, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    with torch.no_grad():
        d, s = model(x)
    ed, es = oracles.network_eval(x[0].numpy(), model)
    np.testing.assert_allclose(d[0].numpy(), ed, atol=1e-9)
    np.testing.assert_allclose(s[0].numpy(), es, atol=1e-9)


@given(n=st.integers(1, 4), c=st.sampled_from([2, 4, 8, 16]), n_csab=st.integers(1, 3), n_gsnb=st.integers(1, 3))
def test_parameter_count_closed_form(n, c, n_csab, n_gsnb):
    cfg = ModelConfig(encoder_depth=n, base_channels=c, csab_per_ofb=n_csab, gsnb_per_ofb=n_gsnb)
    model = OBIFormer(cfg)
    assert count_parameters(model) == oracles.param_count(cfg)
    assert count_parameters(parameter_store(model)) == oracles.param_count(cfg)


@pytest.mark.parametrize("n,size", [(1, 8), (2, 16), (3, 24)])
def test_output_shapes(n, size):
    model = build_model(ModelConfig(encoder_depth=n, base_channels=4))
    d, s = forward(model, torch.rand(2, 3, size, size))
    assert d.shape == (2, 3, size, size) and s.shape == (2, 1, size, size)


def test_batch_items_are_independent_in_eval_mode():
    model = build_model(ModelConfig(encoder_depth=1, base_channels=4))
    x = torch.rand(3, 3, 16, 16)
    batched, _ = forward(model, x)
    single, _ = forward(model, x[1:2])
    torch.testing.assert_close(batched[1:2], single, rtol=1e-4, atol=1e-5)


@pytest.mark.parametrize("shape", [(1, 3, 14, 16), (1, 3, 16, 10), (1, 1, 16, 16), (3, 16, 16)])
def test_bad_shapes_raise(shape):
    model = build_model(ModelConfig(encoder_depth=2, base_channels=4))
    with pytest.raises(ShapeError):
        forward(model, torch.zeros(shape))


def test_non_finite_input_raises():
    model = build_model(ModelConfig(encoder_depth=1, base_channels=4))
    x = torch.zeros(1, 3, 8, 8)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(InputError):
        forward(model, x)


def test_forward_mode_controls_batch_statistics():
    model = build_model(ModelConfig(encoder_depth=1, base_channels=4))
    x = torch.rand(2, 3, 8, 8)
    forward(model, x, mode="train")
    assert model.training
    forward(model, x, mode="eval")
    assert not model.training
    with pytest.raises(ConfigurationError):
        forward(model, x, mode="test")


def test_resample_validates_direction():
    model = build_model(ModelConfig(encoder_depth=1, base_channels=4))
    x = torch.zeros(1, 4, 8, 8)
    assert resample(x, "down", model.downs[0]).shape == (1, 8, 4, 4)
    assert resample(torch.zeros(1, 8, 4, 4), "up", model.ups[0]).shape == (1, 4, 8, 8)
    with pytest.raises(ConfigurationError):
        resample(x, "sideways", model.downs[0])
    with pytest.raises(ConfigurationError):
        resample(x, "up", model.downs[0])
    with pytest.raises(ShapeError):
        model.downs[0](torch.zeros(1, 4, 7, 8))


# -- init and config ----------------------------------------------------------------

def test_init_is_seeded():
    cfg = ModelConfig(encoder_depth=1, base_channels=4)
    a, b, c = build_model(cfg, 1), build_model(cfg, 1), build_model(cfg, 2)
    for (name, pa), pb, pc in zip(a.named_parameters(), b.parameters(), c.parameters()):
        assert torch.equal(pa, pb), name
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_init_defaults():
    model = build_model(ModelConfig(encoder_depth=1, base_channels=8, attention_temperature_init=0.5))
    for name, p in model.named_parameters():
        if name.endswith("temperature"):
            assert torch.all(p == 0.5)
        elif name.endswith(".bias"):
            assert torch.all(p == 0), name
    norm = model.encoders[0].recon[0].norm1
    assert torch.all(norm.weight == 1) and torch.all(norm.bias == 0)
    conv = model.encoders[0].glyph[0].conv1.weight
    assert abs(conv.std().item() * np.sqrt(8 * 9) - 1) < 0.15


@pytest.mark.parametrize("bad", [dict(encoder_depth=0), dict(base_channels=-1), dict(csab_per_ofb=1.5),
                                 dict(attention_temperature_init=0.0), dict(ffn_expansion=0)])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        ModelConfig(**bad)


def test_build_model_rejects_non_config():
    with pytest.raises(ConfigurationError):
        build_model({"encoder_depth": 1})


@given(n=st.integers(1, 5), c=st.integers(1, 64), q=st.booleans(), t=st.floats(0.1, 10))
def test_config_dict_roundtrip(n, c, q, t):
    cfg = ModelConfig(encoder_depth=n, base_channels=c, qk_normalize=q, attention_temperature_init=t)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert ModelConfig.from_dict({k: str(v) for k, v in cfg.to_dict().items()}) == cfg


def test_no_decay_names():
    model = build_model(ModelConfig(encoder_depth=1, base_channels=4))
    exempt = {n for n, _ in model.named_parameters() if no_decay(n)}
    assert "input_proj.bias" in exempt
    assert "encoders.0.recon.0.attn.temperature" in exempt
    assert "encoders.0.recon.0.norm1.weight" in exempt
    assert "encoders.0.glyph.0.bn1.weight" in exempt
    assert "encoders.0.glyph.0.conv1.weight" not in exempt
    assert "encoders.0.recon.0.attn.qkv.weight" not in exempt
