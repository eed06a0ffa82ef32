import numpy as np
import pytest
import torch

from oracles import dense_mha, gradient_check

from colonformer.encoder import (
    VARIANTS, EfficientSelfAttention, MiTBlock, MiTEncoder, MixFFN, OverlapPatchEmbed, PatchEmbedConfig,
    conv_out_size,
)


@pytest.mark.parametrize("size,k,s,p,expected", [(352, 7, 4, 3, 88), (88, 3, 2, 1, 44), (7, 7, 4, 0, 1)])
def test_patch_embed_output_size(size, k, s, p, expected):
    assert conv_out_size(size, k, s, p) == expected
    embed = OverlapPatchEmbed(3, PatchEmbedConfig(k, s, p, 8))
    tokens, hw = embed(torch.randn(1, 3, size, size))
    assert hw == (expected, expected)
    assert tokens.shape == (1, expected * expected, 8)


def test_patch_embed_rejects_small_input():
    embed = OverlapPatchEmbed(3, PatchEmbedConfig(7, 4, 0, 8))
    with pytest.raises(ValueError, match="smaller than kernel"):
        embed(torch.randn(1, 3, 6, 6))


def test_patch_embed_config_requires_overlap():
    with pytest.raises(ValueError):
        PatchEmbedConfig(3, 3, 0, 8)


def _attention_oracle(attn, x):
    sd = {k: v.detach().double().numpy() for k, v in attn.state_dict().items()}
    return dense_mha(x.double().numpy(), sd["q.weight"], sd["q.bias"], sd["kv.weight"], sd["kv.bias"],
                     sd["proj.weight"], sd["proj.bias"], attn.num_heads)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_efficient_attention_r1_matches_dense(heads):
    attn = EfficientSelfAttention(32, heads, sr_ratio=1)
    x = torch.randn(1, 64, 32)
    out = attn(x, (8, 8)).detach().double().numpy()
    np.testing.assert_allclose(out, _attention_oracle(attn, x), atol=1e-5, rtol=0)


def test_efficient_attention_reduces_keys():
    attn = EfficientSelfAttention(32, 2, sr_ratio=2)
    out, weights = attn(torch.randn(1, 64, 32), (8, 8), return_attention=True)
    assert out.shape == (1, 64, 32)
    # keys drop by sr_ratio**2 = 4: 64 -> 16
    assert weights.shape == (1, 2, 64, 16)
    torch.testing.assert_close(weights.sum(-1), torch.ones(1, 2, 64), atol=1e-5, rtol=0)


def test_efficient_attention_shape_errors():
    attn = EfficientSelfAttention(16, 2, sr_ratio=1)
    with pytest.raises(ValueError, match="token count"):
        attn(torch.randn(1, 10, 16), (3, 3))
    with pytest.raises(ValueError):
        EfficientSelfAttention(15, 2)


def test_mix_ffn_shape_and_zero_projection():
    ffn = MixFFN(8, 32)
    x = torch.randn(1, 16, 8)
    assert ffn(x, (4, 4)).shape == (1, 16, 8)
    with pytest.raises(ValueError, match="reshape"):
        ffn(torch.randn(1, 15, 8), (4, 4))
    block = MiTBlock(8, 2, 1)
    torch.nn.init.zeros_(block.mlp.fc2.weight)
    torch.nn.init.zeros_(block.mlp.fc2.bias)
    torch.nn.init.zeros_(block.attn.proj.weight)
    torch.nn.init.zeros_(block.attn.proj.bias)
    torch.testing.assert_close(block(x, (4, 4)), x, rtol=0, atol=0)


def test_mix_ffn_translation_equivariance():
    ffn = MixFFN(6, 12).double()
    h = w = 10
    grid = torch.randn(1, 6, h, w, dtype=torch.float64)
    shifted = torch.roll(grid, shifts=1, dims=-1)
    tok = lambda g: g.flatten(2).transpose(1, 2)
    untok = lambda t: t.transpose(1, 2).reshape(1, -1, h, w)
    out = untok(ffn(tok(grid), (h, w)))
    out_s = untok(ffn(tok(shifted), (h, w)))
    # interior columns, away from the zero padding and the wrapped column
    torch.testing.assert_close(out_s[..., 2:-1], out[..., 1:-2], rtol=1e-12, atol=1e-12)


def _small_encoder():
    return MiTEncoder(VARIANTS["G"]).eval()


def test_encoder_shapes_full_size():
    enc = MiTEncoder(VARIANTS["B2"]).eval()
    with torch.no_grad():
        feats = enc(torch.randn(2, 3, 352, 352))
    assert [f.shape[-1] for f in feats] == [88, 44, 22, 11]
    assert [f.shape[1] for f in feats] == [64, 128, 320, 512]
    assert all(f.shape[0] == 2 for f in feats)


@pytest.mark.parametrize("hw", [(32, 32), (64, 96), (128, 32)])
def test_encoder_shape_contract(hw):
    feats = _small_encoder()(torch.randn(1, 3, *hw))
    for i, f in enumerate(feats, start=1):
        assert tuple(f.shape[-2:]) == (hw[0] // 2 ** (i + 1), hw[1] // 2 ** (i + 1))


def test_encoder_rejects_indivisible_input():
    with pytest.raises(ValueError, match="divisible by 32"):
        _small_encoder()(torch.randn(1, 3, 48, 64))


def test_encoder_batch_independence():
    enc = MiTEncoder(VARIANTS["T"]).eval()
    x = torch.randn(3, 3, 64, 64)
    x[1] = x[0]
    with torch.no_grad():
        feats = enc(x)
        perm = torch.tensor([2, 0, 1])
        feats_p = enc(x[perm])
    for f, fp in zip(feats, feats_p):
        torch.testing.assert_close(f[0], f[1], rtol=0, atol=1e-6)
        torch.testing.assert_close(fp, f[perm], rtol=1e-5, atol=1e-6)


def test_softmax_rows_sum_to_one_everywhere():
    enc = MiTEncoder(VARIANTS["T"]).eval()
    captured = []

    def hook(module, args):
        _, weights = EfficientSelfAttention.forward(module, *args, return_attention=True)
        captured.append(weights)

    handles = [m.register_forward_pre_hook(hook) for m in enc.modules() if isinstance(m, EfficientSelfAttention)]
    with torch.no_grad():
        enc(torch.randn(2, 3, 64, 64))
    for h in handles:
        h.remove()
    assert len(captured) == sum(VARIANTS["T"].depths)
    for w in captured:
        torch.testing.assert_close(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-5, rtol=0)


def test_variant_channels_ascending():
    for v in VARIANTS.values():
        assert list(v.channels) == sorted(set(v.channels))


def test_encoder_gradient_check():
    enc = _small_encoder().double()
    x = torch.randn(1, 3, 32, 32, dtype=torch.float64)
    # random weights: a plain sum is blind to everything but the last LayerNorm biases
    weights = [torch.randn(f.shape, dtype=torch.float64) for f in enc(x)]
    fn = lambda: sum((w * f).sum() for w, f in zip(weights, enc(x)))
    coord, direction = gradient_check(fn, enc.parameters(), h=1e-4, per_tensor=3, n_directions=6)
    assert coord < 1e-3 and direction < 1e-3
