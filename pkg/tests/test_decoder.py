import pytest
import torch
import torch.nn.functional as F

from oracles import gradient_check, jitter_norms

from colonformer.decoder import PPMConfig, PyramidPooling, UPerDecoder


def pyramid(batch=1, channels=(64, 128, 320, 512), sizes=(88, 44, 22, 11), dtype=torch.float32):
    return [torch.randn(batch, c, s, s, dtype=dtype) for c, s in zip(channels, sizes)]


def test_ppm_branch_shapes_and_concat_width():
    ppm = PyramidPooling(512, PPMConfig((1, 2, 3, 6), 128)).eval()
    f4 = torch.randn(2, 512, 11, 11)
    branches = ppm.branch_outputs(f4)
    assert len(branches) == 4
    assert all(b.shape == (2, 128, 11, 11) for b in branches)
    assert ppm.bottleneck[0].in_channels == 512 + 4 * 128
    assert ppm(f4).shape == (2, 128, 11, 11)


def test_ppm_bin_one_on_constant_input():
    ppm = PyramidPooling(4, PPMConfig((1,), 4)).eval()
    conv = ppm.branches[0][1]
    with torch.no_grad():
        conv.weight.copy_(torch.eye(4)[:, :, None, None])
        conv.bias.zero_()
    x = torch.full((1, 4, 5, 5), 0.75)
    torch.testing.assert_close(ppm.branch_outputs(x)[0], x)


@pytest.mark.parametrize("b", [1, 2, 3, 6])
def test_ppm_pooling_recovers_block_structure(b):
    block = 3
    values = torch.randn(1, 2, b, b)
    x = values.repeat_interleave(block, -1).repeat_interleave(block, -2)
    pooled = PyramidPooling(2, PPMConfig((b,), 2)).branches[0][0](x)
    torch.testing.assert_close(pooled, values, rtol=1e-6, atol=1e-6)


def test_ppm_rejects_oversized_bin():
    ppm = PyramidPooling(8, PPMConfig((1, 2, 3, 6), 8))
    with pytest.raises(ValueError, match="exceeds"):
        ppm(torch.randn(2, 8, 4, 4))


def test_ppm_config_bins_ascending():
    with pytest.raises(ValueError):
        PPMConfig((2, 1))


def test_fuse_resolutions_and_width():
    dec = UPerDecoder((64, 128, 320, 512), 128).eval()
    with torch.no_grad():
        fused = dec.fuse(pyramid())
    assert [tuple(f.shape[1:]) for f in fused] == [(128, 88, 88), (128, 44, 44), (128, 22, 22), (128, 11, 11)]


def test_fuse_channel_mismatch():
    dec = UPerDecoder((8, 16, 24, 32), 8, PPMConfig((1,), 8))
    with pytest.raises(ValueError, match="channel mismatch"):
        dec.fuse(pyramid(channels=(8, 16, 20, 32), sizes=(8, 4, 2, 1)))


def test_zero_laterals_isolate_ppm_path():
    dec = UPerDecoder((8, 16, 24, 32), 8, PPMConfig((1, 2), 8)).eval()
    for conv in dec.lateral_convs:
        torch.nn.init.zeros_(conv[0].weight)
    feats = pyramid(2, (8, 16, 24, 32), (16, 8, 4, 2))
    with torch.no_grad():
        fused = dec.fuse(feats)
        ppm_out = dec.ppm(feats[-1])
        up = ppm_out
        expected = [ppm_out]
        for level in (2, 1, 0):
            up = F.interpolate(up, size=feats[level].shape[-2:], mode="bilinear", align_corners=False)
            expected.insert(0, dec.fpn_convs[level](up))
    for got, want in zip(fused, expected):
        torch.testing.assert_close(got, want)


def test_global_map_resolution():
    dec = UPerDecoder((64, 128, 320, 512), 128).eval()
    with torch.no_grad():
        out = dec(pyramid(3))
    assert out.shape == (3, 1, 88, 88)
    assert torch.isfinite(out).all()


def test_decoder_gradient_check():
    dec = UPerDecoder((4, 8, 12, 16), 8, PPMConfig((1,), 8)).double().eval()
    jitter_norms(dec)
    feats = pyramid(1, (4, 8, 12, 16), (8, 4, 2, 1), dtype=torch.float64)
    weights = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    coord, direction = gradient_check(lambda: (weights * dec(feats)).sum(), dec.parameters(), h=1e-6, per_tensor=3)
    assert coord < 1e-3 and direction < 1e-3
