import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from gradutil import REL_TOL, fd_relative_error
from portionnet.encoders import (
    BBoxEmbedding,
    ConvBackbone,
    FeatureNorm,
    FeatureStandardizer,
    PatchBackbone,
    PointNetEncoder,
    RGBEncoder,
    multiscale_pool,
    sort_points,
)
from portionnet.errors import ConfigError


def _reference_pool(features, resolutions, aggregation):
    """Literal version: sort, adaptive max pool, aggregate each scale."""
    seq = torch.sort(features.transpose(1, 2), dim=-1).values
    out = []
    for k in resolutions:
        if k > features.shape[1]:
            continue
        pooled = F.adaptive_max_pool1d(seq, k)
        out.append(pooled.mean(-1) if aggregation == "mean" else pooled.amax(-1))
    return torch.cat(out, dim=1)


@pytest.mark.parametrize("n", [64, 100, 517, 1024])
@pytest.mark.parametrize("aggregation", ["mean", "max"])
def test_multiscale_pool_matches_reference(n, aggregation):
    x = torch.randn(3, n, 7, dtype=torch.float64)
    got = multiscale_pool(x, (64, 128, 256, 512), aggregation)
    want = _reference_pool(x, (64, 128, 256, 512), aggregation)
    torch.testing.assert_close(got, want, rtol=0, atol=1e-12)


def test_max_aggregation_collapses_scales():
    x = torch.randn(2, 600, 5)
    out = multiscale_pool(x, (64, 128, 256, 512), "max").view(2, 4, 5)
    for k in range(1, 4):
        torch.testing.assert_close(out[:, k], out[:, 0])
    torch.testing.assert_close(out[:, 0], x.amax(dim=1))


def test_pool_skips_resolutions_above_n():
    x = torch.randn(2, 100, 3)
    assert multiscale_pool(x, (64, 128, 256)).shape == (2, 3)
    with pytest.raises(ConfigError):
        multiscale_pool(torch.randn(1, 32, 3), (64,))


def test_sort_points_gradient_routes_like_torch_sort():
    x = torch.randn(2, 3, 50, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 3, 50, dtype=torch.float64)
    (g1,) = torch.autograd.grad((sort_points(x) * w).sum(), x)
    (g2,) = torch.autograd.grad((torch.sort(x, dim=-1).values * w).sum(), x)
    torch.testing.assert_close(g1, g2)


def test_pointnet_permutation_invariance_100_clouds():
    torch.manual_seed(0)
    enc = PointNetEncoder().eval()
    worst = 0.0
    with torch.no_grad():
        for i in range(10):
            pts = torch.randn(10, 1024, 3) * 0.05
            dims = torch.rand(10, 3) * 0.1 + 0.02
            perm = torch.stack([torch.randperm(1024) for _ in range(10)])
            shuffled = torch.gather(pts, 1, perm.unsqueeze(-1).expand(-1, -1, 3))
            worst = max(worst, float((enc(pts, dims) - enc(shuffled, dims)).abs().max()))
    assert worst <= 1e-6


def test_pointnet_shapes_and_errors():
    enc = PointNetEncoder(n_points=128, widths=(8, 16), resolutions=(16, 32, 64), bbox_dim=8, feature_dim=32, hidden=64)
    out = enc(torch.randn(4, 128, 3), torch.rand(4, 3) + 0.1)
    assert out.shape == (4, 32)
    with pytest.raises(ConfigError):
        enc(torch.randn(4, 32, 3), torch.rand(4, 3) + 0.1)
    with pytest.raises(ConfigError):
        enc(torch.randn(4, 128, 2), torch.rand(4, 3) + 0.1)
    with pytest.raises(ConfigError):
        PointNetEncoder(n_points=32, resolutions=(64, 128))


def test_bbox_embedding_rejects_nonpositive_dims():
    emb = BBoxEmbedding(8)
    assert emb(torch.rand(3, 3) + 0.01).shape == (3, 8)
    with pytest.raises(ConfigError):
        emb(torch.tensor([[0.1, 0.0, 0.2]]))


def test_rgb_encoder_output_and_concat_dim():
    enc = RGBEncoder(PatchBackbone(768), ConvBackbone(512))
    assert enc.concat_dim == 1280
    assert enc(torch.rand(2, 3, 64, 64)).shape == (2, 256)
    with pytest.raises(ConfigError):
        enc(torch.rand(2, 3, 16, 16))
    with pytest.raises(ConfigError):
        enc(torch.rand(3, 64, 64))


def test_feature_standardizer_fit():
    x = torch.randn(500, 6) * torch.arange(1, 7) + 3.0
    norm = FeatureStandardizer(6)
    torch.testing.assert_close(norm(x), x)  # identity until fitted
    norm.fit(x)
    y = norm(x)
    torch.testing.assert_close(y.mean(0), torch.zeros(6), atol=1e-5, rtol=0)
    torch.testing.assert_close(y.std(0), torch.ones(6), atol=1e-5, rtol=0)
    assert not any(p.requires_grad for p in norm.parameters())
    with pytest.raises(ConfigError):
        norm.fit(torch.randn(1, 6))


@settings(max_examples=25, deadline=None)
@given(st.integers(64, 300), st.integers(0, 10_000))
def test_pool_order_invariant_property(n, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, n, 4, generator=g)
    perm = torch.randperm(n, generator=g)
    torch.testing.assert_close(multiscale_pool(x), multiscale_pool(x[:, perm]), rtol=0, atol=0)


def test_pointnet_gradcheck():
    enc = PointNetEncoder(n_points=64, widths=(4, 6), resolutions=(16, 64), bbox_dim=4, feature_dim=8, hidden=8).double()
    enc.norm_in.fit(torch.randn(10, enc.concat_dim, dtype=torch.float64))
    pts = torch.randn(2, 64, 3, dtype=torch.float64) * 0.05
    dims = torch.rand(2, 3, dtype=torch.float64) * 0.1 + 0.05
    err = fd_relative_error(lambda: enc(pts, dims), [pts, dims, *enc.parameters()])
    assert err < REL_TOL


def test_rgb_encoder_gradcheck():
    enc = RGBEncoder(PatchBackbone(12, width=6), ConvBackbone(10, widths=(4, 4, 6)), feature_dim=8, hidden=16).double()
    images = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    err = fd_relative_error(lambda: enc(images), [images, *enc.parameters()])
    assert err < REL_TOL


def test_bbox_embedding_gradcheck():
    emb = BBoxEmbedding(5).double()
    dims = torch.rand(3, 3, dtype=torch.float64) + 0.05
    assert fd_relative_error(lambda: emb(dims), [dims, *emb.parameters()]) < REL_TOL


def test_feature_norm_kinds():
    x = torch.randn(5, 256) * 7 + 3
    unit = FeatureNorm(256, "unit")(x)
    torch.testing.assert_close(unit.norm(dim=1), torch.ones(5), atol=1e-3, rtol=0)
    layer = FeatureNorm(256, "layer")(x)
    torch.testing.assert_close(layer, torch.nn.functional.layer_norm(x, (256,)))
    with pytest.raises(ConfigError):
        FeatureNorm(4, "batch")
