import math

import pytest
import torch

from gradutil import REL_TOL, fd_relative_error
from portionnet.adapter import Adapter
from portionnet.config import ModelConfig
from portionnet.errors import ConfigError
from portionnet.fusion import ClassificationHead, CrossAttentionBlock, CrossModalFusion, EnergyHead, VolumeHead
from portionnet.model import PortionNet, TrainingMode, count_parameters, parameter_digest

# ---- adapter


def test_adapter_shape_and_layer_names():
    ad = Adapter()
    assert ad(torch.randn(5, 256)).shape == (5, 256)
    names = {n for n, _ in ad.named_parameters()}
    assert names == {"layer1.weight", "layer1.bias", "layer2.weight", "layer2.bias"}


def test_adapter_zero_parameters_give_zero_output():
    ad = Adapter()
    with torch.no_grad():
        for p in ad.parameters():
            p.zero_()
    assert torch.equal(ad(torch.randn(4, 256)), torch.zeros(4, 256))


def test_adapter_is_deterministic():
    ad = Adapter()
    x = torch.randn(3, 256)
    assert torch.equal(ad(x), ad(x))


def test_adapter_gradcheck():
    ad = Adapter(6, 10).double()
    x = torch.randn(4, 6, dtype=torch.float64)
    assert fd_relative_error(lambda: ad(x), [x, *ad.parameters()]) < REL_TOL


def test_adapter_share_is_lightweight_with_full_backbones():
    pytest.importorskip("torchvision")
    model = PortionNet(ModelConfig(class_count=108, backbones="torchvision"))
    assert count_parameters(model.adapter) / count_parameters(model) < 0.05


# ---- fusion


def test_fusion_output_shape():
    fusion = CrossModalFusion(256, 8, 512)
    assert fusion(torch.randn(3, 256), torch.randn(3, 256)).shape == (3, 256)
    assert fusion.attn_rgb2geo.attn.num_heads == 8


def test_fusion_rejects_dim_mismatch():
    fusion = CrossModalFusion(16, 4, 32)
    with pytest.raises(ConfigError):
        fusion(torch.randn(2, 16), torch.randn(2, 8))
    with pytest.raises(ConfigError):
        fusion(torch.randn(2, 16), torch.randn(3, 16))


def test_zeroed_attention_projection_reduces_to_layernorm_of_query():
    block = CrossAttentionBlock(16, 4)
    with torch.no_grad():
        block.attn.out_proj.weight.zero_()
        block.attn.out_proj.bias.zero_()
    q, ctx = torch.randn(5, 16), torch.randn(5, 16)
    torch.testing.assert_close(block(q, ctx), block.norm(q))


def test_single_token_attention_weights_are_one():
    block = CrossAttentionBlock(16, 4)
    _, w = block(torch.randn(3, 16), torch.randn(3, 16), return_weights=True)
    torch.testing.assert_close(w, torch.ones_like(w))


def test_fusion_gradcheck():
    fusion = CrossModalFusion(8, 2, 12).double()
    a, b = torch.randn(3, 8, dtype=torch.float64), torch.randn(3, 8, dtype=torch.float64)
    assert fusion(a, b).dtype == torch.float64
    assert fd_relative_error(lambda: fusion(a, b), [a, b, *fusion.parameters()]) < REL_TOL


# ---- heads


def test_classification_head_three_affine_layers():
    head = ClassificationHead(256, 108)
    linears = [m for m in head.modules() if isinstance(m, torch.nn.Linear)]
    assert [l.out_features for l in linears] == [512, 256, 108]
    probs = head(torch.randn(4, 256)).softmax(-1)
    torch.testing.assert_close(probs.sum(-1), torch.ones(4), atol=1e-6, rtol=0)


def test_volume_head_softplus_values():
    head = VolumeHead(4)
    with torch.no_grad():
        head.linear.weight.zero_()
        head.linear.bias.fill_(0.0)
    assert float(head(torch.randn(1, 4)).detach()) == pytest.approx(math.log(2.0), abs=1e-6)
    with torch.no_grad():
        head.linear.bias.fill_(-50.0)
    v = float(head(torch.randn(1, 4)).detach())
    assert 0.0 < v < 1e-21


def test_volume_head_positive_on_10000_random_inputs():
    head = VolumeHead(256)
    x = torch.randn(10_000, 256) * 50.0
    assert bool((head(x) > 0).all())


def test_fresh_volume_head_predicts_unit_scale():
    head = VolumeHead(8)
    with torch.no_grad():
        head.linear.weight.zero_()
    torch.testing.assert_close(head(torch.randn(3, 8)), torch.ones(3))


def test_energy_head_takes_volume_input():
    head = EnergyHead(8, 6)
    f = torch.randn(2, 8)
    a = head(f, torch.tensor([1.0, 1.0]))
    b = head(f, torch.tensor([2.0, 2.0]))
    assert a.shape == (2,)
    assert not torch.allclose(a, b)


def test_heads_gradcheck():
    cls, vol, en = ClassificationHead(6, 3, (8, 5)).double(), VolumeHead(6).double(), EnergyHead(6, 5).double()
    f = torch.randn(4, 6, dtype=torch.float64)
    assert fd_relative_error(lambda: cls(f), [f, *cls.parameters()]) < REL_TOL
    assert fd_relative_error(lambda: vol(f), [f, *vol.parameters()]) < REL_TOL
    v = torch.rand(4, dtype=torch.float64) + 0.5
    assert fd_relative_error(lambda: en(f, v), [f, v, *en.parameters()]) < REL_TOL


# ---- assembled model


def _batch(cfg, b=3):
    return torch.rand(b, 3, 32, 32), torch.randn(b, cfg.n_points, 3) * 0.05, torch.rand(b, 3) * 0.1 + 0.02


def test_model_modes_select_fusion_input(tiny_model_config):
    model = PortionNet(tiny_model_config).eval()
    images, pts, bbox = _batch(tiny_model_config)
    rgb_only = model(images, pts, bbox, mode=TrainingMode.RGB_ONLY)
    multi = model(images, pts, bbox, mode=TrainingMode.MULTIMODAL)
    torch.testing.assert_close(rgb_only.fused, model.fusion(rgb_only.rgb, rgb_only.adapted))
    torch.testing.assert_close(multi.fused, model.fusion(multi.rgb, multi.teacher))
    assert rgb_only.teacher is not None  # teacher still computed as a target
    assert model(images, mode=TrainingMode.RGB_ONLY).teacher is None
    with pytest.raises(ConfigError):
        model(images, mode=TrainingMode.MULTIMODAL)


def test_model_parameter_groups_partition(tiny_model_config):
    model = PortionNet(tiny_model_config)
    enc = {id(p) for p in model.encoder_parameters()}
    heads = {id(p) for p in model.head_parameters()}
    assert not enc & heads
    assert len(enc | heads) == len(list(model.parameters()))
    named = dict(model.named_parameters())
    assert id(named["adapter.layer1.weight"]) in heads
    assert id(named["geo.proj.0.weight"]) in enc
    assert id(named["rgb.proj.0.weight"]) in enc


def test_checkpoint_parameter_names(tiny_model_config):
    names = set(PortionNet(tiny_model_config).state_dict())
    for prefix in ("rgb.backbone_a.", "rgb.backbone_b.", "rgb.proj.", "geo.pointnet.", "geo.bbox_embed.", "geo.proj.",
                   "adapter.layer1.", "adapter.layer2."):
        assert any(n.startswith(prefix) for n in names), prefix


def test_target_scales(tiny_model_config):
    model = PortionNet(tiny_model_config).eval()
    model.set_target_scales(200.0, 300.0)
    out = model(*_batch(tiny_model_config), mode=TrainingMode.MULTIMODAL)
    torch.testing.assert_close(out.volume, out.volume_norm * 200.0)
    torch.testing.assert_close(out.energy, out.energy_norm * 300.0)
    with pytest.raises(ConfigError):
        model.set_target_scales(0.0, 1.0)


def test_parameter_digest_changes_with_weights(tiny_model_config):
    model = PortionNet(tiny_model_config)
    d = parameter_digest(model)
    with torch.no_grad():
        model.adapter.layer1.bias.add_(1.0)
    assert parameter_digest(model) != d
