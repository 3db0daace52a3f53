import pytest
import torch

from siamcd.backbone import NetworkConfig, Variant, build_network
from siamcd.errors import ConfigurationError, ShapeError


def net_for(variant, **kw):
    kw.setdefault("depth", 3)
    kw.setdefault("base_channels", 4)
    net = build_network(NetworkConfig(variant=variant, **kw))
    net.eval()
    return net


def test_same_seed_same_parameters():
    a = build_network(NetworkConfig(seed=3, depth=3, base_channels=4))
    b = build_network(NetworkConfig(seed=3, depth=3, base_channels=4))
    c = build_network(NetworkConfig(seed=4, depth=3, base_channels=4))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_fusion_head_init():
    diff = net_for(Variant.SiamDiffDualTaskSSL)
    assert diff.semantic_fusion.weight.flatten().tolist() == [-1.0, 1.0]
    assert diff.semantic_fusion.bias.tolist() == [0.0]
    # new construction (low logit at t1, high at t2) scores above both unchanged cases
    logits = torch.tensor([[-4.0, 4.0], [4.0, 4.0], [-4.0, -4.0]]).view(3, 1, 2, 1, 1)
    p = diff.fuse_semantic_change(logits[:, :, 0, 0], logits[:, :, 1, 0]).flatten()
    assert p[0] > 0.99 and p[1] == p[2] == 0.5
    drawn = net_for(Variant.SiamDiffDualTaskSSL, fusion_init="kaiming", seed=1)
    assert drawn.semantic_fusion.weight.flatten().tolist() != [-1.0, 1.0]


def test_smallest_legal_network():
    net = net_for(Variant.SiamDiffDualTaskSSL, depth=2, base_channels=1, input_channels=1)
    out = net(torch.rand(1, 1, 4, 4), torch.rand(1, 1, 4, 4))
    assert out.p_c.shape == (1, 4, 4)


@pytest.mark.parametrize("kw", [{"depth": 1}, {"base_channels": 0}, {"input_channels": 0}, {"variant": "UNet3"}, {"fusion_init": "zeros"}])
def test_invalid_config(kw):
    with pytest.raises(ConfigurationError):
        NetworkConfig(**kw)


def test_encoder_feature_stack():
    net = build_network(NetworkConfig(depth=5, base_channels=16))
    net.eval()
    feats = net.encode(torch.rand(3, 64, 64))
    assert len(feats) == 5
    assert tuple(feats[-1].shape) == (1, 256, 4, 4)
    for k, f in enumerate(feats, start=1):
        assert f.shape[1] == 16 * 2 ** (k - 1)
        assert f.shape[-1] == 64 // 2 ** (k - 1)


def test_encode_is_deterministic():
    net = net_for(Variant.SiamDiff)
    x = torch.rand(2, 3, 16, 16)
    a, b = net.encode(x), net.encode(x)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_encode_rejects_indivisible_dims():
    net = build_network(NetworkConfig(depth=5))
    with pytest.raises(ShapeError, match="divisible by 16"):
        net.encode(torch.rand(3, 60, 60))


def test_decode_semantics_shapes_and_range():
    net = net_for(Variant.SiamDiffDualTask)
    x = torch.rand(2, 3, 16, 24)
    logits, prob = net.decode_semantics(net.encode(x))
    assert prob.shape == (2, 16, 24)
    assert torch.equal(prob, torch.sigmoid(logits))
    assert prob.min() >= 0 and prob.max() <= 1


def test_decode_semantics_shared_weights():
    net = net_for(Variant.SiamDiffDualTask)
    x = torch.rand(1, 3, 16, 16)
    a = net.decode_semantics(net.encode(x))[1]
    b = net.decode_semantics(net.encode(x.clone()))[1]
    assert torch.equal(a, b)


def test_decode_semantics_rejects_bad_stack():
    net = net_for(Variant.SiamDiffDualTask)
    feats = net.encode(torch.rand(1, 3, 16, 16))
    with pytest.raises(ShapeError):
        net.decode_semantics(feats[:-1])


def test_decode_difference_symmetric():
    torch.manual_seed(0)
    net = net_for(Variant.SiamDiff)
    fa = net.encode(torch.rand(2, 3, 16, 16))
    fb = net.encode(torch.rand(2, 3, 16, 16))
    assert torch.equal(net.decode_difference(fa, fb), net.decode_difference(fb, fa))


def test_identical_stacks_fuse_to_zero():
    net = net_for(Variant.SiamDiff)
    f = net.encode(torch.rand(1, 3, 16, 16))
    assert all(torch.count_nonzero(d) == 0 for d in net.fuse_differences(f, f))
    with pytest.raises(ShapeError):
        net.decode_difference(f, f[:-1])


def test_signed_difference_breaks_symmetry():
    net = net_for(Variant.SiamDiff, absolute_difference=False)
    a, b = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    assert not torch.allclose(net(a, b).p_c, net(b, a).p_c)


def test_fuse_semantic_change_hand_weights():
    net = net_for(Variant.SiamDiffDualTaskSSL)
    with torch.no_grad():
        net.semantic_fusion.weight.copy_(torch.tensor([1.0, -1.0]).view(1, 2, 1, 1))
        net.semantic_fusion.bias.zero_()
    logits = torch.randn(1, 8, 8)
    out = net.fuse_semantic_change(logits, logits)
    assert out.shape == (1, 8, 8)
    assert torch.equal(out, torch.full_like(out, 0.5))


def test_fuse_semantic_change_channel_permutation():
    net = net_for(Variant.SiamDiffDualTaskSSL)
    a, b = torch.randn(2, 8, 8), torch.randn(2, 8, 8)
    w = net.semantic_fusion.weight.detach().clone()
    fwd = net.fuse_semantic_change(a, b)
    with torch.no_grad():
        net.semantic_fusion.weight.copy_(w.flip(1))
    assert torch.allclose(net.fuse_semantic_change(b, a), fwd, atol=1e-6, rtol=0)
    with pytest.raises(ShapeError):
        net.fuse_semantic_change(a, b[:, :4])


@pytest.mark.parametrize(
    "variant,present",
    [
        (Variant.EarlyFusionUNet, {"p_c"}),
        (Variant.SiamDiff, {"p_c"}),
        (Variant.SiamDiffDualTask, {"p_c", "p_s_t1", "p_s_t2"}),
        (Variant.SiamDiffDualTaskSSL, {"p_c", "p_s_t1", "p_s_t2", "p_cs"}),
    ],
)
def test_presence_pattern(variant, present):
    net = net_for(variant)
    out = net(torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16))
    assert set(out.present()) == present
    for v in out.present().values():
        assert v.shape == (2, 16, 16)
        assert v.min() >= 0 and v.max() <= 1


def test_early_fusion_consumes_stacked_channels():
    net = net_for(Variant.EarlyFusionUNet)
    assert net.encoder.levels[0][0].in_channels == 6
    assert net_for(Variant.SiamDiff).encoder.levels[0][0].in_channels == 3


def test_ssl_swap_symmetry():
    net = net_for(Variant.SiamDiffDualTaskSSL)
    a, b = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    ab, ba = net(a, b), net(b, a)
    assert torch.equal(ab.p_c, ba.p_c)
    assert torch.equal(ab.p_s_t1, ba.p_s_t2)


def test_forward_shape_mismatch():
    net = net_for(Variant.SiamDiff)
    with pytest.raises(ShapeError):
        net(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 8))


@pytest.mark.parametrize("variant", list(Variant))
def test_every_parameter_receives_gradient(variant):
    net = net_for(variant)
    net.train()
    out = net(torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16))
    sum(v.sum() for v in out.present().values()).backward()
    missing = [n for n, p in net.named_parameters() if p.grad is None]
    assert not missing
