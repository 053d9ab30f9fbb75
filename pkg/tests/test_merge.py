import numpy as np
import pytest

from lorac.checkpoint import load_full_checkpoint, load_pretrained_into, save_full_checkpoint
from lorac.errors import InvalidArgumentError, MergeError
from lorac.gradcheck import random_lora_layer
from lorac.lora import RankMode, compose_delta, init_factors, LoraConvLayer, lora_forward
from lorac.merge import export_inference_model, fuse_batchnorm, fuse_network_bn, merge_layer, merge_network
from lorac.model import BatchNorm2d, Conv2d, LoraConv2d, ModelConfig, build_backbone, build_network, predict
from lorac.tensor import ConvSpec, GradPair, conv2d_forward

CFG = ModelConfig(stages=[(1, 8, 1), (1, 16, 2)], num_classes=4, seed=4)


def shaped(net):
    return [(n, p.value.shape) for n, p in net.named_parameters()]


def trained_like(rng, alpha=2.0):
    """A branch network with non-trivial factors and BN statistics."""
    net = build_network(CFG, "plain", alpha, 2)
    for _, m in net.named_modules():
        if isinstance(m, LoraConv2d):
            m.factors.B.value[...] = rng.normal(0, 0.05, m.factors.B.value.shape)
        if isinstance(m, BatchNorm2d):
            m.running_mean[...] = rng.normal(0, 0.1, m.channels)
            m.running_var[...] = rng.uniform(0.5, 1.5, m.channels)
            m.gamma.value[...] = rng.uniform(0.8, 1.2, m.channels)
    return net.eval()


# -- merge_layer -----------------------------------------------------------

def test_merge_zero_b_is_w0(rng):
    spec = ConvSpec(4, 3, 3)
    W0 = rng.standard_normal(spec.weight_shape).astype(np.float32)
    layer = LoraConvLayer(spec, GradPair.frozen(W0), init_factors(spec, RankMode.plain(2), alpha=4.0))
    assert merge_layer(layer).tobytes() == W0.tobytes()


def test_merge_alpha_zero_is_w0(rng):
    layer = random_lora_layer(rng, ConvSpec(4, 3, 3), RankMode.plain(2), alpha=0.0)
    assert merge_layer(layer).tobytes() == layer.W0.value.tobytes()


def test_merge_matches_branch_forward(rng):
    for _ in range(20):
        layer = random_lora_layer(rng)
        x = rng.standard_normal((2, layer.spec.c_in, 6, 6))
        merged = conv2d_forward(x, merge_layer(layer), layer.spec)
        branch = lora_forward(layer, x)
        two = conv2d_forward(x, layer.W0.value, layer.spec) + \
            layer.factors.alpha * conv2d_forward(x, compose_delta(layer.factors), layer.spec)
        scale = max(1.0, np.abs(two).max())
        assert np.abs(merged - branch).max() <= 1e-6 * scale
        assert np.abs(merged - two).max() <= 1e-6 * scale


def test_merge_layer_leaves_source(rng):
    layer = random_lora_layer(rng)
    W0, A, B = (a.copy() for a in (layer.W0.value, layer.factors.A.value, layer.factors.B.value))
    out = merge_layer(layer)
    out[...] = 0
    np.testing.assert_array_equal(layer.W0.value, W0)
    np.testing.assert_array_equal(layer.factors.A.value, A)
    np.testing.assert_array_equal(layer.factors.B.value, B)


# -- BN fusion -------------------------------------------------------------

def test_fuse_identity_bn(rng):
    W = rng.standard_normal((3, 2, 3, 3))
    Wf, b = fuse_batchnorm(W, (np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), 0.0))
    np.testing.assert_array_equal(Wf, W)
    np.testing.assert_array_equal(b, 0)


def test_fuse_affine_only(rng):
    W = rng.standard_normal((3, 2, 3, 3))
    Wf, b = fuse_batchnorm(W, (np.full(3, 2.0), np.full(3, 3.0), np.zeros(3), np.ones(3), 0.0))
    np.testing.assert_array_equal(Wf, 2 * W)
    np.testing.assert_array_equal(b, 3)


def test_fuse_matches_pipeline(rng):
    spec = ConvSpec(5, 3, 3, 1, 1)
    W = rng.standard_normal(spec.weight_shape)
    g, beta = rng.uniform(0.5, 2, 5), rng.normal(size=5)
    mu, var, eps = rng.normal(size=5), rng.uniform(0.1, 3, 5), 1e-5
    x = rng.standard_normal((2, 3, 7, 7))
    y = conv2d_forward(x, W, spec)
    ref = (y - mu[None, :, None, None]) / np.sqrt(var + eps)[None, :, None, None] * g[None, :, None, None] \
        + beta[None, :, None, None]
    Wf, b = fuse_batchnorm(W, (g, beta, mu, var, eps))
    assert np.abs(conv2d_forward(x, Wf, spec, b) - ref).max() <= 1e-5


def test_fuse_with_existing_bias(rng):
    W = rng.standard_normal((2, 1, 1, 1))
    Wf, b = fuse_batchnorm(W, (np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), 0.0), conv_b=np.array([1.0, -1.0]))
    np.testing.assert_array_equal(b, [1.0, -1.0])


def test_fuse_errors(rng):
    W = rng.standard_normal((3, 2, 3, 3))
    with pytest.raises(InvalidArgumentError, match="channels"):
        fuse_batchnorm(W, (np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), 0.0))
    with pytest.raises(InvalidArgumentError, match="variance"):
        fuse_batchnorm(W, (np.ones(3), np.zeros(3), np.zeros(3), -np.ones(3), 0.0))


# -- network merge and export ---------------------------------------------

def test_fresh_export_equals_backbone(tmp_path):
    base = build_backbone(CFG)
    save_full_checkpoint(base, tmp_path / "b.lrcf")
    net = build_network(CFG, "rk", 8.0, 1)
    load_pretrained_into(net, tmp_path / "b.lrcf")
    out = export_inference_model(net)
    assert shaped(out) == shaped(base)
    for (n1, p1), (n2, p2) in zip(out.named_parameters(), base.named_parameters()):
        assert n1 == n2 and p1.value.tobytes() == p2.value.tobytes()


def test_export_equivalence_and_roundtrip(rng, tmp_path):
    net = trained_like(rng)
    x = rng.random((32, 3, 12, 12), dtype=np.float32)
    path = tmp_path / "m.lrcf"
    out = export_inference_model(net, path=path)
    a, b = predict(net, x), predict(out, x)
    assert np.abs(a - b).max() <= 1e-4
    np.testing.assert_array_equal(a.argmax(1), b.argmax(1))
    assert out.lora is None and not any(isinstance(m, LoraConv2d) for _, m in out.named_modules())
    assert predict(load_full_checkpoint(path), x).tobytes() == b.tobytes()
    # source keeps its branches
    assert net.lora is not None


def test_export_architecture_preserved(rng):
    net = trained_like(rng)
    base = build_backbone(CFG)
    out = export_inference_model(net)
    assert shaped(out) == shaped(base)
    assert [n for n, _ in out.named_modules()] == [n for n, _ in base.named_modules()]


def test_export_with_bn_fusion(rng, tmp_path):
    net = trained_like(rng)
    x = rng.random((16, 3, 12, 12), dtype=np.float32)
    out = export_inference_model(net, fuse_bn=True, path=tmp_path / "f.lrcf")
    assert out.fused_bn
    assert not any(isinstance(m, BatchNorm2d) for _, m in out.named_modules())
    a, b = predict(net, x), predict(out, x)
    assert np.abs(a - b).max() <= 1e-4
    np.testing.assert_array_equal(a.argmax(1), b.argmax(1))
    again = load_full_checkpoint(tmp_path / "f.lrcf")
    assert predict(again, x).tobytes() == b.tobytes()


def test_merge_twice_is_error(rng):
    net = trained_like(rng)
    merge_network(net)
    with pytest.raises(MergeError):
        merge_network(net)


def test_consumed_branch_cannot_merge_again(rng):
    net = trained_like(rng)
    branches = [u.conv for _, _, u in net.conv_bn_units() if isinstance(u.conv, LoraConv2d)]
    merge_network(net)
    assert all(b.consumed for b in branches)
    assert all(isinstance(u.conv, Conv2d) for _, _, u in net.conv_bn_units())


def test_fuse_twice_and_before_merge(rng):
    net = trained_like(rng)
    with pytest.raises(MergeError, match="merge"):
        fuse_network_bn(net)
    # the failed call must not have folded the stem already
    assert isinstance(net.stem.bn, BatchNorm2d) and not net.fused_bn
    merge_network(net)
    fuse_network_bn(net)
    with pytest.raises(MergeError):
        fuse_network_bn(net)
