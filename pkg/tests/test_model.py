import copy

import numpy as np
import pytest

from lorac.errors import ConfigError, InvalidArgumentError
from lorac.lora import Granularity, RankMode, RankVariant, count_full, count_layer_wise, lora_forward
from lorac.model import (PRESETS, BatchNorm2d, LayerPolicy, LoraConv2d, ModelConfig, attach_lora,
                         backbone_param_count, build_backbone, build_network, conv_specs, count_trainable,
                         format_model_config, forward_batch, frozen_parameters, load_model_config, lora_layers,
                         parse_model_config, predict, resolve_rank_variant, set_alpha, trainable_parameters)
from lorac.tensor import sgd_step

TINY = ModelConfig(stages=[(1, 8, 1), (1, 16, 2)], num_classes=10, block_kind="basic")


def expected_trainable(cfg, mode):
    specs = dict(conv_specs(cfg))
    stem = count_full(specs.pop("stem.conv"))
    head = cfg.stages[-1][1] * cfg.expansion * cfg.num_classes + cfg.num_classes
    return stem + head + sum(count_layer_wise(s, mode) for s in specs.values())


def conv_ref(x, W, stride, pad, bias=None):
    """Shift-and-accumulate conv, one kernel tap at a time."""
    n, c, h, w = x.shape
    c_out, _, k, _ = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    y = np.zeros((n, c_out, oh, ow))
    for u in range(k):
        for v in range(k):
            patch = xp[:, :, u:u + stride * (oh - 1) + 1:stride, v:v + stride * (ow - 1) + 1:stride]
            y += np.einsum("nmij,om->noij", patch, W[:, :, u, v])
    return y if bias is None else y + bias[None, :, None, None]


def replay(net, x):
    """Eval-mode forward rebuilt from the raw tensors of ``net``."""
    def unit(u, h):
        conv = u.conv
        W = conv.layer.effective_weight() if isinstance(conv, LoraConv2d) else conv.weight.value
        y = conv_ref(h, W.astype(np.float64), conv.spec.stride, conv.spec.padding)
        bn = u.bn
        return (y - bn.running_mean[None, :, None, None]) / np.sqrt(bn.running_var + bn.eps)[None, :, None, None] \
            * bn.gamma.value[None, :, None, None] + bn.beta.value[None, :, None, None]

    relu = lambda a: np.maximum(a, 0)
    h = relu(unit(net.stem, x.astype(np.float64)))
    for _, blk in net.blocks:
        z = h
        for i, u in enumerate(blk.units):
            z = unit(u, z)
            if i < len(blk.units) - 1:
                z = relu(z)
        s = unit(blk.shortcut, h) if blk.shortcut is not None else h
        h = relu(z + s)
    f = h.mean(axis=(2, 3))
    return f @ net.head.weight.value.T + net.head.bias.value


def randomize(net, rng):
    """Non-trivial BN statistics and non-zero B factors."""
    for _, m in net.named_modules():
        if isinstance(m, BatchNorm2d):
            m.running_mean[...] = rng.normal(0, 0.2, m.channels)
            m.running_var[...] = rng.uniform(0.5, 2.0, m.channels)
            m.gamma.value[...] = rng.uniform(0.5, 1.5, m.channels)
            m.beta.value[...] = rng.normal(0, 0.2, m.channels)
        if isinstance(m, LoraConv2d):
            m.factors.B.value[...] = rng.normal(0, 0.1, m.factors.B.value.shape)
    return net


# -- config ----------------------------------------------------------------

def test_config_roundtrip_text():
    cfg = ModelConfig(stages=[(2, 16, 1), (1, 32, 2)], num_classes=5, block_kind="bottleneck", seed=9, stem_channels=8)
    assert parse_model_config(format_model_config(cfg)) == cfg


def test_config_preset_with_overrides():
    cfg = parse_model_config("preset = resnet18  # base\nnum_classes = 100\n")
    assert cfg.stages == PRESETS["resnet18"]().stages
    assert cfg.num_classes == 100


@pytest.mark.parametrize("text,word", [
    ("stage = 2x64\nfoo = 1\n", "unknown key"),
    ("stage = two\n", "stage must look like"),
    ("num_classes = 4\n", "no stages"),
    ("preset = vgg\n", "unknown preset"),
    ("stage = 1x8/1\nnum_classes = four\n", "integer"),
    ("stage = 0x8/1\n", "stages\\[0\\]"),
    ("stage = 1x8/1\nblock = dense\n", "block_kind"),
])
def test_config_errors(text, word):
    with pytest.raises(ConfigError, match=word):
        parse_model_config(text)


def test_config_file_and_missing(tmp_path):
    p = tmp_path / "m.cfg"
    p.write_text("stage = 1x8/1\nnum_classes = 3\n")
    assert load_model_config(str(p)).num_classes == 3
    with pytest.raises(FileNotFoundError):
        load_model_config(str(tmp_path / "none.cfg"))


def test_digest_tracks_architecture():
    a = load_model_config("resnet8")
    assert a.digest() == load_model_config("resnet8").digest()
    assert a.digest() != load_model_config("resnet14").digest()


def test_param_count_known_before_build():
    for name in ("resnet8", "resnet8-narrow", "resnet14"):
        cfg = load_model_config(name)
        net = build_backbone(cfg)
        assert backbone_param_count(cfg) == sum(p.value.size for _, p in net.named_parameters())


def test_resnet18_conv_total():
    total = sum(count_full(s) for _, s in conv_specs(load_model_config("resnet18")))
    # stem 3*64*9; stage i: first conv, three same-width convs, 1x1 projection from stage 2 on
    by_hand = 1728 + 4 * 36864 + (73728 + 3 * 147456 + 8192) + (294912 + 3 * 589824 + 32768) \
        + (1179648 + 3 * 2359296 + 131072)
    assert total == by_hand == 11_159_232
    assert abs(total - 11.23e6) / 11.23e6 < 0.01


def test_preset_rank_modes():
    assert resolve_rank_variant(load_model_config("resnet18"), None) is RankVariant.R_TIMES_K
    assert resolve_rank_variant(load_model_config("resnet50"), None) is RankVariant.PLAIN_R
    assert resolve_rank_variant(load_model_config("resnet101"), "auto") is RankVariant.PLAIN_R
    assert resolve_rank_variant(load_model_config("resnet18"), "plain") is RankVariant.PLAIN_R


# -- policy and accounting -------------------------------------------------

@pytest.mark.parametrize("mode", [RankMode.plain(1), RankMode.plain(3), RankMode.rk(2)])
def test_tiny_trainable_count(mode):
    net = build_network(TINY, mode.variant, alpha=1.0, r=mode.r)
    assert count_trainable(net) == expected_trainable(TINY, mode)
    assert sum(p.value.size for p in trainable_parameters(net).values()) == count_trainable(net)


def test_policy_defaults():
    net = build_network(TINY, "plain", r=1)
    pol = net.policy()
    assert pol["stem.conv"] is LayerPolicy.TRAINABLE
    assert pol["head"] is LayerPolicy.TRAINABLE
    for name, p in pol.items():
        if name.endswith(".bn") or ".bn" in name:
            assert p is LayerPolicy.FROZEN
        elif name not in ("stem.conv", "head"):
            assert p is LayerPolicy.FROZEN_WITH_LORA, name
    assert "layer2.0.shortcut.conv" in lora_layers(net)


def test_trainable_set_is_exact():
    net = build_network(TINY, "rk", r=1)
    names = set(trainable_parameters(net))
    expect = {"stem.conv.weight", "head.weight", "head.bias"}
    expect |= {f"{n}.lora_{f}" for n in lora_layers(net) for f in "AB"}
    assert names == expect
    assert all(p.grad is None for p in frozen_parameters(net).values())


def test_resnet18_fraction_below_one_percent():
    cfg = load_model_config("resnet18")
    specs = conv_specs(cfg)
    full = sum(count_full(s) for _, s in specs)
    lora = count_full(specs[0][1]) + sum(count_layer_wise(s, RankMode.plain(1)) for _, s in specs[1:])
    assert lora / full < 0.01


def test_attach_twice_and_kernel_wise_rejected():
    net = build_network(TINY)
    with pytest.raises(ConfigError):
        attach_lora(net)
    with pytest.raises(ConfigError):
        attach_lora(build_backbone(TINY), granularity=Granularity.KERNEL_WISE)


def test_bad_stage_config():
    with pytest.raises(ConfigError, match="stages\\[1\\]"):
        ModelConfig(stages=[(1, 8, 1), (1, 0, 2)])


# -- forward ---------------------------------------------------------------

def test_alpha_zero_matches_backbone(rng):
    base = randomize(build_backbone(TINY), rng)
    net = attach_lora(copy.deepcopy(base), "plain", alpha=0.0, r=2)
    randomize(net, np.random.default_rng(5))
    # restore base BN so the only difference is the zero-scaled branch
    for (_, a), (_, b) in zip(base.named_buffers(), net.named_buffers()):
        b[...] = a
    for (na, a), (nb, b) in zip(base.named_parameters(), [(n, p) for n, p in net.named_parameters()
                                                          if "lora" not in n]):
        b.value[...] = a.value
    x = rng.standard_normal((3, 3, 12, 12)).astype(np.float32)
    np.testing.assert_array_equal(predict(base, x), predict(net, x))


def test_fresh_branches_match_backbone_bitwise(rng):
    base = randomize(build_backbone(TINY), rng)
    net = attach_lora(copy.deepcopy(base), "rk", alpha=16.0, r=1)
    x = rng.standard_normal((2, 3, 10, 10)).astype(np.float32)
    assert predict(base, x).tobytes() == predict(net, x).tobytes()


def test_duplicate_rows_identical(rng):
    net = build_network(TINY).eval()
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    out = forward_batch(net, np.concatenate([x, x]))
    np.testing.assert_array_equal(out[0], out[1])


def test_zero_input_finite():
    net = randomize(build_network(TINY), np.random.default_rng(0)).eval()
    out = forward_batch(net, np.zeros((2, 3, 8, 8), np.float32))
    assert out.shape == (2, 10) and np.all(np.isfinite(out))


@pytest.mark.parametrize("kind", ["basic", "bottleneck"])
def test_forward_matches_replay(rng, kind):
    cfg = ModelConfig(stages=[(1, 4, 1), (2, 8, 2)], num_classes=5, block_kind=kind, seed=3)
    net = randomize(build_network(cfg, "plain", alpha=2.0, r=2), rng).eval()
    x = rng.standard_normal((3, 3, 9, 9)).astype(np.float32)
    assert np.max(np.abs(forward_batch(net, x) - replay(net, x))) <= 1e-5


def test_forward_shape_errors():
    net = build_network(TINY)
    with pytest.raises(InvalidArgumentError, match="batch"):
        forward_batch(net, np.zeros((2, 1, 8, 8), np.float32))
    with pytest.raises(InvalidArgumentError):
        forward_batch(net, np.zeros((3, 8, 8), np.float32))


def test_bn_uses_batch_stats_in_training(rng):
    net = build_network(TINY)
    x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32) * 3 + 1
    before = net.stem.bn.running_mean.copy()
    a = net.train().forward(x)
    assert not np.array_equal(net.stem.bn.running_mean, before)
    b = predict(net, x)
    assert not np.allclose(a, b)
    net.set_freeze_bn_stats(True)
    frozen = net.stem.bn.running_mean.copy()
    net.train().forward(x)
    np.testing.assert_array_equal(net.stem.bn.running_mean, frozen)


def test_sgd_step_leaves_frozen_untouched(rng):
    net = randomize(build_network(TINY, "plain", r=1), rng)
    frozen = {n: p.value.copy() for n, p in frozen_parameters(net).items()}
    x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
    logits = net.train().forward(x)
    net.backward(rng.standard_normal(logits.shape).astype(np.float32))
    params = trainable_parameters(net)
    assert all(np.abs(p.grad).max() > 0 for p in params.values())
    sgd_step(params.values(), 0.1, 5e-4)
    for n, v in frozen.items():
        assert frozen_parameters(net)[n].value.tobytes() == v.tobytes(), n


def test_set_alpha_updates_every_layer():
    net = build_network(TINY, alpha=1.0)
    set_alpha(net, 4.0)
    assert net.lora["alpha"] == 4.0
    assert all(m.factors.alpha == 4.0 for m in lora_layers(net).values())


def test_lora_module_forward_uses_layer(rng):
    net = randomize(build_network(TINY, "plain", alpha=3.0, r=2), rng)
    name, m = next(iter(lora_layers(net).items()))
    x = rng.standard_normal((2, m.spec.c_in, 6, 6)).astype(np.float32)
    np.testing.assert_array_equal(m.forward(x, False), lora_forward(m.layer, x))
