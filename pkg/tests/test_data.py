import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lorac.data import (CORRUPTIONS, FAMILIES, CorruptionSpec, Dataset, Family, ScenarioSpec, apply_corruption,
                        contrast, corrupt, corrupt_mixed, gaussian_blur, gaussian_kernel, gaussian_noise,
                        generate_synthetic, mean_abs_delta, motion_blur, parse_data_spec, pixelate, read_dataset,
                        source_task, target_task, write_dataset)
from lorac.errors import ConfigError, FormatError, InvalidArgumentError
from lorac.model import ModelConfig, build_backbone
from lorac.train import TrainConfig, accuracy, pretrain

SMALL = generate_synthetic(4, 6, 12, 12, seed=3)


def test_generator_deterministic():
    a = generate_synthetic(5, 4, 10, 14, seed=9)
    b = generate_synthetic(5, 4, 10, 14, seed=9)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    assert generate_synthetic(5, 4, 10, 14, seed=10).images.tobytes() != a.images.tobytes()


def test_generator_shapes_and_balance():
    ds = generate_synthetic(6, 7, 10, 12, seed=0)
    assert ds.images.shape == (42, 3, 12, 10) and ds.images.dtype == np.float32
    np.testing.assert_array_equal(np.bincount(ds.labels), np.full(6, 7))
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_more_classes_than_patterns():
    ds = generate_synthetic(12, 2, 8, 8, seed=1)
    assert set(ds.labels.tolist()) == set(range(12))


@pytest.mark.parametrize("args", [(1, 4, 8, 8), (3, 4, 7, 8), (3, -1, 8, 8)])
def test_generator_rejects(args):
    with pytest.raises(InvalidArgumentError):
        generate_synthetic(*args, seed=0)


def test_dataset_validation():
    with pytest.raises(InvalidArgumentError):
        Dataset(np.zeros((2, 3, 4)), np.zeros(2), 2)
    with pytest.raises(InvalidArgumentError):
        Dataset(np.zeros((2, 1, 4, 4)), np.zeros(3), 2)
    with pytest.raises(InvalidArgumentError):
        Dataset(np.zeros((2, 1, 4, 4)), np.array([0, 2]), 2)


# -- corruptions -----------------------------------------------------------

def test_registry_layout():
    assert {f.value for f in FAMILIES} == {"noise", "blur", "weather", "digital"}
    for fam in FAMILIES:
        assert sum(v[0] is fam for v in CORRUPTIONS.values()) == 2
    assert all(len(v[1]) == 5 for v in CORRUPTIONS.values())


@pytest.mark.parametrize("size", [16, 32])
@pytest.mark.parametrize("kind", list(CORRUPTIONS))
def test_severity_monotone(kind, size):
    ds = generate_synthetic(4, 24, size, size, seed=3)
    deltas = [mean_abs_delta(ds, corrupt(ds, CorruptionSpec.of(kind, s, seed=1))) for s in range(1, 6)]
    assert all(b >= a for a, b in zip(deltas, deltas[1:])), deltas
    assert deltas[-1] > deltas[0] > 0


@pytest.mark.parametrize("kind", list(CORRUPTIONS))
def test_corruption_invariants(kind):
    spec = CorruptionSpec.of(kind, 3, seed=5)
    out = corrupt(SMALL, spec)
    assert out.images.shape == SMALL.images.shape and out.images.dtype == np.float32
    assert out.images.min() >= 0 and out.images.max() <= 1
    np.testing.assert_array_equal(out.labels, SMALL.labels)
    assert out.tag == f"{CORRUPTIONS[kind][0].value}/{kind}/3" and out.family == CORRUPTIONS[kind][0].value
    assert corrupt(SMALL, spec).images.tobytes() == out.images.tobytes()
    # the input is never modified
    assert SMALL.images.tobytes() == generate_synthetic(4, 6, 12, 12, seed=3).images.tobytes()


def test_identity_settings(rng):
    x = SMALL.images
    np.testing.assert_array_equal(gaussian_noise(x, 0.0, rng), x)
    np.testing.assert_array_equal(pixelate(x, 1), x)
    np.testing.assert_array_equal(motion_blur(x, 1), x)
    np.testing.assert_array_equal(contrast(x, 1.0), x)
    np.testing.assert_allclose(gaussian_blur(x, 0.0), x)


def test_pixelate_blocks():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4) / 16
    out = pixelate(x, 2)
    np.testing.assert_allclose(out[0, 0, :2, :2], x[0, 0, :2, :2].mean())
    np.testing.assert_allclose(out[0, 0, 2:, 2:], x[0, 0, 2:, 2:].mean())
    # partial edge blocks average only real pixels
    y = np.ones((1, 1, 5, 5), np.float32) * 0.5
    np.testing.assert_allclose(pixelate(y, 2), 0.5, rtol=1e-6)


def test_blur_kernel_normalized():
    for s in (0.5, 1.0, 2.5):
        k = gaussian_kernel(s)
        assert abs(k.sum() - 1) < 1e-12 and len(k) % 2 == 1
        np.testing.assert_allclose(k, k[::-1])
    flat = np.full((1, 3, 9, 9), 0.3, np.float32)
    np.testing.assert_allclose(gaussian_blur(flat, 1.5), 0.3, rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(list(CORRUPTIONS)), sev=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_corruption_range_property(kind, sev, seed):
    out = apply_corruption(SMALL.images[:3], CorruptionSpec.of(kind, sev, seed))
    assert out.shape == (3, 3, 12, 12)
    assert np.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_spec_errors():
    with pytest.raises(ConfigError, match="unknown"):
        CorruptionSpec.of("snow", 1)
    with pytest.raises(ConfigError, match="severity"):
        CorruptionSpec.of("fog", 6)
    with pytest.raises(ConfigError, match="severity"):
        CorruptionSpec.of("fog", 0)
    with pytest.raises(ConfigError, match="family"):
        CorruptionSpec(Family.NOISE, "fog", 1)


def test_mixed_round_robin():
    out = corrupt_mixed(SMALL, 4, seed=2)
    kinds = list(CORRUPTIONS)
    for j, kind in enumerate(kinds):
        idx = np.arange(j, len(SMALL), len(kinds))
        want = apply_corruption(SMALL.images[idx], CorruptionSpec.of(kind, 4, 2))
        np.testing.assert_array_equal(out.images[idx], want)
    np.testing.assert_array_equal(out.labels, SMALL.labels)


# -- file format -----------------------------------------------------------

def test_dataset_roundtrip(tmp_path):
    ds = corrupt(SMALL, CorruptionSpec.of("fog", 2))
    p = tmp_path / "d.lrcd"
    n = write_dataset(ds, p)
    assert n == p.stat().st_size
    back = read_dataset(p)
    assert back.images.tobytes() == ds.images.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert (back.num_classes, back.seed, back.tag) == (ds.num_classes, ds.seed, ds.tag)


def test_dataset_file_errors(tmp_path):
    p = tmp_path / "d.lrcd"
    write_dataset(SMALL, p)
    cut = tmp_path / "cut.lrcd"
    cut.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError, match="cut.lrcd"):
        read_dataset(cut)
    with pytest.raises(InvalidArgumentError):
        write_dataset(SMALL.subset(np.arange(0)), tmp_path / "e.lrcd")
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "nope.lrcd")


# -- scenarios -------------------------------------------------------------

def test_parse_data_spec():
    assert parse_data_spec("synthetic:") == ScenarioSpec()
    s = parse_data_spec("synthetic:classes=6,n=10,size=12,seed=3,severity=2,n_eval=5")
    assert s == ScenarioSpec(num_classes=6, n_train=10, n_eval=5, size=12, seed=3, severity=2)
    assert parse_data_spec("n=5", style_shift=True).style_shift
    for bad in ("synthetic:colour=3", "synthetic:n", "synthetic:n=x"):
        with pytest.raises(ConfigError):
            parse_data_spec(bad)


def test_target_task_layout():
    spec = ScenarioSpec(n_train=4, n_eval=3, size=10)
    train, evals = target_task(spec)
    assert len(train) == 16 and train.tag == "mixed/all/4"
    assert set(evals) == {"clean"} | {CorruptionSpec.of(k, 4, 0).tag for k in CORRUPTIONS}
    assert all(len(d) == 12 for d in evals.values())
    src, _ = source_task(spec)
    assert src.images.tobytes() != train.images.tobytes()


def test_style_shift_changes_distribution():
    spec = ScenarioSpec(n_train=8, n_eval=8, size=12)
    plain_train, plain_eval = target_task(spec)
    tr, ev = target_task(ScenarioSpec(n_train=8, n_eval=8, size=12, style_shift=True))
    src, _ = source_task(spec)
    # three distinct render styles: compare sorted pixel values (1-D Wasserstein distance)
    q = [np.sort(d.images.ravel()) for d in (src, ev["clean"], tr)]
    dist = [np.abs(a - b).mean() for i, a in enumerate(q) for b in q[i + 1:]]
    assert min(dist) > 0.05, dist
    # without the shift the local data shares the pretraining style
    assert np.abs(np.sort(target_task(spec)[1]["clean"].images.ravel()) - q[0]).mean() < min(dist) / 2
    np.testing.assert_array_equal(tr.labels, plain_train.labels)


def test_two_class_task_learnable():
    tr = generate_synthetic(2, 48, 12, 12, seed=0)
    te = generate_synthetic(2, 32, 12, 12, seed=1)
    net = build_backbone(ModelConfig(stages=[(1, 8, 1), (1, 16, 2)], num_classes=2, seed=0))
    pretrain(net, tr, None, TrainConfig(epochs=8, batch_size=16, lr=0.05))
    assert accuracy(net, te) >= 0.95
