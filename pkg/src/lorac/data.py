"""Synthetic image-classification data and parameterized corruptions.

Classes are procedural patterns (oriented gratings, checkers, blobs, rings,
crosses) rendered with random phase, position, frequency and colour, so no
linear read-out of raw pixels separates them while a small CNN can.  Render
parameters come in disjoint *styles* for train/test style-shift experiments.

Corruptions follow a four-family grouping (noise, blur, weather, digital),
two kinds per family, five severities each.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from .checkpoint import MAGIC_DATASET, read_container, write_container
from .errors import ConfigError, FormatError, InvalidArgumentError

NUM_PATTERNS = 8


@dataclass
class Dataset:
    images: np.ndarray  # [n, c, h, w] float32 in [0, 1]
    labels: np.ndarray  # [n] int64
    num_classes: int
    seed: int = 0
    tag: str = "clean"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InvalidArgumentError(f"images must be [n, c, h, w], got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise InvalidArgumentError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidArgumentError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def family(self) -> str:
        return self.tag.split("/", 1)[0]

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


# --------------------------------------------------------------------------
# generator

@dataclass(frozen=True)
class Style:
    fg: Tuple[float, float]
    bg: Tuple[float, float]
    freq: Tuple[float, float]      # cycles per image
    sharpness: float
    grain: float                   # std of additive pixel noise


STYLES = (
    Style(fg=(0.65, 1.0), bg=(0.0, 0.35), freq=(2.0, 3.0), sharpness=4.0, grain=0.02),
    Style(fg=(0.0, 0.3), bg=(0.6, 0.95), freq=(3.0, 4.0), sharpness=1.5, grain=0.04),
    Style(fg=(0.45, 0.7), bg=(0.15, 0.4), freq=(1.5, 2.2), sharpness=8.0, grain=0.0),
)


def _pattern(kind: int, band: int, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray,
             style: Style) -> np.ndarray:
    """Soft pattern in [0, 1] on a unit grid (``yy``, ``xx`` in [0, 1))."""
    f = rng.uniform(*style.freq) * (1.0 + 0.6 * band)
    phase = rng.uniform(0, 2 * np.pi)
    jitter = rng.uniform(-0.15, 0.15)
    if kind in (0, 1, 2, 7):
        theta = {0: 0.0, 1: np.pi / 2, 2: np.pi / 4, 7: -np.pi / 4}[kind] + jitter
        field_ = np.sin(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    elif kind == 3:
        field_ = np.sin(2 * np.pi * f * xx + phase) * np.sin(2 * np.pi * f * yy + rng.uniform(0, 2 * np.pi))
    else:
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        if kind == 4:
            radius = rng.uniform(0.18, 0.3) / (1.0 + 0.3 * band)
            field_ = radius - d
            field_ = field_ / 0.08
        elif kind == 5:
            radius = rng.uniform(0.22, 0.32)
            field_ = 0.06 * (1 + 0.5 * band) - np.abs(d - radius)
            field_ = field_ / 0.04
        else:
            width = rng.uniform(0.06, 0.1) * (1 + 0.3 * band)
            field_ = width - np.minimum(np.abs(yy - cy), np.abs(xx - cx))
            field_ = field_ / 0.04
    return 1.0 / (1.0 + np.exp(-style.sharpness * field_))


def generate_synthetic(num_classes: int, n_per_class: int, w: int, h: int, seed: int,
                       style: int = 0, channels: int = 3) -> Dataset:
    """Deterministic class-balanced procedural dataset (labels in class-major order)."""
    if w < 8 or h < 8:
        raise InvalidArgumentError(f"image size must be at least 8x8, got {w}x{h}")
    if num_classes < 2:
        raise InvalidArgumentError("need at least two classes")
    if n_per_class < 0:
        raise InvalidArgumentError("n_per_class must be non-negative")
    st = STYLES[style % len(STYLES)]
    rng = np.random.default_rng([seed, style, num_classes, w, h])
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    n = num_classes * n_per_class
    images = np.empty((n, channels, h, w), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    for i, y in enumerate(labels):
        p = _pattern(int(y) % NUM_PATTERNS, int(y) // NUM_PATTERNS, rng, yy, xx, st)
        fg = rng.uniform(*st.fg, size=channels)[:, None, None]
        bg = rng.uniform(*st.bg, size=channels)[:, None, None]
        img = bg + (fg - bg) * p[None]
        if st.grain:
            img = img + rng.normal(0, st.grain, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, num_classes, seed, "clean" if style == 0 else f"clean/style{style}")


# --------------------------------------------------------------------------
# corruption primitives (all take and return float images in [0, 1])

def gaussian_noise(images: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return images.copy()
    return np.clip(images + sigma * rng.standard_normal(images.shape), 0, 1).astype(np.float32)


def salt_pepper(images: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(images.shape)
    out = images.copy()
    out[u < amount / 2] = 0.0
    out[u > 1 - amount / 2] = 1.0
    return out


def _filter_1d(images: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * images.ndim
    pad[axis] = (r, len(kernel) - 1 - r)
    p = np.pad(images, pad, mode="edge")
    n = images.shape[axis]
    out = np.zeros_like(images, dtype=np.float64)
    for t, kv in enumerate(kernel):
        out += kv * np.take(p, np.arange(t, t + n), axis=axis)
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.ones(1)
    r = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(images: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    out = _filter_1d(_filter_1d(images, k, axis=-1), k, axis=-2)
    return np.clip(out, 0, 1).astype(np.float32)


def motion_blur(images: np.ndarray, length: int) -> np.ndarray:
    if length <= 1:
        return images.copy()
    k = np.full(length, 1.0 / length)
    return np.clip(_filter_1d(images, k, axis=-1), 0, 1).astype(np.float32)


def _smooth_field(n: int, h: int, w: int, rng: np.random.Generator, cells: int = 4) -> np.ndarray:
    coarse = rng.random((n, 1, cells, cells))
    rep = np.repeat(np.repeat(coarse, -(-h // cells), axis=2), -(-w // cells), axis=3)[:, :, :h, :w]
    return gaussian_blur(rep, sigma=max(h, w) / cells / 2)


def fog(images: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Blend towards a bright low-frequency veil, which also lowers contrast."""
    n, _, h, w = images.shape
    veil = 0.55 + 0.45 * _smooth_field(n, h, w, rng)
    return np.clip(images * (1 - strength) + strength * veil, 0, 1).astype(np.float32)


def brightness(images: np.ndarray, shift: float) -> np.ndarray:
    return np.clip(images + shift, 0, 1).astype(np.float32)


def pixelate(images: np.ndarray, factor: int) -> np.ndarray:
    """Block-average down by ``factor`` and repeat back up (edge blocks may be partial)."""
    if factor <= 1:
        return images.copy()
    n, c, h, w = images.shape
    hb, wb = -(-h // factor), -(-w // factor)
    padded = np.pad(images, ((0, 0), (0, 0), (0, hb * factor - h), (0, wb * factor - w)))
    ones = np.pad(np.ones((h, w)), ((0, hb * factor - h), (0, wb * factor - w)))
    sums = padded.reshape(n, c, hb, factor, wb, factor).sum(axis=(3, 5))
    counts = ones.reshape(hb, factor, wb, factor).sum(axis=(1, 3))
    means = sums / counts
    up = np.repeat(np.repeat(means, factor, axis=2), factor, axis=3)[:, :, :h, :w]
    return np.clip(up, 0, 1).astype(np.float32)


def contrast(images: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1:
        return images.copy()
    m = images.mean(axis=(1, 2, 3), keepdims=True)
    return np.clip(m + factor * (images - m), 0, 1).astype(np.float32)


class Family(str, enum.Enum):
    NOISE = "noise"
    BLUR = "blur"
    WEATHER = "weather"
    DIGITAL = "digital"


# kind -> (family, five severity strengths)
CORRUPTIONS: Dict[str, Tuple[Family, Tuple[float, ...]]] = {
    "gaussian_noise": (Family.NOISE, (0.06, 0.10, 0.15, 0.21, 0.28)),
    "salt_pepper": (Family.NOISE, (0.03, 0.06, 0.10, 0.15, 0.22)),
    "gaussian_blur": (Family.BLUR, (0.7, 1.0, 1.4, 1.9, 2.5)),
    "motion_blur": (Family.BLUR, (3, 5, 7, 9, 11)),
    "fog": (Family.WEATHER, (0.3, 0.4, 0.5, 0.6, 0.7)),
    "brightness": (Family.WEATHER, (0.15, 0.25, 0.35, 0.45, 0.55)),
    "pixelate": (Family.DIGITAL, (2, 3, 4, 5, 6)),
    "contrast": (Family.DIGITAL, (0.6, 0.45, 0.33, 0.22, 0.14)),
}
FAMILIES = tuple(Family)


@dataclass(frozen=True)
class CorruptionSpec:
    family: Family
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.kind not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}; known: {', '.join(CORRUPTIONS)}")
        if CORRUPTIONS[self.kind][0] is not self.family:
            raise ConfigError(f"corruption {self.kind!r} belongs to family {CORRUPTIONS[self.kind][0].value!r}, "
                              f"not {self.family.value!r}")
        if not 1 <= int(self.severity) <= 5:
            raise ConfigError(f"severity must be in 1..5, got {self.severity}")

    @classmethod
    def of(cls, kind: str, severity: int, seed: int = 0) -> "CorruptionSpec":
        if kind not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption kind {kind!r}; known: {', '.join(CORRUPTIONS)}")
        return cls(CORRUPTIONS[kind][0], kind, severity, seed)

    @property
    def strength(self) -> float:
        return CORRUPTIONS[self.kind][1][self.severity - 1]

    @property
    def tag(self) -> str:
        return f"{self.family.value}/{self.kind}/{self.severity}"


def apply_corruption(images: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    # The random field depends on (seed, kind) only, so severities scale the same draw.
    rng = np.random.default_rng([spec.seed, list(CORRUPTIONS).index(spec.kind)])
    s = spec.strength
    if spec.kind == "gaussian_noise":
        return gaussian_noise(images, s, rng)
    if spec.kind == "salt_pepper":
        return salt_pepper(images, s, rng)
    if spec.kind == "gaussian_blur":
        return gaussian_blur(images, s)
    if spec.kind == "motion_blur":
        return motion_blur(images, int(s))
    if spec.kind == "fog":
        return fog(images, s, rng)
    if spec.kind == "brightness":
        return brightness(images, s)
    if spec.kind == "pixelate":
        return pixelate(images, int(s))
    if spec.kind == "contrast":
        return contrast(images, s)
    raise ConfigError(f"unknown corruption kind {spec.kind!r}")


def corrupt(ds: Dataset, spec: CorruptionSpec) -> Dataset:
    """Corrupted copy of ``ds``; labels and shapes are untouched."""
    return Dataset(apply_corruption(ds.images, spec), ds.labels.copy(), ds.num_classes, ds.seed, spec.tag)


def corrupt_mixed(ds: Dataset, severity: int, seed: int, kinds: Sequence[str] = tuple(CORRUPTIONS)) -> Dataset:
    """Each image gets one corruption kind, assigned round-robin by index."""
    images = ds.images.copy()
    for j, kind in enumerate(kinds):
        idx = np.arange(j, len(ds), len(kinds))
        if idx.size:
            images[idx] = apply_corruption(ds.images[idx], CorruptionSpec.of(kind, severity, seed))
    return Dataset(images, ds.labels.copy(), ds.num_classes, ds.seed, f"mixed/all/{severity}")


def mean_abs_delta(a: Dataset, b: Dataset) -> float:
    return float(np.mean(np.abs(a.images.astype(np.float64) - b.images)))


# --------------------------------------------------------------------------
# file format

def write_dataset(ds: Dataset, path: Union[str, Path]) -> int:
    if len(ds) == 0:
        raise InvalidArgumentError("refusing to write an empty dataset")
    if ds.num_classes > 65535:
        raise InvalidArgumentError("labels are stored as u16")
    n, c, h, w = ds.images.shape
    header = {"n": n, "c": c, "h": h, "w": w, "num_classes": ds.num_classes, "seed": ds.seed, "tag": ds.tag}
    payload = [np.ascontiguousarray(ds.images, dtype="<f4").tobytes(),
               np.ascontiguousarray(ds.labels, dtype="<u2").tobytes()]
    return write_container(path, MAGIC_DATASET, header, payload)


def read_dataset(path: Union[str, Path]) -> Dataset:
    header, payload = read_container(path, MAGIC_DATASET)
    try:
        n, c, h, w = (int(header[k]) for k in ("n", "c", "h", "w"))
    except (KeyError, ValueError, TypeError):
        raise FormatError(path, "header lacks n/c/h/w") from None
    img_bytes = 4 * n * c * h * w
    if len(payload) != img_bytes + 2 * n:
        raise FormatError(path, f"payload has {len(payload)} bytes, expected {img_bytes + 2 * n} (truncated?)")
    images = np.frombuffer(payload, dtype="<f4", count=n * c * h * w).reshape(n, c, h, w).astype(np.float32)
    labels = np.frombuffer(payload, dtype="<u2", count=n, offset=img_bytes).astype(np.int64)
    return Dataset(images, labels, int(header["num_classes"]), int(header.get("seed", 0)), str(header.get("tag", "")))


# --------------------------------------------------------------------------
# scenarios

@dataclass(frozen=True)
class ScenarioSpec:
    """Sizes and seeds of the desk-scale pretrain -> corrupted fine-tune setting."""

    num_classes: int = 4
    n_train: int = 96       # per class
    n_eval: int = 48        # per class
    size: int = 16
    seed: int = 0
    severity: int = 4
    style_shift: bool = False


_SPEC_KEYS = {"classes": "num_classes", "num_classes": "num_classes", "n": "n_train", "n_train": "n_train",
              "n_eval": "n_eval", "size": "size", "seed": "seed", "severity": "severity"}


def parse_data_spec(text: str, **overrides) -> ScenarioSpec:
    """``synthetic:classes=4,n=96,size=16,seed=0,severity=4`` (prefix optional)."""
    body = text[len("synthetic:"):] if text.startswith("synthetic:") else text
    kw = {}
    for item in filter(None, (s.strip() for s in body.split(","))):
        if "=" not in item:
            raise ConfigError(f"bad synthetic data option {item!r}; expected key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in _SPEC_KEYS:
            raise ConfigError(f"unknown synthetic data option {k!r}; known: {', '.join(sorted(_SPEC_KEYS))}")
        try:
            kw[_SPEC_KEYS[k]] = int(v)
        except ValueError:
            raise ConfigError(f"synthetic data option {k!r} needs an integer, got {v!r}") from None
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioSpec(**kw)


def source_task(spec: ScenarioSpec) -> Tuple[Dataset, Dataset]:
    """Clean train/held-out pair used to produce the pretrained base."""
    g = lambda n, s: generate_synthetic(spec.num_classes, n, spec.size, spec.size, s, style=0)
    return g(spec.n_train, spec.seed), g(spec.n_eval, spec.seed + 1000)


def target_task(spec: ScenarioSpec) -> Tuple[Dataset, Dict[str, Dataset]]:
    """Corrupted local training data and per-corruption evaluation sets.

    Evaluation sets are keyed by tag (``clean`` plus ``family/kind/severity``);
    with ``style_shift`` the local data and the evaluation data use different
    render styles, both distinct from the pretraining style.
    """
    train_style, eval_style = (1, 2) if spec.style_shift else (0, 0)
    local = generate_synthetic(spec.num_classes, spec.n_train, spec.size, spec.size, spec.seed + 2000, train_style)
    train = corrupt_mixed(local, spec.severity, spec.seed + 3000)
    clean_eval = generate_synthetic(spec.num_classes, spec.n_eval, spec.size, spec.size, spec.seed + 4000, eval_style)
    evals = {"clean": clean_eval}
    for kind in CORRUPTIONS:
        cs = CorruptionSpec.of(kind, spec.severity, spec.seed + 5000)
        evals[cs.tag] = corrupt(clean_eval, cs)
    return train, evals
