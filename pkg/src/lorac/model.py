"""ResNet-style classifiers built from a declarative config, with LoRA-C policy.

The network is a short, fixed topology (3x3 stem, residual stages, global
average pool, linear head), so every layer implements its own forward and
backward pass instead of going through a general autodiff graph.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, InvalidArgumentError
from .lora import (Granularity, LoraConvLayer, LowRankFactors, RankMode, RankVariant, init_factors,
                   lora_backward, lora_forward, select_rank_mode)
from .tensor import DTYPE, ConvSpec, GradPair, check_finite, conv2d_backward, conv2d_forward


class LayerPolicy(str, enum.Enum):
    TRAINABLE = "trainable"
    FROZEN_WITH_LORA = "frozen_with_lora"
    FROZEN = "frozen"


# --------------------------------------------------------------------------
# config

BLOCK_KINDS = ("basic", "bottleneck")


@dataclass
class ModelConfig:
    stages: List[Tuple[int, int, int]]  # (num_blocks, channels, stride)
    num_classes: int = 10
    input_channels: int = 3
    block_kind: str = "basic"
    seed: int = 0
    stem_channels: Optional[int] = None

    def __post_init__(self):
        self.stages = [tuple(int(v) for v in s) for s in self.stages]
        if not self.stages:
            raise ConfigError("model config needs at least one stage")
        for i, st in enumerate(self.stages):
            if len(st) != 3:
                raise ConfigError(f"stages[{i}]: expected (num_blocks, channels, stride), got {st}")
            nb, ch, stride = st
            if nb < 1 or ch < 1 or stride < 1:
                raise ConfigError(f"stages[{i}]: num_blocks, channels and stride must be positive, got {st}")
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.stem_channels is not None and self.stem_channels < 1:
            raise ConfigError(f"stem_channels must be positive, got {self.stem_channels}")

    @property
    def stem_width(self) -> int:
        return self.stem_channels or self.stages[0][1]

    @property
    def expansion(self) -> int:
        return 4 if self.block_kind == "bottleneck" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _resnet(blocks: Sequence[int], widths: Sequence[int], kind: str, num_classes: int = 10) -> ModelConfig:
    stages = [(b, w, 1 if i == 0 else 2) for i, (b, w) in enumerate(zip(blocks, widths))]
    return ModelConfig(stages=stages, num_classes=num_classes, block_kind=kind)


PRESETS = {
    "resnet18": lambda: _resnet([2, 2, 2, 2], [64, 128, 256, 512], "basic"),
    "resnet34": lambda: _resnet([3, 4, 6, 3], [64, 128, 256, 512], "basic"),
    "resnet50": lambda: _resnet([3, 4, 6, 3], [64, 128, 256, 512], "bottleneck"),
    "resnet101": lambda: _resnet([3, 4, 23, 3], [64, 128, 256, 512], "bottleneck"),
    # desk scale
    "resnet8": lambda: _resnet([1, 1, 1], [16, 32, 64], "basic", num_classes=4),
    "resnet14": lambda: _resnet([2, 2, 2], [16, 32, 64], "basic", num_classes=4),
    "resnet8-narrow": lambda: _resnet([1, 1, 1], [8, 16, 32], "basic", num_classes=4),
}


_STAGE_RE = re.compile(r"^\s*(\d+)\s*[x×]\s*(\d+)\s*(?:/\s*(\d+))?\s*$")


def parse_model_config(text: str) -> ModelConfig:
    """Parse the ``key = value`` config format.

    ``stage = <blocks>x<channels>/<stride>`` may repeat; ``preset = <name>``
    starts from a named architecture that later keys override.
    """
    values: Dict[str, str] = {}
    stages: List[Tuple[int, int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        if key == "stage":
            m = _STAGE_RE.match(value)
            if not m:
                raise ConfigError(f"line {lineno}: stage must look like '2x64/1', got {value!r}")
            stages.append((int(m.group(1)), int(m.group(2)), int(m.group(3) or 1)))
        elif key in ("preset", "num_classes", "input_channels", "block_kind", "block", "seed", "stem_channels"):
            values["block_kind" if key == "block" else key] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    base: dict = {}
    if "preset" in values:
        name = values.pop("preset")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}")
        base = PRESETS[name]().to_dict()
    if stages:
        base["stages"] = stages
    if "stages" not in base:
        raise ConfigError("model config defines no stages")
    try:
        for key in ("num_classes", "input_channels", "seed", "stem_channels"):
            if key in values:
                base[key] = int(values[key])
    except ValueError as e:
        raise ConfigError(f"integer expected: {e}") from None
    if "block_kind" in values:
        base["block_kind"] = values["block_kind"].lower()
    return ModelConfig.from_dict(base)


def format_model_config(cfg: ModelConfig) -> str:
    lines = [f"block_kind = {cfg.block_kind}", f"num_classes = {cfg.num_classes}",
             f"input_channels = {cfg.input_channels}", f"seed = {cfg.seed}"]
    if cfg.stem_channels is not None:
        lines.append(f"stem_channels = {cfg.stem_channels}")
    lines += [f"stage = {b}x{c}/{s}" for b, c, s in cfg.stages]
    return "\n".join(lines) + "\n"


def load_model_config(source: Union[str, Path, ModelConfig]) -> ModelConfig:
    """Accept a config object, a preset name, or a path to a config file."""
    if isinstance(source, ModelConfig):
        return source
    if str(source) in PRESETS:
        return PRESETS[str(source)]()
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"model config not found: {path}")
    return parse_model_config(path.read_text())


@dataclass(frozen=True)
class BlockPlan:
    name: str
    c_in: int
    width: int
    c_out: int
    stride: int
    shortcut: bool


def block_plan(cfg: ModelConfig) -> List[BlockPlan]:
    plan = []
    c_in = cfg.stem_width
    for s, (nb, width, stride) in enumerate(cfg.stages):
        for b in range(nb):
            st = stride if b == 0 else 1
            c_out = width * cfg.expansion
            plan.append(BlockPlan(f"layer{s + 1}.{b}", c_in, width, c_out, st, st != 1 or c_in != c_out))
            c_in = c_out
    return plan


def conv_specs(cfg: ModelConfig) -> List[Tuple[str, ConvSpec]]:
    """Every convolution of the backbone in forward order, computed without building it."""
    out = [("stem.conv", ConvSpec(cfg.stem_width, cfg.input_channels, 3, 1, 1))]
    for bp in block_plan(cfg):
        if cfg.block_kind == "basic":
            out.append((f"{bp.name}.conv1", ConvSpec(bp.width, bp.c_in, 3, bp.stride, 1)))
            out.append((f"{bp.name}.conv2", ConvSpec(bp.c_out, bp.width, 3, 1, 1)))
        else:
            out.append((f"{bp.name}.conv1", ConvSpec(bp.width, bp.c_in, 1, 1, 0)))
            out.append((f"{bp.name}.conv2", ConvSpec(bp.width, bp.width, 3, bp.stride, 1)))
            out.append((f"{bp.name}.conv3", ConvSpec(bp.c_out, bp.width, 1, 1, 0)))
        if bp.shortcut:
            out.append((f"{bp.name}.shortcut.conv", ConvSpec(bp.c_out, bp.c_in, 1, bp.stride, 0)))
    return out


def feature_width(cfg: ModelConfig) -> int:
    return cfg.stages[-1][1] * cfg.expansion


def backbone_param_count(cfg: ModelConfig) -> int:
    """Conv weights + BN affine + linear head, as counted for Table-style reporting."""
    convs = sum(s.c_out * s.c_in * s.k * s.k for _, s in conv_specs(cfg))
    bn = sum(2 * s.c_out for _, s in conv_specs(cfg))
    head = feature_width(cfg) * cfg.num_classes + cfg.num_classes
    return convs + bn + head


# --------------------------------------------------------------------------
# layers

class Module:
    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(())

    def local_parameters(self) -> Iterator[Tuple[str, GradPair]]:
        return iter(())

    def local_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(())

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[Tuple[str, GradPair]]:
        for mname, mod in self.named_modules():
            for pname, p in mod.local_parameters():
                yield (f"{mname}.{pname}" if mname else pname), p

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for mname, mod in self.named_modules():
            for bname, b in mod.local_buffers():
                yield (f"{mname}.{bname}" if mname else bname), b


class Identity(Module):
    def forward(self, x, train):
        return x

    def backward(self, dy):
        return dy


class ReLU(Module):
    def forward(self, x, train):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy):
        return np.where(self._mask, dy, 0).astype(dy.dtype, copy=False)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, weight: GradPair, bias: Optional[GradPair] = None, need_dx: bool = True):
        if weight.value.shape != spec.weight_shape:
            raise InvalidArgumentError(f"weight shape {weight.value.shape} does not match {spec.weight_shape}")
        self.spec = spec
        self.weight = weight
        self.bias = bias
        self.need_dx = need_dx

    def local_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def forward(self, x, train):
        self._x = x
        return conv2d_forward(x, self.weight.value, self.spec, None if self.bias is None else self.bias.value)

    def backward(self, dy):
        trainable = self.weight.requires_grad
        if not trainable and not self.need_dx:
            return None
        dx, dW = conv2d_backward(self._x, self.weight.value, self.spec, dy, need_dx=self.need_dx)
        self.weight.accumulate(dW)
        if self.bias is not None:
            self.bias.accumulate(dy.sum(axis=(0, 2, 3)))
        return dx


class LoraConv2d(Module):
    """Frozen convolution with a LoRA-C branch; forward uses ``W0 + alpha * dW``."""

    def __init__(self, layer: LoraConvLayer, need_dx: bool = True):
        self.layer = layer
        self.need_dx = need_dx
        self.consumed = False

    @property
    def spec(self) -> ConvSpec:
        return self.layer.spec

    @property
    def factors(self) -> LowRankFactors:
        return self.layer.factors

    def local_parameters(self):
        yield "weight", self.layer.W0
        yield "lora_A", self.layer.factors.A
        yield "lora_B", self.layer.factors.B

    def forward(self, x, train):
        return lora_forward(self.layer, x)

    def backward(self, dy):
        return lora_backward(self.layer, dy, need_dx=self.need_dx)


class BatchNorm2d(Module):
    def __init__(self, channels: int, gamma: GradPair, beta: GradPair, running_mean: np.ndarray,
                 running_var: np.ndarray, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.gamma, self.beta = gamma, beta
        self.running_mean, self.running_var = running_mean, running_var
        self.eps, self.momentum = eps, momentum
        self.freeze_stats = False

    @classmethod
    def fresh(cls, channels: int, dtype=DTYPE) -> "BatchNorm2d":
        return cls(channels, GradPair.trainable(np.ones(channels, dtype)), GradPair.trainable(np.zeros(channels, dtype)),
                   np.zeros(channels, dtype), np.ones(channels, dtype))

    def local_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def local_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def forward(self, x, train):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise InvalidArgumentError(f"BatchNorm2d({self.channels}) got input of shape {x.shape}")
        use_batch = train and not self.freeze_stats
        if use_batch:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (m / max(m - 1, 1))
            self.running_mean *= 1 - self.momentum
            self.running_mean += (self.momentum * mean).astype(self.running_mean.dtype)
            self.running_var *= 1 - self.momentum
            self.running_var += (self.momentum * unbiased).astype(self.running_var.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, use_batch)
        y = xhat * self.gamma.value.astype(x.dtype)[None, :, None, None] + self.beta.value.astype(x.dtype)[None, :, None, None]
        return check_finite(y, "BatchNorm2d")

    def backward(self, dy):
        xhat, inv_std, use_batch = self._cache
        self.gamma.accumulate((dy * xhat).sum(axis=(0, 2, 3)))
        self.beta.accumulate(dy.sum(axis=(0, 2, 3)))
        g = self.gamma.value.astype(dy.dtype)[None, :, None, None] * inv_std[None, :, None, None]
        if not use_batch:
            return dy * g
        dy_mean = dy.mean(axis=(0, 2, 3), keepdims=True)
        dyx_mean = (dy * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return g * (dy - dy_mean - xhat * dyx_mean)


class Linear(Module):
    def __init__(self, weight: GradPair, bias: GradPair):
        self.weight, self.bias = weight, bias

    def local_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.weight.value.shape[1]:
            raise InvalidArgumentError(f"Linear expects [n, {self.weight.value.shape[1]}], got {x.shape}")
        self._x = x
        return check_finite(x @ self.weight.value.T.astype(x.dtype) + self.bias.value.astype(x.dtype), "Linear")

    def backward(self, dy):
        self.weight.accumulate(dy.T @ self._x)
        self.bias.accumulate(dy.sum(axis=0))
        return dy @ self.weight.value.astype(dy.dtype)


class GlobalAvgPool(Module):
    def forward(self, x, train):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        n, c, h, w = self._shape
        return np.broadcast_to((dy / (h * w))[:, :, None, None], self._shape).astype(dy.dtype)


class ConvBN(Module):
    """conv followed by BN; the unit that gets merged and fused at export time."""

    def __init__(self, conv: Module, bn: Module):
        self.conv, self.bn = conv, bn

    def children(self):
        yield "conv", self.conv
        yield "bn", self.bn

    def forward(self, x, train):
        return self.bn.forward(self.conv.forward(x, train), train)

    def backward(self, dy):
        return self.conv.backward(self.bn.backward(dy))


class ResidualBlock(Module):
    """Basic (two 3x3) or bottleneck (1x1, 3x3, 1x1) block with optional projection."""

    def __init__(self, units: List[ConvBN], shortcut: Optional[ConvBN]):
        self.units = units
        self.shortcut = shortcut
        self.relus = [ReLU() for _ in units]

    def children(self):
        for i, u in enumerate(self.units):
            yield f"u{i + 1}", u
        if self.shortcut is not None:
            yield "shortcut", self.shortcut

    def forward(self, x, train):
        h = x
        for i, unit in enumerate(self.units):
            h = unit.forward(h, train)
            if i < len(self.units) - 1:
                h = self.relus[i].forward(h, train)
        s = self.shortcut.forward(x, train) if self.shortcut is not None else x
        if s.shape != h.shape:
            raise InvalidArgumentError(f"residual shapes differ: {h.shape} vs {s.shape}")
        return self.relus[-1].forward(h + s, train)

    def backward(self, dy):
        d = self.relus[-1].backward(dy)
        ds = self.shortcut.backward(d) if self.shortcut is not None else d
        h = d
        for i in reversed(range(len(self.units))):
            if i < len(self.units) - 1:
                h = self.relus[i].backward(h)
            h = self.units[i].backward(h)
        return h + ds


# Parameter names use conv1/bn1 etc. so that checkpoints read naturally.
def _unit_names(kind: str) -> List[str]:
    return ["1", "2"] if kind == "basic" else ["1", "2", "3"]


class Network(Module):
    def __init__(self, cfg: ModelConfig, stem: ConvBN, blocks: List[Tuple[str, ResidualBlock]], head: Linear):
        self.cfg = cfg
        self.stem = stem
        self.stem_relu = ReLU()
        self.blocks = blocks
        self.pool = GlobalAvgPool()
        self.head = head
        self.training = True
        self.fused_bn = False
        self.lora: Optional[dict] = None  # alpha, r, mode, granularity once attached

    # naming: stem.conv / layer1.0.conv1 / layer1.0.bn1 / layer1.0.shortcut.conv / head
    def named_modules(self, prefix: str = ""):
        yield "", self
        yield "stem.conv", self.stem.conv
        yield "stem.bn", self.stem.bn
        for bname, blk in self.blocks:
            for i, unit in enumerate(blk.units):
                yield f"{bname}.conv{i + 1}", unit.conv
                yield f"{bname}.bn{i + 1}", unit.bn
            if blk.shortcut is not None:
                yield f"{bname}.shortcut.conv", blk.shortcut.conv
                yield f"{bname}.shortcut.bn", blk.shortcut.bn
        yield "head", self.head

    def conv_bn_units(self) -> Iterator[Tuple[str, str, ConvBN]]:
        """(conv name, bn name, unit) for every conv/BN pair."""
        yield "stem.conv", "stem.bn", self.stem
        for bname, blk in self.blocks:
            for i, unit in enumerate(blk.units):
                yield f"{bname}.conv{i + 1}", f"{bname}.bn{i + 1}", unit
            if blk.shortcut is not None:
                yield f"{bname}.shortcut.conv", f"{bname}.shortcut.bn", blk.shortcut

    def convs(self) -> Iterator[Tuple[str, Module]]:
        for cname, _, unit in self.conv_bn_units():
            yield cname, unit.conv

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    def set_freeze_bn_stats(self, flag: bool) -> None:
        for _, m in self.named_modules():
            if isinstance(m, BatchNorm2d):
                m.freeze_stats = bool(flag)

    def forward(self, x, train: Optional[bool] = None):
        train = self.training if train is None else train
        if x.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise InvalidArgumentError(
                f"batch must be [n, {self.cfg.input_channels}, h, w], got shape {x.shape}")
        h = self.stem_relu.forward(self.stem.forward(x, train), train)
        for _, blk in self.blocks:
            h = blk.forward(h, train)
        return self.head.forward(self.pool.forward(h, train), train)

    def backward(self, dlogits):
        d = self.pool.backward(self.head.backward(dlogits))
        for _, blk in reversed(self.blocks):
            d = blk.backward(d)
        return self.stem.backward(self.stem_relu.backward(d))

    def parameter_dict(self) -> Dict[str, GradPair]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Network":
        """Cast every parameter and buffer in place (used for float64 gradient checks)."""
        for _, p in self.named_parameters():
            p.value = p.value.astype(dtype)
            if p.grad is not None:
                p.grad = p.grad.astype(dtype)
        for _, m in self.named_modules():
            if isinstance(m, BatchNorm2d):
                m.running_mean = m.running_mean.astype(dtype)
                m.running_var = m.running_var.astype(dtype)
        return self

    def policy(self) -> Dict[str, LayerPolicy]:
        out = {}
        for name, m in self.named_modules():
            if name == "":
                continue
            if isinstance(m, LoraConv2d):
                out[name] = LayerPolicy.FROZEN_WITH_LORA
            else:
                params = [p for _, p in m.local_parameters()]
                if params and all(p.requires_grad for p in params):
                    out[name] = LayerPolicy.TRAINABLE
                else:
                    out[name] = LayerPolicy.FROZEN
        return out


# --------------------------------------------------------------------------
# construction

def _kaiming_normal_conv(rng: np.random.Generator, spec: ConvSpec) -> np.ndarray:
    std = math.sqrt(2.0 / (spec.c_out * spec.k * spec.k))
    return (rng.standard_normal(spec.weight_shape) * std).astype(DTYPE)


def build_backbone(cfg: ModelConfig) -> Network:
    """Plain network with every parameter trainable (the pretraining setup)."""
    rng = np.random.default_rng(cfg.seed)
    specs = dict(conv_specs(cfg))

    def unit(name: str, bn_channels: int, first: bool = False) -> ConvBN:
        spec = specs[name]
        conv = Conv2d(spec, GradPair.trainable(_kaiming_normal_conv(rng, spec)), need_dx=not first)
        return ConvBN(conv, BatchNorm2d.fresh(bn_channels))

    stem = unit("stem.conv", cfg.stem_width, first=True)
    blocks = []
    for bp in block_plan(cfg):
        units = [unit(f"{bp.name}.conv{i}", specs[f"{bp.name}.conv{i}"].c_out) for i in _unit_names(cfg.block_kind)]
        shortcut = unit(f"{bp.name}.shortcut.conv", bp.c_out) if bp.shortcut else None
        blocks.append((bp.name, ResidualBlock(units, shortcut)))
    fw = feature_width(cfg)
    bound = 1.0 / math.sqrt(fw)
    head = Linear(GradPair.trainable(rng.uniform(-bound, bound, (cfg.num_classes, fw)).astype(DTYPE)),
                  GradPair.trainable(np.zeros(cfg.num_classes, DTYPE)))
    return Network(cfg, stem, blocks, head)


def resolve_rank_variant(cfg: ModelConfig, mode: Union[None, str, RankVariant]) -> RankVariant:
    if mode is None or mode == "auto":
        return select_rank_mode(backbone_param_count(cfg))
    return RankVariant(mode)


def attach_lora(net: Network, mode: Union[None, str, RankVariant] = None, alpha: float = 1.0, r: int = 1,
                granularity: Granularity = Granularity.LAYER_WISE, seed: Optional[int] = None) -> Network:
    """Apply the LoRA-C freeze policy in place.

    The stem conv and the head stay trainable; every other conv is frozen and
    gets a fresh branch; BN affine parameters are frozen.
    """
    if net.lora is not None:
        raise ConfigError("network already carries LoRA-C branches")
    if net.fused_bn:
        raise ConfigError("cannot attach LoRA-C branches to a BN-fused network")
    if Granularity(granularity) is not Granularity.LAYER_WISE:
        raise ConfigError("only layer-wise branches can be trained")
    variant = resolve_rank_variant(net.cfg, mode)
    rank = RankMode(variant, r)
    seed = net.cfg.seed if seed is None else seed
    for i, (name, unit) in enumerate((n, u) for n, _, u in net.conv_bn_units()):
        if name == "stem.conv":
            continue
        conv = unit.conv
        factors = init_factors(conv.spec, rank, Granularity.LAYER_WISE, seed=[seed, 7919, i], alpha=alpha,
                               dtype=conv.weight.value.dtype)
        unit.conv = LoraConv2d(LoraConvLayer(conv.spec, GradPair.frozen(conv.weight.value), factors),
                               need_dx=conv.need_dx)
    for _, m in net.named_modules():
        if isinstance(m, BatchNorm2d):
            m.gamma.freeze()
            m.beta.freeze()
    net.stem.conv.weight.unfreeze()
    net.head.weight.unfreeze()
    net.head.bias.unfreeze()
    net.lora = {"alpha": float(alpha), "r": int(r), "mode": variant.value, "granularity": Granularity.LAYER_WISE.value}
    return net


def build_network(cfg: ModelConfig, mode: Union[None, str, RankVariant] = None, alpha: float = 1.0,
                  r: int = 1) -> Network:
    """Backbone with LoRA-C branches registered; ``mode=None`` picks the rank setting by model size."""
    return attach_lora(build_backbone(cfg), mode=mode, alpha=alpha, r=r)


def set_alpha(net: Network, alpha: float) -> None:
    for _, m in net.named_modules():
        if isinstance(m, LoraConv2d):
            m.factors.alpha = float(alpha)
    if net.lora is not None:
        net.lora["alpha"] = float(alpha)


def forward_batch(net: Network, batch: np.ndarray) -> np.ndarray:
    """Logits ``[n, num_classes]`` in the network's current train/eval mode."""
    return net.forward(batch)


def trainable_parameters(net: Network) -> Dict[str, GradPair]:
    return {name: p for name, p in net.named_parameters() if p.requires_grad}


def frozen_parameters(net: Network) -> Dict[str, GradPair]:
    return {name: p for name, p in net.named_parameters() if not p.requires_grad}


def count_trainable(net: Network) -> int:
    return sum(p.value.size for p in trainable_parameters(net).values())


def lora_layers(net: Network) -> Dict[str, LoraConv2d]:
    return {name: m for name, m in net.named_modules() if isinstance(m, LoraConv2d)}


def predict(net: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for an arbitrarily large image array."""
    was = net.training
    net.eval()
    try:
        outs = [net.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    finally:
        net.training = was
    if not outs:
        return np.zeros((0, net.cfg.num_classes), DTYPE)
    return np.concatenate(outs, axis=0)
