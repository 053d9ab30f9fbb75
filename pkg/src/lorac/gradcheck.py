"""Central finite-difference checks for the hand-written backward passes.

All checks run in float64 with a scalar probe loss ``L = sum(R * f(...))`` for a
fixed random ``R``, so the analytic side is one backward call with ``dy = R``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .lora import Granularity, LoraConvLayer, RankMode, init_factors, lora_backward, lora_forward
from .model import BatchNorm2d, Conv2d, LoraConv2d, Module, Network
from .tensor import ConvSpec, GradPair, conv2d_backward, conv2d_forward, cross_entropy_loss, matmul, \
    matmul_backward

STEP = 1e-3
TOL = 1e-3
GRAD_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """Largest ``|a - n| / max(|a|, |n|)`` over entries where either side exceeds ``floor``."""
    a, n = np.asarray(analytic, np.float64).ravel(), np.asarray(numeric, np.float64).ravel()
    scale = np.maximum(np.abs(a), np.abs(n))
    mask = scale > floor
    if not mask.any():
        return float(np.max(np.abs(a - n), initial=0.0))
    return float(np.max(np.abs(a - n)[mask] / scale[mask]))


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float = TOL

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tol


def check_conv(rng: np.random.Generator, spec: Optional[ConvSpec] = None, size: int = 5) -> List[CheckResult]:
    if spec is None:
        spec = ConvSpec(int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3])),
                        int(rng.integers(1, 3)), int(rng.integers(0, 2)))
    x = rng.standard_normal((2, spec.c_in, size, size))
    W = rng.standard_normal(spec.weight_shape)
    R = rng.standard_normal(conv2d_forward(x, W, spec).shape)
    loss = lambda: float(np.sum(R * conv2d_forward(x, W, spec)))
    dx, dW = conv2d_backward(x, W, spec, R)
    return [CheckResult(f"conv{spec}.dx", max_rel_error(dx, numeric_grad(loss, x))),
            CheckResult(f"conv{spec}.dW", max_rel_error(dW, numeric_grad(loss, W)))]


def check_matmul(rng: np.random.Generator) -> List[CheckResult]:
    p, q, s = (int(v) for v in rng.integers(1, 7, size=3))
    a, b = rng.standard_normal((p, q)), rng.standard_normal((q, s))
    R = rng.standard_normal((p, s))
    loss = lambda: float(np.sum(R * matmul(a, b)))
    da, db = matmul_backward(a, b, R)
    return [CheckResult("matmul.dA", max_rel_error(da, numeric_grad(loss, a))),
            CheckResult("matmul.dB", max_rel_error(db, numeric_grad(loss, b)))]


def check_loss(rng: np.random.Generator) -> List[CheckResult]:
    n = int(rng.integers(2, 8))
    logits = rng.standard_normal(n) * 2
    label = int(rng.integers(0, n))
    _, g = cross_entropy_loss(logits, label)
    return [CheckResult("cross_entropy", max_rel_error(g, numeric_grad(lambda: cross_entropy_loss(logits, label)[0], logits)))]


def check_lora_layer(layer: LoraConvLayer, x: np.ndarray, rng: np.random.Generator, name: str = "lora") -> List[CheckResult]:
    """Gradients of the composed branch with respect to A, B and the input.

    ``B`` must be non-zero for the A-gradient to be informative; callers
    randomize it first.
    """
    f = layer.factors
    R = rng.standard_normal(lora_forward(layer, x).shape)
    loss = lambda: float(np.sum(R * lora_forward(layer, x)))
    f.A.grad = np.zeros_like(f.A.value)
    f.B.grad = np.zeros_like(f.B.value)
    lora_forward(layer, x)
    dx = lora_backward(layer, R)
    return [CheckResult(f"{name}.dA", max_rel_error(f.A.grad, numeric_grad(loss, f.A.value))),
            CheckResult(f"{name}.dB", max_rel_error(f.B.grad, numeric_grad(loss, f.B.value))),
            CheckResult(f"{name}.dx", max_rel_error(dx, numeric_grad(loss, x)))]


def random_lora_layer(rng: np.random.Generator, spec: Optional[ConvSpec] = None, mode: Optional[RankMode] = None,
                      alpha: Optional[float] = None) -> LoraConvLayer:
    if spec is None:
        spec = ConvSpec(int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.choice([1, 3])),
                        int(rng.integers(1, 3)), int(rng.integers(0, 2)))
    if mode is None:
        mode = RankMode(rng.choice(["plain", "rk"]), int(rng.integers(1, 4)))
    f = init_factors(spec, mode, Granularity.LAYER_WISE, seed=int(rng.integers(1 << 31)),
                     alpha=float(rng.uniform(0.5, 4)) if alpha is None else alpha, dtype=np.float64)
    f.B.value[...] = rng.standard_normal(f.B.value.shape)
    return LoraConvLayer(spec, GradPair.frozen(rng.standard_normal(spec.weight_shape)), f)


def check_module(module: Module, x: np.ndarray, rng: np.random.Generator, name: str, train: bool = True) -> List[CheckResult]:
    """Parameter and input gradients of a single layer.

    In train mode BN output does not depend on its running statistics, so the
    repeated forwards needed for differencing do not disturb the result.
    """
    R = rng.standard_normal(module.forward(x, train).shape)
    loss = lambda: float(np.sum(R * module.forward(x, train)))
    for _, p in module.local_parameters():
        p.zero_grad()
    module.forward(x, train)
    dx = module.backward(R)
    out = []
    for pname, p in module.local_parameters():
        if p.requires_grad:
            out.append(CheckResult(f"{name}.{pname}", max_rel_error(p.grad, numeric_grad(loss, p.value))))
    if dx is not None:
        out.append(CheckResult(f"{name}.dx", max_rel_error(dx, numeric_grad(loss, x))))
    return out


def check_network_layers(net: Network, n_layers: int, seed: int = 0, spatial: int = 6) -> List[CheckResult]:
    """Finite-difference checks on ``n_layers`` randomly sampled conv/BN layers of ``net`` (float64 copy)."""
    rng = np.random.default_rng(seed)
    net64 = copy.deepcopy(net).astype(np.float64)
    candidates = [(name, m) for name, m in net64.named_modules() if isinstance(m, (Conv2d, LoraConv2d, BatchNorm2d))]
    picks = rng.choice(len(candidates), size=min(n_layers, len(candidates)), replace=False)
    results: List[CheckResult] = []
    for i in sorted(int(p) for p in picks):
        name, m = candidates[i]
        if isinstance(m, LoraConv2d):
            layer = m.layer
            if not np.any(layer.factors.B.value):
                layer.factors.B.value[...] = rng.standard_normal(layer.factors.B.value.shape) * 0.1
            x = rng.standard_normal((2, layer.spec.c_in, spatial, spatial))
            results += check_lora_layer(layer, x, rng, name)
        elif isinstance(m, Conv2d):
            m.need_dx = True
            m.weight.unfreeze()
            x = rng.standard_normal((2, m.spec.c_in, spatial, spatial))
            results += check_module(m, x, rng, name)
        else:
            m.gamma.unfreeze()
            m.beta.unfreeze()
            m.gamma.value[...] = rng.uniform(0.5, 1.5, m.channels)
            x = rng.standard_normal((3, m.channels, 3, 3))
            results += check_module(m, x, rng, name)
    return results
