"""Low-rank factors for convolution weights and their parameter accounting.

A layer-wise adapter stores ``A`` as ``[rho, c_in, k]`` and ``B`` as
``[c_out, k, rho]``.  Their product, taken as matrices ``B[(o,u), rho]`` and
``A[rho, (m,v)]``, is a ``(c_out*k) x (c_in*k)`` matrix that is rearranged into
a ``[c_out, c_in, k, k]`` weight increment via ``dW[o,m,u,v] = P[o*k+u, m*k+v]``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Tuple

import numpy as np

from .errors import InvalidArgumentError
from .tensor import (DTYPE, ConvSpec, GradPair, conv2d_backward, conv2d_forward, matmul,
                     reshape_permute)


class RankVariant(str, enum.Enum):
    PLAIN_R = "plain"
    R_TIMES_K = "rk"


class Granularity(str, enum.Enum):
    LAYER_WISE = "layer"
    KERNEL_WISE = "kernel"


@dataclass(frozen=True)
class RankMode:
    variant: RankVariant
    r: int

    def __post_init__(self):
        object.__setattr__(self, "variant", RankVariant(self.variant))
        if int(self.r) < 1:
            raise InvalidArgumentError(f"rank r must be >= 1, got {self.r}")

    def inner_dim(self, k: int) -> int:
        return self.r * k if self.variant is RankVariant.R_TIMES_K else self.r

    @classmethod
    def plain(cls, r: int) -> "RankMode":
        return cls(RankVariant.PLAIN_R, r)

    @classmethod
    def rk(cls, r: int) -> "RankMode":
        return cls(RankVariant.R_TIMES_K, r)


def factor_shapes(spec: ConvSpec, mode: RankMode, granularity: Granularity) -> Tuple[tuple, tuple]:
    rho = mode.inner_dim(spec.k)
    if Granularity(granularity) is Granularity.LAYER_WISE:
        return (rho, spec.c_in, spec.k), (spec.c_out, spec.k, rho)
    return (spec.c_out, rho, spec.c_in, spec.k), (spec.c_out, spec.k, rho)


def kaiming_bound(fan_in: int) -> float:
    """Kaiming-uniform bound for ReLU gain: ``sqrt(3) * sqrt(2) / sqrt(fan_in)``."""
    return math.sqrt(3.0) * math.sqrt(2.0) / math.sqrt(fan_in)


@dataclass(eq=False)
class LowRankFactors:
    spec: ConvSpec
    A: GradPair
    B: GradPair
    alpha: float
    mode: RankMode
    granularity: Granularity = Granularity.LAYER_WISE

    def __post_init__(self):
        self.granularity = Granularity(self.granularity)
        if self.alpha < 0:
            raise InvalidArgumentError(f"alpha must be non-negative, got {self.alpha}")
        a_shape, b_shape = factor_shapes(self.spec, self.mode, self.granularity)
        if self.A.value.shape != a_shape:
            raise InvalidArgumentError(f"A has shape {self.A.value.shape}, expected {a_shape}")
        if self.B.value.shape != b_shape:
            raise InvalidArgumentError(f"B has shape {self.B.value.shape}, expected {b_shape}")

    @property
    def rho(self) -> int:
        return self.mode.inner_dim(self.spec.k)

    @property
    def num_params(self) -> int:
        return self.A.value.size + self.B.value.size


def init_factors(spec: ConvSpec, mode: RankMode, granularity: Granularity = Granularity.LAYER_WISE,
                 seed: int = 0, alpha: float = 1.0, dtype=DTYPE) -> LowRankFactors:
    """``B`` all zeros, ``A ~ U(-b, b)`` with the Kaiming bound over ``fan_in = c_in*k``."""
    a_shape, b_shape = factor_shapes(spec, mode, granularity)
    bound = kaiming_bound(spec.c_in * spec.k)
    rng = np.random.default_rng(seed)
    A = rng.uniform(-bound, bound, size=a_shape).astype(dtype)
    B = np.zeros(b_shape, dtype=dtype)
    return LowRankFactors(spec, GradPair.trainable(A), GradPair.trainable(B), float(alpha), mode,
                          Granularity(granularity))


def delta_matrix(f: LowRankFactors) -> np.ndarray:
    """The ``(c_out*k) x (c_in*k)`` matrix form of the increment."""
    s, rho = f.spec, f.rho
    if f.granularity is Granularity.LAYER_WISE:
        return matmul(f.B.value.reshape(s.c_out * s.k, rho), f.A.value.reshape(rho, s.c_in * s.k))
    dW = compose_delta(f)
    return reshape_permute(dW, dW.shape, (0, 2, 1, 3)).reshape(s.c_out * s.k, s.c_in * s.k)


def compose_delta(f: LowRankFactors) -> np.ndarray:
    """Weight increment ``[c_out, c_in, k, k]`` (without the alpha scale)."""
    s = f.spec
    if f.granularity is Granularity.LAYER_WISE:
        if f.A.value.ndim != 3 or f.B.value.ndim != 3:
            raise InvalidArgumentError("layer-wise factors must be rank 3")
        P = delta_matrix(f)
        return reshape_permute(P, (s.c_out, s.k, s.c_in, s.k), (0, 2, 1, 3))
    if f.A.value.ndim != 4:
        raise InvalidArgumentError("kernel-wise A must be [c_out, rho, c_in, k]")
    # dW[i,m,u,v] = sum_rho B_i[u,rho] A_i[rho,m,v]
    return np.ascontiguousarray(np.einsum("iur,irmv->imuv", f.B.value, f.A.value))


def delta_grads(f: LowRankFactors, dL_ddelta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pull a gradient on the (unscaled) increment back onto ``(A, B)``."""
    s, rho = f.spec, f.rho
    if f.granularity is Granularity.LAYER_WISE:
        dP = reshape_permute(dL_ddelta, dL_ddelta.shape, (0, 2, 1, 3)).reshape(s.c_out * s.k, s.c_in * s.k)
        Bm = f.B.value.reshape(s.c_out * s.k, rho)
        Am = f.A.value.reshape(rho, s.c_in * s.k)
        dB = matmul(dP, Am.T).reshape(f.B.value.shape)
        dA = matmul(Bm.T, dP).reshape(f.A.value.shape)
        return dA, dB
    dB = np.einsum("imuv,irmv->iur", dL_ddelta, f.A.value)
    dA = np.einsum("imuv,iur->irmv", dL_ddelta, f.B.value)
    return dA, dB


@dataclass(eq=False)
class LoraConvLayer:
    """Frozen pretrained conv weight plus a trainable low-rank increment."""

    spec: ConvSpec
    W0: GradPair
    factors: LowRankFactors
    _cache: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.W0.value.shape != self.spec.weight_shape:
            raise InvalidArgumentError(f"W0 has shape {self.W0.value.shape}, expected {self.spec.weight_shape}")
        self.W0.freeze()

    def effective_weight(self) -> np.ndarray:
        f = self.factors
        return self.W0.value + f.alpha * compose_delta(f).astype(self.W0.value.dtype, copy=False)


def lora_forward(layer: LoraConvLayer, x: np.ndarray) -> np.ndarray:
    """``(W0 + alpha * dW) conv x`` as a single convolution over the merged weight."""
    layer._cache = x
    return conv2d_forward(x, layer.effective_weight(), layer.spec)


def lora_backward(layer: LoraConvLayer, dL_dy: np.ndarray, x: Optional[np.ndarray] = None,
                  need_dx: bool = True) -> Optional[np.ndarray]:
    """Accumulate gradients into A and B only; returns ``dL/dx``."""
    x = layer._cache if x is None else x
    if x is None:
        raise InvalidArgumentError("lora_backward called before lora_forward")
    f = layer.factors
    dx, dW = conv2d_backward(x, layer.effective_weight(), layer.spec, dL_dy, need_dx=need_dx)
    if f.alpha != 0:
        dA, dB = delta_grads(f, f.alpha * dW)
        f.A.accumulate(dA)
        f.B.accumulate(dB)
    return dx


# -- parameter accounting ---------------------------------------------------

def count_full(spec: ConvSpec) -> int:
    return spec.c_out * spec.c_in * spec.k ** 2


def count_kernel_wise(spec: ConvSpec, r: int) -> int:
    return spec.c_out * (spec.c_in * r * spec.k + r * spec.k)


def count_layer_wise(spec: ConvSpec, mode: RankMode) -> int:
    return (spec.c_out + spec.c_in) * mode.inner_dim(spec.k) * spec.k


def count_adapter(spec: ConvSpec, mode: RankMode, granularity: Granularity) -> int:
    """Adapter size for either granularity, with the inner dimension given by ``mode``."""
    if Granularity(granularity) is Granularity.LAYER_WISE:
        return count_layer_wise(spec, mode)
    return count_kernel_wise(spec, mode.inner_dim(spec.k))


def ratio_kernel_wise(spec: ConvSpec, r: int) -> Fraction:
    return Fraction(spec.c_in * r + r, spec.c_in * spec.k)


def ratio_layer_wise(spec: ConvSpec, mode: RankMode) -> Fraction:
    return Fraction((spec.c_out + spec.c_in) * mode.inner_dim(spec.k), spec.c_out * spec.c_in * spec.k)


RESNET50_SCALE = 23_500_000


def select_rank_mode(total_backbone_params: int, override: Optional[RankVariant] = None) -> RankVariant:
    """Plain rank from ResNet-50 scale upward, rank times kernel size below it."""
    if override is not None:
        return RankVariant(override)
    return RankVariant.PLAIN_R if total_backbone_params >= RESNET50_SCALE else RankVariant.R_TIMES_K
