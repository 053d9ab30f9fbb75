"""Dense tensor kernels: convolution, matrix product, layout changes, loss, SGD.

Tensors are plain C-contiguous numpy arrays.  float32 is the working precision;
float64 inputs are honoured so that finite-difference checks have headroom.
Every public kernel rejects non-finite results instead of propagating them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, NonFiniteError, PreconditionError

DTYPE = np.float32


def check_finite(t: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{where}: result contains NaN or Inf")
    return t


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def _float_dtype(*arrays: np.ndarray):
    dt = np.result_type(*arrays)
    if not np.issubdtype(dt, np.floating):
        dt = DTYPE
    return dt


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one square-kernel convolution layer."""

    c_out: int
    c_in: int
    k: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("c_out", "c_in", "k", "stride"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError(f"ConvSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise InvalidArgumentError(f"ConvSpec.padding must be >= 0, got {self.padding}")

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.c_out, self.c_in, self.k, self.k)

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        oh = (h + 2 * self.padding - self.k) // self.stride + 1
        ow = (w + 2 * self.padding - self.k) // self.stride + 1
        if h + 2 * self.padding < self.k or oh < 1:
            raise InvalidArgumentError(f"height {h} too small for kernel {self.k} with padding {self.padding}")
        if w + 2 * self.padding < self.k or ow < 1:
            raise InvalidArgumentError(f"width {w} too small for kernel {self.k} with padding {self.padding}")
        return oh, ow


@dataclass(eq=False)
class GradPair:
    """A parameter value and, when trainable, its gradient buffer.

    Frozen parameters have ``grad is None``; that absence is what freezing means.
    """

    value: np.ndarray
    grad: Optional[np.ndarray] = None

    @classmethod
    def trainable(cls, value) -> "GradPair":
        value = as_tensor(value, dtype=np.asarray(value).dtype if np.asarray(value).dtype.kind == "f" else DTYPE)
        return cls(value, np.zeros_like(value))

    @classmethod
    def frozen(cls, value) -> "GradPair":
        value = as_tensor(value, dtype=np.asarray(value).dtype if np.asarray(value).dtype.kind == "f" else DTYPE)
        return cls(value, None)

    @property
    def requires_grad(self) -> bool:
        return self.grad is not None

    def freeze(self) -> None:
        self.grad = None

    def unfreeze(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is not None:
            self.grad += g.astype(self.grad.dtype, copy=False)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)


def _batched(x: np.ndarray, spec: ConvSpec) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        x = x[None]
        single = True
    elif x.ndim == 4:
        single = False
    else:
        raise InvalidArgumentError(f"conv input must be [c,h,w] or [n,c,h,w], got rank {x.ndim}")
    if x.shape[1] != spec.c_in:
        raise InvalidArgumentError(f"input channel axis has {x.shape[1]} entries, spec expects c_in={spec.c_in}")
    return x, single


def _check_weight(W: np.ndarray, spec: ConvSpec) -> None:
    if W.ndim != 4:
        raise InvalidArgumentError(f"conv weight must be rank 4, got rank {W.ndim}")
    for axis, (got, want, name) in enumerate(zip(W.shape, spec.weight_shape, ("c_out", "c_in", "k", "k"))):
        if got != want:
            raise InvalidArgumentError(f"weight axis {axis} ({name}) has size {got}, spec expects {want}")


def _im2col(x: np.ndarray, spec: ConvSpec) -> Tuple[np.ndarray, int, int]:
    """Rows are output pixels (n, i, j); columns are (m, u, v) with v fastest."""
    n, c, h, w = x.shape
    oh, ow = spec.output_size(h, w)
    p, s, k = spec.padding, spec.stride, spec.k
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    # win: [n, c, oh, ow, k, k] -> [n, oh, ow, c, k, k]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * k * k)
    return cols, oh, ow


def conv2d_forward(x: np.ndarray, W: np.ndarray, spec: ConvSpec, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero-padded strided cross-correlation, ``y[o,i,j] = sum_{m,u,v} W[o,m,u,v] x[m, i*s+u-p, j*s+v-p]``.

    Accepts a single sample ``[c_in, h, w]`` or a batch ``[n, c_in, h, w]``; the
    output has the matching rank.
    """
    _check_weight(W, spec)
    xb, single = _batched(x, spec)
    dt = _float_dtype(xb, W)
    xb = xb.astype(dt, copy=False)
    n = xb.shape[0]
    cols, oh, ow = _im2col(xb, spec)
    wmat = W.astype(dt, copy=False).reshape(spec.c_out, -1)
    y = cols @ wmat.T
    if bias is not None:
        if bias.shape != (spec.c_out,):
            raise InvalidArgumentError(f"bias must have shape ({spec.c_out},), got {bias.shape}")
        y = y + bias.astype(dt, copy=False)
    y = np.ascontiguousarray(y.reshape(n, oh, ow, spec.c_out).transpose(0, 3, 1, 2))
    check_finite(y, "conv2d_forward")
    return y[0] if single else y


def conv2d_backward(x: np.ndarray, W: np.ndarray, spec: ConvSpec, dL_dy: np.ndarray,
                    need_dx: bool = True) -> Tuple[Optional[np.ndarray], np.ndarray]:
    """Adjoint of :func:`conv2d_forward` with respect to the input and the weight."""
    _check_weight(W, spec)
    xb, single = _batched(x, spec)
    dyb = dL_dy[None] if single else dL_dy
    n, _, h, w = xb.shape
    oh, ow = spec.output_size(h, w)
    if dyb.shape != (n, spec.c_out, oh, ow):
        raise InvalidArgumentError(f"dL_dy has shape {dL_dy.shape}, forward output shape is "
                                   f"{(spec.c_out, oh, ow) if single else (n, spec.c_out, oh, ow)}")
    dt = _float_dtype(xb, W, dyb)
    xb = xb.astype(dt, copy=False)
    cols, _, _ = _im2col(xb, spec)
    dy2 = np.ascontiguousarray(dyb.astype(dt, copy=False).transpose(0, 2, 3, 1)).reshape(-1, spec.c_out)
    wmat = W.astype(dt, copy=False).reshape(spec.c_out, -1)
    dW = (dy2.T @ cols).reshape(spec.weight_shape)
    check_finite(dW, "conv2d_backward")
    if not need_dx:
        return None, dW

    k, s, p = spec.k, spec.stride, spec.padding
    dcols = (dy2 @ wmat).reshape(n, oh, ow, spec.c_in, k, k)
    dxp = np.zeros((n, spec.c_in, h + 2 * p, w + 2 * p), dtype=dt)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u : u + (oh - 1) * s + 1 : s, v : v + (ow - 1) * s + 1 : s] += \
                dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    dx = np.ascontiguousarray(dxp[:, :, p : p + h, p : p + w])
    check_finite(dx, "conv2d_backward")
    return (dx[0] if single else dx), dW


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidArgumentError(f"matmul expects matrices, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul inner dimensions differ: {a.shape[1]} vs {b.shape[0]}")
    dt = _float_dtype(a, b)
    return check_finite(a.astype(dt, copy=False) @ b.astype(dt, copy=False), "matmul")


def matmul_backward(a: np.ndarray, b: np.ndarray, dL_dc: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if dL_dc.shape != (a.shape[0], b.shape[1]):
        raise InvalidArgumentError(f"dL_dc has shape {dL_dc.shape}, expected {(a.shape[0], b.shape[1])}")
    return matmul(dL_dc, b.T), matmul(a.T, dL_dc)


def reshape_permute(t: np.ndarray, new_shape: Sequence[int], axis_order: Optional[Sequence[int]] = None) -> np.ndarray:
    """Reinterpret ``t`` (row-major) as ``new_shape``, then reorder axes.

    Returns a fresh contiguous array; the input is never aliased.
    """
    new_shape = tuple(int(d) for d in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != t.size:
        raise InvalidArgumentError(f"cannot reshape {t.shape} (size {t.size}) into {new_shape}")
    if axis_order is None:
        axis_order = tuple(range(len(new_shape)))
    axis_order = tuple(int(a) for a in axis_order)
    if sorted(axis_order) != list(range(len(new_shape))):
        raise InvalidArgumentError(f"axis_order {axis_order} is not a permutation of {len(new_shape)} axes")
    return np.array(t.reshape(new_shape).transpose(axis_order), order="C", copy=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    """Softmax cross-entropy for one sample: ``(loss, dL/dlogits)``."""
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise InvalidArgumentError(f"logits must be a vector of >= 2 classes, got shape {logits.shape}")
    if not 0 <= int(label) < logits.shape[0]:
        raise InvalidArgumentError(f"label {label} out of range for {logits.shape[0]} classes")
    logp = _log_softmax(logits)
    grad = np.exp(logp)
    grad[int(label)] -= 1
    loss = float(-logp[int(label)])
    check_finite(grad, "cross_entropy_loss")
    return loss, grad


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch; gradient is already divided by the batch size."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise InvalidArgumentError(f"logits must be [n, classes>=2], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise InvalidArgumentError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidArgumentError(f"labels out of range for {logits.shape[1]} classes")
    n = logits.shape[0]
    logp = _log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].sum() / n)
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad


def sgd_step(params: Iterable[GradPair], lr: float, weight_decay: float = 0.0) -> None:
    """``value -= lr * (grad + weight_decay * value)``, then zero the grad.

    Values are updated in place; every parameter must carry a gradient.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise PreconditionError("sgd_step received a parameter without gradient storage (frozen?)")
    for p in params:
        step = p.grad + weight_decay * p.value if weight_decay else p.grad
        p.value -= (lr * step).astype(p.value.dtype, copy=False)
        check_finite(p.value, "sgd_step")
        p.grad.fill(0)
