"""Fold LoRA-C branches (and optionally BatchNorm) back into plain convolutions."""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .checkpoint import save_full_checkpoint
from .errors import InvalidArgumentError, MergeError
from .lora import LoraConvLayer
from .model import BatchNorm2d, Conv2d, Identity, LoraConv2d, Network
from .tensor import GradPair, check_finite


def merge_layer(layer: LoraConvLayer) -> np.ndarray:
    """``W0 + alpha * dW`` as a new array; the layer itself is left untouched."""
    return np.array(layer.effective_weight(), copy=True)


def fuse_batchnorm(conv_W: np.ndarray, bn: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float],
                   conv_b: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode BN folded into the preceding conv: returns ``(W', b')``."""
    gamma, beta, mean, var, eps = bn
    c_out = conv_W.shape[0]
    for name, v in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if np.shape(v) != (c_out,):
            raise InvalidArgumentError(f"BN {name} has shape {np.shape(v)}, conv has {c_out} output channels")
    if np.any(np.asarray(var) < 0):
        raise InvalidArgumentError("BN variance must be non-negative")
    scale = gamma / np.sqrt(var + eps)
    W = conv_W * scale.reshape(-1, *([1] * (conv_W.ndim - 1)))
    b0 = np.zeros(c_out, conv_W.dtype) if conv_b is None else conv_b
    b = beta + (b0 - mean) * scale
    return check_finite(W.astype(conv_W.dtype), "fuse_batchnorm"), check_finite(b.astype(conv_W.dtype), "fuse_batchnorm")


def merge_network(net: Network) -> Network:
    """Consume every branch in place, leaving frozen plain convs with merged weights.

    A second call fails: the branches are gone, so there is nothing to add twice.
    """
    if net.lora is None:
        raise MergeError("network has no LoRA-C branches to merge (already merged or never attached)")
    for _, _, unit in net.conv_bn_units():
        conv = unit.conv
        if isinstance(conv, LoraConv2d):
            if conv.consumed:
                raise MergeError("LoRA-C branch already consumed")
            merged = merge_layer(conv.layer)
            conv.consumed = True
            unit.conv = Conv2d(conv.spec, GradPair.frozen(merged), need_dx=conv.need_dx)
    net.lora = None
    return net


def fuse_network_bn(net: Network) -> Network:
    """Fold every BN into its conv in place (eval semantics)."""
    if net.fused_bn:
        raise MergeError("BatchNorm already fused")
    units = list(net.conv_bn_units())
    # validate everything first so a failure leaves the network untouched
    for cname, _, unit in units:
        if isinstance(unit.conv, LoraConv2d):
            raise MergeError(f"{cname}: merge LoRA-C branches before fusing BN")
        if not isinstance(unit.bn, BatchNorm2d):
            raise MergeError(f"{cname}: expected a BatchNorm after the conv")
    for _, _, unit in units:
        conv, bn = unit.conv, unit.bn
        W, b = fuse_batchnorm(conv.weight.value, (bn.gamma.value, bn.beta.value, bn.running_mean,
                                                   bn.running_var, bn.eps),
                              None if conv.bias is None else conv.bias.value)
        unit.conv = Conv2d(conv.spec, GradPair.frozen(W), GradPair.frozen(b), need_dx=conv.need_dx)
        unit.bn = Identity()
    net.fused_bn = True
    return net


def export_inference_model(net: Network, fuse_bn: bool = False,
                           path: Union[str, Path, None] = None) -> Network:
    """Branch-free copy of ``net`` with the original architecture, optionally saved as ``LRCF``.

    The source network keeps its branches so it can still be compared against.
    """
    out = copy.deepcopy(net)
    merge_network(out)
    if fuse_bn:
        fuse_network_bn(out)
    out.eval()
    if path is not None:
        save_full_checkpoint(out, path)
    return out
