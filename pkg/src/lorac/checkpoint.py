"""Versioned little-endian binary containers for models, adapters and datasets.

Layout shared by every file kind::

    magic      4 bytes   b"LRCF" | b"LRCA" | b"LRCD"
    version    u16
    hdr_len    u32
    header     hdr_len bytes of UTF-8 JSON (sorted keys)
    payload    tensors in manifest order, little-endian
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .errors import ConfigError, FormatError, ShapeMismatchError
from .lora import RankVariant
from .model import (Identity, LoraConv2d, ModelConfig, Network, attach_lora,
                    build_backbone, lora_layers, set_alpha, trainable_parameters)
from .tensor import GradPair

MAGIC_FULL = b"LRCF"
MAGIC_ADAPTER = b"LRCA"
MAGIC_DATASET = b"LRCD"
VERSION = 1

_PREFIX = struct.Struct("<4sHI")
PathLike = Union[str, Path]


def encode_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path: PathLike, magic: bytes, header: dict, payload: List[bytes]) -> int:
    blob = encode_header(header)
    data = _PREFIX.pack(magic, VERSION, len(blob)) + blob + b"".join(payload)
    path = Path(path)
    try:
        path.write_bytes(data)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
    return len(data)


def read_container(path: PathLike, magic: bytes) -> Tuple[dict, memoryview]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"no such file: {path}") from None
    if len(data) < _PREFIX.size:
        raise FormatError(path, "truncated header")
    got_magic, version, hdr_len = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise FormatError(path, f"bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(path, f"unsupported format version {version} (reader supports {VERSION})")
    end = _PREFIX.size + hdr_len
    if len(data) < end:
        raise FormatError(path, "truncated header")
    try:
        header = json.loads(data[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(path, f"corrupt header: {e}") from None
    return header, memoryview(data)[end:]


def pack_tensors(arrays: List[np.ndarray]) -> List[bytes]:
    return [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays]


def unpack_tensors(path: PathLike, payload: memoryview, manifest: List[dict]) -> Dict[str, np.ndarray]:
    need = sum(4 * int(np.prod(e["shape"], dtype=np.int64)) for e in manifest)
    if len(payload) != need:
        raise FormatError(path, f"payload has {len(payload)} bytes, manifest describes {need}")
    out, off = {}, 0
    for e in manifest:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(e["shape"])
        out[e["name"]] = arr.astype(np.float32)
        off += 4 * n
    return out


# --------------------------------------------------------------------------
# full model checkpoints

def _full_tensors(net: Network) -> List[Tuple[str, str, np.ndarray]]:
    if net.lora is not None or lora_layers(net):
        raise ConfigError("full checkpoints hold branch-free networks; merge the LoRA-C branches first")
    out = [(n, "param", p.value) for n, p in net.named_parameters()]
    out += [(n, "buffer", b) for n, b in net.named_buffers()]
    return out


def save_full_checkpoint(net: Network, path: PathLike) -> int:
    tensors = _full_tensors(net)
    header = {
        "kind": "full",
        "config": net.cfg.to_dict(),
        "config_hash": net.cfg.digest(),
        "fused_bn": net.fused_bn,
        "manifest": [{"name": n, "kind": k, "shape": list(a.shape)} for n, k, a in tensors],
    }
    return write_container(path, MAGIC_FULL, header, pack_tensors([a for _, _, a in tensors]))


def _assign(name: str, target: np.ndarray, value: np.ndarray) -> None:
    if target.shape != value.shape:
        raise ShapeMismatchError(name, target.shape, value.shape)
    target[...] = value


def strip_batchnorm(net: Network) -> None:
    """Give every conv a bias slot and drop its BN (the fused-inference topology)."""
    for _, _, unit in net.conv_bn_units():
        conv = unit.conv
        if isinstance(conv, LoraConv2d):
            raise ConfigError("cannot fuse BN into a conv that still carries a LoRA-C branch")
        if conv.bias is None:
            conv.bias = GradPair.frozen(np.zeros(conv.spec.c_out, conv.weight.value.dtype))
        unit.bn = Identity()
    net.fused_bn = True


def load_full_checkpoint(path: PathLike) -> Network:
    """Rebuild a branch-free network from an ``LRCF`` file."""
    header, payload = read_container(path, MAGIC_FULL)
    cfg = ModelConfig.from_dict(header["config"])
    net = build_backbone(cfg)
    if header.get("fused_bn"):
        strip_batchnorm(net)
    _load_named(net, path, header["manifest"], payload, require_all=True)
    return net


def load_pretrained_into(net: Network, path: PathLike) -> Network:
    """Copy base weights from an ``LRCF`` file into ``net`` (which may carry branches).

    Conv weights land in ``W0`` of adapted layers; LoRA factors are untouched.
    """
    header, payload = read_container(path, MAGIC_FULL)
    if header.get("fused_bn"):
        raise ConfigError(f"{path}: a BN-fused checkpoint cannot serve as a fine-tuning base")
    _load_named(net, path, header["manifest"], payload, require_all=True)
    return net


def _targets(net: Network) -> Dict[str, np.ndarray]:
    t = {n: p.value for n, p in net.named_parameters()}
    t.update(dict(net.named_buffers()))
    return t


def _load_named(net: Network, path, manifest, payload, require_all: bool) -> None:
    tensors = unpack_tensors(path, payload, manifest)
    targets = _targets(net)
    for name, value in tensors.items():
        if name not in targets:
            raise ShapeMismatchError(name, None, value.shape)
        if targets[name].shape != value.shape:
            raise ShapeMismatchError(name, targets[name].shape, value.shape)
    if require_all:
        missing = [n for n in targets if n not in tensors and not n.endswith(("lora_A", "lora_B"))]
        if missing:
            raise ShapeMismatchError(missing[0], targets[missing[0]].shape, None)
    for name, value in tensors.items():
        _assign(name, targets[name], value.astype(targets[name].dtype))


# --------------------------------------------------------------------------
# adapter checkpoints

def _adapter_tensors(net: Network) -> List[Tuple[str, str, np.ndarray]]:
    if net.lora is None:
        raise ConfigError("network has no LoRA-C branches to save")
    out = [(n, "param", p.value) for n, p in trainable_parameters(net).items()]
    # BN running statistics adapt during fine-tuning, so they belong to the delta.
    out += [(n, "buffer", b) for n, b in net.named_buffers()]
    return out


def save_adapter_checkpoint(net: Network, path: PathLike) -> int:
    """Write only the fine-tuned increments; returns the byte count."""
    tensors = _adapter_tensors(net)
    header = {
        "kind": "adapter",
        "config": net.cfg.to_dict(),
        "config_hash": net.cfg.digest(),
        "alpha": net.lora["alpha"],
        "r": net.lora["r"],
        "mode": net.lora["mode"],
        "granularity": net.lora["granularity"],
        "manifest": [{"name": n, "kind": k, "shape": list(a.shape)} for n, k, a in tensors],
    }
    return write_container(path, MAGIC_ADAPTER, header, pack_tensors([a for _, _, a in tensors]))


def read_adapter_header(path: PathLike) -> dict:
    return read_container(path, MAGIC_ADAPTER)[0]


def load_adapter_checkpoint(net: Network, path: PathLike) -> Network:
    """Restore branches, trainable layers, BN statistics and alpha onto a pretrained net.

    A branch-free ``net`` gets branches attached using the rank settings stored
    in the file; a net that already has branches must match them exactly.
    """
    header, payload = read_container(path, MAGIC_ADAPTER)
    if net.lora is None:
        attach_lora(net, mode=RankVariant(header["mode"]), alpha=header["alpha"], r=header["r"])
    tensors = unpack_tensors(path, payload, header["manifest"])
    targets = _targets(net)
    for name, value in tensors.items():
        if name not in targets:
            raise ShapeMismatchError(name, None, value.shape)
        if targets[name].shape != value.shape:
            raise ShapeMismatchError(name, targets[name].shape, value.shape)
    for name in trainable_parameters(net):
        if name not in tensors:
            raise ShapeMismatchError(name, targets[name].shape, None)
    for name, value in tensors.items():
        targets[name][...] = value.astype(targets[name].dtype)
    set_alpha(net, header["alpha"])
    net.lora.update(r=int(header["r"]), mode=header["mode"], granularity=header["granularity"])
    return net


def file_size(path: PathLike) -> int:
    return Path(path).stat().st_size
