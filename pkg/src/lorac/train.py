"""Minibatch SGD training: full pretraining and LoRA-C fine-tuning."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .data import FAMILIES, Dataset
from .errors import ConfigError, DivergenceError, NonFiniteError, PreconditionError
from .model import Network, backbone_param_count, count_trainable, predict, trainable_parameters
from .tensor import cross_entropy_batch, sgd_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LRSchedule:
    """``constant``, ``step`` (x gamma every ``every_n`` epochs) or ``multistep``
    (x gamma at each fraction of the run listed in ``milestones``)."""

    kind: str = "multistep"
    gamma: float = 0.1
    every_n: int = 10
    milestones: Tuple[float, ...] = (0.5, 0.75)

    def __post_init__(self):
        if self.kind not in ("constant", "step", "multistep"):
            raise ConfigError(f"unknown lr schedule {self.kind!r}")
        if self.kind == "step" and self.every_n < 1:
            raise ConfigError("step schedule needs every_n >= 1")

    def lr_at(self, base: float, epoch: int, epochs: int) -> float:
        if self.kind == "constant":
            return base
        if self.kind == "step":
            return base * self.gamma ** (epoch // self.every_n)
        passed = sum(epoch >= int(m * epochs) for m in self.milestones)
        return base * self.gamma ** passed

    @classmethod
    def parse(cls, text: str) -> "LRSchedule":
        """``constant`` | ``multistep`` | ``step:<gamma>:<every_n>``"""
        parts = text.split(":")
        if parts[0] == "step":
            if len(parts) != 3:
                raise ConfigError("step schedule is written step:<gamma>:<every_n>")
            return cls("step", float(parts[1]), int(parts[2]))
        if len(parts) != 1:
            raise ConfigError(f"bad lr schedule {text!r}")
        return cls(parts[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    weight_decay: float = 5e-4
    seed: int = 0
    lr_schedule: LRSchedule = LRSchedule()
    freeze_bn_stats: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    eval_acc: Dict[str, float]
    family_acc: Dict[str, float]
    clean_acc: Optional[float]
    corrupted_mean: Optional[float]
    wall_time: float


@dataclass
class TrainReport:
    updated_params: int
    backbone_params: int
    num_steps: int = 0
    epochs: List[EpochRecord] = field(default_factory=list)
    lora: Optional[dict] = None

    @property
    def train_losses(self) -> List[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1]

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        d["updated_ratio"] = self.updated_params / self.backbone_params
        if not timing:
            for e in d["epochs"]:
                e.pop("wall_time")
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), sort_keys=True, indent=2)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["updated_params", "backbone_params", "updated_ratio", "num_steps", "epochs", "lora"],
    "properties": {
        "updated_params": {"type": "integer", "minimum": 0},
        "backbone_params": {"type": "integer", "minimum": 1},
        "updated_ratio": {"type": "number", "minimum": 0},
        "num_steps": {"type": "integer", "minimum": 0},
        "lora": {"type": ["object", "null"]},
        "epochs": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["epoch", "lr", "train_loss", "train_acc", "eval_acc", "family_acc",
                             "clean_acc", "corrupted_mean"],
                "properties": {
                    "epoch": {"type": "integer", "minimum": 0},
                    "lr": {"type": "number", "minimum": 0},
                    "train_loss": {"type": "number"},
                    "train_acc": {"type": "number", "minimum": 0, "maximum": 1},
                    "eval_acc": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
                    "family_acc": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
                    "clean_acc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "corrupted_mean": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "wall_time": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}


EvalData = Union[None, Dataset, Mapping[str, Dataset]]


def _as_eval_dict(eval_data: EvalData) -> Dict[str, Dataset]:
    if eval_data is None:
        return {}
    if isinstance(eval_data, Dataset):
        return {eval_data.tag: eval_data}
    return dict(eval_data)


def accuracy(net: Network, ds: Dataset, batch_size: int = 256) -> float:
    if len(ds) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    logits = predict(net, ds.images, batch_size)
    return float(np.mean(logits.argmax(axis=1) == ds.labels))


def summarize(acc: Mapping[str, float]) -> Tuple[Dict[str, float], Optional[float], Optional[float]]:
    """Per-family means, clean accuracy and the mean over families present."""
    fam: Dict[str, List[float]] = {}
    for tag, a in acc.items():
        family = tag.split("/", 1)[0]
        if family in {f.value for f in FAMILIES}:
            fam.setdefault(family, []).append(a)
    family_acc = {f: float(np.mean(v)) for f, v in sorted(fam.items())}
    clean = acc.get("clean")
    mean = float(np.mean(list(family_acc.values()))) if family_acc else None
    return family_acc, clean, mean


def evaluate(net: Network, eval_data: EvalData) -> Dict[str, float]:
    return {tag: accuracy(net, ds) for tag, ds in sorted(_as_eval_dict(eval_data).items())}


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Counter-based shuffle: the order of epoch ``e`` depends only on (seed, e)."""
    gen = np.random.Generator(np.random.Philox(key=seed, counter=epoch))
    return gen.permutation(n)


def train(net: Network, train_data: Dataset, eval_data: EvalData, cfg: TrainConfig) -> TrainReport:
    """Run SGD over ``trainable_parameters(net)``; everything else is left untouched."""
    if len(train_data) == 0:
        raise ConfigError("training dataset is empty")
    if train_data.num_classes != net.cfg.num_classes:
        raise ConfigError(f"dataset has {train_data.num_classes} classes, network head has {net.cfg.num_classes}")
    params = trainable_parameters(net)
    if not params:
        raise PreconditionError("network has no trainable parameters")
    evals = _as_eval_dict(eval_data)
    net.set_freeze_bn_stats(cfg.freeze_bn_stats)
    net.zero_grad()
    report = TrainReport(count_trainable(net), backbone_param_count(net.cfg),
                         lora=None if net.lora is None else dict(net.lora))
    n = len(train_data)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_schedule.lr_at(cfg.lr, epoch, cfg.epochs)
        perm = epoch_permutation(cfg.seed, epoch, n)
        net.train()
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            x, y = train_data.images[idx], train_data.labels[idx]
            try:
                logits = net.forward(x)
                loss, dlogits = cross_entropy_batch(logits, y)
                if not np.isfinite(loss):
                    raise DivergenceError(epoch, b)
                net.backward(dlogits)
                sgd_step(params.values(), lr, cfg.weight_decay)
            except NonFiniteError as e:
                raise DivergenceError(epoch, b, str(e)) from e
            report.num_steps += 1
            loss_sum += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == y))
        try:
            acc = evaluate(net, evals)
        except NonFiniteError as e:
            # the last update of the epoch blew the weights up
            raise DivergenceError(epoch, b, f"during evaluation: {e}") from e
        family_acc, clean, mean = summarize(acc)
        rec = EpochRecord(epoch, lr, loss_sum / n, correct / n, acc, family_acc, clean, mean,
                          time.perf_counter() - t0)
        report.epochs.append(rec)
        log.info("epoch %d lr %.4g loss %.4f train_acc %.3f corrupted %s", epoch, lr, rec.train_loss,
                 rec.train_acc, "-" if mean is None else f"{mean:.3f}")
    net.eval()
    return report


def finetune(net: Network, train_data: Dataset, eval_data: EvalData, cfg: TrainConfig) -> TrainReport:
    """LoRA-C fine-tuning: only the stem conv, the head and the A/B factors move."""
    if net.lora is None:
        raise PreconditionError("finetune needs a network with LoRA-C branches registered")
    return train(net, train_data, eval_data, cfg)


def pretrain(net: Network, train_data: Dataset, eval_data: EvalData, cfg: TrainConfig) -> TrainReport:
    if net.lora is not None:
        raise PreconditionError("pretraining expects a plain backbone")
    return train(net, train_data, eval_data, cfg)
