"""Adaptation strategies as declarative, reproducible training plans.

Five conditions are supported:

    BL        random init, train on the source set, everything trainable
    FT_FC     warm start, only fc1..fc3 trainable, train on the target set
    FT_FC_CL  warm start, conv5+bn5+fc1..fc3 trainable, train on the target set
    RE        warm start, everything trainable, train on the target set
    FU        random init, everything trainable, train on source+target merged

A plan pins initialization, freeze mask, data selection and hyperparameters;
executing one returns the best-validation model, a per-epoch log and a freeze
audit proving that nothing outside the trainable set moved.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import load_checkpoint
from .data import Dataset, merge, sequential_batches, shuffled_batches
from .network import PARAM_LAYERS, Network, build_network
from .optim import make_optimizer

log = logging.getLogger(__name__)

KINDS = ("BL", "FT_FC", "FT_FC_CL", "RE", "FU")

ALL_LAYERS = frozenset(PARAM_LAYERS)
FC_LAYERS = frozenset({"fc1", "fc2", "fc3"})
FC_CL_LAYERS = frozenset({"conv5", "bn5", "fc1", "fc2", "fc3"})

# kind -> (init, trainable set, training data)
KIND_RULES: dict[str, tuple[str, frozenset[str], str]] = {
    "BL": ("random", ALL_LAYERS, "source"),
    "FT_FC": ("checkpoint", FC_LAYERS, "target"),
    "FT_FC_CL": ("checkpoint", FC_CL_LAYERS, "target"),
    "RE": ("checkpoint", ALL_LAYERS, "target"),
    "FU": ("random", ALL_LAYERS, "merged"),
}


class PlanError(ValueError):
    """Raised for plans that contradict their strategy's contract."""


@dataclass(frozen=True)
class Hyper:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    patience: int = 10
    fine_tune_lr_scale: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 0:
            raise PlanError(f"bad hyperparameters: {self}")
        if self.learning_rate < 0 or self.fine_tune_lr_scale <= 0:
            raise PlanError(f"bad learning rates: {self}")


@dataclass(frozen=True)
class StrategyPlan:
    kind: str
    init_kind: str                                # "random" | "checkpoint"
    init_path: str | None
    trainable_layers: frozenset[str]
    train_data: str                               # "source" | "target" | "merged"
    hyper: Hyper
    seed: int

    @property
    def learning_rate(self) -> float:
        """Fine-tuning runs at a reduced rate; full training at the base rate."""
        scale = self.hyper.fine_tune_lr_scale if self.kind in ("FT_FC", "FT_FC_CL") else 1.0
        return self.hyper.learning_rate * scale


def make_plan(kind: str, *, seed: int, pretrained: str | None = None,
              hyper: Hyper | None = None,
              trainable_override: frozenset[str] | set[str] | None = None
              ) -> StrategyPlan:
    """Build a plan for one strategy, rejecting contradictory customization."""
    if kind not in KIND_RULES:
        raise PlanError(f"unknown strategy {kind!r}; valid: {', '.join(KINDS)}")
    init_kind, trainable, train_data = KIND_RULES[kind]
    if init_kind == "checkpoint":
        if not pretrained:
            raise PlanError(f"{kind} warm-starts from a checkpoint; pass pretrained=")
    elif pretrained:
        raise PlanError(f"{kind} initializes randomly; a pretrained checkpoint contradicts it")
    if trainable_override is not None:
        extra = frozenset(trainable_override) - trainable
        if extra:
            raise PlanError(
                f"{kind} freezes {sorted(extra)}; marking them trainable contradicts the strategy")
        trainable = frozenset(trainable_override)  # freezing more is allowed
    return StrategyPlan(
        kind=kind,
        init_kind=init_kind,
        init_path=pretrained,
        trainable_layers=trainable,
        train_data=train_data,
        hyper=hyper or Hyper(),
        seed=seed,
    )


# -- plan (de)serialization ---------------------------------------------------

def plan_to_dict(plan: StrategyPlan) -> dict:
    return {
        "kind": plan.kind,
        "init_kind": plan.init_kind,
        "init_path": plan.init_path,
        "trainable_layers": sorted(plan.trainable_layers),
        "train_data": plan.train_data,
        "hyper": dataclass_asdict(plan.hyper),
        "seed": plan.seed,
    }


def plan_from_dict(d: dict) -> StrategyPlan:
    return StrategyPlan(
        kind=d["kind"],
        init_kind=d["init_kind"],
        init_path=d["init_path"],
        trainable_layers=frozenset(d["trainable_layers"]),
        train_data=d["train_data"],
        hyper=Hyper(**d["hyper"]),
        seed=d["seed"],
    )


def dataclass_asdict(h: Hyper) -> dict:
    return {f: getattr(h, f) for f in h.__dataclass_fields__}


def save_plan(plan: StrategyPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan), indent=2, sort_keys=True) + "\n")


def load_plan(path: str | Path) -> StrategyPlan:
    return plan_from_dict(json.loads(Path(path).read_text()))


# -- freeze audit -------------------------------------------------------------

@dataclass
class FreezeAudit:
    trainable: frozenset[str]
    changed: set[str]
    unchanged: set[str]
    passed: bool

    def to_text(self) -> str:
        lines = ["freeze audit"]
        for name in sorted(self.changed | self.unchanged):
            verdict = "changed  " if name in self.changed else "unchanged"
            flag = "trainable" if name in self.trainable else "frozen"
            lines.append(f"  {name:8s} {verdict} ({flag})")
        lines.append(f"verdict: {'PASS' if self.passed else 'FAIL'}"
                     + ("" if self.passed else
                        f" — frozen layer(s) changed: {sorted(self.changed - self.trainable)}"))
        return "\n".join(lines)


Snapshot = dict[tuple[str, str], np.ndarray]


def _as_snapshot(obj) -> Snapshot:
    if isinstance(obj, dict):
        return obj
    if isinstance(obj, Network):
        return obj.snapshot()
    if isinstance(obj, (str, Path)):
        return load_checkpoint(str(obj)).snapshot()
    raise TypeError(f"cannot audit object of type {type(obj).__name__}")


def freeze_audit(before, after, plan: StrategyPlan) -> FreezeAudit:
    """Per-layer changed/unchanged verdict; PASS iff changed set is within the
    plan's trainable set. Bit-level comparison, batch-norm statistics included."""
    a, b = _as_snapshot(before), _as_snapshot(after)
    if set(a) != set(b):
        raise ValueError("snapshots cover different tensors; cannot audit")
    changed: set[str] = set()
    unchanged: set[str] = set()
    layers = {layer for layer, _ in a}
    for layer in layers:
        same = all(
            a[k].tobytes() == b[k].tobytes() and a[k].shape == b[k].shape
            for k in a if k[0] == layer)
        (unchanged if same else changed).add(layer)
    return FreezeAudit(
        trainable=plan.trainable_layers,
        changed=changed,
        unchanged=unchanged,
        passed=changed <= plan.trainable_layers,
    )


# -- training -----------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = float("nan")
    stopped_early: bool = False


@dataclass
class DataBundle:
    """The four datasets a strategy can draw on."""
    source_train: Dataset
    source_val: Dataset
    target_train: Dataset
    target_val: Dataset

    def select(self, train_data: str) -> tuple[Dataset, Dataset]:
        if train_data == "source":
            return self.source_train, self.source_val
        if train_data == "target":
            return self.target_train, self.target_val
        if train_data == "merged":
            return (merge(self.source_train, self.target_train),
                    merge(self.source_val, self.target_val))
        raise ValueError(f"unknown training data selector {train_data!r}")


@dataclass
class ExecResult:
    network: Network
    log: TrainLog
    audit: FreezeAudit
    epochs_run: int
    samples_seen: int


def _accuracy(net: Network, ds: Dataset, batch_size: int) -> float:
    correct = 0
    for x, y in sequential_batches(ds, batch_size):
        pred = net.forward(x, "eval").argmax(axis=1)
        correct += int((pred == y).sum())
    return correct / len(ds)


def fit(net: Network, train_ds: Dataset, val_ds: Dataset, hyper: Hyper,
        learning_rate: float, seed: int) -> tuple[TrainLog, int]:
    """Early-stopped training; restores the best-validation weights in place.

    Returns the log and the total number of training samples consumed.
    """
    if len(val_ds) == 0:
        raise ValueError("validation set is empty; early stopping needs one")
    opt = make_optimizer(hyper.optimizer, learning_rate)
    track = TrainLog()
    best_snapshot = net.snapshot()
    best_acc = -1.0
    seen = 0
    for epoch in range(1, hyper.epochs + 1):
        total_loss = 0.0
        for batch_no, (x, y) in enumerate(shuffled_batches(
                train_ds, hyper.batch_size, seed, epoch)):
            logits = net.forward(x, "train")
            loss, grad, _ = net.head.loss(logits, y)
            if not math.isfinite(loss):
                raise ops.NumericsError(
                    f"non-finite training loss {loss} at epoch {epoch}, batch {batch_no}")
            total_loss += loss * len(y)
            seen += len(y)
            net.backward(grad)
            opt.step(net)
        val_acc = _accuracy(net, val_ds, hyper.batch_size)
        track.epochs.append(EpochLog(epoch, total_loss / len(train_ds), val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best_snapshot = net.snapshot()
            track.best_epoch = epoch
        elif epoch - track.best_epoch >= hyper.patience:
            track.stopped_early = True
            break
    net.restore(best_snapshot)
    track.best_val_accuracy = best_acc if track.epochs else float("nan")
    return track, seen


def execute(plan: StrategyPlan, bundle: DataBundle, arch: str = "desk") -> ExecResult:
    """Realize a plan: init, freeze, train, restore best, audit."""
    if plan.init_kind == "random":
        net = build_network(arch, plan.seed)
    else:
        net = load_checkpoint(plan.init_path)
        if net.arch != arch:
            raise PlanError(
                f"checkpoint {plan.init_path} is a {net.arch!r} net, run wants {arch!r}")
    net.reseed_dropout(plan.seed)
    net.set_trainable(plan.trainable_layers)
    train_ds, val_ds = bundle.select(plan.train_data)
    initial = net.snapshot()
    if plan.hyper.epochs > 0:
        track, seen = fit(net, train_ds, val_ds, plan.hyper, plan.learning_rate, plan.seed)
    else:
        track, seen = TrainLog(), 0
    audit = freeze_audit(initial, net.snapshot(), plan)
    if not audit.passed:
        log.error("freeze audit FAILED for %s plan:\n%s", plan.kind, audit.to_text())
    return ExecResult(
        network=net,
        log=track,
        audit=audit,
        epochs_run=len(track.epochs),
        samples_seen=seen,
    )
