"""Three-phase training: smooth-gate pretraining, progressive hard-gate
substitution with distillation from the smooth model, and final finetuning.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .gates import GateMode
from .model import Network, clone_network
from .tensor import Tape, Tensor

GELU_PHASE = "gelu"
SUBSTITUTION = "substitution"
FINETUNE = "finetune"

SCHEDULERS = ("none", "linear", "cosine", "poly")

# linear schedules land on their end LR after this fraction of the phase
LINEAR_END_FRACTION = 0.75
POLY_EXPONENT = 0.9


@dataclass
class PhasePlan:
    name: str
    epochs: int
    lr_start: float
    lr_end: float = 0.0
    scheduler: str = "none"

    def __post_init__(self):
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {self.scheduler!r}; "
                              f"expected one of {SCHEDULERS}")
        if self.epochs < 0:
            raise ConfigError(f"phase {self.name}: negative epoch count")


@dataclass
class KDSettings:
    temperature: float = 4.0
    mix: float = 0.5                    # weight on the distillation term
    gelu_phase_mix: float = 0.5         # weight during the smooth phase
    use_plain_teacher: bool = True      # train a plain smooth-activation teacher

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"distillation temperature must be positive, "
                              f"got {self.temperature}")


@dataclass
class TrainingSchedule:
    phases: list[PhasePlan]
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    gamma: float = 1.0
    kd: KDSettings = field(default_factory=KDSettings)

    def phase(self, name: str) -> PhasePlan:
        for p in self.phases:
            if p.name == name:
                return p
        raise ConfigError(f"schedule has no {name!r} phase")


def lr_at(plan: PhasePlan, epoch: float) -> float:
    """Learning rate at a (possibly fractional) epoch within a phase."""
    if epoch < 0 or (plan.epochs and epoch > plan.epochs):
        raise ConfigError(f"epoch {epoch} outside phase of {plan.epochs} epochs")
    if plan.scheduler == "none" or plan.epochs == 0:
        return plan.lr_start
    t = epoch / plan.epochs
    if plan.scheduler == "linear":
        u = min(1.0, t / LINEAR_END_FRACTION)
        return plan.lr_start + (plan.lr_end - plan.lr_start) * u
    if plan.scheduler == "cosine":
        return plan.lr_end + (plan.lr_start - plan.lr_end) * 0.5 * (1.0 + math.cos(math.pi * t))
    # poly
    return max(plan.lr_start * (1.0 - t) ** POLY_EXPONENT, plan.lr_end)


class SGD:
    """Momentum SGD with weight decay folded into the velocity."""

    def __init__(self, params: list[tuple[str, Tensor]], momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params}

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad + self.weight_decay * p.data
            p.data -= lr * v

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


def kd_loss(student_logits: Tensor, teacher_logits: np.ndarray | None,
            labels: np.ndarray, temperature: float, mix: float) -> Tensor:
    """mix * T^2 * KL(teacher || student) + (1 - mix) * cross-entropy."""
    if not 0.0 <= mix <= 1.0:
        raise ConfigError(f"distillation mix must be in [0, 1], got {mix}")
    if mix == 0.0 or teacher_logits is None:
        return T.cross_entropy(student_logits, labels)
    kd = T.kd_divergence(student_logits, teacher_logits, temperature)
    if mix == 1.0:
        return kd
    ce = T.cross_entropy(student_logits, labels)
    return T.add(T.scale(kd, mix), T.scale(ce, 1.0 - mix))


# ---------------------------------------------------------------------------
# progressive substitution
# ---------------------------------------------------------------------------

def substitution_plan(modes_list: list[np.ndarray], remaining_epochs: int
                      ) -> list[tuple[int, int]]:
    """Channels to switch smooth -> hard this epoch, one entry per (layer,
    channel). Every layer advances simultaneously; within a layer the highest
    channel indices switch first, so prototypes (the leading channels) go
    last. Each layer switches ceil(remaining / remaining_epochs) channels."""
    if remaining_epochs < 1:
        raise ConfigError("substitution plan needs at least one remaining epoch")
    switches: list[tuple[int, int]] = []
    for layer_idx, modes in enumerate(modes_list):
        pending = np.flatnonzero(modes == GateMode.GELU)
        if pending.size == 0:
            continue
        k = math.ceil(pending.size / remaining_epochs)
        for channel in sorted(pending, reverse=True)[:k]:
            switches.append((layer_idx, int(channel)))
    return switches


def apply_switches(modes_list: list[np.ndarray], switches: list[tuple[int, int]]) -> None:
    for layer_idx, channel in switches:
        if modes_list[layer_idx][channel] != GateMode.GELU:
            raise ConfigError(f"channel ({layer_idx}, {channel}) already switched")
        modes_list[layer_idx][channel] = GateMode.DRELU


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    phase: str
    epoch: int
    loss: float
    accuracy: float
    lr: float
    remaining_smooth: int
    gate_total: int


def write_metrics_csv(rows: list[EpochMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "epoch", "loss", "accuracy", "lr",
                         "remaining_gelu_channels", "gate_ledger_total"])
        for r in rows:
            writer.writerow([r.phase, r.epoch, f"{r.loss:.6f}", f"{r.accuracy:.6f}",
                             f"{r.lr:.8g}", r.remaining_smooth, r.gate_total])


def _iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate_accuracy(net: Network, x: np.ndarray, y: np.ndarray,
                      batch_size: int = 256) -> float:
    hits = 0
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        hits += int(np.sum(net.predict(xb) == y[start:start + batch_size]))
    return hits / len(x)


def train_epoch(net: Network, opt: SGD, x: np.ndarray, y: np.ndarray,
                lr: float, batch_size: int, rng: np.random.Generator,
                teacher: Network | None = None, temperature: float = 4.0,
                mix: float = 0.0, augment=None) -> float:
    """One pass over the data; returns the mean loss. Raises NumericError on
    a non-finite loss, leaving parameters at their pre-batch values."""
    losses = []
    for idx in _iterate_batches(len(x), batch_size, rng):
        xb, yb = x[idx], y[idx]
        if augment is not None:
            xb = augment(xb, rng)
        teacher_logits = teacher.forward(xb).data if teacher is not None and mix > 0 else None
        opt.zero_grad()
        with Tape():
            logits = net.forward(xb)
            loss = kd_loss(logits, teacher_logits, yb, temperature, mix)
            val = loss.item()
            if not math.isfinite(val):
                raise NumericError(f"non-finite loss {val}")
            loss.backward()
        opt.step(lr)
        losses.append(val)
    return float(np.mean(losses)) if losses else 0.0


def run_training(net: Network, schedule: TrainingSchedule,
                 x: np.ndarray, y: np.ndarray, rng: np.random.Generator,
                 gate_total: int = 0,
                 plain_teacher: Network | None = None,
                 eval_data: tuple[np.ndarray, np.ndarray] | None = None,
                 augment=None,
                 on_epoch=None) -> tuple[list[EpochMetrics], Network | None]:
    """Run the full phase plan on a gated network.

    Gate modes start as configured on the network: all smooth for the full
    recipe, all hard when the smooth phase is ablated. After the smooth
    phase the model is snapshotted and serves as the distillation teacher
    for substitution and finetuning. Returns per-epoch metrics and the
    snapshot (None when there was no smooth phase).
    """
    metrics: list[EpochMetrics] = []
    opt = SGD(net.parameters(), momentum=schedule.momentum,
              weight_decay=schedule.weight_decay)
    eval_x, eval_y = eval_data if eval_data is not None else (x, y)
    kd = schedule.kd
    snapshot: Network | None = None

    def record(phase: str, epoch: int, loss: float, lr: float):
        acc = evaluate_accuracy(net, eval_x, eval_y)
        metrics.append(EpochMetrics(phase, epoch, loss, acc, lr,
                                    net.remaining_smooth(), gate_total))
        if on_epoch is not None:
            on_epoch(metrics[-1])

    for plan in schedule.phases:
        if plan.name == GELU_PHASE:
            teacher, mix = plain_teacher, kd.gelu_phase_mix
        else:
            teacher, mix = snapshot, kd.mix
        for epoch in range(plan.epochs):
            if plan.name == SUBSTITUTION:
                modes = net.modes_list()
                apply_switches(modes, substitution_plan(modes, plan.epochs - epoch))
            lr = lr_at(plan, epoch)
            loss = train_epoch(net, opt, x, y, lr, schedule.batch_size, rng,
                               teacher=teacher, temperature=kd.temperature,
                               mix=mix, augment=augment)
            record(plan.name, epoch, loss, lr)
        if plan.name == GELU_PHASE and plan.epochs > 0:
            snapshot = clone_network(net)
        if plan.name == SUBSTITUTION and plan.epochs > 0 and net.remaining_smooth() > 0:
            raise ConfigError("substitution phase ended with smooth channels left")

    return metrics, snapshot
