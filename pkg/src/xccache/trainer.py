"""Multitask fine-tuning of the XC model's trainable modules.

Each epoch makes two passes over the data. Pass one trains question
answering; pass two trains the same examples on an auxiliary task (repeat the
context, or infill it in PSM or SPM order). Only ``trainable_parameters`` are
updated; the base decoder is never written to.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .synth_data import QARecord
from .tensor import Tape, Tensor, backward, cross_entropy
from .vocab import ReservedTokens
from .xc_model import XCModel, trainable_parameters, xc_forward


class NumericError(RuntimeError):
    pass


class TaskKind(str, enum.Enum):
    ANSWER = "answer"
    REPEAT = "repeat"
    INFILL_PSM = "psm"
    INFILL_SPM = "spm"


AUX_TASKS = (TaskKind.REPEAT, TaskKind.INFILL_PSM, TaskKind.INFILL_SPM)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 2e-4
    warmup_steps: int = 2500
    total_steps: int = 40000
    batch_size: int = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-6
    weight_decay: float = 0.001
    max_grad_norm: float = 1.0
    max_middle: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.base_lr <= 0 or self.batch_size <= 0 or self.max_grad_norm <= 0:
            raise ValueError("base_lr, batch_size and max_grad_norm must be positive")

    @classmethod
    def reference(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        base = dict(base_lr=3e-3, warmup_steps=125, total_steps=2000, batch_size=32)
        base.update(kw)
        return cls(**base)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warm-up to ``base_lr``, then linear decay reaching 0 at ``total_steps``."""
    w, t = config.warmup_steps, config.total_steps
    if not 0 <= step <= t:
        raise ValueError(f"step {step} outside [0, {t}]")
    if w and step <= w:
        return config.base_lr * step / w
    return config.base_lr * (t - step) / (t - w)


# ---------------------------------------------------------------------------
# sequence layouts


@dataclass
class TaskSequence:
    """Decoder tokens plus the index of the first token the loss covers."""

    tokens: list[int]
    loss_from: int

    @property
    def inputs(self) -> list[int]:
        return self.tokens[:-1]

    @property
    def targets(self) -> list[int]:
        return self.tokens[1:]

    @property
    def loss_mask(self) -> list[bool]:
        return [i + 1 >= self.loss_from for i in range(len(self.tokens) - 1)]

    @property
    def prompt(self) -> list[int]:
        return self.tokens[:self.loss_from]


def build_answer_sequence(query: Sequence[int], answer: Sequence[int], reserved: ReservedTokens) -> TaskSequence:
    toks = list(query) + [reserved.answer] + list(answer) + [reserved.eos]
    return TaskSequence(toks, len(query) + 1)


def build_repeat_sequence(context: Sequence[int], reserved: ReservedTokens) -> TaskSequence:
    return TaskSequence([reserved.repeat] + list(context) + [reserved.eos], 1)


def build_fim_sequence(context: Sequence[int], split: tuple[int, int], order: TaskKind,
                       reserved: ReservedTokens) -> TaskSequence:
    i, j = split
    c = list(context)
    if not 0 <= i <= j <= len(c):
        raise IndexError(f"invalid infill split {split} for context of {len(c)} tokens")
    pre, mid, suf = c[:i], c[i:j], c[j:]
    if order is TaskKind.INFILL_PSM:
        head = [reserved.fim_pre] + pre + [reserved.fim_suf] + suf + [reserved.fim_mid]
    elif order is TaskKind.INFILL_SPM:
        head = [reserved.fim_suf] + suf + [reserved.fim_pre] + pre + [reserved.fim_mid]
    else:
        raise ValueError(f"{order} is not an infilling order")
    return TaskSequence(head + mid + [reserved.eos], len(head))


def draw_split(rng: np.random.Generator, n: int, max_middle: int) -> tuple[int, int]:
    m = int(rng.integers(0, min(max_middle, n) + 1))
    i = int(rng.integers(0, n - m + 1))
    return i, i + m


def task_sequence(record: QARecord, task: TaskKind, reserved: ReservedTokens,
                  rng: np.random.Generator, max_middle: int) -> TaskSequence:
    if task is TaskKind.ANSWER:
        return build_answer_sequence(record.query, record.answers[0], reserved)
    ctx = record.context
    if task is TaskKind.REPEAT:
        return build_repeat_sequence(ctx, reserved)
    return build_fim_sequence(ctx, draw_split(rng, len(ctx), max_middle), task, reserved)


# ---------------------------------------------------------------------------
# schedule and batching


@dataclass(frozen=True)
class BatchPlan:
    indices: tuple[int, ...]
    tasks: tuple[TaskKind, ...]
    pass_index: int


def epoch_schedule(n_examples: int, epoch_index: int, seed: int, batch_size: int) -> list[BatchPlan]:
    """Two passes: answers over one permutation, auxiliary tasks over another."""
    if n_examples <= 0:
        raise ValueError("dataset is empty")
    first = np.random.default_rng([seed, epoch_index, 1]).permutation(n_examples)
    second = np.random.default_rng([seed, epoch_index, 2]).permutation(n_examples)
    draws = np.random.default_rng([seed, epoch_index, 3]).integers(0, len(AUX_TASKS), n_examples)
    plans = []
    for s in range(0, n_examples, batch_size):
        idx = first[s:s + batch_size]
        plans.append(BatchPlan(tuple(int(i) for i in idx), (TaskKind.ANSWER,) * len(idx), 1))
    for s in range(0, n_examples, batch_size):
        idx = second[s:s + batch_size]
        plans.append(BatchPlan(tuple(int(i) for i in idx), tuple(AUX_TASKS[draws[i]] for i in idx), 2))
    return plans


def batches_per_epoch(n_examples: int, batch_size: int) -> int:
    return 2 * math.ceil(n_examples / batch_size)


@dataclass
class Batch:
    enc_ids: np.ndarray  # (B, S)
    enc_mask: np.ndarray | None  # (B, S) or None when all contexts share a length
    inputs: np.ndarray  # (B, T)
    targets: np.ndarray
    loss_mask: np.ndarray
    tasks: tuple[TaskKind, ...]


def _pad(rows: list[list[int]], value: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), value, np.int64)
    mask = np.zeros((len(rows), width), bool)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
        mask[i, :len(r)] = True
    return out, mask


def collate(records: Sequence[QARecord], tasks: Sequence[TaskKind], reserved: ReservedTokens,
            rng: np.random.Generator, max_middle: int = 16) -> Batch:
    seqs = [task_sequence(r, t, reserved, rng, max_middle) for r, t in zip(records, tasks)]
    enc, enc_mask = _pad([r.context for r in records], reserved.pad)
    inputs, _ = _pad([s.inputs for s in seqs], reserved.pad)
    targets, _ = _pad([s.targets for s in seqs], reserved.pad)
    loss_mask, _ = _pad([[int(m) for m in s.loss_mask] for s in seqs], 0)
    return Batch(enc, None if enc_mask.all() else enc_mask, inputs, targets, loss_mask.astype(bool), tuple(tasks))


def plan_for_step(step: int, n_examples: int, config: TrainConfig) -> BatchPlan:
    per = batches_per_epoch(n_examples, config.batch_size)
    epoch, k = divmod(step, per)
    return epoch_schedule(n_examples, epoch, config.seed, config.batch_size)[k]


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        grads = {k: g * np.float32(s) for k, g in grads.items()}
    return grads, norm


def adamw_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState,
                 lr: float, config: TrainConfig) -> None:
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        upd = (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        p.data = (p.data * (1 - lr * config.weight_decay) - lr * upd).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# steps


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    lr: float
    task: str


def batch_loss(model: XCModel, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
    encoding = model.encode(batch.enc_ids, batch.enc_mask)
    logits = xc_forward(model, batch.inputs, encoding, rng)
    return cross_entropy(logits, batch.targets, batch.loss_mask)


def train_step(model: XCModel, batch: Batch, state: AdamWState, config: TrainConfig,
               lr: float, rng: np.random.Generator | None) -> StepResult:
    params = trainable_parameters(model)
    for p in params.values():
        p.grad = None
    with Tape():
        loss = batch_loss(model, batch, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at optimiser step {state.step} "
                               f"(tasks={sorted({t.value for t in batch.tasks})}, lr={lr:g})")
        backward(loss)
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}
    grads, norm = clip_grad_norm(grads, config.max_grad_norm)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient norm at optimiser step {state.step}")
    adamw_update(params, grads, state, lr, config)
    for p in params.values():
        p.grad = None
    task = "answer" if batch.tasks and batch.tasks[0] is TaskKind.ANSWER else "aux"
    return StepResult(value, norm, lr, task)


LOG_FIELDS = ("step", "task", "loss", "lr", "grad_norm")


def train(model: XCModel, records: Sequence[QARecord], config: TrainConfig, reserved: ReservedTokens,
          state: AdamWState | None = None, stop_at: int | None = None, log_path=None,
          on_step: Callable[[int, StepResult], None] | None = None) -> AdamWState:
    """Run optimiser steps ``state.step .. stop_at`` (default ``total_steps``).

    Data order, infill splits and dropout masks are pure functions of
    ``(seed, step)``, so a run resumed from a checkpoint repeats exactly.
    """
    state = state or AdamWState()
    stop_at = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    log = None
    if log_path is not None:
        fh = open(log_path, "a", newline="")
        log = csv.writer(fh)
        if fh.tell() == 0:
            log.writerow(LOG_FIELDS)
    try:
        while state.step < stop_at:
            step = state.step
            plan = plan_for_step(step, len(records), config)
            data_rng = np.random.default_rng([config.seed, step, 7])
            batch = collate([records[i] for i in plan.indices], plan.tasks, reserved, data_rng, config.max_middle)
            drop_rng = np.random.default_rng([config.seed, step, 11])
            res = train_step(model, batch, state, config, lr_at(step + 1, config), drop_rng)
            if log is not None:
                log.writerow([step + 1, res.task, f"{res.loss:.6f}", f"{res.lr:.8g}", f"{res.grad_norm:.6f}"])
            if on_step is not None:
                on_step(step + 1, res)
    finally:
        if log is not None:
            fh.close()
    return state


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
