"""Base-decoder pretraining for desk-scale experiments.

The XC recipe starts from a capable pretrained language model. At toy scale
there is none to download, so we train the base decoder ourselves with plain
next-token prediction on in-context versions of the same tasks: the context is
placed in the prompt, followed by the answer, repeat or infill layout. This
gives the decoder working lookup and copy circuits before it is frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import decoder as dec
from .decoder import DecoderConfig, DecoderWeights
from .synth_data import QARecord
from .tensor import Tape, backward, cross_entropy
from .trainer import (
    AdamWState,
    NumericError,
    TaskKind,
    TaskSequence,
    TrainConfig,
    _pad,
    adamw_update,
    clip_grad_norm,
    lr_at,
    task_sequence,
)
from .vocab import ReservedTokens

PRETRAIN_TASKS = (TaskKind.ANSWER, TaskKind.REPEAT, TaskKind.INFILL_PSM, TaskKind.INFILL_SPM)


def icl_sequence(record: QARecord, task: TaskKind, reserved: ReservedTokens,
                 rng: np.random.Generator, max_middle: int) -> TaskSequence:
    """``context + task layout``; loss covers the task targets only."""
    seq = task_sequence(record, task, reserved, rng, max_middle)
    ctx = record.context
    return TaskSequence(list(ctx) + seq.tokens, len(ctx) + seq.loss_from)


@dataclass
class PretrainStep:
    loss: float
    grad_norm: float
    lr: float


def pretrain_decoder(weights: DecoderWeights, config: DecoderConfig, records: Sequence[QARecord],
                     train_config: TrainConfig, reserved: ReservedTokens,
                     on_step: Callable[[int, PretrainStep], None] | None = None) -> AdamWState:
    """Train every decoder tensor in place.

    Steps cycle through the tasks with one task per batch. With per-token loss
    averaging, mixing tasks inside a batch would let the long repeat sequences
    drown out the one-token answers.
    """
    was_frozen = weights.frozen
    weights.unfreeze()
    params = dict(weights.named_tensors())
    state = AdamWState()
    n = len(records)
    bs = train_config.batch_size
    try:
        for step in range(train_config.total_steps):
            epoch, k = divmod(step * bs, n)
            order = np.random.default_rng([train_config.seed, epoch, 21]).permutation(n)
            idx = [int(order[(k + i) % n]) for i in range(bs)]
            rng = np.random.default_rng([train_config.seed, step, 23])
            tasks = [PRETRAIN_TASKS[step % len(PRETRAIN_TASKS)]] * bs
            seqs = [icl_sequence(records[i], t, reserved, rng, train_config.max_middle) for i, t in zip(idx, tasks)]
            if max(len(s.tokens) for s in seqs) > config.max_seq + 1:
                raise ValueError("pretraining sequence longer than the decoder window")
            inputs, _ = _pad([s.inputs for s in seqs], reserved.pad)
            targets, _ = _pad([s.targets for s in seqs], reserved.pad)
            mask, _ = _pad([[int(m) for m in s.loss_mask] for s in seqs], 0)
            for p in params.values():
                p.grad = None
            with Tape():
                loss = cross_entropy(dec.run(weights, config, inputs).logits, targets, mask.astype(bool))
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite pretraining loss at step {step}")
                backward(loss)
            grads = {k_: (np.zeros_like(p.data) if p.grad is None else p.grad) for k_, p in params.items()}
            grads, norm = clip_grad_norm(grads, train_config.max_grad_norm)
            lr = lr_at(step + 1, train_config)
            adamw_update(params, grads, state, lr, train_config)
            if on_step is not None:
                on_step(step + 1, PretrainStep(value, norm, lr))
    finally:
        for p in params.values():
            p.grad = None
        if was_frozen:
            weights.freeze()
    return state
