"""Synthetic needle-in-context QA corpus.

A context is a run of filler tokens with a few ``key value`` facts embedded.
The query names one key and the answer is its value. Within a context every
filler token, key and value is distinct, so each fact can be located by
content alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .vocab import VocabLayout

NEEDLE_POSITIONS = ("begin", "middle", "end", "both_ends", "random")
FACT_LEN = 2


class DataFormatError(ValueError):
    pass


@dataclass
class QARecord:
    contexts: list[list[int]]
    query: list[int]
    answers: list[list[int]]
    answerable: bool

    @property
    def context(self) -> list[int]:
        """All contexts concatenated, as seen by the encoder."""
        return [t for c in self.contexts for t in c]

    @property
    def context_tokens(self) -> int:
        return sum(len(c) for c in self.contexts)


@dataclass(frozen=True)
class GenConfig:
    n_records: int = 1000
    context_len: int = 64
    n_distractor_facts: int = 3
    needle_position: str = "random"
    unanswerable_rate: float = 0.1
    synonym_rate: float = 0.1
    layout: VocabLayout = field(default_factory=VocabLayout)
    seed: int = 0

    def __post_init__(self):
        if self.needle_position not in NEEDLE_POSITIONS:
            raise ValueError(f"needle_position must be one of {NEEDLE_POSITIONS}")
        if not (0.0 <= self.unanswerable_rate <= 1.0 and 0.0 <= self.synonym_rate <= 1.0):
            raise ValueError("rates must lie in [0, 1]")
        spans = self.n_distractor_facts + (2 if self.needle_position == "both_ends" else 1)
        if self.context_len < FACT_LEN * spans:
            raise ValueError(f"context_len={self.context_len} too short for {spans} facts")
        if self.n_distractor_facts + 1 > min(self.layout.n_keys, self.layout.n_values):
            raise ValueError("not enough keys/values for the requested facts")
        if self.context_len - FACT_LEN * spans > self.layout.n_filler:
            raise ValueError("filler vocabulary too small for distinct filler tokens")


def needle_start_range(position: str, n: int) -> tuple[int, int]:
    """Inclusive range of allowed start offsets for a fact span in a context of ``n`` tokens."""
    tenth = math.ceil(0.1 * n)
    last = n - FACT_LEN
    if position == "begin":
        return 0, min(last, max(0, tenth - 1))
    if position == "end":
        return max(0, min(n - tenth, last)), last
    if position == "middle":
        lo = math.floor(0.45 * n)
        hi = max(lo, math.ceil(0.55 * n) - FACT_LEN)
        return min(lo, last), min(hi, last)
    return 0, last


def _place_spans(rng: np.random.Generator, n: int, fixed: list[int], count: int) -> list[int]:
    taken = np.zeros(n, bool)
    for s in fixed:
        taken[s:s + FACT_LEN] = True
    starts = []
    for _ in range(count):
        free = np.flatnonzero(~np.lib.stride_tricks.sliding_window_view(taken, FACT_LEN).any(axis=1))
        s = int(rng.choice(free))
        taken[s:s + FACT_LEN] = True
        starts.append(s)
    return starts


def generate_record(config: GenConfig, index: int) -> QARecord:
    lay = config.layout
    res = lay.reserved
    rng = np.random.default_rng([config.seed, index])
    n = config.context_len
    answerable = bool(rng.random() >= config.unanswerable_rate)
    keys = rng.choice(lay.n_keys, size=config.n_distractor_facts + 1, replace=False)
    values = rng.choice(lay.n_values, size=config.n_distractor_facts + 1, replace=False)
    q_key, q_val = lay.key(int(keys[0])), lay.value(int(values[0]))
    facts = [(lay.key(int(k)), lay.value(int(v))) for k, v in zip(keys[1:], values[1:])]

    needle_starts: list[int] = []
    if answerable:
        if config.needle_position == "both_ends":
            lo, hi = needle_start_range("begin", n)
            first = int(rng.integers(lo, hi + 1))
            lo, hi = needle_start_range("end", n)
            lo = max(lo, first + FACT_LEN)
            needle_starts = [first, int(rng.integers(lo, hi + 1))]
        else:
            lo, hi = needle_start_range(config.needle_position, n)
            needle_starts = [int(rng.integers(lo, hi + 1))]
    distractor_starts = _place_spans(rng, n, needle_starts, len(facts))

    ctx = [-1] * n
    for s in needle_starts:
        ctx[s], ctx[s + 1] = q_key, q_val
    for s, (k, v) in zip(distractor_starts, facts):
        ctx[s], ctx[s + 1] = k, v
    holes = [i for i, t in enumerate(ctx) if t < 0]
    filler = rng.choice(lay.n_filler, size=len(holes), replace=False)
    for i, f in zip(holes, filler):
        ctx[i] = lay.filler(int(f))

    query = [res.query, q_key]
    if not answerable:
        answers = [res.unanswerable_answer]
    else:
        answers = [[q_val]]
        syn = lay.synonym(q_val)
        if syn is not None and rng.random() < config.synonym_rate:
            answers.append([syn])
    return QARecord(contexts=[ctx], query=query, answers=answers, answerable=answerable)


def generate(config: GenConfig) -> list[QARecord]:
    return [generate_record(config, i) for i in range(config.n_records)]


def contains_span(seq: list[int], span: list[int]) -> bool:
    m = len(span)
    return any(seq[i:i + m] == span for i in range(len(seq) - m + 1)) if m else True


def pool_and_filter(records: Iterable[QARecord], max_context_tokens: int) -> list[QARecord]:
    """Drop records whose total context is longer than ``max_context_tokens``."""
    return [r for r in records if r.context_tokens <= max_context_tokens]


def split(records: list[QARecord], holdout_fraction: float = 0.1, seed: int = 0) -> dict[str, list[QARecord]]:
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie strictly between 0 and 1")
    n = len(records)
    n_valid = int(math.floor(holdout_fraction * n + 0.5))
    chosen = set(np.random.default_rng(seed).permutation(n)[:n_valid].tolist())
    return {
        "train": [r for i, r in enumerate(records) if i not in chosen],
        "valid": [r for i, r in enumerate(records) if i in chosen],
    }


# ---------------------------------------------------------------------------
# JSONL


def record_to_json(record: QARecord, layout: VocabLayout) -> dict:
    return {
        "contexts": [layout.decode(c) for c in record.contexts],
        "query": layout.decode(record.query),
        "answers": [layout.decode(a) for a in record.answers],
        "answerable": record.answerable,
    }


def record_from_json(obj: dict, layout: VocabLayout) -> QARecord:
    for key in ("contexts", "query", "answers", "answerable"):
        if key not in obj:
            raise KeyError(key)
    return QARecord(
        contexts=[layout.encode(c) for c in obj["contexts"]],
        query=layout.encode(obj["query"]),
        answers=[layout.encode(a) for a in obj["answers"]],
        answerable=bool(obj["answerable"]),
    )


def write_jsonl(records: Iterable[QARecord], path, layout: VocabLayout | None = None) -> None:
    layout = layout or VocabLayout()
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r, layout), sort_keys=True) + "\n")


def read_jsonl(path, layout: VocabLayout | None = None) -> list[QARecord]:
    layout = layout or VocabLayout()
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"line {lineno}: invalid JSON ({e.msg})") from e
        try:
            out.append(record_from_json(obj, layout))
        except KeyError as e:
            raise DataFormatError(f"line {lineno}: missing field {e.args[0]!r}") from e
        except (ValueError, TypeError, AttributeError) as e:
            raise DataFormatError(f"line {lineno}: {e}") from e
    return out
