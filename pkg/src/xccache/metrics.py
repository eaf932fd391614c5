"""QA scoring: exact match and token-overlap precision/recall/F1.

Text inputs follow the usual SQuAD normalisation. Token-id sequences are
compared as they are.
"""

from __future__ import annotations

import csv
import enum
import io
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .encoders import EncoderOutput
from .synth_data import QARecord
from .vocab import ReservedTokens
from .xc_model import XCModel, xc_generate


class ContractError(ValueError):
    pass


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize(x) -> list:
    """Canonical token sequence: strings are cleaned and split, id sequences pass through."""
    if isinstance(x, str):
        s = x.lower().translate(_PUNCT)
        s = _ARTICLES.sub(" ", s)
        return s.split()
    return list(x)


def normalize_text(s: str) -> str:
    return " ".join(normalize(s))


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def token_prf(prediction, gold) -> PRF:
    pred, ref = normalize(prediction), normalize(gold)
    if not pred and not ref:
        return PRF(1.0, 1.0, 1.0)
    if not pred or not ref:
        return PRF(0.0, 0.0, 0.0)
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return PRF(0.0, 0.0, 0.0)
    p = overlap / len(pred)
    r = overlap / len(ref)
    return PRF(p, r, 2 * p * r / (p + r))


def exact_match(prediction, gold) -> int:
    return int(normalize(prediction) == normalize(gold))


METRICS: dict[str, Callable] = {
    "em": exact_match,
    "precision": lambda p, g: token_prf(p, g).precision,
    "recall": lambda p, g: token_prf(p, g).recall,
    "f1": lambda p, g: token_prf(p, g).f1,
}


def best_over_references(prediction, references: Sequence, metric="f1") -> float:
    """Score against whichever reference answer suits the prediction best."""
    if not references:
        raise ContractError("need at least one reference answer")
    fn = METRICS[metric] if isinstance(metric, str) else metric
    return max(fn(prediction, r) for r in references)


# ---------------------------------------------------------------------------
# reports


class Mode(str, enum.Enum):
    WITH_CONTEXT = "with_context"
    NO_CONTEXT = "no_context"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        return cls(str(value).replace("-", "_"))


COLUMNS = ("dataset", "mode", "count", "EM", "Precision", "Recall", "F1")


@dataclass
class EvalRow:
    dataset: str
    mode: Mode
    count: int
    em: float  # percentages
    precision: float
    recall: float
    f1: float

    def values(self) -> tuple:
        return (self.dataset, self.mode.value, self.count, self.em, self.precision, self.recall, self.f1)


@dataclass
class EvalReport:
    rows: list[EvalRow]
    predictions: dict[str, list[list[int]]] = field(default_factory=dict)

    def aggregate(self, name: str = "all") -> EvalRow:
        n = sum(r.count for r in self.rows)
        if n == 0:
            raise ContractError("empty report")
        modes = {r.mode for r in self.rows}
        mode = modes.pop() if len(modes) == 1 else Mode.WITH_CONTEXT

        def w(attr):
            return sum(getattr(r, attr) * r.count for r in self.rows) / n

        return EvalRow(name, mode, n, w("em"), w("precision"), w("recall"), w("f1"))

    def merged(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.rows + other.rows, {**self.predictions, **other.predictions})

    def to_csv(self, with_aggregate: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        rows = self.rows + ([self.aggregate()] if with_aggregate and len(self.rows) > 1 else [])
        for r in rows:
            v = r.values()
            w.writerow(list(v[:3]) + [f"{x:.2f}" for x in v[3:]])
        return buf.getvalue()

    def to_table(self, with_aggregate: bool = True) -> str:
        rows = self.rows + ([self.aggregate()] if with_aggregate and len(self.rows) > 1 else [])
        cells = [list(COLUMNS)] + [[str(v) for v in r.values()[:3]] + [f"{x:.2f}" for x in r.values()[3:]]
                                   for r in rows]
        widths = [max(len(c[i]) for c in cells) for i in range(len(COLUMNS))]
        lines = []
        for k, c in enumerate(cells):
            lines.append("  ".join(s.ljust(wd) if i < 2 else s.rjust(wd) for i, (s, wd) in enumerate(zip(c, widths))))
            if k == 0:
                lines.append("  ".join("-" * wd for wd in widths))
        return "\n".join(lines) + "\n"


def score(predictions: Sequence[Sequence[int]], references: Sequence[Sequence[Sequence[int]]],
          dataset: str = "synthetic", mode: Mode = Mode.WITH_CONTEXT) -> EvalRow:
    n = len(predictions)
    if n != len(references):
        raise ContractError("one prediction per record required")
    if n == 0:
        return EvalRow(dataset, mode, 0, 0.0, 0.0, 0.0, 0.0)
    tot = dict.fromkeys(("em", "precision", "recall", "f1"), 0.0)
    for p, refs in zip(predictions, references):
        for k in tot:
            tot[k] += best_over_references(p, refs, k)
    return EvalRow(dataset, mode, n, *(100.0 * tot[k] / n for k in ("em", "precision", "recall", "f1")))


def evaluate(model: XCModel, records: Sequence[QARecord], mode="with_context", *,
             reserved: ReservedTokens | None = None, dataset: str = "synthetic", max_new: int = 8,
             encode: Callable[[QARecord], EncoderOutput] | None = None) -> EvalReport:
    """Greedy answers for ``records`` scored against their references.

    ``no_context`` hands the cross layers an empty encoding, which reduces the
    model to its base decoder. ``encode`` overrides how a record's context is
    turned into an encoding (e.g. reading a stored cache).
    """
    mode = Mode.parse(mode)
    reserved = reserved or ReservedTokens()
    preds = []
    for r in records:
        if mode is Mode.NO_CONTEXT:
            enc = EncoderOutput.empty(model.d_enc, model.kind)
        elif encode is not None:
            enc = encode(r)
        else:
            enc = model.encode([r.context])
        preds.append(xc_generate(model, enc, list(r.query) + [reserved.answer], max_new, stop=reserved.eos))
    row = score(preds, [r.answers for r in records], dataset, mode)
    return EvalReport([row], {f"{dataset}/{mode.value}": preds})


def chance_em(records: Sequence[QARecord]) -> float:
    """EM (percent) of always emitting the most frequent first reference."""
    if not records:
        raise ContractError("no records")
    counts = Counter(tuple(r.answers[0]) for r in records)
    best = counts.most_common(1)[0][0]
    return 100.0 * sum(any(tuple(a) == best for a in r.answers) for r in records) / len(records)
