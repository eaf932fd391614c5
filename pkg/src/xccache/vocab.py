"""Token-id layout shared by the synthetic corpus, the trainer and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

N_RESERVED = 16


@dataclass(frozen=True)
class ReservedTokens:
    pad: int = 0
    eos: int = 1
    answer: int = 2
    repeat: int = 3
    fim_pre: int = 4
    fim_suf: int = 5
    fim_mid: int = 6
    unanswerable: int = 7
    query: int = 8

    @property
    def unanswerable_answer(self) -> list[int]:
        return [self.unanswerable]

    def ids(self) -> set[int]:
        return {self.pad, self.eos, self.answer, self.repeat, self.fim_pre,
                self.fim_suf, self.fim_mid, self.unanswerable, self.query}


_RESERVED_NAMES = {
    "pad": "<pad>", "eos": "<eos>", "answer": "<answer>", "repeat": "<repeat>",
    "fim_pre": "<fim_pre>", "fim_suf": "<fim_suf>", "fim_mid": "<fim_mid>",
    "unanswerable": "UNANSWERABLE", "query": "<query>",
}


@dataclass(frozen=True)
class VocabLayout:
    """Contiguous id ranges: reserved, keys, values, value synonyms, filler."""

    n_keys: int = 40
    n_values: int = 40
    n_synonyms: int = 8
    n_filler: int = 96
    reserved: ReservedTokens = ReservedTokens()

    def __post_init__(self):
        if self.n_synonyms > self.n_values:
            raise ValueError("more synonyms than values")
        if min(self.n_keys, self.n_values, self.n_filler) <= 0:
            raise ValueError("vocabulary ranges must be nonempty")

    @property
    def key_start(self) -> int:
        return N_RESERVED

    @property
    def value_start(self) -> int:
        return self.key_start + self.n_keys

    @property
    def synonym_start(self) -> int:
        return self.value_start + self.n_values

    @property
    def filler_start(self) -> int:
        return self.synonym_start + self.n_synonyms

    @property
    def size(self) -> int:
        return self.filler_start + self.n_filler

    def key(self, i: int) -> int:
        return self.key_start + i

    def value(self, i: int) -> int:
        return self.value_start + i

    def synonym(self, value_id: int) -> int | None:
        i = value_id - self.value_start
        if 0 <= i < self.n_synonyms:
            return self.synonym_start + i
        return None

    def filler(self, i: int) -> int:
        return self.filler_start + i

    def is_content(self, tok: int) -> bool:
        return self.key_start <= tok < self.size

    # reversible token <-> string map used by the JSONL format

    def token_to_str(self, tok: int) -> str:
        tok = int(tok)
        for name, s in _RESERVED_NAMES.items():
            if getattr(self.reserved, name) == tok:
                return s
        if tok < N_RESERVED:
            return f"<r{tok}>"
        if tok < self.value_start:
            return f"k{tok - self.key_start}"
        if tok < self.synonym_start:
            return f"v{tok - self.value_start}"
        if tok < self.filler_start:
            return f"s{tok - self.synonym_start}"
        if tok < self.size:
            return f"f{tok - self.filler_start}"
        raise ValueError(f"token id {tok} outside vocabulary of {self.size}")

    def str_to_token(self, s: str) -> int:
        for name, rs in _RESERVED_NAMES.items():
            if rs == s:
                return getattr(self.reserved, name)
        if s.startswith("<r") and s.endswith(">"):
            return int(s[2:-1])
        starts = {"k": (self.key_start, self.n_keys), "v": (self.value_start, self.n_values),
                  "s": (self.synonym_start, self.n_synonyms), "f": (self.filler_start, self.n_filler)}
        if s[:1] in starts and s[1:].isdigit():
            base, n = starts[s[0]]
            i = int(s[1:])
            if i < n:
                return base + i
        raise ValueError(f"unknown token string {s!r}")

    def encode(self, text: str) -> list[int]:
        return [self.str_to_token(s) for s in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.token_to_str(t) for t in ids)
