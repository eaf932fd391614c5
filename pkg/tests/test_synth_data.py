import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from xccache.synth_data import (
    FACT_LEN, DataFormatError, GenConfig, QARecord, contains_span, generate, needle_start_range,
    pool_and_filter, read_jsonl, split, write_jsonl,
)
from xccache.vocab import VocabLayout

LAY = VocabLayout()
RES = LAY.reserved


def _scan(seq, span):
    # plain nested-loop substring scan, independent of contains_span
    for i in range(len(seq)):
        if i + len(span) <= len(seq) and all(seq[i + k] == span[k] for k in range(len(span))):
            return True
    return False


def test_all_answerable_when_rate_zero():
    for r in generate(GenConfig(n_records=300, unanswerable_rate=0.0)):
        assert r.answerable and _scan(r.context, r.answers[0])


def test_none_answerable_when_rate_one():
    for r in generate(GenConfig(n_records=300, unanswerable_rate=1.0)):
        assert not r.answerable and r.answers == [[RES.unanswerable]]
        assert r.query[1] not in r.context


def test_answerable_invariant_by_brute_force_10k():
    recs = generate(GenConfig(n_records=10_000, seed=5))
    for r in recs:
        if r.answerable:
            key, val = r.query[1], r.answers[0][0]
            assert any(r.context[i] == key and r.context[i + 1] == val for i in range(len(r.context) - 1))
        else:
            assert not any(_scan(r.context, a) for a in r.answers)
            assert r.query[1] not in r.context
    rate = sum(not r.answerable for r in recs) / len(recs)
    assert abs(rate - 0.1) < 3 * math.sqrt(0.1 * 0.9 / len(recs))


def test_context_tokens_distinct_and_in_vocab():
    for r in generate(GenConfig(n_records=500, needle_position="random")):
        c = r.context
        assert len(c) == 64 and len(set(c)) == len(c)
        assert all(LAY.is_content(t) for t in c)


def test_distractors_never_share_query_key():
    for r in generate(GenConfig(n_records=500)):
        keys = [t for t in r.context if LAY.key_start <= t < LAY.value_start]
        assert keys.count(r.query[1]) == (1 if r.answerable else 0)


def test_synonyms_add_references():
    recs = generate(GenConfig(n_records=2000, synonym_rate=1.0, unanswerable_rate=0.0))
    multi = [r for r in recs if len(r.answers) == 2]
    assert multi and all(r.answers[1] == [LAY.synonym(r.answers[0][0])] for r in multi)
    # only values with a synonym can gain one
    assert all(LAY.synonym(r.answers[0][0]) is None for r in recs if len(r.answers) == 1)


@pytest.mark.parametrize("pos", ["begin", "middle", "end"])
@pytest.mark.parametrize("n", [20, 64, 100])
def test_needle_position_contract(pos, n):
    recs = generate(GenConfig(n_records=200, context_len=n, needle_position=pos, unanswerable_rate=0.0))
    tenth = math.ceil(0.1 * n)
    for r in recs:
        start = r.context.index(r.query[1])
        if pos == "begin":
            assert start < tenth
        elif pos == "end":
            assert start >= n - tenth
        else:
            assert math.floor(0.45 * n) <= start and start + FACT_LEN <= max(math.ceil(0.55 * n), start + FACT_LEN)


def test_both_ends_places_two_copies():
    n = 64
    tenth = math.ceil(0.1 * n)
    for r in generate(GenConfig(n_records=200, needle_position="both_ends", unanswerable_rate=0.0)):
        starts = [i for i, t in enumerate(r.context) if t == r.query[1]]
        assert len(starts) == 2
        assert starts[0] < tenth and starts[1] >= n - tenth
        assert all(r.context[s + 1] == r.answers[0][0] for s in starts)


def test_needle_ranges_inside_context():
    for pos in ("begin", "middle", "end", "random"):
        for n in range(8, 200):
            lo, hi = needle_start_range(pos, n)
            assert 0 <= lo <= hi <= n - FACT_LEN


def test_generation_is_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(generate(GenConfig(n_records=50, seed=3)), a)
    write_jsonl(generate(GenConfig(n_records=50, seed=3)), b)
    assert a.read_bytes() == b.read_bytes()
    write_jsonl(generate(GenConfig(n_records=50, seed=4)), b)
    assert a.read_bytes() != b.read_bytes()


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(needle_position="side")
    with pytest.raises(ValueError):
        GenConfig(unanswerable_rate=1.5)
    with pytest.raises(ValueError):
        GenConfig(context_len=6, n_distractor_facts=3)
    with pytest.raises(ValueError):
        GenConfig(context_len=500)


def _rec(n):
    return QARecord([[LAY.filler(i) for i in range(n)]], [RES.query, LAY.key(0)], [[RES.unanswerable]], False)


def test_pool_and_filter_boundaries():
    recs = [_rec(n) for n in (3, 5, 8, 5, 9)]
    assert pool_and_filter(recs, 9) == recs
    kept = pool_and_filter(recs, 5)
    assert [r.context_tokens for r in kept] == [3, 5, 5]
    assert [r.context_tokens for r in pool_and_filter(recs, 8)] == [3, 5, 8, 5]


def test_pool_and_filter_counts_multi_context(rng):
    recs = []
    for _ in range(300):
        parts = [[LAY.filler(0)] * int(rng.integers(1, 30)) for _ in range(int(rng.integers(1, 4)))]
        recs.append(QARecord(parts, [RES.query, LAY.key(0)], [[RES.unanswerable]], False))
    bound = 40
    want = sum(1 for r in recs if sum(len(c) for c in r.contexts) <= bound)
    assert len(pool_and_filter(recs, bound)) == want


def test_split():
    recs = [_rec(i + 1) for i in range(10)]
    s = split(recs, 0.1, seed=0)
    assert len(s["valid"]) == 1 and len(s["train"]) == 9
    ids = lambda rs: {r.context_tokens for r in rs}
    assert ids(s["train"]) | ids(s["valid"]) == ids(recs) and not ids(s["train"]) & ids(s["valid"])
    assert split(recs, 0.1, seed=0) == s
    with pytest.raises(ValueError):
        split(recs, 0.0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 400), frac=st.floats(0.01, 0.99))
def test_split_sizes(n, frac):
    recs = [_rec(1) for _ in range(n)]
    s = split(recs, frac, seed=1)
    assert len(s["valid"]) == math.floor(frac * n + 0.5)
    assert len(s["valid"]) + len(s["train"]) == n


def test_jsonl_roundtrip(tmp_path):
    recs = generate(GenConfig(n_records=100, synonym_rate=0.5, seed=9))
    p = tmp_path / "d.jsonl"
    write_jsonl(recs, p)
    assert read_jsonl(p) == recs
    line = json.loads(p.read_text().splitlines()[0])
    assert set(line) == {"contexts", "query", "answers", "answerable"}
    assert all(isinstance(c, str) for c in line["contexts"])


def test_jsonl_errors(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text("")
    assert read_jsonl(p) == []
    good = json.dumps({"contexts": ["f1 f2"], "query": "<query> k1", "answers": ["UNANSWERABLE"],
                       "answerable": False})
    p.write_text(good + "\n" + json.dumps({"contexts": [], "query": "", "answerable": True}) + "\n")
    with pytest.raises(DataFormatError, match="line 2.*answers"):
        read_jsonl(p)
    p.write_text(good + "\n{broken\n")
    with pytest.raises(DataFormatError, match="line 2"):
        read_jsonl(p)
    p.write_text(good.replace("k1", "zz9") + "\n")
    with pytest.raises(DataFormatError, match="line 1"):
        read_jsonl(p)


def test_vocab_string_map_is_reversible():
    ids = list(range(LAY.size))
    assert LAY.encode(LAY.decode(ids)) == ids
    with pytest.raises(ValueError):
        LAY.token_to_str(LAY.size)


def test_contains_span():
    assert contains_span([1, 2, 3], [2, 3]) and not contains_span([1, 2, 3], [3, 2])
    assert contains_span([1], [])
