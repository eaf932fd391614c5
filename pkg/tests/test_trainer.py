import csv
import math

import numpy as np
import pytest

from helpers import random_xc
from xccache.synth_data import GenConfig, generate
from xccache.tensor import Tape, backward, cross_entropy
from xccache.trainer import (
    AUX_TASKS, AdamWState, NumericError, TaskKind, TrainConfig, batches_per_epoch, build_answer_sequence,
    build_fim_sequence, build_repeat_sequence, clip_grad_norm, collate, draw_split, epoch_schedule, lr_at,
    train, train_step,
)
from xccache.vocab import ReservedTokens, VocabLayout
from xccache.xc_model import strip_cross_layers, trainable_parameters, xc_forward

R = ReservedTokens()
REF = TrainConfig.reference()
SMALL = VocabLayout(n_keys=8, n_values=8, n_synonyms=0, n_filler=16)


@pytest.mark.parametrize("step,want", [(0, 0.0), (2500, 2e-4), (40000, 0.0), (21250, 1e-4), (1250, 1e-4)])
def test_lr_schedule_reference(step, want):
    assert lr_at(step, REF) == pytest.approx(want, abs=1e-15)


def test_lr_schedule_bounds():
    with pytest.raises(ValueError):
        lr_at(-1, REF)
    with pytest.raises(ValueError):
        lr_at(40001, REF)
    toy = TrainConfig.toy()
    assert toy.warmup_steps * 16 == toy.total_steps


def test_fim_layouts():
    c = [11, 12, 13, 14, 15, 16]
    psm = build_fim_sequence(c, (2, 4), TaskKind.INFILL_PSM, R)
    assert psm.tokens == [R.fim_pre, 11, 12, R.fim_suf, 15, 16, R.fim_mid, 13, 14, R.eos]
    spm = build_fim_sequence(c, (2, 4), TaskKind.INFILL_SPM, R)
    assert spm.tokens == [R.fim_suf, 15, 16, R.fim_pre, 11, 12, R.fim_mid, 13, 14, R.eos]
    # loss covers middle + EOS only
    assert [t for t, m in zip(psm.targets, psm.loss_mask) if m] == [13, 14, R.eos]


def test_fim_edges():
    c = [11, 12, 13]
    whole = build_fim_sequence(c, (0, 3), TaskKind.INFILL_PSM, R)
    assert whole.tokens[-4:] == [11, 12, 13, R.eos]
    empty = build_fim_sequence(c, (1, 1), TaskKind.INFILL_PSM, R)
    assert [t for t, m in zip(empty.targets, empty.loss_mask) if m] == [R.eos]
    with pytest.raises(IndexError):
        build_fim_sequence(c, (2, 1), TaskKind.INFILL_PSM, R)
    with pytest.raises(IndexError):
        build_fim_sequence(c, (0, 4), TaskKind.INFILL_SPM, R)
    with pytest.raises(ValueError):
        build_fim_sequence(c, (0, 1), TaskKind.REPEAT, R)


def test_answer_and_repeat_layouts():
    a = build_answer_sequence([R.query, 20], [30], R)
    assert a.tokens == [R.query, 20, R.answer, 30, R.eos] and a.prompt == [R.query, 20, R.answer]
    assert [t for t, m in zip(a.targets, a.loss_mask) if m] == [30, R.eos]
    r = build_repeat_sequence([5, 6, 7], R)
    assert r.prompt == [R.repeat] and [t for t, m in zip(r.targets, r.loss_mask) if m] == [5, 6, 7, R.eos]


def test_draw_split_bounds(rng):
    for _ in range(500):
        i, j = draw_split(rng, 20, 8)
        assert 0 <= i <= j <= 20 and j - i <= 8


def test_epoch_schedule_two_passes():
    plans = epoch_schedule(101, 0, seed=3, batch_size=16)
    assert len(plans) == batches_per_epoch(101, 16) == 14
    first = [i for p in plans if p.pass_index == 1 for i in p.indices]
    second = [i for p in plans if p.pass_index == 2 for i in p.indices]
    assert sorted(first) == sorted(second) == list(range(101))
    assert all(t is TaskKind.ANSWER for p in plans if p.pass_index == 1 for t in p.tasks)
    assert all(t in AUX_TASKS for p in plans if p.pass_index == 2 for t in p.tasks)
    assert plans[:7] == [p for p in plans if p.pass_index == 1]
    assert epoch_schedule(101, 0, 3, 16) == plans
    assert epoch_schedule(101, 1, 3, 16) != plans


def test_aux_mix_uniform():
    plans = epoch_schedule(10_000, 0, seed=0, batch_size=500)
    tasks = [t for p in plans if p.pass_index == 2 for t in p.tasks]
    n = len(tasks)
    sigma = math.sqrt(n * (1 / 3) * (2 / 3))
    for t in AUX_TASKS:
        assert abs(tasks.count(t) - n / 3) < 3 * sigma


def test_clip_grad_norm():
    g = {"a": np.full(4, 3.0, np.float32), "b": np.full(9, np.sqrt(64 / 9), np.float32)}
    clipped, norm = clip_grad_norm(g, 1.0)
    assert norm == pytest.approx(10.0, rel=1e-6)
    total = math.sqrt(sum(float((v.astype(np.float64) ** 2).sum()) for v in clipped.values()))
    assert total == pytest.approx(1.0, rel=1e-6)
    same, _ = clip_grad_norm({"a": np.ones(1, np.float32)}, 1.0)
    assert same["a"][0] == 1.0


def _records(n, seed=0, **kw):
    kw = dict(n_records=n, context_len=12, n_distractor_facts=1, layout=SMALL, seed=seed) | kw
    return generate(GenConfig(**kw))


def _small_model(seed=0, sharpen=True):
    _, m = random_xc(seed, vocab=SMALL.size, gates=False, n_layers=2, d_model=16, hidden=16, dropout=0.1)
    if sharpen:
        # a trained base has a far wider logit range than a random one
        m.decoder.final_norm.data = m.decoder.final_norm.data * 6
    return m


def test_collate_padding_and_masks(rng):
    recs = _records(4)
    recs[1].contexts = [recs[1].contexts[0][:7]]
    b = collate(recs, [TaskKind.REPEAT, TaskKind.ANSWER, TaskKind.INFILL_PSM, TaskKind.INFILL_SPM], R, rng)
    assert b.enc_ids.shape == (4, 12) and b.enc_mask is not None and b.enc_mask[1].sum() == 7
    assert b.inputs.shape == b.targets.shape == b.loss_mask.shape
    assert b.loss_mask[0].sum() == 12 + 1  # repeat: context + EOS
    assert b.loss_mask[1].sum() == len(recs[1].answers[0]) + 1


def test_single_batch_overfit():
    recs = _records(8, unanswerable_rate=0.0, synonym_rate=0.0)
    m = _small_model()
    cfg = TrainConfig(base_lr=1e-2, warmup_steps=20, total_steps=200, batch_size=8, weight_decay=0.0)
    batch = collate(recs, [TaskKind.ANSWER] * 8, R, np.random.default_rng(0))
    st = AdamWState()
    losses = np.array([train_step(m, batch, st, cfg, lr_at(s + 1, cfg), None).loss for s in range(200)])
    assert np.all(np.diff(losses[20:]) <= 0)
    assert losses[-1] < 0.05


def test_frozen_base_untouched_and_only_trainables_move():
    recs = _records(16)
    m = _small_model(sharpen=False)
    before = {n: t.data.copy() for n, t in m.decoder.named_tensors()}
    tr_before = {n: t.data.copy() for n, t in trainable_parameters(m).items()}
    cfg = TrainConfig(base_lr=1e-3, warmup_steps=1, total_steps=10, batch_size=4)
    for stop in (1, 10):
        train(m, recs, cfg, R, state=AdamWState() if stop == 1 else None, stop_at=stop)
        for n, t in m.decoder.named_tensors():
            assert t.data.tobytes() == before[n].tobytes(), n
    moved = [n for n, t in trainable_parameters(m).items() if not np.array_equal(t.data, tr_before[n])]
    assert "cross.0.gate" in moved and "cross.final.gate" in moved
    for (n, a) in strip_cross_layers(m).named_tensors():
        assert a.data.tobytes() == before[n].tobytes()


def test_masked_positions_get_no_gradient(rng):
    recs = _records(2)
    m = _small_model()
    for _, layer in m.cross_layers():
        layer.gate.data[:] = 1.0
    b = collate(recs, [TaskKind.ANSWER] * 2, R, rng)
    enc = m.encode(b.enc_ids)

    def grads(targets):
        params = trainable_parameters(m)
        for p in params.values():
            p.grad = None
        with Tape():
            loss = cross_entropy(xc_forward(m, b.inputs, enc), targets, b.loss_mask)
            backward(loss)
        return loss.item(), {n: p.grad.copy() for n, p in params.items()}

    loss0, g0 = grads(b.targets)
    other = b.targets.copy()
    other[~b.loss_mask] = rng.integers(0, SMALL.size, int((~b.loss_mask).sum()))
    loss1, g1 = grads(other)
    assert loss0 == loss1
    assert all(np.array_equal(g0[n], g1[n]) for n in g0)
    assert any(np.abs(g).max() > 0 for g in g0.values())


def test_training_is_deterministic_and_resumable(tmp_path):
    recs = _records(24)
    cfg = TrainConfig(base_lr=3e-3, warmup_steps=2, total_steps=12, batch_size=8)
    logs = []
    for path, stops in (("a.csv", [12]), ("b.csv", [5, 12])):
        m = _small_model(1)
        st = None
        for s in stops:
            st = train(m, recs, cfg, R, state=st, stop_at=s, log_path=tmp_path / path)
        assert st.step == 12
        rows = list(csv.DictReader(open(tmp_path / path)))
        logs.append([(r["step"], r["task"], r["loss"]) for r in rows])
    assert logs[0] == logs[1]
    assert [int(s) for s, _, _ in logs[0]] == list(range(1, 13))
    # 24 records at batch 8: three answer batches then three auxiliary ones
    assert [t for _, t, _ in logs[0][:6]] == ["answer"] * 3 + ["aux"] * 3


def test_non_finite_loss_aborts(rng):
    recs = _records(4)
    m = _small_model()
    m.final_cross.wo.data[:] = np.nan
    m.final_cross.gate.data[:] = 1.0
    b = collate(recs, [TaskKind.ANSWER] * 4, R, rng)
    with pytest.raises(NumericError, match="non-finite"):
        train_step(m, b, AdamWState(), TrainConfig.toy(), 1e-3, None)
