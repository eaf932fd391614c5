import csv
import json

import pytest

from xccache.cli import attention_counts, loglog_slope, main
from xccache.decoder import DecoderConfig

TINY = ["--set", "decoder.n_layers=2", "--set", "decoder.d_model=16", "--set", "decoder.n_heads=2",
        "--set", "decoder.head_dim=8", "--set", "xc.cross_hidden=16", "--set", "xc.cross_n_heads=2",
        "--set", "xc.cross_n_kv_heads=2", "--set", "pretrain.enabled=false", "--set", "train.total_steps=6",
        "--set", "train.warmup_steps=1", "--set", "train.batch_size=4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def trained(workdir):
    data = workdir / "train.jsonl"
    assert main(["data", "--out", str(data), "--n", "12", "--seed", "1"]) == 0
    test = workdir / "test.jsonl"
    assert main(["data", "--out", str(test), "--n", "5", "--seed", "2"]) == 0
    assert main(["train", "--data", str(data), "--out", str(workdir / "run"), *TINY, "--log-every", "2"]) == 0
    return workdir


def test_train_outputs(trained):
    run_dir = trained / "run"
    rows = list(csv.DictReader(open(run_dir / "train_log.csv")))
    assert [r["step"] for r in rows] == [str(i) for i in range(1, 7)]
    assert set(rows[0]) == {"step", "task", "loss", "lr", "grad_norm"}
    man = json.loads((run_dir / "manifest.json").read_text())
    assert man["command"] == "train" and str(trained / "train.jsonl") in man["inputs"]
    assert any(k.endswith("index.json") for k in man["outputs"])
    assert man["config"]["decoder.d_model"] == 16


def test_resume_reproduces_losses(trained, capsys):
    d = trained
    assert main(["train", "--data", str(d / "train.jsonl"), "--out", str(d / "half"), *TINY, "--stop-at", "3"]) == 0
    assert main(["train", "--data", str(d / "train.jsonl"), "--out", str(d / "rest"),
                 "--resume", str(d / "half" / "checkpoint")]) == 0
    full = [r["loss"] for r in csv.DictReader(open(d / "run" / "train_log.csv"))]
    part = [r["loss"] for r in csv.DictReader(open(d / "half" / "train_log.csv"))]
    part += [r["loss"] for r in csv.DictReader(open(d / "rest" / "train_log.csv"))]
    assert part == full


def test_data_is_reproducible(workdir):
    a, b = workdir / "a.jsonl", workdir / "b.jsonl"
    main(["data", "--out", str(a), "--n", "7", "--seed", "3"])
    main(["data", "--out", str(b), "--n", "7", "--seed", "3"])
    assert a.read_bytes() == b.read_bytes()


def test_invalid_config_key(workdir, capsys):
    code, _, err = run(capsys, "train", "--data", workdir / "x", "--out", workdir / "bad", "--set", "train.speed=2")
    assert code == 2 and "train.speed" in err


def test_usage_errors(capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "bench-load", "--out", "/tmp/none", "--reps", "5", "--discard", "5")[0] == 2


def test_eval_with_and_without_cache(trained, capsys):
    d = trained
    ck = d / "run" / "checkpoint"
    code, out, _ = run(capsys, "eval", "--ckpt", ck, "--data", d / "test.jsonl", "--out", d / "ev", "--mode", "both")
    assert code == 0 and "with_context" in out and "no_context" in out
    assert run(capsys, "cache", "build", "--ckpt", ck, "--data", d / "test.jsonl", "--out", d / "xc")[0] == 0
    code, _, _ = run(capsys, "eval", "--ckpt", ck, "--data", d / "test.jsonl", "--out", d / "ev2",
                     "--mode", "both", "--use-cache", d / "xc")
    assert code == 0
    assert (d / "ev" / "eval.csv").read_text() == (d / "ev2" / "eval.csv").read_text()
    code, _, err = run(capsys, "eval", "--ckpt", ck, "--data", d / "test.jsonl", "--out", d / "ev3",
                       "--use-cache", d / "missing")
    assert code == 2 and "missing" in err


def test_eval_sensitivity_table(trained, capsys):
    d = trained
    code, out, _ = run(capsys, "eval", "--ckpt", d / "run" / "checkpoint", "--data", d / "test.jsonl",
                       "--out", d / "sens", "--mode", "with-context", "--sensitivity", "3")
    assert code == 0
    rows = list(csv.DictReader(open(d / "sens" / "sensitivity.csv")))
    assert [r["dataset"] for r in rows] == ["begin", "middle", "end", "both_ends"]
    assert "F1 spread" in (d / "sens" / "sensitivity.txt").read_text()


@pytest.mark.parametrize("strategy", ["kv", "jitkv", "xc"])
def test_cache_build_and_inspect(trained, capsys, strategy):
    d = trained
    out = d / f"c_{strategy}"
    code, text, _ = run(capsys, "cache", "build", "--ckpt", d / "run" / "checkpoint", "--data", d / "test.jsonl",
                        "--out", out, "--strategy", strategy, "--dtype", "f16")
    assert code == 0
    row = next(csv.DictReader(open(out / "cache_build.csv")))
    assert int(row["payload_bytes"]) == int(row["bytes_per_token"]) * int(row["tokens"])
    f = out / "000000.xcc"
    code, text, _ = run(capsys, "cache", "inspect", f)
    assert code == 0 and f"strategy      {strategy.upper()}" in text and "checksum      ok" in text
    f.write_bytes(f.read_bytes()[:-5])
    code, _, err = run(capsys, "cache", "inspect", f)
    assert code == 3 and "truncated" in err


def test_cache_sizes_reference(capsys, workdir):
    code, text, _ = run(capsys, "cache", "sizes", "--preset", "reference", "--out", workdir / "sizes")
    assert code == 0
    rows = {r["strategy"]: int(r["bytes_per_token"]) for r in csv.DictReader(open(workdir / "sizes" / "cache_sizes.csv"))}
    assert rows == {"KV": 512 * 1024, "JITKV": 256 * 1024, "XC(d_enc=4096)": 8 * 1024, "XC(d_enc=768)": 1536}


def test_cache_sizes_toy_matches_formula(capsys):
    code, text, _ = run(capsys, "cache", "sizes", "--preset", "toy")
    L, H, dh, d = 4, 4, 16, 64  # toy decoder, 2-byte scalars
    got = [int(line.split()[1]) for line in text.splitlines()[2:]]
    assert code == 0 and got == [L * 2 * H * dh * 2, L * d * 2, d * 2]


def test_bench_load_small(capsys, workdir):
    out = workdir / "bl"
    code, text, _ = run(capsys, "bench-load", "--out", out, "--lengths", "8,16", "--reps", "5", "--discard", "1",
                        "--layers", "2", "--hidden", "64", "--heads", "4", "--batch", "2")
    assert code == 0
    rows = list(csv.DictReader(open(out / "bench_load.csv")))
    assert [(r["strategy"], r["T"]) for r in rows] == [("KV", "8"), ("KV", "16"), ("XC", "8"), ("XC", "16")]
    by = {(r["strategy"], r["T"]): int(r["bytes"]) for r in rows}
    assert by[("KV", "8")] == 2 * 2 * 2 * 8 * 64 * 2 and by[("XC", "8")] == 2 * 8 * 64 * 2
    assert "±" in text


def test_bench_attn(capsys, workdir):
    code, text, _ = run(capsys, "bench-attn", "--out", workdir / "ba", "--lengths", "16,32,64", "--qa", "4",
                        "--measure-up-to", "64")
    assert code == 0 and "log-log slope" in text


def test_attention_counts_closed_form_checked():
    cfg = DecoderConfig(n_layers=1, d_model=8, n_heads=2, head_dim=4, vocab_size=16, max_seq=100)
    rows = attention_counts(cfg, [10, 20], qa=3, measure_up_to=20)
    assert rows[0][1] == 1 * 2 * 2 * 4 * (13 * 14 // 2)
    assert loglog_slope([1, 2, 4], [3, 12, 48]) == pytest.approx(2.0)


def test_report_collects_tables(capsys, workdir):
    run(capsys, "cache", "sizes", "--preset", "reference", "--out", workdir / "r" / "sizes")
    code, text, _ = run(capsys, "report", workdir / "r", "--out", workdir / "r" / "report.txt")
    assert code == 0 and "cache_sizes.txt" in text
    assert run(capsys, "report", workdir / "empty_nothing")[0] == 2
