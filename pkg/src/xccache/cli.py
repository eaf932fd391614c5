"""Command line entry point (``xccache``).

Exit codes: 0 ok, 2 usage or configuration error, 3 data/format error,
4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import cache as cachemod
from . import cache_store as store
from .checkpoint import load_base, load_into, read_index, save_checkpoint
from .config import ConfigKeyError, ExperimentConfig, load_config, to_flat
from .decoder import CacheError, DecoderConfig, DecoderModel, LengthError, count_attention_macs, forward_full, init_decoder
from .encoders import EncoderOutput
from .experiment import make_base_decoder, make_model, needle_sensitivity
from .metrics import EvalReport, Mode, evaluate
from .synth_data import DataFormatError, GenConfig, NEEDLE_POSITIONS, read_jsonl, write_jsonl
from .trainer import NumericError, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

BENCH_LENGTHS = (1024, 2048, 4096, 8192)
ATTN_LENGTHS = (256, 512, 1024, 2048, 4096)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_tree(path: Path) -> dict[str, str]:
    path = Path(path)
    if path.is_file():
        return {str(path): sha256_file(path)}
    return {str(p): sha256_file(p) for p in sorted(path.rglob("*")) if p.is_file() and p.name != "manifest.json"}


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    version: str = __version__

    def add_inputs(self, *paths) -> None:
        for p in paths:
            if p is not None and Path(p).exists():
                self.inputs.update(_digest_tree(Path(p)))

    def finish(self, out_dir: Path) -> Path:
        self.finished = _now()
        self.outputs = _digest_tree(out_dir)
        dest = Path(out_dir) / "manifest.json"
        dest.write_text(json.dumps(asdict(self), indent=1, sort_keys=True, default=str))
        return dest


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# shared argument handling


def _overrides(pairs: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args) -> ExperimentConfig:
    over = _overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        over.setdefault("seed", str(args.seed))
    return load_config(getattr(args, "config", None), getattr(args, "preset", "toy"), over)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file layered over the preset")
    p.add_argument("--preset", default="toy", choices=["toy", "reference"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)


def _say(msg: str) -> None:
    print(msg, flush=True)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _aligned(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data


def cmd_data(args) -> int:
    cfg = _config(args)
    d = cfg.data
    gen = GenConfig(n_records=args.n or d.n_records, context_len=args.context_len or d.context_len,
                    n_distractor_facts=d.n_distractor_facts,
                    needle_position=args.needle_position or d.needle_position,
                    unanswerable_rate=d.unanswerable_rate, synonym_rate=d.synonym_rate, layout=d.layout,
                    seed=d.seed if args.seed is None else args.seed)
    from .synth_data import generate

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(generate(gen), out, d.layout)
    _say(f"wrote {gen.n_records} records to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_model(ckpt: Path, cfg: ExperimentConfig):
    base = load_base(ckpt, cfg.decoder)
    model = make_model(cfg, base)
    state = load_into(ckpt, model)
    return model, state


def _ckpt_config(ckpt: Path, args) -> ExperimentConfig:
    """Config stored with a checkpoint, further overridden by any flags given."""
    snap = read_index(ckpt).get("config", {})
    preset = snap.get("_preset", "toy")
    stored = {k: str(v) for k, v in snap.items() if not k.startswith("_")}
    stored.update(_overrides(getattr(args, "set", None)))
    return load_config(getattr(args, "config", None), preset, stored)


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        cfg = _ckpt_config(Path(args.resume), args)
        model, state = _load_model(Path(args.resume), cfg)
    else:
        cfg = _config(args)
        state = None
        if args.base:
            base = load_base(Path(args.base), cfg.decoder)
        else:
            t0 = time.time()

            def progress(step, res):
                if step % 100 == 0:
                    _say(f"pretrain step {step}: loss {res.loss:.4f} ({time.time() - t0:.0f}s)")

            base = make_base_decoder(cfg, on_step=progress)
        model = make_model(cfg, base)
    snapshot = {**to_flat(cfg), "_preset": args.preset}
    manifest = RunManifest("train", sys.argv[1:], snapshot, cfg.seed, started=_now())
    manifest.add_inputs(args.data, args.config, args.base, args.resume)
    records = read_jsonl(args.data, cfg.data.layout)
    if not records:
        raise DataFormatError(f"{args.data}: no records")
    t0 = time.time()

    def report(step, res):
        if step % args.log_every == 0:
            _say(f"step {step}: {res.task} loss {res.loss:.4f} lr {res.lr:.3g} ({time.time() - t0:.0f}s)")

    state = train(model, records, cfg.train, cfg.data.layout.reserved, state=state, stop_at=args.stop_at,
                  log_path=out / "train_log.csv", on_step=report)
    save_checkpoint(out / "checkpoint", model, state, snapshot)
    manifest.finish(out)
    _say(f"checkpoint at step {state.step} written to {out / 'checkpoint'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _cached_encoder(cache_dir: Path, model, digest: bytes):
    def encode(record_index: int) -> EncoderOutput:
        path = cache_dir / f"{record_index:06d}.xcc"
        if not path.exists():
            raise FileNotFoundError(f"no cache file {path}")
        blob = store.load(path)
        if not isinstance(blob, cachemod.XCCacheBlob) or blob.digest != digest:
            raise CacheError(f"{path} is not an XC cache for this model")
        return EncoderOutput.from_rows(blob.array, blob.kind)

    return encode


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    cfg = _ckpt_config(ckpt, args)
    model, _ = _load_model(ckpt, cfg)
    records = read_jsonl(args.data, cfg.data.layout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("eval", sys.argv[1:], to_flat(cfg), cfg.seed, started=_now())
    manifest.add_inputs(args.data, ckpt)
    encode = None
    if args.use_cache:
        cache_dir = Path(args.use_cache)
        if not cache_dir.is_dir():
            raise UsageError(f"--use-cache directory {cache_dir} does not exist")
        manifest.add_inputs(cache_dir)
        by_index = _cached_encoder(cache_dir, model, cachemod.encoder_digest(model))
        position = {id(r): i for i, r in enumerate(records)}
        encode = lambda r: by_index(position[id(r)])  # noqa: E731
    modes = [Mode.WITH_CONTEXT, Mode.NO_CONTEXT] if args.mode == "both" else [Mode.parse(args.mode)]
    name = args.name or Path(args.data).stem
    report: EvalReport | None = None
    for mode in modes:
        r = evaluate(model, records, mode, reserved=cfg.data.layout.reserved, dataset=name, encode=encode)
        report = r if report is None else report.merged(r)
    (out / "eval.csv").write_text(report.to_csv(with_aggregate=False))
    (out / "eval.txt").write_text(report.to_table(with_aggregate=False))
    sys.stdout.write(report.to_table(with_aggregate=False))
    if args.sensitivity:
        sens, spread = needle_sensitivity(model, cfg, args.sensitivity)
        text = sens.to_table(with_aggregate=False) + f"\nF1 spread (max - min): {spread:.2f} points\n"
        (out / "sensitivity.csv").write_text(sens.to_csv(with_aggregate=False))
        (out / "sensitivity.txt").write_text(text)
        sys.stdout.write("\n" + text)
    manifest.finish(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# cache


SIZE_HEADER = ("strategy", "bytes_per_token", "kB_per_token")


def size_rows(geometry: cachemod.CacheGeometry, extra_enc: Sequence[int] = (), b: int = 2) -> list[tuple]:
    rows = []
    for s in (cachemod.CacheStrategy.KV, cachemod.CacheStrategy.JITKV, cachemod.CacheStrategy.XC):
        n = cachemod.bytes_per_token(geometry, s, b)
        label = s.name if s is not cachemod.CacheStrategy.XC else f"XC(d_enc={geometry.d_enc})"
        rows.append((label, n, f"{n / 1024:g}"))
    for d in extra_enc:
        g = cachemod.CacheGeometry(geometry.n_layers, geometry.n_heads, geometry.head_dim, geometry.d_model, d)
        n = cachemod.bytes_per_token(g, "xc", b)
        rows.append((f"XC(d_enc={d})", n, f"{n / 1024:g}"))
    return rows


def cmd_cache_sizes(args) -> int:
    if args.preset == "reference":
        geom = cachemod.CacheGeometry.reference()
        extra = args.d_enc or [768]
    else:
        cfg = _config(args)
        geom = cachemod.CacheGeometry.of(cfg.decoder)
        extra = args.d_enc or []
    rows = size_rows(geom, extra, args.bytes)
    text = _aligned(SIZE_HEADER, rows)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "cache_sizes.csv", SIZE_HEADER, rows)
        (out / "cache_sizes.txt").write_text(text)
    return EXIT_OK


def cmd_cache_build(args) -> int:
    ckpt = Path(args.ckpt)
    cfg = _ckpt_config(ckpt, args)
    strategy = cachemod.CacheStrategy.parse(args.strategy)
    model, _ = _load_model(ckpt, cfg)
    target = model if strategy is cachemod.CacheStrategy.XC else DecoderModel(model.decoder, cfg.decoder)
    records = read_jsonl(args.data, cfg.data.layout)
    if args.limit:
        records = records[:args.limit]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("cache build", sys.argv[1:], to_flat(cfg), cfg.seed, started=_now())
    manifest.add_inputs(ckpt, args.data)
    total_tokens = total_payload = 0
    for i, r in enumerate(records):
        blob = cachemod.build_cache(target, r.context, strategy)
        path = out / f"{i:06d}.xcc"
        store.save(blob, path, args.dtype)
        total_tokens += blob.n_tokens
        total_payload += store.payload_bytes(path)
    b = store.DType.parse(args.dtype).itemsize
    per = cachemod.bytes_per_token(cachemod.CacheGeometry.of(cfg.decoder, model.d_enc), strategy, b)
    rows = [(strategy.name, len(records), total_tokens, total_payload, per)]
    header = ("strategy", "files", "tokens", "payload_bytes", "bytes_per_token")
    _write_csv(out / "cache_build.csv", header, rows)
    manifest.finish(out)
    sys.stdout.write(_aligned(header, rows))
    if total_payload != per * total_tokens:
        raise store.FormatError(f"payload {total_payload} B != {per} B/token x {total_tokens} tokens")
    return EXIT_OK


def cmd_cache_inspect(args) -> int:
    path = Path(args.file)
    hdr = store.read_header(path)
    fields = [("magic", store.MAGIC.decode()), ("version", hdr.version), ("strategy", hdr.strategy.name),
              ("dtype", hdr.dtype.name.lower()), ("rank", len(hdr.dims)), ("dims", "x".join(map(str, hdr.dims))),
              ("digest", hdr.digest.hex()), ("payload_bytes", hdr.payload_len), ("header_bytes", hdr.header_len)]
    for k, v in fields:
        print(f"{k:14s}{v}")
    # full read validates length and checksum
    store.read_tensor(path)
    print(f"{'checksum':14s}ok")
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmarks


LOAD_HEADER = ("strategy", "T", "bytes", "mean_s", "ci95_s")


def write_bench_files(root: Path, lengths: Sequence[int], n_layers: int, hidden: int, n_heads: int,
                      batch: int, d_enc: int, dtype: str = "f16", seed: int = 0) -> dict[tuple[str, int], Path]:
    """Random-valued KV and XC files with the given geometry (values do not affect load time)."""
    if hidden % n_heads:
        raise UsageError(f"hidden={hidden} not divisible by heads={n_heads}")
    rng = np.random.default_rng(seed)
    digest = store.geometry_digest(n_layers=n_layers, hidden=hidden, n_heads=n_heads, d_enc=d_enc)
    paths = {}
    root.mkdir(parents=True, exist_ok=True)
    for T in lengths:
        shapes = {"KV": (batch, n_layers, 2, T, hidden), "XC": (batch, T, d_enc)}
        for name, shape in shapes.items():
            p = root / f"{name.lower()}_{T}.xcc"
            if not p.exists() or store.read_header(p).dims != shape:
                arr = rng.standard_normal(shape, dtype=np.float32)
                store.write_tensor(p, store.StrategyCode[name], arr, digest, dtype)
                del arr
            paths[(name, T)] = p
    return paths


def bench_rows(paths: dict[tuple[str, int], Path], reps: int, discard: int, cold: bool = False) -> list[tuple]:
    rows = []
    for (name, T), p in sorted(paths.items(), key=lambda kv: (kv[0][0] != "KV", kv[0][1])):
        st = store.time_load(p, reps, discard, cold, loader=store.load)
        rows.append((name, T, store.payload_bytes(p), st.mean_s, st.ci95_s))
    return rows


def load_table(rows: Sequence[tuple]) -> str:
    lengths = sorted({r[1] for r in rows})
    strategies = [s for s in ("KV", "XC") if any(r[0] == s for r in rows)]
    cell = {(r[0], r[1]): f"{r[3]:.4f} ± {r[4]:.4f}" for r in rows}
    body = [[s] + [cell.get((s, T), "-") for T in lengths] for s in strategies]
    return _aligned(["strategy"] + [str(T) for T in lengths], body)


def cmd_bench_load(args) -> int:
    if args.reps <= args.discard:
        raise UsageError(f"--reps ({args.reps}) must exceed --discard ({args.discard})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lengths = [int(x) for x in args.lengths.split(",")]
    blob_dir = Path(args.blob_dir) if args.blob_dir else out / "blobs"
    manifest = RunManifest("bench-load", sys.argv[1:], vars_snapshot(args), 0, started=_now())
    paths = write_bench_files(blob_dir, lengths, args.layers, args.hidden, args.heads, args.batch,
                              args.d_enc or args.hidden, args.dtype)
    rows = bench_rows(paths, args.reps, args.discard, args.cold)
    _write_csv(out / "bench_load.csv", LOAD_HEADER,
               [(s, T, b, f"{m:.6g}", f"{c:.6g}") for s, T, b, m, c in rows])
    table = load_table(rows)
    (out / "bench_load.txt").write_text(table)
    manifest.finish(out)
    sys.stdout.write(table)
    return EXIT_OK


def vars_snapshot(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func" and isinstance(v, (int, float, str, bool, type(None)))}


ATTN_HEADER = ("context", "uncached_macs", "cached_macs", "uncached_s", "cached_s")


def loglog_slope(xs, ys) -> float:
    x, y = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(x, y, 1)[0])


def attention_counts(config: DecoderConfig, lengths: Sequence[int], qa: int, measure_up_to: int = 0,
                     seed: int = 0) -> list[tuple]:
    """Closed-form attention MACs for uncached prefill of ``context + qa`` tokens and
    for processing the ``qa`` tokens against a cached context.

    Lengths up to ``measure_up_to`` are also run through an instrumented decoder;
    a mismatch with the closed form raises.
    """
    L, H, dh = config.n_layers, config.n_heads, config.head_dim
    rows = []
    weights = None
    for n in lengths:
        unc = cachemod.prefill_attention_macs(L, H, dh, n + qa)
        cac = cachemod.cached_attention_macs(L, H, dh, n, qa)
        t_unc = t_cac = float("nan")
        if n <= measure_up_to:
            if weights is None:
                weights = init_decoder(config, seed=seed)
            rng = np.random.default_rng([seed, n])
            toks = rng.integers(0, config.vocab_size, n + qa)
            with count_attention_macs() as c1:
                t0 = time.perf_counter()
                forward_full(weights, config, [toks])
                t_unc = time.perf_counter() - t0
            kv = forward_full(weights, config, [toks[:n]], keep_kv=True).kv
            from .decoder import run

            with count_attention_macs() as c2:
                t0 = time.perf_counter()
                run(weights, config, [toks[n:]], cache=kv)
                t_cac = time.perf_counter() - t0
            if (c1.macs, c2.macs) != (unc, cac):
                raise AssertionError(f"n={n}: counted {(c1.macs, c2.macs)} != closed form {(unc, cac)}")
        rows.append((n, unc, cac, t_unc, t_cac))
    return rows


def cmd_bench_attn(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",")]
    cfg = DecoderConfig(n_layers=args.layers, d_model=args.heads * args.head_dim, n_heads=args.heads,
                        head_dim=args.head_dim, vocab_size=64, max_seq=max(lengths) + args.qa)
    rows = attention_counts(cfg, lengths, args.qa, args.measure_up_to)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "bench_attn.csv", ATTN_HEADER, rows)
    s_unc = loglog_slope([r[0] for r in rows], [r[1] for r in rows])
    s_cac = loglog_slope([r[0] for r in rows], [r[2] for r in rows])
    text = _aligned(ATTN_HEADER, [(n, u, c, f"{a:.4g}", f"{b:.4g}") for n, u, c, a, b in rows])
    text += f"\nlog-log slope: uncached {s_unc:.3f}, cached {s_cac:.3f}\n"
    (out / "bench_attn.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    """Collect the tables written by other commands into one text file."""
    parts = []
    for d in args.inputs:
        for name in ("cache_sizes.txt", "eval.txt", "bench_load.txt", "bench_attn.txt", "sensitivity.txt"):
            for p in sorted(Path(d).rglob(name)):
                parts.append(f"== {p} ==\n{p.read_text()}")
    if not parts:
        raise UsageError("no result tables found under the given directories")
    text = "\n".join(parts)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xccache", description="Cross-attention context caching experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("data", help="generate a synthetic QA corpus (JSONL)")
    _add_config_flags(d)
    d.add_argument("--out", required=True)
    d.add_argument("--n", type=int)
    d.add_argument("--context-len", type=int)
    d.add_argument("--needle-position", choices=NEEDLE_POSITIONS)
    d.set_defaults(func=cmd_data)

    t = sub.add_parser("train", help="train the cross-attention modules")
    _add_config_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--base", help="checkpoint whose base decoder to reuse")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop after this optimiser step")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--mode", default="both", choices=["with-context", "no-context", "both"])
    e.add_argument("--use-cache", metavar="DIR", help="read XC encodings from DIR instead of encoding")
    e.add_argument("--name")
    e.add_argument("--sensitivity", type=int, metavar="N",
                   help="also evaluate N fresh records per needle position")
    e.add_argument("--config")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cache", help="build, inspect or size caches")
    csub = c.add_subparsers(dest="cache_command", required=True)
    cb = csub.add_parser("build")
    cb.add_argument("--ckpt", required=True)
    cb.add_argument("--data", required=True)
    cb.add_argument("--out", required=True)
    cb.add_argument("--strategy", default="xc", choices=["kv", "jitkv", "xc"])
    cb.add_argument("--dtype", default="f32", choices=["f32", "f16"])
    cb.add_argument("--limit", type=int)
    cb.add_argument("--config")
    cb.add_argument("--set", action="append", metavar="KEY=VALUE")
    cb.set_defaults(func=cmd_cache_build)
    ci = csub.add_parser("inspect")
    ci.add_argument("file")
    ci.set_defaults(func=cmd_cache_inspect)
    cs = csub.add_parser("sizes")
    _add_config_flags(cs)
    cs.add_argument("--d-enc", type=int, action="append", help="extra encoder widths to tabulate")
    cs.add_argument("--bytes", type=int, default=2, help="bytes per stored scalar")
    cs.add_argument("--out")
    cs.set_defaults(func=cmd_cache_sizes)

    bl = sub.add_parser("bench-load", help="time cache loading from disk")
    bl.add_argument("--out", required=True)
    bl.add_argument("--blob-dir")
    bl.add_argument("--lengths", default=",".join(map(str, BENCH_LENGTHS)))
    bl.add_argument("--reps", type=int, default=100)
    bl.add_argument("--discard", type=int, default=10)
    bl.add_argument("--layers", type=int, default=32)
    bl.add_argument("--hidden", type=int, default=1024)
    bl.add_argument("--heads", type=int, default=16)
    bl.add_argument("--batch", type=int, default=8)
    bl.add_argument("--d-enc", type=int,
                    help="encoder width (default hidden; at 32 layers this gives a 64:1 KV:XC ratio)")
    bl.add_argument("--dtype", default="f16", choices=["f32", "f16"])
    bl.add_argument("--cold", action="store_true", help="evict files from the page cache before each read")
    bl.set_defaults(func=cmd_bench_load)

    ba = sub.add_parser("bench-attn", help="count attention MACs, cached vs uncached")
    ba.add_argument("--out", required=True)
    ba.add_argument("--lengths", default=",".join(map(str, ATTN_LENGTHS)))
    ba.add_argument("--qa", type=int, default=32, help="query + answer tokens")
    ba.add_argument("--layers", type=int, default=2)
    ba.add_argument("--heads", type=int, default=2)
    ba.add_argument("--head-dim", type=int, default=8)
    ba.add_argument("--measure-up-to", type=int, default=512,
                    help="also run the instrumented decoder for contexts up to this length")
    ba.set_defaults(func=cmd_bench_attn)

    r = sub.add_parser("report", help="gather result tables into one file")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigKeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, store.FormatError, CacheError, LengthError, FileNotFoundError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
