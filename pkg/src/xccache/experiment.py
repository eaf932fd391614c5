"""Glue between a config and the objects it describes: base decoder, XC model, corpora."""

from __future__ import annotations

from typing import Callable

from .config import ExperimentConfig
from .decoder import DecoderWeights, init_decoder
from .metrics import EvalReport, Mode, evaluate
from .pretrain import PretrainStep, pretrain_decoder
from .synth_data import GenConfig, QARecord, generate
from .xc_model import XCModel, build_xc_model


def make_base_decoder(cfg: ExperimentConfig,
                      on_step: Callable[[int, PretrainStep], None] | None = None) -> DecoderWeights:
    """Initialise the base decoder and, when enabled, pretrain it; returned frozen."""
    weights = init_decoder(cfg.decoder, seed=cfg.seed)
    if cfg.pretrain.enabled:
        records = generate(cfg.pretrain.gen_config(cfg.data.layout))
        pretrain_decoder(weights, cfg.decoder, records, cfg.pretrain.train_config(),
                         cfg.data.layout.reserved, on_step=on_step)
    return weights.freeze()


def make_model(cfg: ExperimentConfig, base: DecoderWeights) -> XCModel:
    return build_xc_model(base, cfg.decoder, cfg.xc, seed=cfg.seed + 1, encoder_config=cfg.encoder)


def make_records(cfg: ExperimentConfig, n: int | None = None, seed: int | None = None, **overrides) -> list[QARecord]:
    d = cfg.data
    gen = GenConfig(
        n_records=d.n_records if n is None else n,
        context_len=overrides.pop("context_len", d.context_len),
        n_distractor_facts=overrides.pop("n_distractor_facts", d.n_distractor_facts),
        needle_position=overrides.pop("needle_position", d.needle_position),
        unanswerable_rate=overrides.pop("unanswerable_rate", d.unanswerable_rate),
        synonym_rate=overrides.pop("synonym_rate", d.synonym_rate),
        layout=d.layout,
        seed=d.seed if seed is None else seed,
    )
    if overrides:
        raise TypeError(f"unexpected overrides {sorted(overrides)}")
    return generate(gen)


SENSITIVITY_POSITIONS = ("begin", "middle", "end", "both_ends")


def needle_sensitivity(model: XCModel, cfg: ExperimentConfig, n: int = 200, seed: int = 7_000,
                       positions=SENSITIVITY_POSITIONS) -> tuple[EvalReport, float]:
    """Evaluate on one corpus per needle position; returns the report and the F1 spread (max - min)."""
    report = None
    for pos in positions:
        recs = make_records(cfg, n, seed, needle_position=pos)
        r = evaluate(model, recs, Mode.WITH_CONTEXT, reserved=cfg.data.layout.reserved, dataset=pos)
        report = r if report is None else report.merged(r)
    f1 = [row.f1 for row in report.rows]
    return report, max(f1) - min(f1)
