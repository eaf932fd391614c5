"""XC architecture: a frozen decoder with gated cross-attention layers interleaved.

Cross layers sit *before* the self-attention block at each placement index
and, when ``final_layer`` is set, once more after the last block (before the
final norm). Each layer's output is scaled by a scalar gate initialised at
zero, so a fresh model reproduces its base decoder exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import decoder as dec
from .decoder import MASK_VALUE, DecoderConfig, DecoderWeights, attend
from .encoders import (
    BidirEncoderConfig,
    BidirEncoderWeights,
    EncoderKind,
    EncoderOutput,
    encode_bidirectional,
    encode_with_decoder,
    init_bidir_encoder,
)
from .tensor import Tensor, add, dropout, matmul, mul, reshape, rms_norm, transpose


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class XCConfig:
    n_cross_layers: int = 5
    skip: int = 6
    final_layer: bool = True
    cross_hidden: int = 2048
    cross_n_heads: int = 32
    cross_n_kv_heads: int = 32
    dropout_p: float = 0.2
    use_bias: bool = False
    encoder_kind: EncoderKind = EncoderKind.DECODER

    def __post_init__(self):
        object.__setattr__(self, "encoder_kind", EncoderKind(self.encoder_kind))
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p={self.dropout_p} outside [0, 1)")
        if self.cross_hidden % self.cross_n_heads:
            raise ConfigError(f"cross_hidden={self.cross_hidden} not divisible by {self.cross_n_heads} heads")
        if self.cross_n_kv_heads != self.cross_n_heads:
            raise ConfigError("grouped key/value heads are not supported")
        if self.n_cross_layers < 0 or self.skip < 0:
            raise ConfigError("n_cross_layers and skip must be non-negative")


def placement_indices(n_layers: int, skip: int, count: int) -> list[int]:
    """Every ``(skip + 1)``-th block starting at 0, truncated to ``count`` entries."""
    if count * (skip + 1) > n_layers + skip:
        raise ConfigError(f"{count} cross layers with skip {skip} do not fit in {n_layers} blocks")
    return [i for i in range(n_layers) if i % (skip + 1) == 0][:count]


@dataclass
class CrossAttentionLayer:
    norm: Tensor
    wq: Tensor  # d_model -> cross_hidden
    wk: Tensor  # d_enc -> cross_hidden
    wv: Tensor
    wo: Tensor  # cross_hidden -> d_model
    gate: Tensor  # (1,)
    biases: dict[str, Tensor] = field(default_factory=dict)

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for f in ("norm", "wq", "wk", "wv", "wo", "gate"):
            yield f, getattr(self, f)
        for k in sorted(self.biases):
            yield k, self.biases[k]


def init_cross_layer(d_model: int, d_enc: int, hidden: int, use_bias: bool,
                     rng: np.random.Generator) -> CrossAttentionLayer:
    def p(shape, std):
        return Tensor((rng.standard_normal(shape) * std).astype(np.float32), requires_grad=True)

    biases = {}
    if use_bias:
        biases = {n: Tensor(np.zeros(s, np.float32), requires_grad=True)
                  for n, s in (("bq", hidden), ("bk", hidden), ("bv", hidden), ("bo", d_model))}
    return CrossAttentionLayer(
        norm=Tensor(np.ones(d_model, np.float32), requires_grad=True),
        wq=p((d_model, hidden), 1 / math.sqrt(d_model)),
        wk=p((d_enc, hidden), 1 / math.sqrt(d_enc)),
        wv=p((d_enc, hidden), 1 / math.sqrt(d_enc)),
        wo=p((hidden, d_model), 1 / math.sqrt(hidden)),
        gate=Tensor(np.zeros(1, np.float32), requires_grad=True),
        biases=biases,
    )


@dataclass
class XCModel:
    decoder_config: DecoderConfig
    decoder: DecoderWeights
    config: XCConfig
    placements: list[int]
    cross: list[CrossAttentionLayer]
    final_cross: CrossAttentionLayer | None
    encoder_config: BidirEncoderConfig | None = None
    encoder: BidirEncoderWeights | None = None

    @property
    def kind(self) -> EncoderKind:
        return self.config.encoder_kind

    @property
    def d_enc(self) -> int:
        if self.kind is EncoderKind.DECODER:
            return self.decoder_config.d_model
        return self.encoder_config.d_enc

    def cross_layers(self) -> Iterator[tuple[str, CrossAttentionLayer]]:
        for idx, layer in zip(self.placements, self.cross):
            yield f"cross.{idx}", layer
        if self.final_cross is not None:
            yield "cross.final", self.final_cross

    def encode(self, context, mask: np.ndarray | None = None) -> EncoderOutput:
        if self.kind is EncoderKind.DECODER:
            out = encode_with_decoder(self.decoder, self.decoder_config, context)
            out.mask = None if mask is None else np.asarray(mask, bool)
            return out
        return encode_bidirectional(self.encoder, self.encoder_config, context, mask)


def build_xc_model(decoder: DecoderWeights, decoder_config: DecoderConfig, config: XCConfig, seed: int = 0,
                   encoder_config: BidirEncoderConfig | None = None) -> XCModel:
    """Wrap ``decoder`` (frozen in place) with freshly initialised cross layers."""
    placements = placement_indices(decoder_config.n_layers, config.skip, config.n_cross_layers)
    decoder.freeze()
    rng = np.random.default_rng(seed)
    encoder = None
    if config.encoder_kind is EncoderKind.BIDIRECTIONAL:
        if encoder_config is None:
            raise ConfigError("bidirectional encoder kind needs an encoder config")
        if encoder_config.vocab_size != decoder_config.vocab_size:
            raise ConfigError("encoder and decoder must share a vocabulary")
        encoder = init_bidir_encoder(encoder_config, seed=int(rng.integers(2**31)))
        d_enc = encoder_config.d_enc
    else:
        encoder_config = None
        d_enc = decoder_config.d_model
    d = decoder_config.d_model
    cross = [init_cross_layer(d, d_enc, config.cross_hidden, config.use_bias, rng) for _ in placements]
    final = init_cross_layer(d, d_enc, config.cross_hidden, config.use_bias, rng) if config.final_layer else None
    return XCModel(decoder_config, decoder, config, placements, cross, final, encoder_config, encoder)


# ---------------------------------------------------------------------------
# forward


def cross_attention(layer: CrossAttentionLayer, h: Tensor, enc: EncoderOutput, n_heads: int,
                    drop_p: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """``h + gate * CrossAttn(norm(h), enc)``; identity over an empty encoding."""
    if enc.length == 0:
        return h
    B, T, _ = h.shape
    S = enc.length
    hidden = layer.wq.shape[1]
    dh = hidden // n_heads
    x = rms_norm(h, layer.norm)
    b = layer.biases

    def proj(inp, w, bias_name, length):
        y = matmul(inp, w)
        if bias_name in b:
            y = add(y, b[bias_name])
        return transpose(reshape(y, (y.shape[0], length, n_heads, dh)), (0, 2, 1, 3))

    q = proj(x, layer.wq, "bq", T)
    k = proj(enc.states, layer.wk, "bk", S)
    v = proj(enc.states, layer.wv, "bv", S)
    bias = None
    if enc.mask is not None:
        bias = np.where(enc.mask, 0.0, MASK_VALUE).astype(np.float32)[:, None, None, :]
    drop = (lambda p: dropout(p, drop_p, rng)) if (drop_p > 0 and rng is not None) else None
    att = attend(q, k, v, bias, drop)
    o = matmul(reshape(transpose(att, (0, 2, 1, 3)), (B, T, hidden)), layer.wo)
    if "bo" in b:
        o = add(o, b["bo"])
    return add(h, mul(o, layer.gate))


def make_hook(model: XCModel, encoding: EncoderOutput, rng: np.random.Generator | None = None):
    if encoding.d_enc != model.d_enc:
        raise ConfigError(f"encoding width {encoding.d_enc} != model key/value input width {model.d_enc}")
    by_index = dict(zip(model.placements, model.cross))
    L = model.decoder_config.n_layers
    heads = model.config.cross_n_heads
    p = model.config.dropout_p if rng is not None else 0.0

    def hook(i: int, h: Tensor) -> Tensor:
        layer = by_index.get(i) if i < L else model.final_cross
        if layer is None:
            return h
        return cross_attention(layer, h, encoding, heads, p, rng)

    return hook


def xc_forward(model: XCModel, query_tokens, encoding: EncoderOutput,
               rng: np.random.Generator | None = None) -> Tensor:
    """Logits ``(B, T, V)``. Passing ``rng`` switches on training-time dropout."""
    res = dec.run(model.decoder, model.decoder_config, query_tokens, hook=make_hook(model, encoding, rng))
    return res.logits


def xc_generate(model: XCModel, encoding: EncoderOutput, prompt, max_new: int,
                stop: int | None = None) -> list[int]:
    """Greedy decoding conditioned on ``encoding``; self-attention reuses a KV cache."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be nonempty")
    out: list[int] = []
    if max_new <= 0:
        return out
    hook = make_hook(model, encoding)
    cfg = model.decoder_config
    res = dec.run(model.decoder, cfg, [prompt], hook=hook, keep_kv=True)
    cache = res.kv
    nxt = int(np.argmax(res.logits.data[0, -1]))
    while True:
        if stop is not None and nxt == stop:
            break
        out.append(nxt)
        if len(out) >= max_new or cache.length >= cfg.max_seq:
            break
        res = dec.run(model.decoder, cfg, [[nxt]], cache=cache, hook=hook)
        cache = res.kv
        nxt = int(np.argmax(res.logits.data[0, -1]))
    return out


# ---------------------------------------------------------------------------
# parameters


def trainable_parameters(model: XCModel) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for prefix, layer in model.cross_layers():
        for name, t in layer.named_tensors():
            params[f"{prefix}.{name}"] = t
    if model.encoder is not None:
        for name, t in model.encoder.named_tensors():
            params[f"encoder.{name}"] = t
    return params


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def strip_cross_layers(model: XCModel) -> DecoderWeights:
    """The base decoder with every added module removed."""
    return model.decoder.copy()


def cross_layer_parameter_count(d_model: int, d_enc: int, hidden: int, use_bias: bool = False) -> int:
    n = d_model + d_model * hidden + 2 * d_enc * hidden + hidden * d_model + 1
    if use_bias:
        n += 3 * hidden + d_model
    return n
