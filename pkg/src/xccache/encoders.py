"""Context encoders: the frozen decoder reused causally, or a small bidirectional stack."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .decoder import (
    MASK_VALUE,
    DecoderConfig,
    DecoderWeights,
    LayerWeights,
    LengthError,
    attend,
    forward_full,
)
from .tensor import Tensor, add, matmul, mul, reshape, rms_norm, silu, take_rows, transpose


class EncoderKind(str, enum.Enum):
    DECODER = "decoder"
    BIDIRECTIONAL = "bidirectional"


@dataclass
class EncoderOutput:
    """Token-level context states, ``(B, T, d_enc)``.

    ``mask`` marks real (non-padding) rows when contexts of different lengths
    share a batch; ``None`` means every row is real.
    """

    states: Tensor
    kind: EncoderKind
    mask: np.ndarray | None = None

    @property
    def d_enc(self) -> int:
        return self.states.shape[-1]

    @property
    def length(self) -> int:
        return self.states.shape[1]

    @property
    def rows(self) -> np.ndarray:
        """States of the first (usually only) context as a ``T x d_enc`` array."""
        return self.states.data[0]

    @classmethod
    def from_rows(cls, rows: np.ndarray, kind: EncoderKind) -> "EncoderOutput":
        return cls(Tensor(np.asarray(rows)[None]), EncoderKind(kind))

    @classmethod
    def empty(cls, d_enc: int, kind: EncoderKind, batch: int = 1) -> "EncoderOutput":
        return cls(Tensor(np.zeros((batch, 0, d_enc), np.float32)), EncoderKind(kind))


def encode_with_decoder(decoder: DecoderWeights, config: DecoderConfig, context) -> EncoderOutput:
    ids = np.asarray(context, dtype=np.int64)
    if ids.shape[-1] > config.max_seq:
        raise LengthError(f"context of {ids.shape[-1]} tokens exceeds decoder max_seq={config.max_seq}")
    res = forward_full(decoder, config, ids)
    return EncoderOutput(res.last_hidden, EncoderKind.DECODER)


# ---------------------------------------------------------------------------
# small bidirectional encoder


@dataclass(frozen=True)
class BidirEncoderConfig:
    n_layers: int
    d_enc: int
    n_heads: int
    vocab_size: int
    base_max_positions: int
    mlp_hidden: int = 0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_enc", "n_heads", "vocab_size", "base_max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"BidirEncoderConfig.{name} must be positive")
        if self.d_enc % self.n_heads:
            raise ValueError(f"d_enc={self.d_enc} not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_enc // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return self.mlp_hidden or -(-(self.d_enc * 8 // 3) // 8) * 8


@dataclass
class BidirEncoderWeights:
    embed: Tensor
    positions: Tensor
    layers: list[LayerWeights]
    final_norm: Tensor

    def named_tensors(self):
        yield "embed", self.embed
        yield "positions", self.positions
        for i, layer in enumerate(self.layers):
            for f in LayerWeights.FIELDS:
                yield f"layers.{i}.{f}", getattr(layer, f)
        yield "final_norm", self.final_norm


def init_bidir_encoder(config: BidirEncoderConfig, seed: int = 0) -> BidirEncoderWeights:
    rng = np.random.default_rng(seed)
    d, f = config.d_enc, config.ffn_dim

    def p(shape, std, name):
        return Tensor((rng.standard_normal(shape) * std).astype(np.float32), requires_grad=True, name=name)

    def ones(name):
        return Tensor(np.ones(d, np.float32), requires_grad=True, name=name)

    out_std = 1.0 / math.sqrt(2 * config.n_layers)
    layers = []
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        layers.append(LayerWeights(
            attn_norm=ones(pre + "attn_norm"),
            wq=p((d, d), 1 / math.sqrt(d), pre + "wq"),
            wk=p((d, d), 1 / math.sqrt(d), pre + "wk"),
            wv=p((d, d), 1 / math.sqrt(d), pre + "wv"),
            wo=p((d, d), out_std / math.sqrt(d), pre + "wo"),
            mlp_norm=ones(pre + "mlp_norm"),
            w_gate=p((d, f), 1 / math.sqrt(d), pre + "w_gate"),
            w_up=p((d, f), 1 / math.sqrt(d), pre + "w_up"),
            w_down=p((f, d), out_std / math.sqrt(f), pre + "w_down"),
        ))
    return BidirEncoderWeights(
        embed=p((config.vocab_size, d), 1.0, "embed"),
        positions=p((config.base_max_positions, d), 1.0, "positions"),
        layers=layers,
        final_norm=ones("final_norm"),
    )


def extended_position_ids(table_rows: int, needed: int) -> np.ndarray:
    """Row indices into a ``table_rows``-row table covering ``needed`` positions.

    Extra leading positions cycle through the table from row 0; the native
    table occupies the last ``table_rows`` positions.
    """
    if table_rows < 1:
        raise ValueError("position table must have at least one row")
    if needed <= table_rows:
        return np.arange(needed)
    extra = needed - table_rows
    return np.concatenate([np.arange(extra) % table_rows, np.arange(table_rows)])


def extend_positions(table, needed: int):
    """Extend a ``P x d`` position table to ``needed`` rows (identity if ``needed <= P``)."""
    if isinstance(table, Tensor):
        rows = table.shape[0]
        if needed <= rows:
            return table
        return take_rows(table, extended_position_ids(rows, needed))
    arr = np.asarray(table)
    if needed <= arr.shape[0]:
        return arr
    return arr[extended_position_ids(arr.shape[0], needed)]


def _bidir_block(layer: LayerWeights, config: BidirEncoderConfig, h: Tensor, bias) -> Tensor:
    B, T, d = h.shape
    H, dh = config.n_heads, config.head_dim
    x = rms_norm(h, layer.attn_norm, config.norm_eps)

    def heads(w):
        return transpose(reshape(matmul(x, w), (B, T, H, dh)), (0, 2, 1, 3))

    att = attend(heads(layer.wq), heads(layer.wk), heads(layer.wv), bias)
    att = reshape(transpose(att, (0, 2, 1, 3)), (B, T, d))
    h = add(h, matmul(att, layer.wo))
    x = rms_norm(h, layer.mlp_norm, config.norm_eps)
    m = mul(silu(matmul(x, layer.w_gate)), matmul(x, layer.w_up))
    return add(h, matmul(m, layer.w_down))


def encode_bidirectional(weights: BidirEncoderWeights, config: BidirEncoderConfig, context,
                         mask: np.ndarray | None = None, max_positions: int | None = None) -> EncoderOutput:
    """Full (non-causal) encoding of ``context`` (``(T,)`` or ``(B, T)``).

    ``max_positions`` caps the extended position capacity; by default any
    length is accepted by cycling the position table.
    """
    ids = np.asarray(context, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    B, T = ids.shape
    if max_positions is not None and T > max_positions:
        raise LengthError(f"context of {T} tokens exceeds encoder capacity {max_positions}")
    if T == 0:
        return EncoderOutput.empty(config.d_enc, EncoderKind.BIDIRECTIONAL, B)
    pos = extend_positions(weights.positions, T)
    if pos.shape[0] != T:
        pos = take_rows(weights.positions, np.arange(T))
    h = add(take_rows(weights.embed, ids), pos)
    bias = None
    if mask is not None:
        bias = np.where(np.asarray(mask, bool), 0.0, MASK_VALUE).astype(np.float32)[:, None, None, :]
    for layer in weights.layers:
        h = _bidir_block(layer, config, h, bias)
    out = rms_norm(h, weights.final_norm, config.norm_eps)
    return EncoderOutput(out, EncoderKind.BIDIRECTIONAL, None if mask is None else np.asarray(mask, bool))


def bidir_parameter_count(config: BidirEncoderConfig) -> int:
    d, f = config.d_enc, config.ffn_dim
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    return config.vocab_size * d + config.base_max_positions * d + config.n_layers * per_layer + d
