"""Toy Llama-style decoder: RMSNorm, rotary attention, gated-SiLU MLP.

Block order is the standard pre-norm one::

    h = h + attn(rms_norm(h))
    h = h + mlp(rms_norm(h))

The same block code serves full-sequence forward, incremental decoding
against a :class:`KVPair`, and (through ``hook``) the cross-attention
insertions of the XC model.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .tensor import (
    Tensor,
    add,
    add_const,
    concat,
    matmul,
    mul,
    reshape,
    rms_norm,
    rope,
    scale,
    silu,
    softmax,
    take_rows,
    transpose,
)

MASK_VALUE = -1e9


class LengthError(ValueError):
    pass


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int
    d_model: int
    n_heads: int
    head_dim: int
    vocab_size: int
    max_seq: int
    rope_theta: float = 10000.0
    mlp_hidden: int = 0  # 0 -> ~8/3 d_model, rounded up to a multiple of 8
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "head_dim", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"DecoderConfig.{name} must be positive")
        if self.n_heads * self.head_dim != self.d_model:
            raise ValueError(
                f"n_heads * head_dim = {self.n_heads * self.head_dim} != d_model = {self.d_model}")
        if self.max_seq < 2:
            raise ValueError("max_seq must be at least 2")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary embeddings")

    @property
    def ffn_dim(self) -> int:
        if self.mlp_hidden:
            return self.mlp_hidden
        return -(-(self.d_model * 8 // 3) // 8) * 8

    @classmethod
    def toy(cls, n_layers=2, d_model=16, n_heads=2, vocab_size=32, max_seq=256, **kw) -> "DecoderConfig":
        return cls(n_layers=n_layers, d_model=d_model, n_heads=n_heads,
                   head_dim=d_model // n_heads, vocab_size=vocab_size, max_seq=max_seq, **kw)


@dataclass
class LayerWeights:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp_norm: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    FIELDS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")


@dataclass
class DecoderWeights:
    embed: Tensor  # V x d_model
    layers: list[LayerWeights]
    final_norm: Tensor
    lm_head: Tensor  # V x d_model
    frozen: bool = False

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed", self.embed
        for i, layer in enumerate(self.layers):
            for f in LayerWeights.FIELDS:
                yield f"layers.{i}.{f}", getattr(layer, f)
        yield "final_norm", self.final_norm
        yield "lm_head", self.lm_head

    def freeze(self) -> "DecoderWeights":
        for _, t in self.named_tensors():
            t.requires_grad = False
        self.frozen = True
        return self

    def unfreeze(self) -> "DecoderWeights":
        for _, t in self.named_tensors():
            t.requires_grad = True
        self.frozen = False
        return self

    def copy(self) -> "DecoderWeights":
        arrays = {n: t.data.copy() for n, t in self.named_tensors()}
        return weights_from_arrays(arrays, len(self.layers), frozen=self.frozen)


def weights_from_arrays(arrays: dict[str, np.ndarray], n_layers: int, frozen: bool = True) -> DecoderWeights:
    def t(name):
        return Tensor(arrays[name], requires_grad=not frozen, name=name)

    layers = [LayerWeights(**{f: t(f"layers.{i}.{f}") for f in LayerWeights.FIELDS}) for i in range(n_layers)]
    return DecoderWeights(embed=t("embed"), layers=layers, final_norm=t("final_norm"),
                          lm_head=t("lm_head"), frozen=frozen)


def init_decoder(config: DecoderConfig, seed: int = 0, frozen: bool = False) -> DecoderWeights:
    rng = np.random.default_rng(seed)
    d, f, L = config.d_model, config.ffn_dim, config.n_layers

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    out_std = 1.0 / math.sqrt(2 * L)
    arrays: dict[str, np.ndarray] = {"embed": normal((config.vocab_size, d), 1.0)}
    for i in range(L):
        p = f"layers.{i}."
        arrays[p + "attn_norm"] = np.ones(d, np.float32)
        arrays[p + "wq"] = normal((d, d), 1 / math.sqrt(d))
        arrays[p + "wk"] = normal((d, d), 1 / math.sqrt(d))
        arrays[p + "wv"] = normal((d, d), 1 / math.sqrt(d))
        arrays[p + "wo"] = normal((d, d), out_std / math.sqrt(d))
        arrays[p + "mlp_norm"] = np.ones(d, np.float32)
        arrays[p + "w_gate"] = normal((d, f), 1 / math.sqrt(d))
        arrays[p + "w_up"] = normal((d, f), 1 / math.sqrt(d))
        arrays[p + "w_down"] = normal((f, d), out_std / math.sqrt(f))
    arrays["final_norm"] = np.ones(d, np.float32)
    arrays["lm_head"] = normal((config.vocab_size, d), 1 / math.sqrt(d))
    return weights_from_arrays(arrays, L, frozen=frozen)


def parameter_count(weights: DecoderWeights) -> int:
    return sum(t.size for _, t in weights.named_tensors())


def config_parameter_count(config: DecoderConfig) -> int:
    """Closed form of ``parameter_count`` for a decoder built from ``config``."""
    d, f, L, V = config.d_model, config.ffn_dim, config.n_layers, config.vocab_size
    per_layer = 2 * d + 4 * d * d + 3 * d * f
    return 2 * V * d + L * per_layer + d


@dataclass
class DecoderModel:
    """A plain decoder: weights plus the config they were built for."""

    weights: DecoderWeights
    config: DecoderConfig


# ---------------------------------------------------------------------------
# attention with operation counting


@dataclass
class MacCounter:
    """Multiply-accumulates spent in attention scores and weighted sums."""

    macs: int = 0
    calls: int = 0


_counters: list[MacCounter] = []


@contextmanager
def count_attention_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def causal_bias(q_positions: np.ndarray, k_positions: np.ndarray) -> np.ndarray:
    visible = k_positions[None, :] <= q_positions[:, None]
    return np.where(visible, 0.0, MASK_VALUE).astype(np.float32)[None, None]


def attend(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None = None,
           drop: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """Scaled dot-product attention over ``(B, H, T, dh)`` tensors.

    ``bias`` is an additive constant (0 or ``MASK_VALUE``) broadcast against
    the ``(B, H, Tq, Tk)`` score matrix.
    """
    B, H, Tq, dh = q.shape
    Tk = k.shape[2]
    if _counters:
        if bias is None:
            visible = Tq * Tk * B * H
        else:
            vis = np.broadcast_to(bias > MASK_VALUE / 2, (B, H, Tq, Tk))
            visible = int(np.count_nonzero(vis))
        for c in _counters:
            c.macs += 2 * dh * visible
            c.calls += 1
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if bias is not None:
        scores = add_const(scores, bias)
    probs = softmax(scores, axis=-1)
    if drop is not None:
        probs = drop(probs)
    return matmul(probs, v)


def rope_tables(positions: np.ndarray, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    inv = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = positions.astype(np.float64)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    # (T, 1, dh): broadcasts over (B, T, H, dh)
    return np.cos(ang).astype(np.float32)[:, None, :], np.sin(ang).astype(np.float32)[:, None, :]


# ---------------------------------------------------------------------------
# KV cache


@dataclass
class KVPair:
    """Per-layer rotary-applied keys and values, each ``(B, T, H, dh)``."""

    keys: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)

    @property
    def length(self) -> int:
        return 0 if not self.keys else self.keys[0].shape[1]

    @classmethod
    def empty(cls, config: DecoderConfig, batch: int = 1) -> "KVPair":
        shape = (batch, 0, config.n_heads, config.head_dim)
        return cls([np.zeros(shape, np.float32) for _ in range(config.n_layers)],
                   [np.zeros(shape, np.float32) for _ in range(config.n_layers)])

    def check(self, config: DecoderConfig) -> None:
        if len(self.keys) != config.n_layers or len(self.values) != config.n_layers:
            raise CacheError(f"cache has {len(self.keys)} layers, decoder has {config.n_layers}")
        for k, v in zip(self.keys, self.values):
            if k.shape != v.shape or k.shape[2:] != (config.n_heads, config.head_dim):
                raise CacheError(f"cache geometry {k.shape}/{v.shape} does not match "
                                 f"{config.n_heads} heads x {config.head_dim}")
            if k.shape[1] != self.length:
                raise CacheError("cache layers disagree on token count")


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardResult:
    logits: Tensor  # (B, T, V)
    last_hidden: Tensor  # (B, T, d_model), final-norm output
    hidden_per_layer: list[Tensor]  # inputs of each block, (B, T, d_model)
    kv: KVPair | None = None


Hook = Callable[[int, Tensor], Tensor]


def normed_kv(layer: LayerWeights, config: DecoderConfig, x: Tensor,
              cos: np.ndarray, sin: np.ndarray) -> tuple[Tensor, Tensor]:
    """Keys (rotary applied) and values from a normalised block input."""
    B, T, _ = x.shape
    H, dh = config.n_heads, config.head_dim
    k = rope(reshape(matmul(x, layer.wk), (B, T, H, dh)), cos, sin)
    v = reshape(matmul(x, layer.wv), (B, T, H, dh))
    return k, v


def _block(layer: LayerWeights, config: DecoderConfig, h: Tensor, positions: np.ndarray,
           past: tuple[np.ndarray, np.ndarray] | None) -> tuple[Tensor, Tensor, Tensor]:
    B, T, d = h.shape
    H, dh = config.n_heads, config.head_dim
    cos, sin = rope_tables(positions, dh, config.rope_theta)
    x = rms_norm(h, layer.attn_norm, config.norm_eps)
    q = rope(reshape(matmul(x, layer.wq), (B, T, H, dh)), cos, sin)
    k, v = normed_kv(layer, config, x, cos, sin)
    k_all, v_all = k, v
    if past is not None and past[0].shape[1]:
        k_all = concat([Tensor(past[0]), k], axis=1)
        v_all = concat([Tensor(past[1]), v], axis=1)
    n_past = k_all.shape[1] - T
    k_pos = np.arange(k_all.shape[1])
    bias = causal_bias(np.arange(n_past, n_past + T), k_pos)
    att = attend(transpose(q, (0, 2, 1, 3)), transpose(k_all, (0, 2, 1, 3)),
                 transpose(v_all, (0, 2, 1, 3)), bias)
    att = reshape(transpose(att, (0, 2, 1, 3)), (B, T, d))
    h = add(h, matmul(att, layer.wo))
    x = rms_norm(h, layer.mlp_norm, config.norm_eps)
    m = mul(silu(matmul(x, layer.w_gate)), matmul(x, layer.w_up))
    h = add(h, matmul(m, layer.w_down))
    return h, k, v


def _as_batch(tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ValueError(f"token ids must be 1-D or 2-D, got shape {ids.shape}")
    return ids


def run(weights: DecoderWeights, config: DecoderConfig, tokens, *, cache: KVPair | None = None,
        hook: Hook | None = None, keep_kv: bool = False) -> ForwardResult:
    """Run the decoder over ``tokens`` (``(T,)`` or ``(B, T)``).

    With ``cache`` the tokens continue an existing sequence; the result's
    ``kv`` is the extended cache. ``hook(i, h)`` is applied before block ``i``
    and, with ``i == n_layers``, after the last block.
    """
    ids = _as_batch(tokens)
    B, T = ids.shape
    if T < 1:
        raise LengthError("need at least one token")
    n_past = 0
    if cache is not None:
        cache.check(config)
        n_past = cache.length
        keep_kv = True
    if n_past + T > config.max_seq:
        raise LengthError(f"sequence of {n_past + T} tokens exceeds max_seq={config.max_seq}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"token id outside [0, {config.vocab_size})")
    positions = np.arange(n_past, n_past + T)
    h = take_rows(weights.embed, ids)
    hidden: list[Tensor] = []
    new_kv = KVPair() if keep_kv else None
    for i, layer in enumerate(weights.layers):
        if hook is not None:
            h = hook(i, h)
        hidden.append(h)
        past = (cache.keys[i], cache.values[i]) if cache is not None else None
        h, k, v = _block(layer, config, h, positions, past)
        if new_kv is not None:
            pk = past[0] if past is not None else None
            pv = past[1] if past is not None else None
            new_kv.keys.append(k.data if pk is None or not pk.shape[1] else np.concatenate([pk, k.data], 1))
            new_kv.values.append(v.data if pv is None or not pv.shape[1] else np.concatenate([pv, v.data], 1))
    if hook is not None:
        h = hook(config.n_layers, h)
    last = rms_norm(h, weights.final_norm, config.norm_eps)
    logits = matmul(last, transpose(weights.lm_head, (1, 0)))
    return ForwardResult(logits=logits, last_hidden=last, hidden_per_layer=hidden, kv=new_kv)


def forward_full(weights: DecoderWeights, config: DecoderConfig, tokens, keep_kv: bool = False) -> ForwardResult:
    return run(weights, config, tokens, keep_kv=keep_kv)


def decode_step(weights: DecoderWeights, config: DecoderConfig, token: int,
                cache: KVPair) -> tuple[np.ndarray, KVPair]:
    """Logits ``(1, V)`` for one new token, plus the extended cache."""
    if cache.length >= config.max_seq:
        raise LengthError("cache is full")
    res = run(weights, config, [[int(token)]], cache=cache)
    return res.logits.data[0], res.kv


def prefill(weights: DecoderWeights, config: DecoderConfig, tokens,
            cache: KVPair | None = None) -> tuple[np.ndarray, KVPair]:
    res = run(weights, config, tokens, cache=cache, keep_kv=True)
    return res.logits.data[0], res.kv


def greedy_generate(weights: DecoderWeights, config: DecoderConfig, prompt, max_new: int,
                    stop: int | None = None) -> list[int]:
    """Argmax continuation of ``prompt``; the stop token is not included."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be nonempty")
    out: list[int] = []
    if max_new <= 0:
        return out
    logits, cache = prefill(weights, config, prompt)
    nxt = int(np.argmax(logits[-1]))
    while True:
        if stop is not None and nxt == stop:
            break
        out.append(nxt)
        if len(out) >= max_new or cache.length >= config.max_seq:
            break
        logits, cache = decode_step(weights, config, nxt, cache)
        nxt = int(np.argmax(logits[-1]))
    return out
