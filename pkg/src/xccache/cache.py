"""Context caches: full KV, just-in-time KV (hidden states) and XC (encoder outputs).

Blob arrays are stored without a batch axis for a single context
(KV ``L x 2 x T x H*dh``, JIT ``L x T x d_model``, XC ``T x d_enc``); a leading
batch axis is allowed for bulk files such as the load benchmark's.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from . import decoder as dec
from .cache_store import DType, StoredTensor, StrategyCode, geometry_digest
from .decoder import CacheError, DecoderConfig, DecoderModel, DecoderWeights, KVPair, LengthError
from .encoders import EncoderKind, EncoderOutput
from .tensor import Tensor, rms_norm
from .xc_model import ConfigError, XCModel, xc_generate


class CacheStrategy(enum.Enum):
    KV = "kv"
    JITKV = "jitkv"
    XC = "xc"

    @property
    def code(self) -> StrategyCode:
        return StrategyCode[self.name]

    @classmethod
    def parse(cls, value) -> "CacheStrategy":
        if isinstance(value, CacheStrategy):
            return value
        v = str(value).lower().replace("-", "").replace("_", "")
        for s in cls:
            if s.value == v:
                return s
        raise ValueError(f"unknown cache strategy {value!r}; choose from kv, jitkv, xc")


# ---------------------------------------------------------------------------
# byte accounting


@dataclass(frozen=True)
class CacheGeometry:
    n_layers: int
    n_heads: int
    head_dim: int
    d_model: int
    d_enc: int

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.head_dim, self.d_model, self.d_enc) <= 0:
            raise ValueError(f"geometry must be positive: {self}")

    @classmethod
    def reference(cls, d_enc: int = 4096) -> "CacheGeometry":
        """A 7B-class decoder: 32 layers of 32 heads x 128."""
        return cls(n_layers=32, n_heads=32, head_dim=128, d_model=4096, d_enc=d_enc)

    @classmethod
    def of(cls, config: DecoderConfig, d_enc: int | None = None) -> "CacheGeometry":
        return cls(config.n_layers, config.n_heads, config.head_dim, config.d_model, d_enc or config.d_model)


def bytes_per_token(geometry: CacheGeometry, strategy, bytes_per_scalar: int = 2) -> int:
    g, s = geometry, CacheStrategy.parse(strategy)
    if bytes_per_scalar <= 0:
        raise ValueError("bytes_per_scalar must be positive")
    if s is CacheStrategy.KV:
        return g.n_layers * 2 * g.n_heads * g.head_dim * bytes_per_scalar
    if s is CacheStrategy.JITKV:
        return g.n_layers * g.d_model * bytes_per_scalar
    return g.d_enc * bytes_per_scalar


# ---------------------------------------------------------------------------
# digests


def decoder_digest(config: DecoderConfig) -> bytes:
    return geometry_digest(n_layers=config.n_layers, d_model=config.d_model, n_heads=config.n_heads,
                           head_dim=config.head_dim, vocab_size=config.vocab_size,
                           rope_theta=config.rope_theta, norm_eps=config.norm_eps)


def encoder_digest(model: XCModel) -> bytes:
    fields = dict(kind=model.kind.value, d_enc=model.d_enc, vocab_size=model.decoder_config.vocab_size)
    if model.kind is EncoderKind.DECODER:
        fields["decoder"] = decoder_digest(model.decoder_config).hex()
    else:
        c = model.encoder_config
        fields.update(n_layers=c.n_layers, n_heads=c.n_heads, base_max_positions=c.base_max_positions)
    return geometry_digest(**fields)


# ---------------------------------------------------------------------------
# blobs


@dataclass
class CacheBlob:
    array: np.ndarray
    digest: bytes
    storage: DType = DType.F32

    strategy: ClassVar[CacheStrategy]
    base_rank: ClassVar[int]

    def __post_init__(self):
        self.array = np.asarray(self.array, dtype=np.float32)
        if self.array.ndim not in (self.base_rank, self.base_rank + 1):
            raise CacheError(f"{type(self).__name__} needs rank {self.base_rank} "
                             f"(or {self.base_rank + 1} batched), got shape {self.array.shape}")
        if self.n_tokens == 0:
            raise CacheError("empty cache")

    @property
    def batched(self) -> bool:
        return self.array.ndim == self.base_rank + 1

    @property
    def n_tokens(self) -> int:
        raise NotImplementedError

    @property
    def positions(self) -> np.ndarray:
        # contexts always start at position 0
        return np.arange(self.n_tokens)

    @property
    def scalar_count(self) -> int:
        return self.array.size


@dataclass
class KVCacheBlob(CacheBlob):
    strategy: ClassVar[CacheStrategy] = CacheStrategy.KV
    base_rank: ClassVar[int] = 4

    @property
    def n_tokens(self) -> int:
        return self.array.shape[-2]


@dataclass
class JITCacheBlob(CacheBlob):
    strategy: ClassVar[CacheStrategy] = CacheStrategy.JITKV
    base_rank: ClassVar[int] = 3

    @property
    def n_tokens(self) -> int:
        return self.array.shape[-2]


@dataclass
class XCCacheBlob(CacheBlob):
    kind: EncoderKind = EncoderKind.DECODER
    strategy: ClassVar[CacheStrategy] = CacheStrategy.XC
    base_rank: ClassVar[int] = 2

    @property
    def n_tokens(self) -> int:
        return self.array.shape[-2]


_BLOB_TYPES = {CacheStrategy.KV: KVCacheBlob, CacheStrategy.JITKV: JITCacheBlob, CacheStrategy.XC: XCCacheBlob}


def blob_from_stored(stored: StoredTensor) -> CacheBlob:
    if stored.strategy is StrategyCode.WEIGHTS:
        raise CacheError("file holds model weights, not a cache")
    cls = _BLOB_TYPES[CacheStrategy[stored.strategy.name]]
    return cls(stored.array, stored.digest, stored.dtype)


# ---------------------------------------------------------------------------
# building


def _plain(model) -> DecoderModel:
    if isinstance(model, XCModel):
        raise ConfigError("KV and JIT-KV caches need a plain decoder, got an XC model")
    if not isinstance(model, DecoderModel):
        raise ConfigError(f"expected a DecoderModel, got {type(model).__name__}")
    return model


def build_cache(model, context, strategy) -> CacheBlob:
    strategy = CacheStrategy.parse(strategy)
    ids = [int(t) for t in context]
    if not ids:
        raise LengthError("cannot cache an empty context")
    if strategy is CacheStrategy.XC:
        if not isinstance(model, XCModel):
            raise ConfigError("XC caches need an XC model")
        enc = model.encode([ids])
        return XCCacheBlob(enc.rows.copy(), encoder_digest(model), kind=model.kind)
    m = _plain(model)
    res = dec.forward_full(m.weights, m.config, [ids], keep_kv=True)
    digest = decoder_digest(m.config)
    if strategy is CacheStrategy.KV:
        T = len(ids)
        hd = m.config.n_heads * m.config.head_dim
        arr = np.stack([np.stack([k[0].reshape(T, hd), v[0].reshape(T, hd)])
                        for k, v in zip(res.kv.keys, res.kv.values)])
        return KVCacheBlob(arr, digest)
    return JITCacheBlob(np.stack([h.data[0] for h in res.hidden_per_layer]), digest)


def kv_from_blob(blob: KVCacheBlob, config: DecoderConfig) -> KVPair:
    if blob.digest != decoder_digest(config):
        raise CacheError("KV cache was built for a different decoder geometry")
    if blob.batched:
        raise CacheError("generation expects a single-context cache")
    L, _, T, _ = blob.array.shape
    H, dh = config.n_heads, config.head_dim
    return KVPair([blob.array[i, 0].reshape(1, T, H, dh).copy() for i in range(L)],
                  [blob.array[i, 1].reshape(1, T, H, dh).copy() for i in range(L)])


def jit_materialize(blob: JITCacheBlob, weights: DecoderWeights, config: DecoderConfig) -> KVPair:
    """Recompute rotary keys and values from stored block inputs."""
    if blob.digest != decoder_digest(config):
        raise CacheError("JIT-KV cache was built for a different decoder geometry")
    if blob.batched:
        raise CacheError("generation expects a single-context cache")
    cos, sin = dec.rope_tables(blob.positions, config.head_dim, config.rope_theta)
    kv = KVPair()
    for layer, h in zip(weights.layers, blob.array):
        x = rms_norm(Tensor(h[None]), layer.attn_norm, config.norm_eps)
        k, v = dec.normed_kv(layer, config, x, cos, sin)
        kv.keys.append(k.data)
        kv.values.append(v.data)
    return kv


# ---------------------------------------------------------------------------
# generation


def _greedy_from(weights, config, logits, cache, max_new, stop) -> list[int]:
    out: list[int] = []
    nxt = int(np.argmax(logits[-1]))
    while max_new > 0:
        if stop is not None and nxt == stop:
            break
        out.append(nxt)
        if len(out) >= max_new or cache.length >= config.max_seq:
            break
        logits, cache = dec.decode_step(weights, config, nxt, cache)
        nxt = int(np.argmax(logits[-1]))
    return out


def generate_with_cache(model, blob: CacheBlob, query, max_new: int, stop: int | None = None) -> list[int]:
    """Greedy answer to ``query`` given a prebuilt cache of the context."""
    query = [int(t) for t in query]
    if not query:
        raise LengthError("query must be nonempty")
    if isinstance(blob, XCCacheBlob):
        if not isinstance(model, XCModel):
            raise CacheError("XC caches can only be consumed by an XC model")
        if blob.digest != encoder_digest(model):
            raise CacheError("XC cache was built by a different encoder")
        if blob.batched:
            raise CacheError("generation expects a single-context cache")
        return xc_generate(model, EncoderOutput.from_rows(blob.array, blob.kind), query, max_new, stop)
    if isinstance(model, XCModel):
        raise CacheError(f"{blob.strategy.name} caches need a plain decoder")
    m = _plain(model)
    if isinstance(blob, KVCacheBlob):
        kv = kv_from_blob(blob, m.config)
    elif isinstance(blob, JITCacheBlob):
        kv = jit_materialize(blob, m.weights, m.config)
    else:
        raise CacheError(f"unsupported blob {type(blob).__name__}")
    logits, kv = dec.prefill(m.weights, m.config, [query], cache=kv)
    return _greedy_from(m.weights, m.config, logits, kv, max_new, stop)


def generate_uncached(model: DecoderModel, prompt, max_new: int, stop: int | None = None) -> list[int]:
    """Reference decoder: every step re-runs the full forward pass, no state kept."""
    seq = [int(t) for t in prompt]
    if not seq:
        raise LengthError("prompt must be nonempty")
    out: list[int] = []
    while len(out) < max_new and len(seq) <= model.config.max_seq:
        nxt = int(np.argmax(dec.forward_full(model.weights, model.config, [seq]).logits.data[0, -1]))
        if stop is not None and nxt == stop:
            break
        out.append(nxt)
        seq.append(nxt)
    return out


# ---------------------------------------------------------------------------
# attention operation counts (closed forms of what ``count_attention_macs`` observes)


def prefill_attention_macs(n_layers: int, n_heads: int, head_dim: int, n_tokens: int) -> int:
    """Causal self-attention over ``n_tokens`` in one pass."""
    return n_layers * n_heads * 2 * head_dim * (n_tokens * (n_tokens + 1) // 2)


def cached_attention_macs(n_layers: int, n_heads: int, head_dim: int, n_context: int, n_fed: int) -> int:
    """``n_fed`` tokens processed after a cache of ``n_context`` tokens."""
    pairs = n_fed * n_context + n_fed * (n_fed + 1) // 2
    return n_layers * n_heads * 2 * head_dim * pairs
