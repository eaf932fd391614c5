"""Small random models shared by several test files."""

import numpy as np

from xccache.decoder import DecoderConfig, DecoderModel, init_decoder
from xccache.encoders import BidirEncoderConfig, EncoderKind
from xccache.xc_model import XCConfig, build_xc_model, trainable_parameters


def random_decoder(seed: int, n_layers=None, d_model=None, vocab=48, max_seq=200) -> DecoderModel:
    r = np.random.default_rng([seed, 7])
    L = n_layers or int(r.choice([2, 4]))
    d = d_model or int(r.choice([16, 32]))
    cfg = DecoderConfig(n_layers=L, d_model=d, n_heads=2, head_dim=d // 2, vocab_size=vocab, max_seq=max_seq)
    return DecoderModel(init_decoder(cfg, seed=seed), cfg)


def random_xc(seed: int, kind=EncoderKind.DECODER, n_cross=1, skip=1, final=True, gates=True,
              n_layers=2, d_model=16, vocab=48, hidden=16, dropout=0.0, use_bias=False):
    """XC model whose gates are set away from zero so cross-attention matters."""
    base = random_decoder(seed, n_layers, d_model, vocab)
    enc = None
    if kind is EncoderKind.BIDIRECTIONAL:
        enc = BidirEncoderConfig(n_layers=1, d_enc=12, n_heads=2, vocab_size=vocab, base_max_positions=16)
    xc = XCConfig(n_cross_layers=n_cross, skip=skip, final_layer=final, cross_hidden=hidden, cross_n_heads=2,
                  cross_n_kv_heads=2, dropout_p=dropout, use_bias=use_bias, encoder_kind=kind)
    model = build_xc_model(base.weights.copy(), base.config, xc, seed=seed + 1, encoder_config=enc)
    if gates:
        r = np.random.default_rng([seed, 11])
        for _, layer in model.cross_layers():
            layer.gate.data = r.uniform(0.5, 1.5, 1).astype(np.float32)
    return base, model


def bind_trainable(model, work):
    """Swap the model's trainable tensors for ``work`` (same order as trainable_parameters)."""
    names = list(trainable_parameters(model))
    by_prefix = dict(model.cross_layers())
    for name, w in zip(names, work):
        prefix, field = name.rsplit(".", 1)
        layer = by_prefix[prefix]
        if field in layer.biases:
            layer.biases[field] = w
        else:
            setattr(layer, field, w)


def to_f64(model):
    for _, t in model.decoder.named_tensors():
        t.data = t.data.astype(np.float64)
