"""Checkpoints: one weights container per tensor plus a JSON index.

Layout of a checkpoint directory::

    index.json            names, shapes, optimiser step, config snapshot
    base/<name>.xcc       frozen decoder tensors
    train/<name>.xcc      trainable tensors (cross layers, encoder)
    adam_m/<name>.xcc     optimiser first moments
    adam_v/<name>.xcc     optimiser second moments
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .cache_store import DType, StrategyCode, read_tensor, write_tensor
from .decoder import DecoderConfig, DecoderWeights, weights_from_arrays
from .trainer import AdamWState
from .xc_model import XCModel, trainable_parameters

INDEX = "index.json"


def _digest(config: DecoderConfig) -> bytes:
    from .cache import decoder_digest

    return decoder_digest(config)


def _write_group(root: Path, group: str, arrays: dict[str, np.ndarray], digest: bytes) -> dict[str, list[int]]:
    shapes = {}
    for name, arr in arrays.items():
        write_tensor(root / group / f"{name}.xcc", StrategyCode.WEIGHTS, arr, digest, DType.F32)
        shapes[name] = list(arr.shape)
    return shapes


def _read_group(root: Path, group: str, names, digest: bytes) -> dict[str, np.ndarray]:
    out = {}
    for name in names:
        st = read_tensor(root / group / f"{name}.xcc", expect_digest=digest)
        if st.strategy is not StrategyCode.WEIGHTS:
            raise ValueError(f"{group}/{name}: not a weights container")
        out[name] = st.array
    return out


def save_checkpoint(path, model: XCModel, state: AdamWState | None = None, snapshot: dict | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    digest = _digest(model.decoder_config)
    base = {n: t.data for n, t in model.decoder.named_tensors()}
    params = {n: t.data for n, t in trainable_parameters(model).items()}
    index = {
        "format": 1,
        "base": _write_group(root, "base", base, digest),
        "train": _write_group(root, "train", params, digest),
        "step": 0 if state is None else state.step,
        "config": snapshot or {},
    }
    if state is not None and state.m:
        index["adam_m"] = _write_group(root, "adam_m", state.m, digest)
        index["adam_v"] = _write_group(root, "adam_v", state.v, digest)
    tmp = root / (INDEX + ".tmp")
    tmp.write_text(json.dumps(index, indent=1, sort_keys=True, default=str))
    os.replace(tmp, root / INDEX)
    return root


def read_index(path) -> dict:
    return json.loads((Path(path) / INDEX).read_text())


def load_base(path, config: DecoderConfig) -> DecoderWeights:
    root = Path(path)
    index = read_index(root)
    arrays = _read_group(root, "base", index["base"], _digest(config))
    return weights_from_arrays(arrays, config.n_layers, frozen=True)


def load_into(path, model: XCModel) -> AdamWState:
    """Overwrite ``model``'s trainable tensors from a checkpoint and return its optimiser state."""
    root = Path(path)
    index = read_index(root)
    digest = _digest(model.decoder_config)
    params = trainable_parameters(model)
    if set(index["train"]) != set(params):
        missing = sorted(set(params) ^ set(index["train"]))
        raise ValueError(f"checkpoint tensors do not match the model: {missing[:5]}")
    for name, arr in _read_group(root, "train", params, digest).items():
        if arr.shape != params[name].shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {params[name].shape}")
        params[name].data = arr
    state = AdamWState(step=int(index["step"]))
    if "adam_m" in index:
        state.m = _read_group(root, "adam_m", index["adam_m"], digest)
        state.v = _read_group(root, "adam_v", index["adam_v"], digest)
    return state
