"""Checkpoint container.

A checkpoint is an ``.npz`` archive: one little-endian float64 array per
named parameter plus a ``__meta__`` entry holding a JSON record with the
model config, the vocabulary digest and anything the caller adds (the
trainer stores optimizer progress there).  Optimizer moments, when saved,
live under ``adam.m/<name>`` and ``adam.v/<name>``.
"""
import json

import numpy as np

from .errors import ConfigError
from .model import ModelConfig, RewriterModel

FORMAT = "urewrite-checkpoint/1"


def save_checkpoint(path, model, vocab, meta=None, optimizer=None):
    record = {
        "format": FORMAT,
        "config": model.config.to_dict(),
        "vocab_sha256": vocab.digest(),
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    record.update(meta or {})
    arrays = {k: np.ascontiguousarray(v.data, dtype="<f8") for k, v in model.params.items()}
    if optimizer is not None:
        for k in model.params:
            arrays[f"adam.m/{k}"] = optimizer.m[k].astype("<f8")
            arrays[f"adam.v/{k}"] = optimizer.v[k].astype("<f8")
        record["adam_step"] = optimizer.step_count
    arrays["__meta__"] = np.frombuffer(json.dumps(record, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path):
    """Raw access: (meta record, {name: array})."""
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z:
            raise ConfigError(f"{path}: not a checkpoint (no metadata record)")
        meta = json.loads(z["__meta__"].tobytes().decode("utf-8"))
        if meta.get("format") != FORMAT:
            raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return meta, arrays


def load_checkpoint(path, vocab=None, config=None):
    """Rebuild the model stored at ``path``.

    Rejects the file if ``vocab`` (or ``config``) is given and does not match
    what the checkpoint was trained with.
    """
    meta, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["config"])
    if vocab is not None and vocab.digest() != meta["vocab_sha256"]:
        raise ConfigError(f"{path}: vocabulary hash mismatch (checkpoint was trained with another vocabulary)")
    if config is not None and config.to_dict() != cfg.to_dict():
        raise ConfigError(f"{path}: model config mismatch")
    model = RewriterModel(cfg)
    model.load_state_dict({k: v.astype(np.float64) for k, v in arrays.items() if "/" not in k})
    return model, meta, {k: v for k, v in arrays.items() if "/" in k}
