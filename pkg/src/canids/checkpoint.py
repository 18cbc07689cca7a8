"""Checkpoint directories: ``manifest.json`` + ``weights.bin`` + ``vocab.json``.

The blob is the parameters in registry order as little-endian float32. The
manifest records the model config, each parameter's shape and byte offset, the
vocabulary digest and the blob digest.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
from pathlib import Path

import numpy as np

from .model import CanBertModel, ModelConfig, parameter_shapes
from .windowing import IdVocabulary

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def weights_blob(model: CanBertModel) -> bytes:
    return b"".join(p.value.astype("<f4").tobytes() for p in model.params.values())


def checkpoint_hash(model: CanBertModel, vocab: IdVocabulary) -> str:
    """Digest of weights, config and vocabulary; excludes creation metadata."""
    h = hashlib.sha256(weights_blob(model))
    h.update(json.dumps(model.cfg.to_dict(), sort_keys=True).encode())
    h.update(vocab.digest().encode())
    return h.hexdigest()


def save_checkpoint(model: CanBertModel, vocab: IdVocabulary, path, extra: dict | None = None) -> Path:
    path = Path(path)
    if model.cfg.total_tokens != vocab.total_tokens:
        raise CheckpointError("model and vocabulary disagree on token count")
    path.mkdir(parents=True, exist_ok=True)
    blob = weights_blob(model)
    registry, offset = [], 0
    for name, p in model.params.items():
        registry.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.size * 4
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "vocab_sha256": vocab.digest(),
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
        "weights_bytes": len(blob),
        "parameter_count": model.parameter_count(),
        "checkpoint_hash": checkpoint_hash(model, vocab),
        "registry": registry,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "extra": extra or {},
    }
    (path / "weights.bin").write_bytes(blob)
    (path / "vocab.json").write_text(vocab.to_json())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path, vocab: IdVocabulary | None = None) -> tuple[CanBertModel, IdVocabulary, dict]:
    """Load and validate; raises :class:`CheckpointError` before building anything partial."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "weights.bin").read_bytes()
        stored_vocab = IdVocabulary.from_json((path / "vocab.json").read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint at {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    if stored_vocab.digest() != manifest["vocab_sha256"]:
        raise CheckpointError("vocab.json does not match the manifest digest")
    if vocab is not None and vocab.digest() != manifest["vocab_sha256"]:
        raise CheckpointError("checkpoint was trained with a different vocabulary")
    if len(blob) != manifest["weights_bytes"]:
        raise CheckpointError(f"weights blob has {len(blob)} bytes, expected {manifest['weights_bytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["weights_sha256"]:
        raise CheckpointError("weights blob digest mismatch")
    cfg = ModelConfig(**manifest["config"])
    expected = parameter_shapes(cfg)
    registry = manifest["registry"]
    if [r["name"] for r in registry] != list(expected):
        raise CheckpointError("parameter registry does not match the config")
    state = {}
    for r in registry:
        shape = tuple(r["shape"])
        if shape != expected[r["name"]]:
            raise CheckpointError(f"{r['name']}: stored shape {shape} != {expected[r['name']]}")
        n = int(np.prod(shape))
        state[r["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=r["offset"]).reshape(shape)
    model = CanBertModel(cfg)
    model.load_state({k: v.astype(np.float64) for k, v in state.items()})
    return model, stored_vocab, manifest
