import json

import numpy as np
import pytest

from canids.checkpoint import CheckpointError, checkpoint_hash, load_checkpoint, save_checkpoint
from canids.model import CanBertModel, ModelConfig
from canids.windowing import IdVocabulary


@pytest.fixture
def saved(tmp_path):
    vocab = IdVocabulary((0x100, 0x200, 0x316, 0x400))
    model = CanBertModel(ModelConfig(total_tokens=6, T=8, L=2, d=16, d_ff=32, h=2), seed=4)
    # f32-representable weights so the round trip is bit exact
    model.load_state({k: v.astype(np.float32).astype(np.float64) for k, v in model.state().items()})
    path = save_checkpoint(model, vocab, tmp_path / "ckpt", extra={"note": "x"})
    return model, vocab, path


def test_roundtrip_bit_exact(saved):
    model, vocab, path = saved
    back, v2, manifest = load_checkpoint(path, vocab)
    assert v2 == vocab and back.cfg == model.cfg
    for k, v in model.state().items():
        assert back[k].tobytes() == v.tobytes()
    assert manifest["checkpoint_hash"] == checkpoint_hash(back, vocab)
    assert manifest["extra"] == {"note": "x"}


def test_blob_size(saved):
    model, _, path = saved
    assert (path / "weights.bin").stat().st_size == 4 * model.parameter_count()


def test_default_size_about_12mb():
    from canids.model import closed_form_parameter_count
    size = 4 * closed_form_parameter_count(ModelConfig(total_tokens=92))
    assert 8e6 < size < 13e6


def test_truncated_blob(saved):
    _, _, path = saved
    blob = (path / "weights.bin").read_bytes()
    (path / "weights.bin").write_bytes(blob[:-7])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_corrupted_blob(saved):
    _, _, path = saved
    blob = bytearray((path / "weights.bin").read_bytes())
    blob[10] ^= 0xFF
    (path / "weights.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_manifest(saved):
    _, _, path = saved
    text = (path / "manifest.json").read_text()
    (path / "manifest.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_version_mismatch(saved):
    _, _, path = saved
    m = json.loads((path / "manifest.json").read_text())
    m["format_version"] = 99
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_shape_mismatch(saved):
    _, _, path = saved
    m = json.loads((path / "manifest.json").read_text())
    m["registry"][0]["shape"] = [3, 32]
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_vocab_mismatch(saved):
    _, _, path = saved
    with pytest.raises(CheckpointError):
        load_checkpoint(path, IdVocabulary((1, 2, 3, 5)))


def test_hash_ignores_creation_time(saved, tmp_path):
    model, vocab, path = saved
    again = save_checkpoint(model, vocab, tmp_path / "again")
    a = json.loads((path / "manifest.json").read_text())["checkpoint_hash"]
    b = json.loads((again / "manifest.json").read_text())["checkpoint_hash"]
    assert a == b
