import math

import numpy as np
import pytest

from canids.checkpoint import checkpoint_hash
from canids.model import CanBertModel, ModelConfig
from canids.training import (TrainConfig, TrainingDiverged, fit, mask_batch, mask_sequence,
                             masked_count, masked_loss, train_epoch)
from canids.windowing import IdVocabulary, WindowSet, slide_windows


def small_cfg(V, T=8, **kw):
    return ModelConfig(**{**dict(total_tokens=V, T=T, L=1, d=16, d_ff=32, h=2, p_drop=0.0), **kw})


def periodic_windows(n, T=8, M=4):
    stream = np.arange(n + T) % M
    return slide_windows(stream, np.zeros(len(stream), np.uint8), T)


def test_R_examples():
    assert masked_count(32, 0.45) == 14
    assert masked_count(32, 1e-6) == 1
    assert masked_count(16, 0.15) == 2      # 2.4 rounds down
    assert masked_count(10, 0.25) == 3      # 2.5 rounds half up


@pytest.mark.parametrize("m", [0.15, 0.3, 0.45, 0.6])
@pytest.mark.parametrize("T", [16, 32, 64, 128, 256])
def test_mask_grid(m, T):
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 50, size=(4, T))
    b = mask_batch(tokens, m, rng, 50)
    R = max(1, math.floor(m * T + 0.5))
    assert b.positions.shape == (4, R)
    for row in b.positions:
        assert len(set(row.tolist())) == R
    assert (b.inputs == 50).sum() == 4 * R
    assert np.array_equal(b.targets, tokens[np.arange(4)[:, None], b.positions].reshape(-1))


def test_mask_sequence_roundtrip():
    tokens = np.arange(32) % 7
    masked, targets, pos = mask_sequence(tokens, 0.45, np.random.default_rng(1), 7)
    assert len(pos) == 14 and np.all(masked[pos] == 7)
    restored = masked.copy()
    restored[pos] = targets
    assert np.array_equal(restored, tokens)


def test_frozen_lr_epoch_equals_eval_loss():
    windows = periodic_windows(64)
    model = CanBertModel(small_cfg(6), seed=0)
    cfg = TrainConfig(lr=0.0, batch_size=16, seed=3)
    rng = np.random.default_rng(11)
    loss = train_epoch(model, windows, cfg, rng)
    # replay the same batches and masks without touching the optimizer
    replay = np.random.default_rng(11)
    total, count = 0.0, 0
    from canids.training import iter_batches
    for idx in iter_batches(len(windows), cfg.batch_size, replay):
        b = mask_batch(windows.tokens[idx], cfg.mask_ratio, replay, 4)
        total += masked_loss(model, b) * b.targets.size
        count += b.targets.size
    assert abs(loss - total / count) < 1e-10


def test_uniform_logits_loss_is_log_vocab():
    model = CanBertModel(small_cfg(93), seed=0)
    model.params["head_w"].value[:] = 0.0
    windows = periodic_windows(10, M=91)
    b = mask_batch(windows.tokens, 0.45, np.random.default_rng(0), 91)
    assert abs(masked_loss(model, b) - math.log(93)) < 1e-9


def test_initial_loss_sanity_band():
    model = CanBertModel(ModelConfig(total_tokens=92, T=16, L=1), seed=0)
    w = slide_windows(np.random.default_rng(0).integers(0, 90, 100), np.zeros(100, np.uint8), 16)
    b = mask_batch(w.tokens, 0.45, np.random.default_rng(0), 90)
    loss = masked_loss(model, b)
    assert 0.5 * math.log(90) <= loss <= 2 * math.log(92)


def test_single_id_traffic_learns_quickly():
    windows = slide_windows(np.zeros(3000, int), np.zeros(3000, np.uint8), 8)
    model = CanBertModel(small_cfg(3), seed=0)
    cfg = TrainConfig(max_epochs=2, batch_size=32, seed=0)
    rng = np.random.default_rng(0)
    losses = [train_epoch(model, windows, cfg, rng) for _ in range(2)]
    b = mask_batch(windows.tokens, 0.45, np.random.default_rng(5), 1)
    assert losses[1] < losses[0]
    assert masked_loss(model, b) < 0.05


def test_periodic_traffic_trend():
    finals = []
    for seed in range(3):
        windows = periodic_windows(256, M=5)
        model = CanBertModel(small_cfg(7), seed=seed)
        cfg = TrainConfig(batch_size=32, seed=seed)
        rng = np.random.default_rng(seed)
        losses = [train_epoch(model, windows, cfg, rng) for _ in range(10)]
        finals.append((losses[0], losses[-1]))
    first, last = np.median([f for f, _ in finals]), np.median([l for _, l in finals])
    assert last < first


class _ScriptedLoss:
    """Patch for masked_loss returning a fixed validation trajectory."""

    def __init__(self, values):
        self.values = list(values)

    def __call__(self, *a, **k):
        return self.values.pop(0)


def test_patience_trace(monkeypatch):
    import canids.training as tr
    windows = periodic_windows(40)
    model = CanBertModel(small_cfg(6), seed=0)
    states = []
    monkeypatch.setattr(tr, "masked_loss", _ScriptedLoss([1.0 + 0.1 * e for e in range(30)]))

    def on_epoch(epoch, m, rep):
        states.append(m.state())
        return False

    model, rep = fit(model, windows[:30], windows[30:], TrainConfig(patience=10, batch_size=16),
                     on_epoch=on_epoch)
    assert rep.stopped_epoch == 11 and rep.best_epoch == 1 and rep.stop_reason == "patience"
    for k, v in model.state().items():
        assert np.array_equal(v, states[0][k])


def test_early_stopping_keeps_best(monkeypatch):
    import canids.training as tr
    traj = [3.0, 2.0, 2.5, 1.5, 1.7, 1.9, 1.6]
    monkeypatch.setattr(tr, "masked_loss", _ScriptedLoss(traj))
    windows = periodic_windows(40)
    _, rep = fit(CanBertModel(small_cfg(6)), windows[:30], windows[30:],
                 TrainConfig(patience=3, batch_size=16, max_epochs=50))
    assert rep.best_epoch == 4 and rep.best_valid_loss == min(rep.valid_loss)
    assert rep.stopped_epoch == 7


def test_max_epochs_one():
    windows = periodic_windows(40)
    _, rep = fit(CanBertModel(small_cfg(6)), windows[:30], windows[30:],
                 TrainConfig(max_epochs=1, patience=10, batch_size=16))
    assert len(rep.train_loss) == 1 and rep.stop_reason == "max_epochs"


def test_fit_is_deterministic():
    windows = periodic_windows(80)
    vocab = IdVocabulary((1, 2, 3, 4))
    hashes = []
    for _ in range(2):
        model, _ = fit(CanBertModel(small_cfg(6, p_drop=0.1), seed=1), windows[:70], windows[70:],
                       TrainConfig(max_epochs=2, batch_size=16, seed=7))
        hashes.append(checkpoint_hash(model, vocab))
    assert hashes[0] == hashes[1]


def test_divergence_raises():
    windows = periodic_windows(40)
    model = CanBertModel(small_cfg(6))
    model.params["head_b"].value[0] = np.nan
    with pytest.raises(TrainingDiverged):
        train_epoch(model, windows, TrainConfig(batch_size=16), np.random.default_rng(0))


def test_empty_sets_rejected():
    windows = periodic_windows(40)
    empty = windows[:0]
    model = CanBertModel(small_cfg(6))
    with pytest.raises(ValueError):
        train_epoch(model, empty, TrainConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        fit(model, windows, empty, TrainConfig())


def test_config_invariants():
    for bad in (dict(mask_ratio=0.0), dict(mask_ratio=1.0), dict(patience=0), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    d = TrainConfig()
    assert (d.mask_ratio, d.batch_size, d.lr, d.max_epochs, d.patience) == (0.45, 32, 1e-3, 200, 10)
