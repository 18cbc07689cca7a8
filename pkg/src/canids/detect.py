"""Window scoring with the top-k masked-prediction rule, plus metrics and a PCA baseline."""
from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import CanBertModel, ModelConfig
from .training import masked_count
from .windowing import IdVocabulary, Window, WindowSet


@dataclass
class DetectConfig:
    k: int = 5
    mask_ratio: float = 0.45
    passes: int = 1
    decision: str = "any-miss"
    seed: int = 0
    oov_policy: str = "unk"
    batch_size: int = 256
    threads: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")
        if self.decision not in ("any-miss", "all-miss"):
            raise ValueError(f"unknown decision rule {self.decision!r}")
        if self.oov_policy not in ("unk", "flag"):
            raise ValueError(f"unknown oov policy {self.oov_policy!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def window_masks(origin: int, T: int, R: int, seed: int, passes: int = 1) -> np.ndarray:
    """Masked slots for one window, (passes, R); a function of (seed, origin) only."""
    rng = np.random.default_rng([seed, int(origin)])
    return np.sort(np.argsort(rng.random((passes, T)), axis=1)[:, :R], axis=1)


def _check(model: CanBertModel, vocab: IdVocabulary, T: int, config: DetectConfig) -> None:
    if T != model.cfg.T:
        raise ValueError(f"window length {T} != model T={model.cfg.T}")
    if model.cfg.total_tokens != vocab.total_tokens:
        raise ValueError("model and vocabulary disagree on token count")
    if config.k > vocab.M:
        raise ValueError(f"k={config.k} exceeds vocabulary size M={vocab.M}")


def _miss_counts(model: CanBertModel, tokens: np.ndarray, origins: np.ndarray,
                 vocab: IdVocabulary, config: DetectConfig) -> np.ndarray:
    """Misses per (window, pass) for one chunk of windows."""
    B, T = tokens.shape
    R = masked_count(T, config.mask_ratio)
    out = np.zeros((B, config.passes), dtype=np.int64)
    masks = np.stack([window_masks(o, T, R, config.seed, config.passes) for o in origins])
    rows = np.arange(B)[:, None]
    for p in range(config.passes):
        pos = masks[:, p, :]
        inputs = tokens.copy()
        inputs[rows, pos] = vocab.mask_token
        logits = model.forward(inputs)[..., : vocab.M]
        sel = logits[rows, pos]                                   # (B, R, M)
        truth = tokens[rows, pos]                                 # (B, R)
        in_vocab = truth < vocab.M
        true_logit = np.take_along_axis(sel, np.where(in_vocab, truth, 0)[..., None], -1)
        # rank = number of candidates strictly ahead of the true id
        rank = (sel > true_logit).sum(axis=-1)
        hit = in_vocab & (rank < config.k)
        out[:, p] = (~hit).sum(axis=1)
    return out


@dataclass
class WindowScores:
    abnormal: np.ndarray
    miss_fraction: np.ndarray
    latency_s: np.ndarray


def score_windows(model: CanBertModel, vocab: IdVocabulary, windows: WindowSet,
                  config: DetectConfig) -> WindowScores:
    _check(model, vocab, windows.T, config)
    if np.dtype(config.dtype) != model.dtype:
        model = model.astype(config.dtype)
    T = windows.T
    R = masked_count(T, config.mask_ratio)
    n = len(windows)
    bs = config.batch_size
    chunks = [(s, min(s + bs, n)) for s in range(0, n, bs)]

    def work(bounds):
        s, e = bounds
        t0 = time.perf_counter()
        misses = _miss_counts(model, windows.tokens[s:e], windows.origins[s:e], vocab, config)
        return misses, (time.perf_counter() - t0) / (e - s)

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    misses = np.concatenate([m for m, _ in results]) if results else np.zeros((0, config.passes))
    latency = np.concatenate([np.full(e - s, lat) for (s, e), (_, lat) in zip(chunks, results)]) \
        if results else np.zeros(0)
    total = misses.sum(axis=1)
    if config.decision == "any-miss":
        abnormal = total > 0
    else:
        abnormal = total == R * config.passes
    if config.oov_policy == "flag":
        abnormal = abnormal | windows.contains_token(vocab.unk_token)
    return WindowScores(abnormal, total / (R * config.passes), latency)


def score_window(model: CanBertModel, vocab: IdVocabulary, window: Window,
                 config: DetectConfig) -> tuple[bool, float]:
    ws = WindowSet(window.tokens[None], window.position_labels[None], [window.origin])
    s = score_windows(model, vocab, ws, config)
    return bool(s.abnormal[0]), float(s.miss_fraction[0])


def masked_topk_accuracy(model: CanBertModel, vocab: IdVocabulary, windows: WindowSet,
                         mask_ratio: float = 0.45, k: int = 5, seed: int = 0) -> float:
    """Fraction of masked slots whose true id is among the top-k candidates."""
    cfg = DetectConfig(k=k, mask_ratio=mask_ratio, seed=seed, dtype=str(model.dtype))
    R = masked_count(windows.T, mask_ratio)
    scores = score_windows(model, vocab, windows, cfg)
    return float(1.0 - scores.miss_fraction.mean()) if R else 1.0


# ---------------------------------------------------------------- metrics


def confusion_counts(labels, predictions) -> tuple[int, int, int, int]:
    y = np.asarray(labels).astype(bool)
    p = np.asarray(predictions).astype(bool)
    tp = int(np.sum(y & p))
    fp = int(np.sum(~y & p))
    tn = int(np.sum(~y & ~p))
    fn = int(np.sum(y & ~p))
    return tp, fp, tn, fn


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Abnormal is the positive class; 0/0 cases resolve to 0."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class DetectionReport:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    scores: list[float] = field(default_factory=list)
    predictions: list[int] = field(default_factory=list)
    mean_latency_s: float = 0.0
    p95_latency_s: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, labels, predictions, scores=None, latency=None, config=None):
        tp, fp, tn, fn = confusion_counts(labels, predictions)
        precision, recall, f1 = precision_recall_f1(tp, fp, fn)
        latency = np.asarray(latency if latency is not None else [0.0])
        return cls(tp, fp, tn, fn, precision, recall, f1,
                   [float(s) for s in (scores if scores is not None else [])],
                   [int(p) for p in predictions],
                   float(latency.mean()) if latency.size else 0.0,
                   float(np.percentile(latency, 95)) if latency.size else 0.0,
                   config or {})

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("scores")
        out.pop("predictions")
        return out

    def to_json(self, with_scores: bool = True) -> str:
        return json.dumps(asdict(self) if with_scores else self.summary(), indent=2)

    def scores_csv(self, origins=None, labels=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "origin", "label", "predicted", "miss_fraction"])
        for i, (p, s) in enumerate(zip(self.predictions, self.scores)):
            w.writerow([i, "" if origins is None else int(origins[i]),
                        "" if labels is None else int(labels[i]), p, f"{s:.6f}"])
        return buf.getvalue()


def evaluate(model: CanBertModel, vocab: IdVocabulary, windows: WindowSet,
             config: DetectConfig) -> DetectionReport:
    if len(windows) == 0:
        raise ValueError("nothing to evaluate")
    scores = score_windows(model, vocab, windows, config)
    return DetectionReport.from_predictions(windows.sequence_labels, scores.abnormal,
                                            scores.miss_fraction, scores.latency_s,
                                            config.to_dict())


# ---------------------------------------------------------------- PCA baseline


def window_histograms(windows: WindowSet, total_tokens: int) -> np.ndarray:
    """Token-count histogram per window, (N, total_tokens)."""
    n = len(windows)
    hist = np.zeros((n, total_tokens))
    rows = np.repeat(np.arange(n), windows.T)
    np.add.at(hist, (rows, windows.tokens.reshape(-1)), 1.0)
    return hist


@dataclass
class PcaDetector:
    mean: np.ndarray
    components: np.ndarray      # (n_components, D), orthonormal rows
    eigenvalues: np.ndarray
    threshold: float = np.inf

    def reconstruction_error(self, x: np.ndarray) -> np.ndarray:
        xc = np.atleast_2d(x) - self.mean
        proj = xc @ self.components.T @ self.components
        return ((xc - proj) ** 2).sum(axis=1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.reconstruction_error(x) > self.threshold


def pca_fit(x: np.ndarray, n_components: int, eig_floor: float = 1e-12) -> PcaDetector:
    x = np.asarray(x, dtype=np.float64)
    n, D = x.shape
    if not 1 <= n_components < D:
        raise ValueError(f"n_components must lie in [1, {D})")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    return PcaDetector(mean, vecs[:, order].T.copy(), np.maximum(vals[order], eig_floor))


def pca_score(detector: PcaDetector, x: np.ndarray) -> np.ndarray:
    return detector.reconstruction_error(x)


def best_f1_threshold(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Threshold on ``score > t`` maximising F1 over a labeled calibration split."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    candidates = np.unique(scores)
    best_t, best_f1 = np.inf, -1.0
    # thresholds just below each distinct score
    for t in np.concatenate([[-np.inf], candidates[:-1]]) if candidates.size else [np.inf]:
        tp, fp, _, fn = confusion_counts(labels, scores > t)
        f1 = precision_recall_f1(tp, fp, fn)[2]
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return float(best_t), float(best_f1)


def pca_evaluate(detector: PcaDetector, windows: WindowSet, total_tokens: int) -> DetectionReport:
    x = window_histograms(windows, total_tokens)
    t0 = time.perf_counter()
    err = detector.reconstruction_error(x)
    lat = (time.perf_counter() - t0) / max(len(windows), 1)
    return DetectionReport.from_predictions(windows.sequence_labels, err > detector.threshold,
                                            err, np.full(len(windows), lat),
                                            {"method": "pca", "threshold": detector.threshold})


# ---------------------------------------------------------------- sweeps

SWEEP_COLUMNS = ("attack", "T", "m", "h", "precision", "recall", "f1", "mean_latency_ms")


def sweep(entries, config: DetectConfig) -> list[dict]:
    """F1 table over (attack, T) or (m, h) entries.

    Each entry is a dict with ``model``, ``vocab``, ``windows`` (attack name ->
    WindowSet) and optional ``m``/``h`` overrides recorded in the row.
    """
    rows = []
    digests = {e["vocab"].digest() for e in entries}
    if len(digests) > 1:
        raise ValueError("sweep entries use different vocabularies")
    for e in entries:
        model = e["model"]
        cfg = DetectConfig(**{**config.to_dict(), "mask_ratio": e.get("m", config.mask_ratio)})
        for attack, windows in e["windows"].items():
            rep = evaluate(model, e["vocab"], windows, cfg)
            rows.append({"attack": attack, "T": model.cfg.T, "m": cfg.mask_ratio,
                         "h": model.cfg.h, "precision": rep.precision, "recall": rep.recall,
                         "f1": rep.f1, "mean_latency_ms": rep.mean_latency_s * 1e3})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def bench_latency(cfg: ModelConfig, T_values=(16, 32, 64, 128, 256), repeats: int = 20,
                  dtype: str = "float32", seed: int = 0) -> list[dict]:
    """Single-window eval-mode forward latency per sequence length."""
    rows = []
    rng = np.random.default_rng(seed)
    for T in T_values:
        model = CanBertModel(ModelConfig(**{**cfg.to_dict(), "T": T}), seed=seed).astype(dtype)
        tokens = rng.integers(0, cfg.total_tokens - 2, size=T)
        model.forward(tokens)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.forward(tokens)
            times.append(time.perf_counter() - t0)
        times = np.array(times)
        rows.append({"T": T, "mean_ms": float(times.mean() * 1e3),
                     "p95_ms": float(np.percentile(times, 95) * 1e3)})
    return rows
