"""F1 tables over window length T (with the PCA baseline) or over the (m, h) grid.

    python scripts/sweep.py --grid T --T-values 16 32 64 --out sweep_T.csv
    python scripts/sweep.py --grid mh --T 32 --out sweep_mh.csv

Every cell trains a fresh default-size model on a strided subsample of the
attack-free stream, so a full grid is a long run on a single core.
"""
import argparse
import logging

import numpy as np

from canids.detect import (DetectConfig, best_f1_threshold, pca_evaluate, pca_fit, pca_score,
                           sweep, sweep_csv, window_histograms)
from canids.model import CanBertModel, ModelConfig
from canids.traffic_sim import make_benchmark_suite
from canids.training import TrainConfig, fit
from canids.windowing import build_vocab, split_train_valid, windows_from_frames

ATTACKS = ("flooding", "fuzzy", "malfunction")


def train_one(suite, vocab, T, m, h, args):
    normal = windows_from_frames(suite["attack_free"], vocab, T)
    train, valid = split_train_valid(normal, 0.1)
    train = train[:: max(1, len(train) // args.train_windows)][: args.train_windows]
    valid = valid[:: max(1, len(valid) // args.valid_windows)][: args.valid_windows]
    model = CanBertModel(ModelConfig(vocab.total_tokens, T=T, h=h), seed=args.seed)
    cfg = TrainConfig(mask_ratio=m, max_epochs=args.epochs, patience=args.patience, seed=args.seed)
    model, _ = fit(model, train, valid, cfg)
    return model, normal


def pca_rows(suite, vocab, normal, T, args):
    """PCA on window histograms; the threshold is tuned on the first half of each attack stream."""
    det = pca_fit(window_histograms(normal, vocab.total_tokens), args.pca_components)
    rows = []
    for name in ATTACKS:
        w = windows_from_frames(suite[name], vocab, T)
        half = len(w) // 2
        calib = w[:half]
        det.threshold, _ = best_f1_threshold(
            pca_score(det, window_histograms(calib, vocab.total_tokens)), calib.sequence_labels)
        rep = pca_evaluate(det, w[half:], vocab.total_tokens)
        rows.append({"attack": f"{name}-pca", "T": T, "m": "", "h": "", "precision": rep.precision,
                     "recall": rep.recall, "f1": rep.f1, "mean_latency_ms": rep.mean_latency_s * 1e3})
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--grid", choices=("T", "mh"), default="T")
    ap.add_argument("--T-values", type=int, nargs="+", default=[16, 32, 64, 128, 256])
    ap.add_argument("--T", type=int, default=32, help="window length for the (m, h) grid")
    ap.add_argument("--m-values", type=float, nargs="+", default=[0.15, 0.3, 0.45, 0.6])
    ap.add_argument("--h-values", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--scale", type=float, default=0.25)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-windows", type=int, default=4000)
    ap.add_argument("--valid-windows", type=int, default=500)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--patience", type=int, default=10)
    ap.add_argument("--pca-components", type=int, default=8)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    suite = make_benchmark_suite(args.seed, scale=args.scale)
    vocab = build_vocab(suite["attack_free"])
    if args.grid == "T":
        cells = [(T, 0.45, 1) for T in args.T_values]
    else:
        cells = [(args.T, m, h) for m in args.m_values for h in args.h_values]

    rows = []
    for T, m, h in cells:
        model, normal = train_one(suite, vocab, T, m, h, args)
        windows = {name: windows_from_frames(suite[name], vocab, T) for name in ATTACKS}
        cfg = DetectConfig(mask_ratio=m, seed=args.seed)
        rows += sweep([{"model": model, "vocab": vocab, "windows": windows, "m": m}], cfg)
        if args.grid == "T":
            rows += pca_rows(suite, vocab, normal, T, args)
        logging.info("T=%d m=%.2f h=%d done", T, m, h)
        with open(args.out, "w") as fh:
            fh.write(sweep_csv(rows))
    print(sweep_csv(rows), end="")


if __name__ == "__main__":
    np.seterr(over="raise", invalid="raise")
    main()
