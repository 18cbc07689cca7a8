"""Train on the synthetic attack-free stream and evaluate all three attacks.

    python scripts/run_suite.py --T 64 --scale 0.25 --train-windows 4000 --epochs 8
"""
import argparse
import json
import logging
import time

import numpy as np

from canids.detect import DetectConfig, evaluate, masked_topk_accuracy
from canids.model import CanBertModel, ModelConfig
from canids.traffic_sim import make_benchmark_suite
from canids.training import TrainConfig, fit
from canids.windowing import build_vocab, split_train_valid, windows_from_frames


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--T", type=int, default=64)
    ap.add_argument("--scale", type=float, default=0.25)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-windows", type=int, default=4000)
    ap.add_argument("--valid-windows", type=int, default=500)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--patience", type=int, default=10)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--mask-ratio", type=float, default=0.45)
    ap.add_argument("--heads", type=int, default=1)
    ap.add_argument("--eval-every", type=int, default=0, help="evaluate attacks every n epochs")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    suite = make_benchmark_suite(args.seed, scale=args.scale)
    vocab = build_vocab(suite["attack_free"])
    normal = windows_from_frames(suite["attack_free"], vocab, args.T)
    train, valid = split_train_valid(normal, 0.1)
    train = train[:: max(1, len(train) // args.train_windows)][: args.train_windows]
    valid = valid[:: max(1, len(valid) // args.valid_windows)][: args.valid_windows]
    tests = {k: windows_from_frames(v, vocab, args.T) for k, v in suite.items() if k != "attack_free"}
    dcfg = DetectConfig(k=args.k, mask_ratio=args.mask_ratio, seed=args.seed)

    def report(epoch, model):
        acc = masked_topk_accuracy(model, vocab, valid, args.mask_ratio, args.k, args.seed)
        row = {"epoch": epoch, "valid_top5": acc}
        for name, w in tests.items():
            t0 = time.perf_counter()
            rep = evaluate(model, vocab, w, dcfg)
            row[name] = {"f1": rep.f1, "precision": rep.precision, "recall": rep.recall,
                         "tp": rep.tp, "fp": rep.fp, "tn": rep.tn, "fn": rep.fn,
                         "seconds": time.perf_counter() - t0}
        print(json.dumps(row), flush=True)
        return row

    def on_epoch(epoch, model, rep):
        if args.eval_every and epoch % args.eval_every == 0:
            report(epoch, model)
        return False

    model = CanBertModel(ModelConfig(vocab.total_tokens, T=args.T, h=args.heads), seed=args.seed)
    tcfg = TrainConfig(mask_ratio=args.mask_ratio, max_epochs=args.epochs, patience=args.patience,
                       seed=args.seed)
    model, rep = fit(model, train, valid, tcfg, on_epoch=on_epoch)
    final = report(rep.best_epoch, model)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"args": vars(args), "training": rep.to_dict(), "final": final}, fh, indent=2)


if __name__ == "__main__":
    np.seterr(over="raise", invalid="raise")
    main()
