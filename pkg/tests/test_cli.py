import json
import subprocess
import sys

import pytest

from canids.cli import build_parser, main

SMALL_MODEL = ["--layers", "1", "--d-model", "16", "--d-ff", "32", "--heads", "2"]


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(out), "--scale", "0.02", "--seed", "1"]) == 0
    return out


@pytest.fixture(scope="module")
def ckpt(suite, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "model"
    rc = main(["train", str(suite / "attack_free.csv"), "--out", str(out), "--T", "16",
               "--max-epochs", "1", "--max-train-windows", "200", "--max-valid-windows", "50",
               *SMALL_MODEL])
    assert rc == 0
    return out


def test_simulate_outputs(suite):
    names = {p.name for p in suite.iterdir()}
    assert {"attack_free.csv", "flooding.csv", "fuzzy.csv", "malfunction.csv", "manifest.json"} <= names
    manifest = json.loads((suite / "manifest.json").read_text())
    assert manifest["files"]["attack_free"]["attack_frames"] == 0
    assert manifest["files"]["flooding"]["attack_frames"] > 0


def test_simulate_deterministic(suite, tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--scale", "0.02", "--seed", "1"]) == 0
    a = json.loads((suite / "manifest.json").read_text())["files"]
    b = json.loads((tmp_path / "manifest.json").read_text())["files"]
    assert {k: v["sha256"] for k, v in a.items()} == {k: v["sha256"] for k, v in b.items()}


def test_simulate_missing_scenario_exit_2(tmp_path, capsys):
    assert main(["simulate", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert "no such file" in capsys.readouterr().err


def test_simulate_scenario_file(tmp_path):
    sc = {"profiles": [{"can_id": "0x100", "period": 0.01}, {"can_id": "0x316", "period": 0.02}],
          "horizon": 1.0, "attacks": [{"kind": "Flooding", "start": 0.2, "duration": 0.1}], "seed": 3}
    path = tmp_path / "sc.json"
    path.write_text(json.dumps(sc))
    assert main(["simulate", str(path), "--out", str(tmp_path / "o")]) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["files"]["scenario"]["frames"] == 350 and m["files"]["scenario"]["attack_frames"] == 200


def test_usage_error_subprocess(tmp_path):
    r = subprocess.run([sys.executable, "-m", "canids", "train", str(tmp_path / "none.csv"),
                        "--out", str(tmp_path / "x")], capture_output=True, text=True)
    assert r.returncode == 2 and "no such file" in r.stderr
    r = subprocess.run([sys.executable, "-m", "canids", "bogus"], capture_output=True, text=True)
    assert r.returncode == 2


def test_train_defaults_match_table():
    args = build_parser().parse_args(["train", "x.csv", "--out", "o"])
    assert (args.layers, args.d_model, args.d_ff, args.heads, args.dropout) == (4, 256, 512, 1, 0.1)
    assert (args.mask_ratio, args.batch_size, args.lr, args.max_epochs, args.patience) == \
        (0.45, 32, 1e-3, 200, 10)
    assert args.T == 32


def test_train_rejects_attack_data(suite, tmp_path):
    assert main(["train", str(suite / "flooding.csv"), "--out", str(tmp_path / "c"), "--T", "16",
                 *SMALL_MODEL]) == 2


def test_train_one_epoch(ckpt):
    rep = json.loads((ckpt / "training_report.json").read_text())
    assert len(rep["train_loss"]) == 1 and rep["stop_reason"] == "max_epochs"
    assert (ckpt / "weights.bin").exists() and (ckpt / "vocab.json").exists()


def test_eval_writes_reports(suite, ckpt, tmp_path):
    rc = main(["eval", str(ckpt), str(suite / "flooding.csv"), str(suite / "fuzzy.csv"),
               "--out", str(tmp_path), "--max-windows", "300"])
    assert rc == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary) == {"flooding", "fuzzy"}
    rep = json.loads((tmp_path / "flooding.report.json").read_text())
    assert rep["tp"] + rep["fp"] + rep["tn"] + rep["fn"] == 300
    assert rep["config"]["k"] == 5 and "checkpoint_hash" in rep["config"]


def test_eval_deterministic_across_threads(suite, ckpt, tmp_path):
    outs = []
    for threads in ("1", "3"):
        d = tmp_path / threads
        assert main(["eval", str(ckpt), str(suite / "fuzzy.csv"), "--out", str(d),
                     "--max-windows", "300", "--threads", threads]) == 0
        outs.append((d / "fuzzy.scores.csv").read_text())
    assert outs[0] == outs[1]


def test_T_mismatch_exit_4(suite, ckpt, tmp_path):
    assert main(["eval", str(ckpt), str(suite / "fuzzy.csv"), "--out", str(tmp_path),
                 "--T", "32"]) == 4


def test_vocab_mismatch_exit_4(suite, ckpt, tmp_path):
    other = tmp_path / "v.json"
    other.write_text(json.dumps({"0x1": 0, "0x2": 1}))
    assert main(["eval", str(ckpt), str(suite / "fuzzy.csv"), "--out", str(tmp_path / "o"),
                 "--vocab", str(other)]) == 4


def test_corrupt_checkpoint_exit_4(ckpt, suite, tmp_path):
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(ckpt, bad)
    (bad / "weights.bin").write_bytes((bad / "weights.bin").read_bytes()[:100])
    assert main(["score", str(bad), str(suite / "fuzzy.csv"), "--out", str(tmp_path / "s.csv")]) == 4


def test_build_windows_then_score(suite, ckpt, tmp_path):
    shard = tmp_path / "fuzzy.bin"
    assert main(["build-windows", str(suite / "fuzzy.csv"), "--out", str(shard), "--T", "16",
                 "--vocab", str(ckpt / "vocab.json")]) == 0
    assert main(["score", str(ckpt), str(shard), "--out", str(tmp_path / "s.csv"),
                 "--max-windows", "50"]) == 0
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "origin,label,abnormal,miss_fraction" and len(lines) == 51


def test_ingest_candump(tmp_path):
    src = tmp_path / "cap.log"
    src.write_text("(0.100000) can0 123#DEADBEEF\n(0.200000) can0 000#\nbroken\n")
    out = tmp_path / "cap.csv"
    assert main(["ingest", str(src), "--out", str(out), "--format", "candump", "--lenient"]) == 0
    meta = json.loads(out.with_suffix(".meta.json").read_text())
    assert meta["frame_count"] == 2 and meta["errors"] == 1
    assert main(["ingest", str(src), "--out", str(out), "--format", "candump"]) == 2


def test_sweep(suite, ckpt, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--checkpoints", str(ckpt), "--data", str(suite / "flooding.csv"),
                 "--out", str(out), "--max-windows", "100"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "attack,T,m,h,precision,recall,f1,mean_latency_ms" and len(lines) == 2


def test_bench(ckpt, tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert main(["bench", str(ckpt), "--T-values", "16", "32", "--repeats", "3",
                 "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert [r["T"] for r in rep["latency"]] == [16, 32]
    assert all(r["p95_ms"] >= 0 and r["mean_ms"] > 0 for r in rep["latency"])
    assert "parameters:" in capsys.readouterr().err
