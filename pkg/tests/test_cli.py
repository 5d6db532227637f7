import io
import json
import sys

import pytest

from sumrec.cli import main

CONFIG = """
[data]
n_users = 60
n_items = 40
D = 4
seq_len_mean = 6
seq_len_cap = 10
[train]
D = 4
K = 3
hidden = 8
batch_size = 16
max_epochs = 2
learning_rate = 0.01
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.ini"
    cfg.write_text(CONFIG)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data/dataset.txt"),
                 "--out", str(root / "train")]) == 0
    return root, cfg


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_gen_data_and_train_outputs(workspace):
    root, _ = workspace
    assert (root / "data/dataset.txt").read_text().startswith("sumrec-dataset 1\n")
    m = manifest(root / "train")
    assert m["command"] == "train" and m["seed"] == 0 and "wall_seconds" in m["timings"]
    assert (root / "train/checkpoint.json").exists()
    assert (root / "train/history.csv").read_text().startswith("epoch,train_loss,valid_gauc")


def test_eval_prints_metrics_and_writes_csv(workspace, capsys):
    root, cfg = workspace
    out = root / "eval"
    assert main(["eval", "--config", str(cfg), "--data", str(root / "data/dataset.txt"),
                 "--checkpoint", str(root / "train/checkpoint.json"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    for name in ("gAUC", "LogLoss", "NDCG@3"):
        assert name in text
    assert (out / "eval.csv").read_text().startswith("split,gauc,logloss,ndcg3")
    assert manifest(out)["results"]["metrics"]["gauc"] == pytest.approx(manifest(root / "train")["results"]["test"]["gauc"])


def test_ablate_emits_five_rows(workspace):
    root, cfg = workspace
    out = root / "ablate"
    assert main(["ablate", "--config", str(cfg), "--data", str(root / "data/dataset.txt"),
                 "--epochs", "1", "--out", str(out)]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert len(lines) == 6
    assert [l.split(",")[0] for l in lines[1:]] == [
        "SUM", "w/o instance-level att", "w/o proximity debuff", "w/o highway channel", "reading operation (-)"]


def test_sweep_k_covers_sum_and_rum(workspace):
    root, cfg = workspace
    out = root / "sweep"
    assert main(["sweep-k", "--config", str(cfg), "--data", str(root / "data/dataset.txt"),
                 "--epochs", "1", "--ks", "3,4", "--out", str(out)]) == 0
    rows = (out / "sweep_k.csv").read_text().splitlines()
    assert rows[0].startswith("model,K,gauc,ndcg3,logloss,utilization")
    assert {tuple(r.split(",")[:2]) for r in rows[1:]} == {("SUM", "3"), ("RUM", "3"), ("SUM", "4"), ("RUM", "4")}


def test_inspect_exports(workspace):
    root, cfg = workspace
    out = root / "inspect"
    assert main(["inspect", "--config", str(cfg), "--data", str(root / "data/dataset.txt"),
                 "--checkpoint", str(root / "train/checkpoint.json"), "--out", str(out)]) == 0
    assert (out / "heatmap.csv").read_text().startswith("user_id,step,ch0,ch1,ch2")
    assert (out / "readout_profile.csv").read_text().startswith("channel,highway,proportion")
    util = manifest(out)["results"]["utilization"]
    assert 0 <= util <= 1


def test_serve_pipe(workspace, monkeypatch, capsys):
    root, cfg = workspace
    requests = [{"op": "event", "user_id": "a", "item_id": "i3"}, {"op": "score", "user_id": "a", "candidates": ["i1"]}]
    monkeypatch.setattr(sys, "stdin", io.StringIO("\n".join(json.dumps(r) for r in requests) + "\n"))
    assert main(["serve", "--checkpoint", str(root / "train/checkpoint.json"),
                 "--data", str(root / "data/dataset.txt"), "--out", str(root / "serve")]) == 0
    replies = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert replies[0]["version"] == 1 and replies[1]["version"] == 1 and 0 < replies[1]["scores"][0] < 1
    assert (root / "serve/serve_manifest.json").exists()


def test_errors_exit_nonzero_and_clean_up(workspace, tmp_path, capsys):
    root, cfg = workspace
    out = tmp_path / "bad"
    assert main(["eval", "--data", str(root / "data/dataset.txt"), "--checkpoint", "missing.json",
                 "--out", str(out)]) == 1
    assert "checkpoint not found" in capsys.readouterr().err
    assert not out.exists()
    assert main(["eval", "--k", "7", "--data", str(root / "data/dataset.txt"),
                 "--checkpoint", str(root / "train/checkpoint.json"), "--out", str(out)]) == 1
    assert "does not match checkpoint K=3" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train", "--bogus"])


def test_commands_are_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--data", str(root / "data/dataset.txt"),
                 "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again/checkpoint.json").read_bytes() == (root / "train/checkpoint.json").read_bytes()
