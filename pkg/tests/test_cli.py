import json
from pathlib import Path

import numpy as np
import pytest

from wsidistill.cli import EXIT_DIVERGED, EXIT_INVALID, EXIT_OK, main
from wsidistill.distill.checkpoint import load_checkpoint
from wsidistill.harness.features import FeatureStore
from wsidistill.instances import write_png, write_rle

TINY_TOML = """
[data]
root = "{root}"
samples_per_slide = 2

[views]
global_size = 16
local_size = 8
n_local = 2
shuffle_grid = 2
multiscale_size = 32

[model]
variant_name = "tiny"
image_size = 16
patch_size = 4
embed_dim = 8
depth = 1
heads = 2
mlp_ratio = 2.0
head_hidden = 16
head_bottleneck = 8
out_dim = 4
projector_hidden = 8

[train]
batch_size = 2
epochs = 2
warmup_epochs = 1
base_lr = {lr}

[adapter]
rank = 2
finetune_epochs = 3

[probe]
epochs = 30
"""


def records(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    assert main(["synth-data", "--out", str(root), "--slides", "4", "--size", "256", "--tile-size", "64",
                 "--seed", "3"]) == EXIT_OK
    return root


def write_config(path: Path, root: Path, lr: float = 0.0005) -> str:
    path.write_text(TINY_TOML.format(root=root, lr=lr))
    return str(path)


def test_synth_data_writes_manifest_and_labels(corpus):
    assert (corpus / "manifest.json").exists()
    assert len((corpus / "labels.tsv").read_text().splitlines()) == 4


def test_bad_arguments_exit_two(tmp_path, capsys):
    assert main([]) == EXIT_INVALID
    assert main(["pretrain", "--out", str(tmp_path)]) == EXIT_INVALID  # no dataset root
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\ntau_s = -1.0\n")
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_INVALID
    assert main(["eval", "seg", "--gt", str(tmp_path / "no"), "--pred", str(tmp_path), "--out", str(tmp_path)]) \
        == EXIT_INVALID
    assert "error:" in capsys.readouterr().err


def test_pretrain_log_resume_and_deterministic(corpus, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.toml", corpus)
    out = tmp_path / "run"
    assert main(["pretrain", "--config", cfg, "--out", str(out), "--deterministic", "--steps", "2"]) == EXIT_OK
    lines = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == [0, 1]
    for key in ("lr", "lambda", "loss_main", "loss_color", "loss_mim", "loss_shuffle"):
        assert key in lines[0]
    assert main(["pretrain", "--config", cfg, "--out", str(out), "--resume", str(out / "checkpoint.ckpt"),
                 "--deterministic"]) == EXIT_OK
    state = load_checkpoint(out / "checkpoint.ckpt", restore_rng=False)
    assert state.schedule.step == state.schedule.total_steps

    # an uninterrupted run reaches the same parameters
    straight = tmp_path / "straight"
    assert main(["pretrain", "--config", cfg, "--out", str(straight), "--deterministic"]) == EXIT_OK
    other = load_checkpoint(straight / "checkpoint.ckpt", restore_rng=False)
    for p, q in zip(state.pair.student.parameters(), other.pair.student.parameters()):
        assert np.array_equal(p.detach().numpy(), q.detach().numpy())


def test_divergence_exits_three(corpus, tmp_path):
    cfg = write_config(tmp_path / "c.toml", corpus, lr=1e30)
    out = tmp_path / "run"
    assert main(["pretrain", "--config", cfg, "--out", str(out), "--deterministic"]) == EXIT_DIVERGED
    assert (out / "last_good.ckpt").exists()


@pytest.fixture(scope="module")
def checkpoint(corpus, tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    cfg = write_config(d / "c.toml", corpus)
    assert main(["pretrain", "--config", cfg, "--out", str(d), "--steps", "2", "--deterministic"]) == EXIT_OK
    return cfg, d / "checkpoint.ckpt"


def test_extract_and_probes(corpus, checkpoint, tmp_path, capsys):
    cfg, ckpt = checkpoint
    feats = tmp_path / "f.feat"
    assert main(["extract", "--config", cfg, "--checkpoint", str(ckpt), "--manifest", str(corpus),
                 "--out", str(feats)]) == EXIT_OK
    store = FeatureStore.load(feats)
    assert store.row_count == 64 and store.dim == 8
    capsys.readouterr()

    report = tmp_path / "report"
    assert main(["probe", "linear", "--config", cfg, "--features", str(feats), "--labels", str(corpus),
                 "--report", str(report)]) == EXIT_OK
    (rec,) = records(capsys)
    assert rec["probe"] == "linear" and 0.0 <= rec["acc"] <= 1.0
    assert (report / "probe_linear.csv").exists()

    assert main(["probe", "mil", "--config", cfg, "--features", str(feats), "--labels", str(corpus)]) == EXIT_OK
    (rec,) = records(capsys)
    assert rec["probe"] == "mil"

    (tmp_path / "partial.tsv").write_text("slide_0000\t0\n")
    assert main(["probe", "linear", "--config", cfg, "--features", str(feats),
                 "--labels", str(tmp_path / "partial.tsv")]) == EXIT_INVALID


def test_adapt_fewshot_then_eval(corpus, checkpoint, tmp_path, capsys):
    cfg, ckpt = checkpoint
    cache = tmp_path / "cache"
    assert main(["adapt", "fewshot", "--config", cfg, "--checkpoint", str(ckpt), "--train-manifest", str(corpus),
                 "--shots", "2", "--out", str(cache)]) == EXIT_OK
    (rec,) = records(capsys)
    assert rec["shots"] == 2 and rec["support_acc"] == 1.0
    assert main(["adapt", "eval", "--cache", str(cache), "--test-manifest", str(corpus)]) == EXIT_OK
    (rec,) = records(capsys)
    assert rec["n_test"] == 64 and 0.0 <= rec["acc"] <= 1.0
    assert main(["adapt", "fewshot", "--config", cfg, "--train-manifest", str(corpus), "--shots", "100",
                 "--out", str(cache)]) == EXIT_INVALID


def test_eval_seg_and_report(tmp_path, capsys):
    gt, pred = tmp_path / "gt", tmp_path / "pred"
    gt.mkdir()
    pred.mkdir()
    labels = np.zeros((8, 8), int)
    labels[1:4, 1:4] = 1
    labels[5:7, 5:8] = 2
    write_png(labels, gt / "a.png")
    write_rle(labels, pred / "a.rle")
    out = tmp_path / "seg"
    assert main(["eval", "seg", "--gt", str(gt), "--pred", str(pred), "--out", str(out)]) == EXIT_OK
    (rec,) = records(capsys)
    assert rec["aji"] == 1.0 and rec["pq"] == 1.0 and rec["dice"] == 1.0
    assert (out / "segmentation.csv").read_text().splitlines()[0] == "image,dice,aji,dq,sq,pq"

    log = tmp_path / "log.jsonl"
    log.write_text(json.dumps({"data_fraction": 0.1, "acc": 0.6}) + "\n" + json.dumps({"data_fraction": 1.0,
                                                                                        "acc": 0.9}) + "\n")
    assert main(["report", str(log), "--out", str(tmp_path / "rep")]) == EXIT_OK
    (rec,) = records(capsys)
    assert rec["records"] == 2
    assert sorted(p.name for p in (tmp_path / "rep").iterdir()) == ["metrics.csv", "metrics.png"]
