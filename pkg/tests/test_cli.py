"""End-user command-line behaviour: exit codes, artifacts, determinism."""

import json
import os

import numpy as np
import pytest
import yaml

from sipl_kit.checkpoint import Checkpoint
from sipl_kit.cli import main
from sipl_kit.degrade import TaskTemplate, build_corpus, load_png

from conftest import tiny_model

TINY_FLAGS = ["--base-channels", "8", "--n-scales", "2", "--blocks-per-scale", "1",
              "--n-dict-entries", "8"]


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("corpus"))
    rc = main(["gen-data", "--out", out, "--tasks", "desk", "--n", "10",
               "--size", "32"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def cli_run(cli_corpus, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    rc = main(["train", "--data", cli_corpus, "--out", out, "--regime", "sipl",
               "--epochs", "1", "--seed", "0", *TINY_FLAGS])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# gen-data

def test_gen_data_artifacts_and_echo(cli_corpus, capsys):
    assert os.path.exists(os.path.join(cli_corpus, "manifest.jsonl"))
    with open(os.path.join(cli_corpus, "effective_config.yaml")) as fh:
        cfg = yaml.safe_load(fh)
    assert cfg["corpus"]["n_per_task"] == 10
    assert cfg["corpus"]["img_size"] == 32
    assert cfg["train"]["epochs"] == 30  # defaults echoed alongside overrides


def test_gen_data_deterministic(tmp_path, capsys):
    outs = []
    for sub in ("a", "b"):
        out = str(tmp_path / sub)
        assert main(["gen-data", "--out", out, "--tasks", "desk", "--n", "4",
                     "--size", "32"]) == 0
        outs.append((out, capsys.readouterr().out))
    hash_a = [l for l in outs[0][1].splitlines() if l.startswith("corpus_hash:")]
    hash_b = [l for l in outs[1][1].splitlines() if l.startswith("corpus_hash:")]
    assert hash_a == hash_b and hash_a
    with open(os.path.join(outs[0][0], "manifest.jsonl"), "rb") as f1, \
         open(os.path.join(outs[1][0], "manifest.jsonl"), "rb") as f2:
        assert f1.read() == f2.read()


def test_gen_data_cdd11_task_dirs(tmp_path, capsys):
    out = str(tmp_path / "cdd")
    assert main(["gen-data", "--out", out, "--tasks", "cdd11", "--n", "2",
                 "--size", "32"]) == 0
    task_dirs = [d for d in os.listdir(out)
                 if os.path.isdir(os.path.join(out, d))]
    assert len(task_dirs) == 11
    assert capsys.readouterr().out.count("pairs: 22") == 1


def test_gen_data_unknown_task_exits_2(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x"),
                 "--tasks", "sharpen"]) == 2
    assert "usage error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train

def test_train_artifacts(cli_run, capsys):
    for name in ("best.ckpt", "final.ckpt", "train_log.jsonl",
                 "effective_config.yaml"):
        assert os.path.exists(os.path.join(cli_run, name)), name


def test_train_unknown_config_key_exits_2(cli_corpus, tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("train:\n  learning_rate: 0.1\n")
    rc = main(["train", "--data", cli_corpus, "--out", str(tmp_path / "o"),
               "--config", str(cfg)])
    assert rc == 2
    assert "unknown config key: train.learning_rate" in capsys.readouterr().err


def test_train_malformed_yaml_exits_2(cli_corpus, tmp_path, capsys):
    cfg = tmp_path / "broken.yaml"
    cfg.write_text("epochs: [not, a, scalar\n")
    rc = main(["train", "--data", cli_corpus, "--out", str(tmp_path / "o"),
               "--config", str(cfg)])
    assert rc == 2
    err = capsys.readouterr().err
    assert "usage error" in err and "not valid YAML" in err


def test_train_missing_corpus_exits_3(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nope"),
               "--out", str(tmp_path / "o"), "--epochs", "0"])
    assert rc == 3
    assert "data error" in capsys.readouterr().err


def test_train_divergence_exits_4(cli_corpus, tmp_path, capsys):
    rc = main(["train", "--data", cli_corpus, "--out", str(tmp_path / "o"),
               "--regime", "baseline", "--epochs", "2", "--lr", "1e12",
               *TINY_FLAGS])
    assert rc == 4
    assert "numeric failure" in capsys.readouterr().err


def test_help_shows_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "(default 30)" in out          # epochs
    assert "--p-selfpi" in out


# ---------------------------------------------------------------------------
# eval

def test_eval_identity_corpus_sentinel(tmp_path, capsys):
    """A do-nothing degradation plus the identity-init model must hit the
    PSNR sentinel and SSIM 1 exactly."""
    plain = TaskTemplate("hazefree", ("haze",),
                         {"haze": {"beta": 0.0, "airlight": 0.9}})
    root = str(tmp_path / "plain")
    build_corpus(root, [plain], 6, 0, img_hw=(32, 32))
    rc = main(["eval", "--data", root, "--iters", "0", *TINY_FLAGS])
    assert rc == 0
    out = capsys.readouterr().out
    assert "hazefree PSNR/SSIM" in out
    row = [l for l in out.splitlines() if l.startswith("eval")]
    assert row and row[0].count("100.00/1.0000") == 2  # task and overall


def test_eval_writes_reports(cli_corpus, cli_run, tmp_path, capsys):
    out = str(tmp_path / "metrics")
    rc = main(["eval", "--data", cli_corpus, "--ckpt",
               os.path.join(cli_run, "best.ckpt"), "--iters", "1", "--out", out])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "noise25 PSNR/SSIM" in stdout and "rain PSNR/SSIM" in stdout
    for name in ("metrics.jsonl", "metrics.csv", "metrics.txt",
                 "effective_config.yaml"):
        assert os.path.exists(os.path.join(out, name)), name


# ---------------------------------------------------------------------------
# infer

def save_identity_ckpt(path):
    model = tiny_model()
    Checkpoint.from_model(model, {"model": model.build_config()}, 0).save(path)


def test_infer_zero_iters_equals_plain_forward(cli_corpus, tmp_path, capsys):
    ckpt = str(tmp_path / "id.ckpt")
    save_identity_ckpt(ckpt)
    with open(os.path.join(cli_corpus, "manifest.jsonl")) as fh:
        rec = json.loads(fh.readline())
    png = os.path.join(cli_corpus, rec["path_degraded"])
    gt = os.path.join(cli_corpus, rec["path_clean"])

    out0, out2 = str(tmp_path / "t0"), str(tmp_path / "t2")
    assert main(["infer", "--ckpt", ckpt, "--input", png, "--gt", gt,
                 "--out", out0, "--iters", "0"]) == 0
    assert "iter 0: psnr" in capsys.readouterr().out
    assert main(["infer", "--ckpt", ckpt, "--input", png, "--out", out2,
                 "--iters", "2", "--pi-mode", "none"]) == 0

    with open(os.path.join(out0, "I0.png"), "rb") as fh:
        plain = fh.read()
    for name in ("I0.png", "I1.png", "I2.png"):
        with open(os.path.join(out2, name), "rb") as fh:
            assert fh.read() == plain, name
    assert os.path.exists(os.path.join(out2, "trace_metrics.jsonl"))
    np.testing.assert_array_equal(load_png(os.path.join(out0, "I0.png")),
                                  load_png(png))


def test_infer_missing_input_exits_3(tmp_path, capsys):
    ckpt = str(tmp_path / "id.ckpt")
    save_identity_ckpt(ckpt)
    rc = main(["infer", "--ckpt", ckpt, "--input", str(tmp_path / "no.png"),
               "--out", str(tmp_path / "o")])
    assert rc == 3


# ---------------------------------------------------------------------------
# ablate + report

def test_ablate_and_report_roundtrip(cli_corpus, tmp_path, capsys):
    out = str(tmp_path / "ablate")
    rc = main(["ablate", "--data", cli_corpus, "--out", out, "--seeds", "1",
               "--epochs", "1", *TINY_FLAGS])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "check pl_vs_baseline:" in stdout
    assert "check strict_ladder:" in stdout

    regen = str(tmp_path / "regen")
    assert main(["report", "--src", out, "--out", regen]) == 0
    with open(os.path.join(out, "report.txt"), "rb") as f1, \
         open(os.path.join(regen, "report.txt"), "rb") as f2:
        assert f1.read() == f2.read()


def test_report_cost_table(cli_run, tmp_path, capsys):
    out = str(tmp_path / "cost")
    rc = main(["report", "--src", str(tmp_path), "--out", out, "--cost-ckpt",
               os.path.join(cli_run, "best.ckpt"), "--hw", "32"])
    assert rc == 0
    assert "flops" in capsys.readouterr().out.lower()
    assert os.path.exists(os.path.join(out, "cost.txt"))


def test_report_empty_src_exits_3(tmp_path, capsys):
    assert main(["report", "--src", str(tmp_path)]) == 3
    assert "nothing to report" in capsys.readouterr().err
