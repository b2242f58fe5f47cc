import filecmp

import pytest

from masan.cli import main
from masan.data import CSV_HEADER


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["synth"]) == 1  # --out is required
    assert main(["synth", "--out", "x", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "o")]) == 1
    assert main(["synth", "--set", "nope=1", "--out", str(tmp_path / "o")]) == 1
    assert main(["synth", "--set", "novalue", "--out", str(tmp_path / "o")]) == 1
    assert main(["ablate", "--seeds", "a,b", "--out", str(tmp_path / "o")]) == 1
    assert "config error" in capsys.readouterr().err


def test_runtime_failure_exits_2(tmp_path, capsys):
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt"), "--out", str(tmp_path / "o")]) == 2
    assert "CheckpointError" in capsys.readouterr().err


def test_synth_is_byte_identical(tmp_path, tiny_cfg_file):
    for d in ("a", "b"):
        assert main(["synth", "--config", str(tiny_cfg_file), "--seed", "3", "--out", str(tmp_path / d)]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "labels.csv" in a and "config.txt" in a and len(a) == 2 + 2 * 8
    assert not filecmp.dircmp(tmp_path / "a", tmp_path / "b").diff_files


def test_gradcheck_seed_7_passes(capsys):
    assert main(["gradcheck", "--seed", "7"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) >= 20 and all(line.endswith("ok") for line in lines)
    assert {"conv3d", "group_norm", "upsample", "softmax", "attention", "full_model"} <= {
        line.split()[0] for line in lines}


def test_pipeline_from_synth_to_viz(tmp_path, tiny_cfg_file, capsys):
    cfg = ["--config", str(tiny_cfg_file)]
    data, pre, run = tmp_path / "data", tmp_path / "pre", tmp_path / "run"
    assert main(["synth", *cfg, "--out", str(data)]) == 0
    assert main(["pretrain", *cfg, "--data", str(data), "--out", str(pre)]) == 0
    assert (pre / "pretrain.ckpt").is_file() and len((pre / "pretrain_trace.txt").read_text().splitlines()) == 4
    assert main(["train", *cfg, "--data", str(data), "--init", str(pre / "pretrain.ckpt"),
                 "--out", str(run)]) == 0
    metrics = (run / "metrics.csv").read_text().splitlines()
    assert metrics[0] == CSV_HEADER and metrics[1].startswith("attention,0,AD_vs_NC,")
    assert not (run / "pretrain_trace.txt").exists()
    assert main(["eval", "--checkpoint", str(run / "model.ckpt"), "--data", str(data),
                 "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "metrics.csv").read_text() == (run / "metrics.csv").read_text()
    assert main(["viz", "--checkpoint", str(run / "model.ckpt"), "--data", str(data), "--subject", "sub-0001",
                 "--out", str(tmp_path / "viz")]) == 0
    assert (tmp_path / "viz" / "embedding_sub-0001.mvl").is_file()
    assert (tmp_path / "viz" / "embedding_sub-0001_axial.pgm").is_file()
    assert main(["viz", "--checkpoint", str(run / "model.ckpt"), "--subject", "sub-9999",
                 "--out", str(tmp_path / "viz")]) == 1
    assert "signal cells" in capsys.readouterr().out


def test_train_without_init_pretrains_first(tmp_path, tiny_cfg_file):
    assert main(["train", "--config", str(tiny_cfg_file), "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "pretrain_trace.txt").read_text().splitlines()) == 4
    assert len((tmp_path / "loss_trace.txt").read_text().splitlines()) == 5


def test_ablate_writes_two_rows_per_seed(tmp_path, tiny_cfg_file):
    assert main(["ablate", "--config", str(tiny_cfg_file), "--set", "pretrain_steps=0", "--seeds", "0,2",
                 "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2
    deltas = (tmp_path / "ablation_deltas.csv").read_text().splitlines()
    assert deltas[0] == "seed,d_accuracy,d_precision,d_recall" and deltas[-1].startswith("mean,")


@pytest.mark.parametrize("flag", ["-v", "--verbose"])
def test_verbose_flag_accepted(tmp_path, tiny_cfg_file, flag):
    assert main(["synth", "--config", str(tiny_cfg_file), flag, "--out", str(tmp_path)]) == 0
