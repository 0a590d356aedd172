import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dcsep import cli
from dcsep import tensor as T

BLOBS = {"dataset": {"kind": "synthetic", "n_classes": 3, "n_per_class": 20},
         "train": {"channels": [4, 8], "latent_dim": 4, "batch_size": 16,
                   "joint_epochs": 1, "kmeans_n_init": 2}}


def write_config(tmp_path, doc=BLOBS, name="run.json"):
    doc = json.loads(json.dumps(doc))
    doc.setdefault("out_dir", str(tmp_path / "out"))
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_missing_config_exits_1_with_path(tmp_path, capsys):
    missing = tmp_path / "absent.json"
    assert cli.main(["train", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_usage_error_exits_1(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--seed", "x"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        cli.main([])
    assert info.value.code == 1


def test_print_defaults(capsys):
    assert cli.main(["--print-defaults"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["train"]["alpha"] == 1.0 and doc["ablation"]["seeds"] == [0, 1, 2]
    assert cli.main(["train", "--print-defaults"]) == 0


def test_train_writes_artifacts_and_is_repeatable(tmp_path, capsys):
    config = write_config(tmp_path)
    assert cli.main(["train", "--config", config]) == 0
    out = tmp_path / "out"
    names = {p.name for p in out.iterdir()}
    assert {"checkpoint.dcae", "metrics.csv", "embeddings.csv", "projection.csv"} <= names
    first = {n: (out / n).read_bytes() for n in names}
    assert cli.main(["train", "--config", config]) == 0
    assert {n: (out / n).read_bytes() for n in names} == first
    assert "final acc" in capsys.readouterr().out


def test_seed_flag_overrides_config(tmp_path):
    config = write_config(tmp_path)
    assert cli.main(["train", "--config", config, "--seed", "5",
                     "--out", str(tmp_path / "s5")]) == 0
    saved = json.loads((tmp_path / "s5" / "config.json").read_text())
    t = saved["train"]
    assert (t["init_seed"], t["shuffle_seed"], t["augment_seed"]) == (5, 6, 7)
    assert saved["out_dir"] == str(tmp_path / "s5")


def test_eval_and_export_after_train(tmp_path, capsys):
    config = write_config(tmp_path)
    cli.main(["train", "--config", config])
    (tmp_path / "out" / "embeddings.csv").unlink()
    capsys.readouterr()
    assert cli.main(["eval", "--config", config]) == 0
    out = capsys.readouterr().out
    assert "cluster sizes" in out and "acc:" in out
    assert cli.main(["export-embeddings", "--config", config]) == 0
    assert len(rows(tmp_path / "out" / "embeddings.csv")) == 61


def test_eval_without_checkpoint_is_data_error(tmp_path):
    assert cli.main(["eval", "--config", write_config(tmp_path)]) == 2


def test_bad_idx_file_is_data_error(tmp_path):
    (tmp_path / "junk").write_bytes(b"\x00\x00\x08\x01" + bytes(8))
    doc = {"dataset": {"kind": "idx", "images": "junk"}}
    assert cli.main(["train", "--config", write_config(tmp_path, doc)]) == 2


def test_ablate_four_rows(tmp_path, capsys):
    doc = dict(BLOBS, ablation={"seeds": [0]})
    assert cli.main(["ablate", "--config", write_config(tmp_path, doc)]) == 0
    table = rows(tmp_path / "out" / "ablation.csv")
    assert table[0] == ["variant", "acc_median", "acc_min", "acc_max"]
    assert [r[0] for r in table[1:]] == ["Lr+Lc", "no_Lt", "no_Lb", "full"]


def test_imbalance_default_five_rows(tmp_path):
    assert cli.main(["imbalance", "--config", write_config(tmp_path)]) == 0
    table = rows(tmp_path / "out" / "imbalance.csv")
    assert table[0] == ["r_min", "acc"]
    assert [float(r[0]) for r in table[1:]] == [0.1, 0.3, 0.5, 0.7, 0.9]


def test_imbalance_full_retention_equals_plain_run(tmp_path, capsys):
    config = write_config(tmp_path)
    assert cli.main(["imbalance", "--config", config, "--r-min", "1.0"]) == 0
    acc = float(rows(tmp_path / "out" / "imbalance.csv")[1][1])
    cli.main(["train", "--config", config])
    assert f"final acc: {acc:.4f}" in capsys.readouterr().out


def test_imbalance_rejects_zero(tmp_path):
    assert cli.main(["imbalance", "--config", write_config(tmp_path),
                     "--r-min", "0"]) == 1


def test_divergence_exits_3(tmp_path, monkeypatch):
    from dcsep import trainer
    monkeypatch.setattr(trainer, "reconstruction_loss", lambda x, y: T.Tensor(np.inf))
    assert cli.main(["train", "--config", write_config(tmp_path)]) == 3


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 5


def test_selftest_catches_gradient_bug(monkeypatch, capsys):
    def bad_reciprocal(a):
        out = 1.0 / a.data
        return T._result("reciprocal", out, (a,), lambda g: (-1.01 * g * out * out,))

    monkeypatch.setattr(T, "reciprocal", bad_reciprocal)
    assert cli.main(["selftest"]) == 4
    assert "FAIL" in capsys.readouterr().out


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dcsep.cli", "--print-defaults"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and '"train"' in proc.stdout
