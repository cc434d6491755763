import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from scse.cli import main
from scse.config import load_run_config
from scse.data import read_tensor_file, write_tensor_file

SMALL = {
    "arch": {"kind": "unet", "preset": "desk", "se_variant": "scse"},
    "train": {"max_epochs": 2, "seed": 3},
    "data": {"num_train": 8, "num_val": 2, "num_test": 6, "size": 16, "seed": 5},
}


def _config(tmp_path, doc=SMALL, name="run.yaml", out="out"):
    doc = json.loads(json.dumps(doc))
    doc.setdefault("output", {})["dir"] = str(tmp_path / out)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestGradcheck:
    def test_scse_passes(self, capsys):
        assert main(["gradcheck", "--block", "scse", "--seed", "7"]) == 0
        out = capsys.readouterr().out
        assert "PASS scse" in out and "max relative error" in out

    def test_unknown_block(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gradcheck", "--block", "bogus"])
        assert exc.value.code == 2

    def test_repeatable_verdict(self, capsys):
        assert main(["gradcheck", "--block", "cse", "--eps", "1e-5"]) == 0
        first = capsys.readouterr().out
        assert main(["gradcheck", "--block", "cse", "--eps", "1e-5"]) == 0
        assert capsys.readouterr().out == first

    @pytest.mark.parametrize("block", ["sse", "conv", "loss-ce", "loss-dice"])
    def test_other_blocks(self, block, capsys):
        assert main(["gradcheck", "--block", block]) == 0


def _paramcount(capsys, *args):
    assert main(["paramcount", *args]) == 0
    lines = capsys.readouterr().out.splitlines()
    return {l.split()[0] + " " + l.split()[1]: l.split()[-1] for l in lines if l.count(" ") >= 2 and "," not in l}


class TestParamcount:
    def test_full_scale_scse(self, capsys):
        vals = _paramcount(capsys, "--preset", "full", "--se", "scse")
        assert vals["se overhead"] == "33280"
        assert 1.3 <= float(vals["overhead pct"].rstrip("%")) <= 1.9

    def test_none(self, capsys):
        vals = _paramcount(capsys, "--se", "none")
        assert vals["se overhead"] == "0" and vals["overhead pct"] == "0.000%"

    def test_desk_scse(self, capsys):
        assert _paramcount(capsys, "--preset", "desk", "--se", "scse")["se overhead"] == "11120"

    def test_unknown_key_named(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"train": {"learning_rate": 0.1}}))
        assert main(["paramcount", "--config", str(path)]) == 2
        assert "train.learning_rate" in capsys.readouterr().err


class TestTrainEval:
    def test_train_outputs_and_rerun(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        assert main(["train", "--config", str(cfg)]) == 0
        out = tmp_path / "out"
        assert {p.name for p in out.iterdir()} >= {"checkpoint.setf", "log.csv", "manifest.json"}
        first_log = (out / "log.csv").read_bytes()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 3 and len(manifest["config_hash"]) == 64

        assert main(["train", "--config", str(cfg), "--output", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again" / "log.csv").read_bytes() == first_log

        assert main(["eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.setf")]) == 0
        summary = _rows(out / "eval_test_summary.csv")[0]
        assert summary["cell"] == f"{float(summary['mean']):.3f}±{float(summary['std']):.3f}"
        assert len(_rows(out / "eval_test_per_class.csv")) == 4 * 6

        # evaluating again from the saved checkpoint reproduces the same Dice
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.setf"),
                     "--output", str(tmp_path / "ev2")]) == 0
        assert _rows(tmp_path / "ev2" / "eval_test_summary.csv")[0] == summary

    def test_batch_size_zero(self, tmp_path, capsys):
        doc = json.loads(json.dumps(SMALL))
        doc["train"]["batch_size"] = 0
        assert main(["train", "--config", str(_config(tmp_path, doc))]) == 2
        assert "train.batch_size" in capsys.readouterr().err

    def test_incompatible_checkpoint(self, tmp_path, capsys):
        ckpt = tmp_path / "wrong.setf"
        write_tensor_file(ckpt, {"enc0.conv0.weight": np.zeros((3, 1, 3, 3))})
        assert main(["eval", "--config", str(_config(tmp_path)), "--checkpoint", str(ckpt)]) == 1
        assert "enc0.conv0.weight" in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == 2

    def test_flags_override_file(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        assert main(["train", "--config", str(cfg), "--max-epochs", "1", "--seed", "9"]) == 0
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["seed"] == 9 and manifest["epochs_run"] == 1

    def test_dataset_dir_round_trip(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        ddir = tmp_path / "data"
        assert main(["generate-data", "--config", str(cfg), "--dataset-dir", str(ddir)]) == 0
        assert sorted(p.name for p in ddir.iterdir()) == ["test.setf", "train.setf", "val.setf"]
        assert "image/0" in read_tensor_file(ddir / "train.setf")
        assert main(["train", "--config", str(cfg), "--dataset-dir", str(ddir), "--max-epochs", "1"]) == 0


def test_nonfinite_abort_exit_code(tmp_path, capsys):
    doc = json.loads(json.dumps(SMALL))
    doc["train"].update(initial_lr=1e6, momentum=0.0)
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(_config(tmp_path, doc))]) == 3
    assert "numeric abort" in capsys.readouterr().err


def test_ablate_small_grid(tmp_path, capsys):
    doc = json.loads(json.dumps(SMALL))
    doc["train"]["max_epochs"] = 1
    cfg = _config(tmp_path, doc)
    assert main(["ablate", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    rows = _rows(out / "grid.csv")
    assert len(rows) == 12
    assert {r["variant"] for r in rows} == {"none", "cse", "sse", "scse"}
    for r in rows:
        assert r["status"] == "ok"
        assert r["p_vs_none"] or r["p_method"] or r["variant"] == "none"
    table = (out / "table.txt").read_text().splitlines()
    assert "No SE Block" in table[0] and "+ scSE Block" in table[0]
    assert sum(l.startswith("  Wilcoxon p") for l in table) == 3
    assert len(list((out / "cells").iterdir())) == 12

    first = (out / "grid.csv").read_text()
    assert main(["ablate", "--config", str(cfg)]) == 0
    strip = lambda text: [l.rsplit(",", 1)[0] for l in text.splitlines()]  # drop wall-clock column
    assert strip((out / "grid.csv").read_text()) == strip(first)


def test_ablate_bad_variant(tmp_path, capsys):
    assert main(["ablate", "--config", str(_config(tmp_path)), "--variants", "none,xse"]) == 2


def test_shipped_config_is_valid():
    cfg = load_run_config(Path(__file__).parents[1] / "configs" / "desk.yaml")
    cfg.check_consistency()
    assert cfg.arch.to_spec().se_block_channels() == [8, 16, 32, 64, 64, 32, 16, 8]
