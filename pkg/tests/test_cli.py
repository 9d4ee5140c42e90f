import csv
import json

import numpy as np
import pytest
from PIL import Image

from featsharp.cli import RunConfig, main

TINY = {
    "train": {"steps": 2, "batch_size": 2, "num_jitters": 2, "lr": 1e-3,
              "featurizer": {"input_resolution": 16, "channels": 8}},
    "dataset": {"n": 4, "seed": 1},
    "eval_dataset": {"n": 2, "seed": 2},
    "eval": {"num_jitters": 1, "mmd_samples": 30},
}

EVAL_SCHEMA = ["metric", "value"]
EVAL_METRICS = ["fidelity", "tv", "crf", "mmd2"]


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture
def trained(tmp_path, config):
    out = tmp_path / "train"
    assert main(["train", "--config", str(config), "--out", str(out), "--upsampler", "bilinear"]) == 0
    return out


class TestRunConfig:
    def test_unknown_top_level(self):
        with pytest.raises(ValueError, match="unknown"):
            RunConfig.from_dict({"trian": {}})

    def test_unknown_nested(self):
        with pytest.raises(ValueError, match="unknown"):
            RunConfig.from_dict({"eval": {"jitters": 3}})

    def test_missing_folder_validated_upfront(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RunConfig.from_dict({"dataset": {"kind": "folder", "path": str(tmp_path / "none")}})

    def test_sections_parsed(self):
        cfg = RunConfig.from_dict(TINY)
        assert cfg.train.steps == 2 and cfg.train.featurizer.channels == 8 and cfg.eval.num_jitters == 1


class TestTrainEval:
    def test_train_outputs(self, trained):
        assert (trained / "final.fskp").is_file()
        rows = list(csv.DictReader((trained / "loss.csv").open()))
        assert [int(r["step"]) for r in rows] == [0, 1]
        saved = json.loads((trained / "config.json").read_text())
        assert saved["train"]["upsampler"] == "bilinear"

    def test_eval_csv_golden_schema(self, tmp_path, config, trained):
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            code = main(["eval", "--config", str(config), "--checkpoint", str(trained / "final.fskp"),
                         "--out", str(out)])
            assert code == 0
            outs.append((out / "metrics.csv").read_text())
        reader = csv.DictReader(outs[0].splitlines())
        rows = list(reader)
        assert reader.fieldnames == EVAL_SCHEMA
        assert [r["metric"] for r in rows] == EVAL_METRICS
        assert all(np.isfinite(float(r["value"])) for r in rows)
        assert outs[0] == outs[1]
        assert json.loads((tmp_path / "e1" / "metrics.json").read_text())["metadata"]["upsampler"] == "bilinear"

    def test_eval_missing_checkpoint(self, tmp_path, config, capsys):
        code = main(["eval", "--config", str(config), "--checkpoint", str(tmp_path / "x.fskp"),
                     "--out", str(tmp_path / "o")])
        assert code == 1 and "error" in capsys.readouterr().err

    def test_eval_version_mismatch(self, tmp_path, config, trained):
        raw = bytearray((trained / "final.fskp").read_bytes())
        raw[4:8] = (9).to_bytes(4, "little")
        bad = tmp_path / "bad.fskp"
        bad.write_bytes(bytes(raw))
        assert main(["eval", "--config", str(config), "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == 1


class TestErrors:
    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1

    def test_unknown_key_in_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"stepz": 3}}))
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 1

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 1

    def test_invalid_factor(self, tmp_path, config):
        assert main(["train", "--config", str(config), "--factor", "1", "--out", str(tmp_path / "o")]) == 1

    def test_bad_thread_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FEATSHARP_THREADS", "zero")
        assert main(["cost", "--out", str(tmp_path)]) == 1

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code != 0


class TestUtilities:
    def test_upsample_side_by_side(self, tmp_path, config):
        img = np.random.default_rng(0).integers(0, 256, size=(40, 50, 3), dtype=np.uint8)
        Image.fromarray(img).save(tmp_path / "in.png")
        out = tmp_path / "viz"
        assert main(["upsample", "--config", str(config), "--image", str(tmp_path / "in.png"),
                     "--out", str(out)]) == 0
        names = {p.name for p in out.iterdir()}
        assert {"low.png", "bilinear.png", "jbu.png", "tile.png", "s2.png", "featsharp.png",
                "side_by_side.png"} <= names
        w, h = Image.open(out / "side_by_side.png").size
        assert h == 4 * 8 and w == 4 * (6 * 8 + 5)

    def test_upsample_bad_checkpoint_spec(self, tmp_path, config):
        assert main(["upsample", "--config", str(config), "--checkpoint", "featsharp", "--out", str(tmp_path)]) == 1

    def test_tiling_error(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"featurizer": {"kind": "patch_linear", "input_resolution": 16}}}))
        assert main(["tiling-error", "--config", str(p), "--levels", "1,2,3", "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader((tmp_path / "tiling_error.csv").open()))
        assert [int(r["u"]) for r in rows] == [1, 2, 3]
        assert all(float(r["mse"]) < 1e-20 for r in rows)

    def test_cost(self, tmp_path, capsys):
        assert main(["cost", "--max-x", "4", "--proof-max", "200", "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader((tmp_path / "cost.csv").open()))
        assert [float(r["f"]) for r in rows] == [1, 5, 14, 30]
        assert [float(r["g"]) for r in rows] == [1, 16, 81, 256]
        assert "True" in capsys.readouterr().out

    def test_cost_throughput(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"featurizer": {"input_resolution": 16}}}))
        assert main(["cost", "--config", str(p), "--throughput", "--out", str(tmp_path)]) == 0
        header = (tmp_path / "throughput.csv").read_text().splitlines()[0]
        assert header == "upsampler,factor,tokens,featurizer_calls,seconds,seconds_per_token"

    def test_gradcheck(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "gradcheck.csv").read_text().splitlines()
        assert lines[0] == "name,n_entries,max_abs_error,rel_error,ok"
        assert all(line.endswith("True") for line in lines[1:])
