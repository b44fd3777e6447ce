import json
import subprocess
import sys

import numpy as np
import pytest

from ltfe import ltf1
from ltfe.cli import run

TINY = {"image_size": 8, "image_channels": 2, "feature_channels": 3, "hidden_dim": 4,
        "field_hidden": 4, "num_scenes": 4, "epochs": 1}


def call(capsys, *argv):
    code = run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def fmap(tmp_path):
    path = tmp_path / "f0.ltf"
    ltf1.write(path, np.random.default_rng(0).standard_normal((8, 8, 3)))
    return path


class TestSchedule:
    def test_paper_defaults(self, capsys):
        code, out, _ = call(capsys, "schedule")
        assert code == 0
        assert out["rows"][0]["t"] == 1 and out["rows"][0]["sigma"] == 1.2
        assert len(out["rows"]) == 8
        assert out["config"]["schedule"]["T"] == 8
        assert set(out["plans"]) == {"progressive", "equal_step", "one_shot"}

    def test_zero_steps(self, capsys):
        code, _, err = call(capsys, "schedule", "--set", "schedule.T=0")
        assert code == 2 and err["error"] == "invalid_argument"


class TestResolvedConfig:
    def test_echo_is_file_plus_overrides(self, capsys, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"lr": 0.01, "schedule": {"T": 5, "gamma": 1.1}, "epochs": 2}))
        code, out, _ = call(capsys, "schedule", "--config", path, "--set", "schedule.T=4",
                            "--set", "epochs=3", "--strategy", "one_shot", "--include-positive",
                            "--infer-T", "1", "--seed", "7")
        assert code == 0
        cfg = out["config"]
        assert cfg["lr"] == 0.01 and cfg["epochs"] == 3 and cfg["seed"] == 7
        assert cfg["schedule"] == {"alpha0": 0.2, "lam": 0.2, "sigma0": 1.0, "gamma": 1.1, "T": 4}
        assert (cfg["strategy"], cfg["include_positive"], cfg["infer_T"]) == ("one_shot", True, 1)
        assert cfg["literal_eq1"] is False

    @pytest.mark.parametrize("argv", [
        ["--set", "bogus=1"],
        ["--set", "schedule.beta=1"],
        ["--set", "lr"],
        ["--set", "layer_index=7"],
        ["--infer-T", "9"],
        ["--strategy", "sudden"],
        ["--seed", "x"],
    ])
    def test_usage_errors(self, capsys, argv):
        code, out, err = call(capsys, "schedule", *argv)
        assert code == 2 and out is None and "error" in err

    def test_missing_config(self, capsys, tmp_path):
        code, _, err = call(capsys, "schedule", "--config", tmp_path / "absent.json")
        assert code == 2
        assert str(tmp_path / "absent.json") in err["message"]

    def test_bad_config(self, capsys, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert call(capsys, "schedule", "--config", tmp_path / "c.json")[0] == 2
        (tmp_path / "c.json").write_text(json.dumps({"epoch": 3}))
        assert call(capsys, "schedule", "--config", tmp_path / "c.json")[0] == 2


class TestEvolve:
    def test_writes_snapshots(self, capsys, fmap, tmp_path):
        out_dir = tmp_path / "evo"
        code, out, _ = call(capsys, "evolve", "--input", fmap, "--out", out_dir, "--set", "schedule.T=3",
                            "--set", "infer_T=1")
        assert code == 0
        assert [r["t"] for r in out["trajectory"]] == [1, 2, 3]
        snaps = [ltf1.read(out_dir / f"step_{t:02d}.ltf") for t in (1, 2, 3)]
        assert all(s.shape == (8, 8, 3) for s in snaps)
        assert json.loads((out_dir / "trajectory.json").read_text()) == out["trajectory"]

    def test_seeded(self, capsys, fmap, tmp_path):
        a = call(capsys, "evolve", "--input", fmap, "--seed", "3")[1]["trajectory"]
        b = call(capsys, "evolve", "--input", fmap, "--seed", "3")[1]["trajectory"]
        c = call(capsys, "evolve", "--input", fmap, "--seed", "4")[1]["trajectory"]
        assert a == b and a != c

    def test_zero_steps(self, capsys, fmap):
        assert call(capsys, "evolve", "--input", fmap, "--set", "schedule.T=0")[0] == 2

    def test_missing_input(self, capsys, tmp_path):
        assert call(capsys, "evolve")[0] == 2
        code, _, err = call(capsys, "evolve", "--input", tmp_path / "nope.ltf")
        assert code == 2 and str(tmp_path / "nope.ltf") in err["message"]

    def test_malformed(self, capsys, tmp_path):
        bad = tmp_path / "bad.ltf"
        bad.write_bytes(b"LTF1\x01\x02\x00\x00\x00" + bytes(8))
        code, _, err = call(capsys, "evolve", "--input", bad)
        assert code == 2 and err["error"] == "format"
        assert "byte offset 9" in err["message"]

    def test_wrong_rank(self, capsys, tmp_path):
        path = tmp_path / "v.ltf"
        ltf1.write(path, np.ones(4))
        assert call(capsys, "evolve", "--input", path)[0] == 2

    def test_non_finite_input(self, capsys, tmp_path):
        path = tmp_path / "nan.ltf"
        ltf1.write(path, np.full((4, 4, 1), np.nan))
        code, _, err = call(capsys, "evolve", "--input", path)
        assert code == 3 and err["error"] == "numerical"


class TestPipelineCommands:
    @pytest.mark.parametrize("command", ["train", "infer", "benchmark"])
    def test_seed_mandatory(self, capsys, command, tmp_path):
        extra = [] if command == "train" else ["--model", tmp_path]
        code, _, err = call(capsys, command, "--out", tmp_path, *extra)
        assert code == 2 and "--seed" in err["message"]

    def test_train_infer_kernels(self, capsys, tiny_config, tmp_path):
        ck = tmp_path / "ck"
        code, out, _ = call(capsys, "train", "--config", tiny_config, "--seed", "1", "--out", ck)
        assert code == 0
        assert out["steps"] == 4 and out["config"]["seed"] == 1
        assert (ck / "model.ltf").is_file() and (ck / "metrics.csv").is_file()
        assert (ck / "metrics.csv").read_text().splitlines()[0] == \
            "epoch,step,l_cls,l_reg,l_intra,l_inter,l_align,l_total"

        code, out, _ = call(capsys, "infer", "--model", ck, "--seed", "2", "--count", "3", "--knob", "0.5")
        assert code == 0
        assert out["config"]["image_size"] == 8 and len(out["scenes"]) == 3
        assert 0 <= out["accuracy"] <= 100
        code, base, _ = call(capsys, "infer", "--model", ck, "--seed", "2", "--count", "3", "--infer-T", "0")
        assert base["scenes"][0]["tau_hat"] is None

        code, out, _ = call(capsys, "kernels", "--model", ck, "--config", tiny_config, "--out", tmp_path / "k")
        assert code == 0 and len(out["kernels"]) == 8
        assert all(0.0 <= r["tau_hat"] <= 1.0 for r in out["kernels"])
        assert max(r["tau_hat"] for r in out["kernels"]) == 1.0
        assert ltf1.read(tmp_path / "k" / "kernel_01.ltf").shape == (3, 3, 3, 3)

    def test_infer_missing_model(self, capsys, tmp_path):
        code, _, err = call(capsys, "infer", "--model", tmp_path / "none", "--seed", "0")
        assert code == 2 and str(tmp_path / "none") in err["message"]

    def test_benchmark(self, capsys, tiny_config, tmp_path):
        code, out, _ = call(capsys, "benchmark", "--config", tiny_config, "--seed", "0", "--knobs", "0,0.5",
                            "--eval-seeds", "2", "--count", "2", "--out", tmp_path)
        assert code == 0
        assert [(r["knob"], r["model"]) for r in out["table"]] == [
            (0.0, "ltfe"), (0.0, "baseline"), (0.5, "ltfe"), (0.5, "baseline")]
        header = (tmp_path / "benchmark.csv").read_text().splitlines()[0]
        assert header == "knob,model,n,mean,std,seed_0,seed_1"

    def test_benchmark_empty(self, capsys, tiny_config):
        code, out, _ = call(capsys, "benchmark", "--config", tiny_config, "--seed", "0", "--knobs", "")
        assert code == 0 and out["table"] == []


def test_gradcheck(capsys):
    code, out, _ = call(capsys, "gradcheck")
    assert code == 0 and out["passed"]
    assert set(out["modules"]) == {"diffcore", "perturb", "temporal", "liquid", "align", "pipeline"}
    assert all(v < 1e-4 for v in out["modules"].values())
    assert set(out["pipeline_groups"]) == {"extractor", "lstm", "fusion", "field", "w0", "head"}


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ltfe", "schedule", "--set", "schedule.T=2", "--set", "infer_T=1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["rows"][1]["t"] == 2
    proc = subprocess.run([sys.executable, "-m", "ltfe"], capture_output=True, text=True)
    assert proc.returncode == 2
