import hashlib
import json

import pytest

from somnoscore import arch
from somnoscore.cli import main


def digest(directory, skip=("run_manifest.json",)):
    h = hashlib.sha256()
    for p in sorted(directory.iterdir()):
        if p.name not in skip:
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> split -> train (2 iterations) -> eval on a tiny cohort."""
    root = tmp_path_factory.mktemp("pipe")
    assert run("synth", "--patients", 8, "--epochs", 12, "--seed", 3, "--out", root / "data") == 0
    assert run("split", "--data", root / "data", "--seed", 1, "--out", root / "split") == 0
    assert run("train", "--data", root / "data", "--split", root / "split" / "split.json",
               "--signals", "C4A1,EMG", "--patients-per-batch", 2, "--seed", 4,
               "--max-iterations", 2, "--out", root / "model") == 0
    assert run("eval", "--model", root / "model" / "model.ckpt", "--data", root / "data",
               "--split", root / "split" / "split.json", "--split-part", "test",
               "--out", root / "eval") == 0
    return root


class TestSynth:
    def test_file_contract(self, tmp_path):
        assert run("synth", "--patients", 2, "--epochs", 20, "--seed", 7, "--out", tmp_path / "d") == 0
        files = sorted(p.name for p in (tmp_path / "d").iterdir())
        assert "manifest.json" in files
        assert len([f for f in files if f.endswith(".f32")]) == 6
        assert len([f for f in files if f.endswith(".hyp")]) == 2

    def test_deterministic_digest(self, tmp_path):
        for name in ("a", "b"):
            run("synth", "--patients", 2, "--epochs", 5, "--seed", 7, "--out", tmp_path / name)
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_zero_patients(self, tmp_path, capsys):
        assert run("synth", "--patients", 0, "--epochs", 5, "--out", tmp_path / "d") == 2
        assert "num_patients" in capsys.readouterr().err

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SOMNOSCORE_SEED", "7")
        run("synth", "--patients", 1, "--epochs", 3, "--out", tmp_path / "env")
        run("synth", "--patients", 1, "--epochs", 3, "--seed", 7, "--out", tmp_path / "flag")
        assert digest(tmp_path / "env") == digest(tmp_path / "flag")
        manifest = json.loads((tmp_path / "env" / "run_manifest.json").read_text())
        assert manifest["seed"] == 7

    def test_bad_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SOMNOSCORE_SEED", "abc")
        assert run("synth", "--patients", 1, "--epochs", 3, "--out", tmp_path / "d") == 2


class TestPipeline:
    def test_outputs(self, pipeline):
        assert {p.name for p in (pipeline / "model").iterdir()} >= {
            "model.ckpt", "history.csv", "run_manifest.json"}
        assert {p.name for p in (pipeline / "eval").iterdir()} >= {
            "metrics.json", "confusion.csv", "predictions.csv", "run_manifest.json"}

    def test_run_manifest_fields(self, pipeline):
        doc = json.loads((pipeline / "model" / "run_manifest.json").read_text())
        assert set(doc) >= {"command", "config", "seed", "version", "inputs", "outputs",
                            "wall_clock_seconds"}
        assert doc["command"] == "train" and doc["seed"] == 4
        assert doc["config"]["signals"] == "C4A1,EMG"

    def test_train_twice_identical_checkpoint(self, pipeline, tmp_path):
        assert run("train", "--data", pipeline / "data", "--split", pipeline / "split" / "split.json",
                   "--signals", "C4A1,EMG", "--patients-per-batch", 2, "--seed", 4,
                   "--max-iterations", 2, "--out", tmp_path / "again") == 0
        assert (tmp_path / "again" / "model.ckpt").read_bytes() == (
            pipeline / "model" / "model.ckpt").read_bytes()

    def test_rerun_from_manifest(self, pipeline, tmp_path):
        eval_dir = pipeline / "eval"
        before = digest(eval_dir)
        assert run("rerun", "--manifest", eval_dir / "run_manifest.json") == 0
        assert digest(eval_dir) == before

    def test_eval_missing_channel(self, pipeline, tmp_path, capsys):
        run("synth", "--patients", 2, "--epochs", 4, "--signals", "C3A2,C4A1", "--out", tmp_path / "noemg")
        code = run("eval", "--model", pipeline / "model" / "model.ckpt", "--data", tmp_path / "noemg",
                   "--out", tmp_path / "e")
        assert code == 3
        assert "EMG" in capsys.readouterr().err

    def test_ensemble(self, pipeline, tmp_path):
        ckpt = pipeline / "model" / "model.ckpt"
        assert run("ensemble", "--models", f"{ckpt},{ckpt},{ckpt}", "--sizes", "1,3",
                   "--data", pipeline / "data", "--split", pipeline / "split" / "split.json",
                   "--out", tmp_path / "ens") == 0
        lines = (tmp_path / "ens" / "comparison.csv").read_text().splitlines()
        assert len(lines) == 1 + 3 + 1
        metrics_cols = {tuple(line.split(",")[1:4]) for line in lines[1:]}
        assert len(metrics_cols) == 1
        doc = json.loads((tmp_path / "ens" / "ensemble.json").read_text())
        assert doc["members"][0]["signals"] == ["C4A1", "EMG"]

    def test_report_svgs(self, pipeline, tmp_path):
        assert run("report", "--in", pipeline / "eval", "--out", tmp_path / "r1") == 0
        assert run("report", "--in", pipeline / "model", "--out", tmp_path / "r1") == 0
        assert run("report", "--in", pipeline / "eval", "--out", tmp_path / "r2") == 0
        names = {p.name for p in (tmp_path / "r1").iterdir()}
        assert {"loss_curve.svg", "per_class.svg", "hypnogram.svg"} <= names
        for name in ("per_class.svg", "hypnogram.svg"):
            assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()

    def test_report_nothing_to_render(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert run("report", "--in", tmp_path / "empty", "--out", tmp_path / "o") == 3

    def test_corrupt_split(self, pipeline, tmp_path):
        bad = tmp_path / "split.json"
        bad.write_text("{not json")
        assert run("train", "--data", pipeline / "data", "--split", bad, "--signals", "EMG",
                   "--out", tmp_path / "m") == 3


class TestParams:
    def totals(self, capsys, signals):
        assert run("params", "--signals", signals) == 0
        return json.loads(capsys.readouterr().out)

    def test_increment(self, capsys):
        one = self.totals(capsys, "C4A1")
        two = self.totals(capsys, "C4A1,EMG")
        three = self.totals(capsys, "C3A2,C4A1,EMG")
        assert two["total_params"] - one["total_params"] == 17
        assert three["total_params"] - two["total_params"] == 17
        assert one["flatten_size"] == 2860
        assert three["input_size"] == 56_250
        assert one["first_block_reduction_ratio"] == pytest.approx(1 / 7 + 1 / 10)

    def test_custom_config(self, tmp_path, capsys):
        cfg = arch.ModelConfig(1, (arch.BlockSpec(3, 2, 1),), sections=1, section_samples=10)
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        assert run("params", "--signals", "EMG", "--config", tmp_path / "c.json") == 0
        assert json.loads(capsys.readouterr().out)["total_params"] == 3 + 4 + 2 * 8 * 5 + 5

    def test_bad_signals(self, capsys):
        assert run("params", "--signals", "C4A1,XYZ") == 2

    def test_bad_config(self, tmp_path):
        (tmp_path / "c.json").write_text("[]")
        assert run("params", "--config", tmp_path / "c.json") == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2
