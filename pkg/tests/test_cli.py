import json
import subprocess
import sys

import pytest

from dualstream.cli import main
from dualstream.data import load_dataset
from dualstream.decoding import write_predictions


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth-data", "--out", d / "data.jsonl", "--n", 4, "--seed", 3, "--t-app", 3,
               "--regions", 4, "--d-app", 6, "--d-mot", 5, "--d-reg", 7, "--d-typ", 4) == 0
    return d


TRAIN_FLAGS = ("--profile", "desk", "--layers", 1, "--d", 16, "--heads", 2, "--d-emb", 8,
               "--max-steps", 3, "--batch-size", 4, "--lr", 1e-3)


@pytest.fixture(scope="module")
def checkpoints(workdir):
    paths = []
    for seed in (1, 2):
        out = workdir / f"m{seed}.ckpt"
        assert run("train", "--data", workdir / "data.jsonl", "--out", out, "--seed", seed,
                   *TRAIN_FLAGS) == 0
        paths.append(out)
    return paths


class TestSynthData:
    def test_writes_dataset_and_manifest(self, workdir):
        ds = load_dataset(workdir / "data.jsonl")
        assert len(ds) == 4 and ds.samples[0].regions.shape == (4, 7)
        manifest = json.loads((workdir / "data.jsonl.manifest.json").read_text())
        assert manifest["command"] == "synth-data"
        assert manifest["seeds"] == {"seed": 3}
        assert len(manifest["artifact_hashes"]["dataset"]) == 64

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DSC_SEED", "3")
        assert run("synth-data", "--out", tmp_path / "a.jsonl", "--n", 2) == 0
        monkeypatch.delenv("DSC_SEED")
        assert run("synth-data", "--out", tmp_path / "b.jsonl", "--n", 2, "--seed", 3) == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


class TestTrain:
    def test_outputs(self, workdir, checkpoints):
        lines = (workdir / "m1.ckpt.loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,step,loss" and len(lines) == 4
        manifest = json.loads((workdir / "m1.ckpt.manifest.json").read_text())
        assert manifest["config"]["model"]["d"] == 16
        assert manifest["config"]["model"]["layers"] == 1
        assert manifest["config"]["train"]["batch_size"] == 4
        assert set(manifest["artifact_hashes"]) == {"checkpoint", "loss_csv"}

    @pytest.mark.parametrize("threads", [1, 3])
    def test_byte_identical_rerun(self, workdir, checkpoints, tmp_path, threads):
        out = tmp_path / "again.ckpt"
        assert run("train", "--data", workdir / "data.jsonl", "--out", out, "--seed", 1,
                   "--threads", threads, *TRAIN_FLAGS) == 0
        assert out.read_bytes() == checkpoints[0].read_bytes()
        assert (tmp_path / "again.ckpt.loss.csv").read_bytes() == \
            (workdir / "m1.ckpt.loss.csv").read_bytes()

    def test_config_file_then_flags(self, workdir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"d": 8, "heads": 4, "layers": 1, "d_emb": 4, "max_steps": 1,
                                   "batch_size": 2}))
        out = tmp_path / "c.ckpt"
        assert run("train", "--data", workdir / "data.jsonl", "--out", out, "--config", cfg,
                   "--heads", 2, "--profile", "desk") == 0
        model = json.loads((tmp_path / "c.ckpt.manifest.json").read_text())["config"]["model"]
        assert (model["d"], model["heads"]) == (8, 2)

    def test_missing_dataset(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run("train", "--data", tmp_path / "nope.jsonl", "--out", tmp_path / "x.ckpt")
        assert exc.value.code != 0
        assert "not found" in capsys.readouterr().err

    def test_inner_error_names_module(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text((workdir / "data.jsonl").read_text().replace('"d_reg": 7', '"d_reg": 8'))
        assert run("train", "--data", bad, "--out", tmp_path / "x.ckpt") == 1
        err = capsys.readouterr().err
        assert "error in dualstream.data" in err and "regions width 7" in err


class TestGenerate:
    def test_generate(self, workdir, checkpoints):
        out = workdir / "pred.jsonl"
        assert run("generate", "--data", workdir / "data.jsonl", "--checkpoint", checkpoints[0],
                   "--out", out, "--max-len", 4) == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 4
        assert set(rows[0]) == {"boundary_id", "subject", "before", "after"}
        assert all(len(r["subject"].split()) <= 4 for r in rows)

    def test_ensemble(self, workdir, checkpoints):
        out = workdir / "ens.jsonl"
        assert run("ensemble-generate", "--data", workdir / "data.jsonl", "--checkpoint",
                   checkpoints[0], "--checkpoint", checkpoints[1], "--out", out,
                   "--threads", 2) == 0
        again = workdir / "ens2.jsonl"
        assert run("ensemble-generate", "--data", workdir / "data.jsonl", "--checkpoint",
                   checkpoints[0], "--checkpoint", checkpoints[1], "--out", again) == 0
        assert out.read_bytes() == again.read_bytes()

    def test_ensemble_needs_two(self, workdir, checkpoints, capsys):
        with pytest.raises(SystemExit) as exc:
            run("ensemble-generate", "--data", workdir / "data.jsonl", "--checkpoint",
                checkpoints[0], "--out", workdir / "x.jsonl")
        assert exc.value.code != 0
        assert "at least two" in capsys.readouterr().err


class TestEvaluate:
    def test_perfect_predictions(self, workdir):
        ds = load_dataset(workdir / "data.jsonl")
        pred = workdir / "perfect.jsonl"
        write_predictions(pred, [{"boundary_id": s.boundary_id, **ds.texts[s.boundary_id]}
                                 for s in ds])
        out = workdir / "report.json"
        assert run("evaluate", "--predictions", pred, "--references", workdir / "data.jsonl",
                   "--out", out) == 0
        report = json.loads(out.read_text())
        assert report["metrics"]["rouge_l"]["average"] == 1.0
        assert report["corpus_size"] == 4

    def test_missing_prediction(self, workdir, tmp_path, capsys):
        pred = tmp_path / "p.jsonl"
        write_predictions(pred, [{"boundary_id": "synth-3-0000", "subject": "a",
                                  "before": "b", "after": "c"}])
        assert run("evaluate", "--predictions", pred, "--references", workdir / "data.jsonl",
                   "--out", tmp_path / "r.json") == 1
        assert "no prediction" in capsys.readouterr().err


class TestGradCheck:
    def test_small_config_passes(self, capsys, tmp_path):
        assert run("grad-check", "--seed", 1, "--d", 8, "--heads", 2, "--layers", 1,
                   "--max-entries", 6, "--manifest", tmp_path / "g.json") == 0
        out = capsys.readouterr().out
        assert "max relative error" in out and "head.local.weight" in out
        assert json.loads((tmp_path / "g.json").read_text())["max_relative_error"] < 1e-4


def test_unknown_flag():
    with pytest.raises(SystemExit) as exc:
        run("train", "--bogus")
    assert exc.value.code != 0


def test_bad_env_seed(monkeypatch, tmp_path):
    monkeypatch.setenv("DSC_SEED", "x")
    with pytest.raises(SystemExit):
        run("synth-data", "--out", tmp_path / "a.jsonl")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dualstream.cli", "synth-data", "--out",
                           str(tmp_path / "s.jsonl"), "--n", "2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "s.jsonl").exists()
