"""Command-line pipeline: exit codes, outputs and reproducibility records."""

import json

import numpy as np
import pytest

from voxlevel import cli
from voxlevel.dsp import AudioClip, MelConfig, write_wav
from voxlevel.estimator import EstimatorModel, save

QUICK = ["--updates", "4", "--batch-size", "4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def error_of(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def trained(tiny_corpus, tmp_path_factory):
    """Tiny Ad estimator and AE trained through the CLI."""
    root = tmp_path_factory.mktemp("cli_models")
    cfg = root / "train.cfg"
    cfg.write_text("validation_interval = 2\nval_crops = 4\ncrop_frames = 40\n")
    manifest = tiny_corpus / "manifest.jsonl"
    assert run("train-estimator", "--variant", "ad", "--manifest", manifest, "--out", root / "est",
               "--config", cfg, "--seed", 1, *QUICK) == 0
    assert run("train-ae", "--level-model", root / "est" / "model.vxl", "--manifest", manifest,
               "--out", root / "ae", "--config", cfg, *QUICK) == 0
    return root, manifest


class TestSynthData:
    def test_writes_corpus_and_record(self, tmp_path):
        assert run("synth-data", "--out", tmp_path, "--speakers", 1, "--files-per-speaker", 2,
                   "--duration", 1.3, "--seed", 9) == 0
        lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 2
        rec = json.loads((tmp_path / "run.json").read_text())
        assert rec["command"] == "synth-data" and rec["seed"] == 9 and rec["tool"] == "voxlevel"
        assert rec["config"]["synth"]["duration_s"] == 1.3
        assert "audio/s00_f001.wav" in rec["outputs"]

    def test_config_file_and_flag_precedence(self, tmp_path):
        (tmp_path / "c.cfg").write_text("n_speakers = 3\nfiles_per_speaker = 1\nduration_s = 1.3\n")
        assert run("synth-data", "--out", tmp_path / "o", "--config", tmp_path / "c.cfg", "--speakers", 1) == 0
        rec = json.loads((tmp_path / "o" / "run.json").read_text())
        assert rec["config"]["synth"]["n_speakers"] == 1
        assert rec["config"]["synth"]["duration_s"] == 1.3

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("n_speekers = 3\n")
        assert run("synth-data", "--out", tmp_path, "--config", tmp_path / "c.cfg") == cli.EXIT_INVALID
        assert "n_speekers" in error_of(capsys)["message"]


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert run("estimate", "--frobnicate") == cli.EXIT_USAGE
        assert error_of(capsys)["error"] == "usage"

    def test_missing_command(self, capsys):
        assert run() == cli.EXIT_USAGE

    def test_missing_manifest(self, tmp_path, capsys):
        code = run("train-estimator", "--variant", "ad", "--manifest", tmp_path / "nope.jsonl", "--out", tmp_path)
        assert code == cli.EXIT_MISSING
        err = error_of(capsys)
        assert err["exit_code"] == cli.EXIT_MISSING and "nope.jsonl" in err["message"]

    def test_missing_model(self, tmp_path, capsys):
        assert run("estimate", "--model", tmp_path / "m.vxl", "--out", tmp_path, "x.wav") == cli.EXIT_MISSING

    def test_corrupt_model(self, tmp_path, capsys):
        (tmp_path / "m.vxl").write_bytes(b"VXLMODEL\x01\x00")
        assert run("inspect-model", "--model", tmp_path / "m.vxl") == cli.EXIT_MODEL

    def test_le_without_groups_names_row(self, tiny_corpus, tmp_path, capsys):
        rows = [json.loads(s) for s in (tiny_corpus / "manifest.jsonl").read_text().splitlines()]
        for r in rows[1:]:
            r.pop("group")
        m = tiny_corpus / "partial_groups.jsonl"
        m.write_text("".join(json.dumps(r) + "\n" for r in rows))
        code = run("train-estimator", "--variant", "le", "--manifest", m, "--out", tmp_path, *QUICK)
        assert code == cli.EXIT_INVALID
        msg = error_of(capsys)["message"]
        assert "line 2" in msg and "s00_f001.wav" in msg and "group" in msg
        assert not (tmp_path / "model.vxl").exists()

    def test_fingerprint_mismatch(self, trained, tmp_path, capsys):
        root, manifest = trained
        other = EstimatorModel(MelConfig(n_mels=40), seed=0, variant="ad")
        save(other, tmp_path / "other.vxl")
        code = run("transform", "--model", root / "ae" / "ae.vxl", "--level-model", tmp_path / "other.vxl",
                   "--manifest", manifest, "--out", tmp_path, "--delta-db", 3)
        assert code == cli.EXIT_FINGERPRINT

    def test_wrong_level_model_weights(self, trained, tmp_path, capsys):
        root, manifest = trained
        save(EstimatorModel(seed=99, variant="ad"), tmp_path / "fresh.vxl")
        code = run("transform", "--model", root / "ae" / "ae.vxl", "--level-model", tmp_path / "fresh.vxl",
                   "--manifest", manifest, "--out", tmp_path, "--delta-db", 3)
        assert code == cli.EXIT_FINGERPRINT
        assert "level model" in error_of(capsys)["message"]

    def test_delta_out_of_range(self, trained, tmp_path, capsys):
        root, manifest = trained
        code = run("transform", "--model", root / "ae" / "ae.vxl", "--level-model", root / "est" / "model.vxl",
                   "--manifest", manifest, "--out", tmp_path, "--delta-db", 25)
        assert code == cli.EXIT_INVALID


class TestEstimate:
    def test_silent_wav_is_floor(self, trained, tmp_path):
        root, _ = trained
        write_wav(tmp_path / "silent.wav", AudioClip(np.zeros(24000), 24000))
        assert run("estimate", "--model", root / "est" / "model.vxl", "--out", tmp_path / "o",
                   tmp_path / "silent.wav") == 0
        csvs = list((tmp_path / "o" / "levels").glob("*.csv"))
        assert len(csvs) == 1
        data = np.loadtxt(csvs[0], delimiter=",", skiprows=1)
        assert data.shape == (80, 4)
        np.testing.assert_allclose(data[:, 2], 1e-10, rtol=1e-9)
        np.testing.assert_allclose(data[:, 3], -100.0, atol=1e-6)

    def test_calibrate_manifest(self, trained, tmp_path):
        root, manifest = trained
        assert run("calibrate", "--model", root / "est" / "model.vxl", "--manifest", manifest,
                   "--out", tmp_path) == 0
        lines = (tmp_path / "factors.csv").read_text().splitlines()
        assert lines[0] == "path,variant,group,factor,factor_db" and len(lines) == 11
        assert all(",ad," in ln for ln in lines[1:])

    def test_inputs_not_mutated(self, trained, tmp_path):
        root, manifest = trained
        before = manifest.read_bytes(), (root / "est" / "model.vxl").read_bytes()
        run("estimate", "--model", root / "est" / "model.vxl", "--manifest", manifest, "--out", tmp_path)
        assert (manifest.read_bytes(), (root / "est" / "model.vxl").read_bytes()) == before

    def test_inspect(self, trained, capsys):
        root, _ = trained
        assert run("inspect-model", "--model", root / "est" / "model.vxl") == 0
        info = json.loads(capsys.readouterr().out)
        assert info["kind"] == "estimator" and info["variant"] == "ad"
        assert info["parameters"] == 109_081 and info["receptive_field"] == 5


class TestTransformAndEval:
    def test_transform_zero_then_precision(self, trained, tmp_path):
        root, manifest = trained
        ae, lm = root / "ae" / "ae.vxl", root / "est" / "model.vxl"
        assert run("transform", "--model", ae, "--level-model", lm, "--manifest", manifest,
                   "--out", tmp_path / "t", "--delta-db", 0) == 0
        assert run("eval-precision", "--level-model", lm, "--manifest", manifest, "--transformed", tmp_path / "t",
                   "--out", tmp_path / "replay") == 0
        assert run("eval-precision", "--model", ae, "--level-model", lm, "--manifest", manifest,
                   "--delta-db", 0, "--out", tmp_path / "direct") == 0
        replay = json.loads((tmp_path / "replay" / "precision.json").read_text())
        direct = json.loads((tmp_path / "direct" / "precision.json").read_text())
        assert replay[0]["delta_db"] == 0.0
        np.testing.assert_allclose(replay[0]["mean_abs_error_db"], direct[0]["mean_abs_error_db"], rtol=1e-12)

    def test_csv_format(self, trained, tmp_path):
        root, manifest = trained
        assert run("transform", "--model", root / "ae" / "ae.vxl", "--level-model", root / "est" / "model.vxl",
                   "--manifest", manifest, "--out", tmp_path, "--delta-db", 6, "--format", "csv") == 0
        first = sorted((tmp_path / "mels").iterdir())[0]
        assert first.suffix == ".csv" and first.read_text().startswith("# frames=")

    def test_eval_hist(self, trained, tmp_path):
        root, manifest = trained
        assert run("eval-hist", "--model", root / "est" / "model.vxl", "--manifest", manifest,
                   "--out", tmp_path) == 0
        for name in ("histograms.csv", "histograms.dat", "histograms.json", "run.json"):
            assert (tmp_path / name).is_file()
        rec = json.loads((tmp_path / "run.json").read_text())
        assert rec["models"]["model"]["sha256"]
        assert "histograms.json" in rec["outputs"]

    def test_train_outputs_are_reproducible(self, trained, tmp_path):
        root, manifest = trained
        cfg = root / "train.cfg"
        assert run("train-estimator", "--variant", "ad", "--manifest", manifest, "--out", tmp_path,
                   "--config", cfg, "--seed", 1, *QUICK) == 0
        for name in ("model.vxl", "history.csv"):
            assert (tmp_path / name).read_bytes() == (root / "est" / name).read_bytes()
        rec = json.loads((tmp_path / "run.json").read_text())
        assert rec["config"]["train"]["validation_interval"] == 2
        assert rec["config"]["train"]["max_updates"] == 4


class TestCheckCommand:
    def test_passes(self, capsys, tmp_path):
        assert run("check", "--out", tmp_path) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "PASS" in out
        assert (tmp_path / "checks.csv").read_text().startswith("name,expected,actual")
