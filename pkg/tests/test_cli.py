"""CLI behavior: config resolution/precedence, subcommand wiring, artifacts,
and the stable exit-code contract. Commands run in-process through main()."""

import hashlib
import json
import os

import pytest

from sdanet.cli import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_TRAINING,
    EXIT_VERIFY,
    SCHEMA,
    extract_overrides,
    main,
    read_config_file,
    resolve_config,
)
from sdanet.datapipe import build_pair_dataset, load_recording, pairs_hash, read_manifest
from sdanet.errors import ConfigError, TrainingAbort
from sdanet.model import SdanetConfig, init_params, save_model_checkpoint
from sdanet.rng import RngState

TINY_ARGS = [
    "--model.feature_channels", "4",
    "--synth.n_subjects", "8",
    "--synth.recordings_per_subject", "3",
    "--synth.duration_s", "18",
    "--train.epochs", "2",
    "--train.steps_per_epoch", "1",
    "--train.batch_size", "8",
    "--train.average_last_k", "1",
    "--train.dropout", "0",
    "--augment.enabled", "false",
]


def dir_digest(root):
    h = hashlib.sha256()
    for base, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            path = os.path.join(base, name)
            h.update(os.path.relpath(path, root).encode())
            h.update(open(path, "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    rc = main(["gen-synth", "--seed", "3", "--out", str(out)] + TINY_ARGS)
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--seed", "3", "--out", str(out),
               "--data.manifest", str(synth_dir / "manifest.txt")] + TINY_ARGS)
    assert rc == 0
    return out


class TestConfigResolution:
    def test_defaults_cover_schema(self):
        cfg = resolve_config(None, None, [])
        assert set(cfg.values) == set(SCHEMA)
        assert cfg["train.lr0"] == 3e-4
        assert cfg["model.dilations"] == (1, 2, 4, 8)

    def test_file_then_flag_precedence(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("train.lr0 = 1e-3  # comment\nmodel.feature_channels = 8\n")
        cfg = resolve_config(p, None, [])
        assert cfg["train.lr0"] == 1e-3
        cfg = resolve_config(p, None, ["--train.lr0", "2e-3"])
        assert cfg["train.lr0"] == 2e-3
        assert cfg["model.feature_channels"] == 8

    def test_seed_flag_sets_both_seeds_but_flags_win(self):
        cfg = resolve_config(None, 42, [])
        assert cfg["train.seed"] == 42 and cfg["synth.seed"] == 42
        cfg = resolve_config(None, 42, ["--train.seed=7"])
        assert cfg["train.seed"] == 7 and cfg["synth.seed"] == 42

    def test_unknown_key_named_in_error(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("train.lr_zero = 1\n")
        with pytest.raises(ConfigError, match="train.lr_zero"):
            read_config_file(p)

    def test_override_forms(self):
        pairs = extract_overrides(["--train.lr0=1e-3", "--train.epochs", "5"])
        assert pairs == [("train.lr0", "1e-3"), ("train.epochs", "5")]
        with pytest.raises(ConfigError, match="unknown configuration key"):
            extract_overrides(["--bogus.key", "1"])
        with pytest.raises(ConfigError, match="needs a value"):
            extract_overrides(["--train.lr0"])

    def test_bad_value_exit_code(self, tmp_path):
        rc = main(["gen-synth", "--out", str(tmp_path / "x"), "--synth.n_subjects", "zero"])
        assert rc == EXIT_CONFIG

    def test_echo_reparses_identically(self, tmp_path):
        cfg = resolve_config(None, 5, ["--train.lr0", "1e-3"])
        echo = tmp_path / "resolved.cfg"
        cfg.echo(echo)
        cfg2 = resolve_config(echo, None, [])
        assert cfg2.values == cfg.values


class TestGenSynth:
    def test_manifest_lists_all_recordings(self, synth_dir):
        paths = read_manifest(synth_dir / "manifest.txt")
        assert len(paths) == 8 * 3
        rec = load_recording(paths[0])
        assert rec.eeg.shape[1] == 64
        assert (synth_dir / "resolved.cfg").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        args = ["--seed", "9"] + TINY_ARGS
        assert main(["gen-synth", "--out", str(a)] + args) == 0
        assert main(["gen-synth", "--out", str(b)] + args) == 0
        assert dir_digest(a) == dir_digest(b)

    def test_unwritable_out_exits_3_no_manifest(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        rc = main(["gen-synth", "--out", str(blocker / "sub")] + TINY_ARGS)
        assert rc == EXIT_IO
        assert not (blocker / "sub").exists()

    def test_echoed_config_reruns_byte_identical(self, synth_dir, tmp_path):
        # the resolved.cfg alone must reproduce the run
        out = tmp_path / "from-echo"
        rc = main(["gen-synth", "--config", str(synth_dir / "resolved.cfg"),
                   "--out", str(out)])
        assert rc == 0
        assert dir_digest(out / "recordings") == dir_digest(synth_dir / "recordings")
        assert (out / "manifest.txt").read_bytes() == (synth_dir / "manifest.txt").read_bytes()
        assert (out / "resolved.cfg").read_bytes() == (synth_dir / "resolved.cfg").read_bytes()


class TestTrain:
    def test_artifacts(self, trained_dir):
        ckpts = sorted((trained_dir / "checkpoints").iterdir())
        assert [p.name for p in ckpts] == ["epoch_0001.sdck", "epoch_0002.sdck"]
        assert (trained_dir / "final_averaged.sdck").exists()
        lines = (trained_dir / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2
        assert {json.loads(l)["epoch"] for l in lines} == {1, 2}

    def test_missing_manifest_config_error(self, tmp_path):
        rc = main(["train", "--out", str(tmp_path / "o")] + TINY_ARGS)
        assert rc == EXIT_CONFIG

    def test_nonexistent_manifest_io_error(self, tmp_path):
        rc = main(["train", "--out", str(tmp_path / "o"),
                   "--data.manifest", str(tmp_path / "nope.txt")] + TINY_ARGS)
        assert rc == EXIT_IO

    def test_training_abort_exit_4(self, tmp_path, synth_dir, monkeypatch):
        import sdanet.trainer as trainer_mod

        def boom(*a, **kw):
            raise TrainingAbort("non-finite gradient for parameter 'head.w'")

        monkeypatch.setattr(trainer_mod, "train_epoch", boom)
        rc = main(["train", "--out", str(tmp_path / "o"),
                   "--data.manifest", str(synth_dir / "manifest.txt")] + TINY_ARGS)
        assert rc == EXIT_TRAINING

    def test_lr_override_echoed(self, tmp_path, synth_dir):
        out = tmp_path / "o"
        rc = main(["train", "--seed", "3", "--out", str(out),
                   "--data.manifest", str(synth_dir / "manifest.txt"),
                   "--train.lr0", "1e-3"] + TINY_ARGS)
        assert rc == 0
        echoed = (out / "resolved.cfg").read_text()
        assert "train.lr0 = 0.001" in echoed
        first = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
        assert first["lr"] == 1e-3


class TestEval:
    def test_eval_reports_json(self, trained_dir, synth_dir, capsys):
        rc = main(["eval", "--seed", "3",
                   "--checkpoint", str(trained_dir / "final_averaged.sdck"),
                   "--split", "test",
                   "--data.manifest", str(synth_dir / "manifest.txt")] + TINY_ARGS)
        assert rc == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert 0.0 <= report["accuracy"] <= 1.0
        assert report["n_samples"] > 0

    def test_splits_are_disjoint(self, synth_dir):
        recs = [load_recording(p) for p in read_manifest(synth_dir / "manifest.txt")]
        ds = build_pair_dataset(recs, seed=3)
        assert pairs_hash(ds.val) != pairs_hash(ds.test)
        val_windows = {(p.subject_id, p.match_window.start) for p in ds.val}
        test_windows = {(p.subject_id, p.match_window.start) for p in ds.test}
        # same subjects appear, but no (subject, window) coincidence implies
        # recordings were assigned to exactly one split
        val_recs = {(p.subject_id, p.eeg_window.tobytes()[:64]) for p in ds.val}
        test_recs = {(p.subject_id, p.eeg_window.tobytes()[:64]) for p in ds.test}
        assert not (val_recs & test_recs)

    def test_missing_checkpoint_exit_5(self, synth_dir, tmp_path):
        rc = main(["eval", "--checkpoint", str(tmp_path / "none.sdck"),
                   "--data.manifest", str(synth_dir / "manifest.txt")] + TINY_ARGS)
        assert rc == EXIT_CHECKPOINT

    def test_corrupt_checkpoint_exit_5(self, trained_dir, synth_dir, tmp_path):
        corrupt = tmp_path / "corrupt.sdck"
        data = (trained_dir / "final_averaged.sdck").read_bytes()
        corrupt.write_bytes(data[: len(data) // 2])
        rc = main(["eval", "--seed", "3", "--checkpoint", str(corrupt),
                   "--data.manifest", str(synth_dir / "manifest.txt")] + TINY_ARGS)
        assert rc == EXIT_CHECKPOINT


class TestGradcheckCommand:
    def test_default_run_passes(self, capsys):
        import time

        started = time.monotonic()
        rc = main(["gradcheck"])
        assert rc == 0
        assert time.monotonic() - started < 60.0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        worst = max(float(line.split()[4]) for line in out.splitlines()
                    if "max rel err" in line)
        assert worst < 1e-4

    def test_fault_injection_fails_with_exit_6(self, capsys):
        rc = main(["gradcheck", "--fault-inject", "conv_backward"])
        assert rc == EXIT_VERIFY
        out = capsys.readouterr().out
        assert "FAIL" in out

    def test_unknown_fault_rejected(self):
        assert main(["gradcheck", "--fault-inject", "nope"]) == EXIT_CONFIG


class TestInspect:
    def test_lists_tensors_and_metadata(self, tmp_path, capsys):
        store = init_params(SdanetConfig(), RngState(0))
        path = tmp_path / "init.sdck"
        save_model_checkpoint(path, store, SdanetConfig(), epoch=4, val_loss=0.625)
        rc = main(["inspect", str(path)])
        assert rc == 0
        out = capsys.readouterr().out
        meta = json.loads(out.splitlines()[0])
        assert meta["epoch"] == 4 and meta["val_loss"] == 0.625
        assert "param.head.w" in out
        assert "64x1" in out
        assert "adam" not in out  # optimizer section absent is fine

    def test_corrupt_exit_5(self, tmp_path):
        bad = tmp_path / "bad.sdck"
        bad.write_bytes(b"garbage")
        assert main(["inspect", str(bad)]) == EXIT_CHECKPOINT

    def test_missing_exit_5(self, tmp_path):
        assert main(["inspect", str(tmp_path / "missing.sdck")]) == EXIT_CHECKPOINT


class TestDeterminism:
    def test_two_train_runs_byte_identical(self, tmp_path, synth_dir):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            rc = main(["train", "--seed", "3", "--out", str(out),
                       "--data.manifest", str(synth_dir / "manifest.txt")] + TINY_ARGS)
            assert rc == 0
            outs.append(out)
        a, b = outs
        assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
        assert dir_digest(a / "checkpoints") == dir_digest(b / "checkpoints")
        assert (a / "final_averaged.sdck").read_bytes() == (b / "final_averaged.sdck").read_bytes()
