import csv
import subprocess
import sys

import pytest

from mocaps import cli
from mocaps.cli import EXIT_CHECK_FAILED, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, main, resolve

SMALL_TRAIN = ["--dataset", "synthetic", "--stem-channels", "8", "--primary-groups", "4", "--capsules", "8",
               "--capsule-dim", "8", "--init-std", "0.1", "--n-train", "40", "--n-test", "20",
               "--batch-size", "20"]


def settings(argv):
    return resolve(build_parser().parse_args(argv))


class TestParse:
    def test_flag_beats_config_file(self, tmp_path):
        conf = tmp_path / "c.toml"
        conf.write_text("blocks = 5\ngamma = 0.5\ndataset = \"synthetic\"\n")
        cfg = settings(["train", "--config", str(conf), "--blocks", "3"])
        assert cfg["blocks"] == 3 and cfg["gamma"] == 0.5 and cfg["dataset"] == "synthetic"

    def test_override_beats_file(self, tmp_path):
        conf = tmp_path / "c.toml"
        conf.write_text("epochs = 9\n")
        assert settings(["train", "--config", str(conf), "-o", "epochs=4"])["epochs"] == 4

    def test_reference_defaults(self):
        cfg = settings(["train"])
        assert (cfg["gamma"], cfg["batch_size"], cfg["lr"], cfg["lr_decay"], cfg["capsules"],
                cfg["routing_iters"], cfg["lambda_recon"]) == (0.9, 128, 1e-3, 0.96, 32, 3, 5e-4)

    def test_gamma_out_of_range(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--gamma", "1.5"])
        assert exc.value.code == EXIT_USAGE
        assert "gamma must lie in [0, 1]" in capsys.readouterr().err

    def test_gamma_range_from_override(self, capsys):
        assert main(["train", "-o", "gamma=-0.1"]) == EXIT_USAGE

    def test_no_args_prints_help(self, capsys):
        assert main([]) == EXIT_USAGE
        assert "usage: mocaps" in capsys.readouterr().err

    def test_unknown_key_lists_valid_keys(self, capsys):
        assert main(["train", "-o", "colour=blue"]) == EXIT_USAGE
        err = capsys.readouterr().err
        assert "unknown key 'colour'" in err and "batch_size" in err and "routing_iters" in err

    def test_unknown_key_in_file(self, tmp_path, capsys):
        conf = tmp_path / "c.toml"
        conf.write_text("depth = 3\n")
        assert main(["train", "--config", str(conf)]) == EXIT_USAGE

    def test_nested_table_rejected(self, tmp_path, capsys):
        conf = tmp_path / "c.toml"
        conf.write_text("[model]\nblocks = 3\n")
        assert main(["train", "--config", str(conf)]) == EXIT_USAGE
        assert "nested" in capsys.readouterr().err

    def test_env_data_dir_fallback(self, monkeypatch):
        monkeypatch.setenv("MOCAPS_DATA_DIR", "/data/mnist")
        assert settings(["train"])["data_dir"] == "/data/mnist"
        assert settings(["train", "--data-dir", "/x"])["data_dir"] == "/x"

    def test_bool_override(self):
        assert settings(["train", "-o", "augment=false"])["augment"] is False
        assert settings(["train", "--no-augment"])["augment"] is False


class TestRun:
    def test_train_synthetic_writes_artifacts(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["train", *SMALL_TRAIN, "--epochs", "5", "--out-dir", str(out)])
        assert code == EXIT_OK
        rows = list(csv.reader((out / "metrics.csv").open()))
        assert rows[0] == ["epoch", "lr", "train_loss", "test_acc", "epoch_seconds", "peak_activation_bytes"]
        assert len(rows) == 6
        assert (out / "checkpoint.mocp").stat().st_size > 0
        resolved = (out / "resolved_config.toml").read_text()
        assert 'command = "train"' in resolved and "epochs = 5" in resolved

    def test_resolved_config_reloads(self, tmp_path):
        out = tmp_path / "run"
        assert main(["check-grad", "--out-dir", str(out)]) == EXIT_OK
        again = settings(["check-grad", "--config", str(out / "resolved_config.toml"), "--out-dir", str(out)])
        assert again == settings(["check-grad", "--out-dir", str(out)])

    def test_eval_after_train(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", *SMALL_TRAIN, "--epochs", "1", "--out-dir", str(out)]) == EXIT_OK
        capsys.readouterr()
        assert main(["eval", *SMALL_TRAIN, "--out-dir", str(out)]) == EXIT_OK
        assert capsys.readouterr().out.startswith("test_acc ")

    def test_eval_shape_mismatch_is_runtime_failure(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", *SMALL_TRAIN, "--epochs", "1", "--out-dir", str(out)]) == EXIT_OK
        assert main(["eval", "--dataset", "synthetic", "--out-dir", str(out)]) == EXIT_RUNTIME

    def test_missing_mnist_dir(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("MOCAPS_DATA_DIR", raising=False)
        missing = tmp_path / "nowhere"
        assert main(["train", "--data-dir", str(missing), "--out-dir", str(tmp_path)]) == EXIT_RUNTIME
        assert str(missing) in capsys.readouterr().err
        assert main(["train", "--out-dir", str(tmp_path)]) == EXIT_RUNTIME
        assert "MOCAPS_DATA_DIR" in capsys.readouterr().err

    def test_mnist_files_missing(self, tmp_path, capsys):
        assert main(["train", "--data-dir", str(tmp_path), "--out-dir", str(tmp_path)]) == EXIT_RUNTIME
        assert "train-images-idx3-ubyte" in capsys.readouterr().err

    def test_check_invert_passes(self, tmp_path, capsys):
        code = main(["check-invert", "--blocks", "8", "--dtype", "f64", "--trials", "2", "--out-dir", str(tmp_path)])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "blocks=8" in out and "PASS" in out

    def test_check_failure_exit_code(self, tmp_path, capsys):
        code = main(["check-invert", "--blocks", "2", "--trials", "1", "--tolerance", "1e-30",
                     "--out-dir", str(tmp_path)])
        assert code == EXIT_CHECK_FAILED
        assert "FAIL" in capsys.readouterr().out

    def test_check_invert_gamma_zero(self, tmp_path, capsys):
        assert main(["check-invert", "--gamma", "0", "--out-dir", str(tmp_path)]) == EXIT_USAGE

    def test_check_equivalence(self, tmp_path, capsys):
        assert main(["check-equivalence", "--blocks", "2", "--trials", "1", "--out-dir", str(tmp_path)]) == EXIT_OK

    def test_bench_memory(self, tmp_path, capsys):
        code = main(["bench-memory", "--blocks", "2", "--capsules", "8", "--capsule-dim", "8",
                     "--stem-channels", "4", "--primary-groups", "2", "--bench-batch", "2",
                     "--emit-plot-data", "--out-dir", str(tmp_path)])
        assert code == EXIT_OK
        assert (tmp_path / "bench_memory.csv").exists()
        assert sorted(p.name for p in (tmp_path / "plot").iterdir()) == [
            "memory_rescapsnet.dat", "memory_reversible.dat", "memory_stored.dat"]
        assert "slope ratio" in capsys.readouterr().out

    def test_bench_needs_two_depths(self, tmp_path, capsys):
        assert main(["bench-time", "--blocks", "1", "--out-dir", str(tmp_path)]) == EXIT_USAGE

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "mocaps.cli", "check-grad", "--out-dir", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == EXIT_OK, proc.stderr
        assert "PASS" in proc.stdout


def test_every_command_has_handler():
    assert set(cli.HANDLERS) == set(cli.COMMANDS) == set(cli.COMMAND_DEFAULTS)
