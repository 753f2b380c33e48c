import csv
import subprocess
import sys

import numpy as np
import pytest

from ipsel.harness.cli import run


def invoke(argv):
    """Run the CLI in-process; returns exit code."""
    try:
        return run(argv)
    except SystemExit as exc:  # argparse errors
        return exc.code


def cli_subprocess(argv):
    proc = subprocess.run([sys.executable, "-m", "ipsel.harness.cli", *argv],
                          capture_output=True, text=True)
    return proc


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    code = invoke(["generate", "--side", "150", "--train", "10", "--test", "4",
                   "--seed", "3", "--out", str(out)])
    assert code == 0
    return out


def train_args(dataset, out_dir, **kw):
    args = ["train", "--dataset", str(dataset), "--out-dir", str(out_dir),
            "--method", "ips_transformer", "--epochs", "2", "--batch-size", "4",
            "--encoder-channels", "2", "--heads", "2", "--buffer-size", "3",
            "--chunk-size", "3", "--patch-size", "50", "--warmup-epochs", "1",
            "--seed", "1"]
    for key, value in kw.items():
        args += [f"--{key.replace('_', '-')}", str(value)]
    return args


class TestCli:
    def test_generate_writes_dataset(self, cli_dataset):
        assert (cli_dataset / "spec.json").exists()
        assert (cli_dataset / "train_images.bin").exists()

    def test_train_eval_roundtrip(self, cli_dataset, tmp_path):
        run_dir = tmp_path / "run"
        assert invoke(train_args(cli_dataset, run_dir)) == 0
        assert (run_dir / "checkpoint.bin").exists()
        code = invoke(["eval", "--dataset", str(cli_dataset),
                       "--method", "ips_transformer", "--epochs", "2",
                       "--batch-size", "4", "--encoder-channels", "2",
                       "--heads", "2", "--buffer-size", "3", "--chunk-size", "3",
                       "--patch-size", "50", "--warmup-epochs", "1",
                       "--seed", "1",
                       "--checkpoint", str(run_dir / "checkpoint.bin")])
        assert code == 0

    def test_bench_single_writes_csv(self, cli_dataset, tmp_path):
        out = tmp_path / "bench.csv"
        code = invoke(["bench", "--sweep", "single", "--dataset", str(cli_dataset),
                       "--method", "ips_transformer", "--encoder-channels", "2",
                       "--heads", "2", "--buffer-size", "3", "--chunk-size", "3",
                       "--patch-size", "50", "--batch-size", "4",
                       "--steps", "3", "--out", str(out)])
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == 1
        assert rows[0]["N"] == "9"
        assert rows[0]["T"] == "2"
        assert int(rows[0]["peak_bytes_total"]) > 0

    def test_explain_writes_pgm_and_csv(self, cli_dataset, tmp_path):
        run_dir = tmp_path / "run_explain"
        assert invoke(train_args(cli_dataset, run_dir)) == 0
        out = tmp_path / "explain_out"
        code = invoke(["explain", "--dataset", str(cli_dataset),
                       "--method", "ips_transformer", "--epochs", "2",
                       "--batch-size", "4", "--encoder-channels", "2",
                       "--heads", "2", "--buffer-size", "3", "--chunk-size", "3",
                       "--patch-size", "50", "--warmup-epochs", "1", "--seed", "1",
                       "--checkpoint", str(run_dir / "checkpoint.bin"),
                       "--index", "0", "--out", str(out)])
        assert code == 0
        pgm = out.with_suffix(".pgm").read_bytes()
        assert pgm.startswith(b"P5\n3 3\n65535\n")
        assert len(pgm) == len(b"P5\n3 3\n65535\n") + 9 * 2
        rows = list(csv.DictReader(out.with_suffix(".csv").open()))
        assert len(rows) == 3  # M selected patches
        assert set(rows[0]) == {"patch_index", "row", "col", "argmax_class",
                                "score", "attention"}

    def test_exit_code_contract_error(self, cli_dataset, tmp_path):
        proc = cli_subprocess(["train", "--dataset", str(cli_dataset),
                               "--method", "nonsense",
                               "--out-dir", str(tmp_path / "x")])
        assert proc.returncode == 2
        assert "unknown method" in proc.stderr

    def test_exit_code_budget_exceeded(self, cli_dataset, tmp_path):
        proc = cli_subprocess(train_args(cli_dataset, tmp_path / "b",
                                         ledger_budget=500))
        assert proc.returncode == 4

    def test_env_override_applies(self, cli_dataset, tmp_path, monkeypatch):
        monkeypatch.setenv("IPS_EPOCHS", "3")
        monkeypatch.setenv("IPS_WARMUP_EPOCHS", "0")
        run_dir = tmp_path / "env_run"
        args = ["train", "--dataset", str(cli_dataset), "--out-dir", str(run_dir),
                "--method", "rps", "--batch-size", "4", "--encoder-channels", "2",
                "--heads", "2", "--buffer-size", "3", "--chunk-size", "3",
                "--patch-size", "50", "--seed", "1"]
        assert invoke(args) == 0
        text = (run_dir / "metrics.csv").read_text()
        assert len(text.strip().splitlines()) == 4  # header + 3 epochs
