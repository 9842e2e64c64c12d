"""
Tests for CLI entry point functionality.

Tests the crimemap.cli module including:
- Main CLI group behavior and exit codes
- Command registration and help
- End-to-end runs on the bundled synthetic cities (marked slow)
"""

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from crimemap import __version__
from crimemap.cli import cli

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
CITY_A = str(CONFIGS / "synth_city.toml")
CITY_B = str(CONFIGS / "synth_city_b.toml")

COMMANDS = [
    "synth-city",
    "ingest",
    "label",
    "fetch",
    "train",
    "finetune",
    "eval",
    "predict-map",
    "render",
    "full-run",
]


def _run(*args: str):
    return CliRunner().invoke(cli, list(args))


class TestCLI:
    """Test CLI entry point functionality."""

    def test_cli_version_option(self):
        result = _run("--version")

        assert result.exit_code == 0
        assert "crimemap" in result.output
        assert __version__ in result.output

    def test_cli_help_default(self):
        """Test CLI shows help when no command is given."""
        result = _run()

        assert result.exit_code == 0
        assert "Usage:" in result.output
        for name in COMMANDS:
            assert name in result.output

    @pytest.mark.parametrize("name", COMMANDS)
    def test_command_help(self, name):
        result = _run(name, "--help")
        assert result.exit_code == 0
        assert "Usage:" in result.output

    def test_required_option_marked(self):
        result = _run("finetune", "--help")
        assert "--from" in result.output
        assert "required" in result.output


class TestExitCodes:
    """Test that validation failures exit 1 and runtime failures exit 2."""

    def test_unknown_command(self):
        assert _run("bogus").exit_code == 1

    def test_missing_input_file(self, tmp_path):
        result = _run("--config", CITY_A, "--output-dir", str(tmp_path), "ingest", "nope.csv")
        assert result.exit_code == 1

    def test_invalid_override(self, tmp_path):
        result = _run(
            "--config", CITY_A, "--output-dir", str(tmp_path), "--set", "train.iterations=0", "label"
        )
        assert result.exit_code == 1
        assert "✗ train.iterations must be at least 1" in result.output

    def test_missing_config_file(self, tmp_path):
        result = _run("--config", str(tmp_path / "none.toml"), "label")
        assert result.exit_code == 1
        assert "Cannot read config file" in result.output

    def test_label_with_no_reports(self, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        result = _run("--config", CITY_A, "--output-dir", str(tmp_path), "label", "--reports", str(empty))
        assert result.exit_code == 1
        assert "No reports to label" in result.output

    def test_corrupt_model_is_a_runtime_failure(self, tmp_path):
        model = tmp_path / "model.cmap"
        model.write_bytes(b"definitely not a model")
        result = _run(
            "--config", CITY_A, "--output-dir", str(tmp_path), "predict-map", "--model", str(model)
        )
        assert result.exit_code == 2
        assert "✗" in result.output


class TestCommands:
    """Test individual commands on the synthetic city."""

    def test_synth_city_then_ingest(self, tmp_path):
        result = _run("--config", CITY_A, "--output-dir", str(tmp_path), "synth-city")
        assert result.exit_code == 0
        assert "✓ Wrote synthetic reports" in result.output
        source = tmp_path / "synth_reports.csv"
        assert source.exists()

        result = _run("--config", CITY_A, "--output-dir", str(tmp_path), "ingest", str(source))
        assert result.exit_code == 0
        assert "✓ Kept" in result.output
        assert (tmp_path / "reports.jsonl").exists()

    def test_progress_logged_to_stderr(self, tmp_path):
        result = _run("--config", CITY_A, "--output-dir", str(tmp_path), "-v", "synth-city")
        assert result.exit_code == 0
        assert "crimemap.pipeline" in result.output


def _read_json(path: Path):
    return json.loads(path.read_text())


@pytest.mark.slow
class TestEndToEnd:
    """Full pipeline runs on the bundled synthetic cities."""

    def test_full_run_accuracy(self, tmp_path):
        out = tmp_path / "a"
        result = _run("--config", CITY_A, "--output-dir", str(out), "full-run")

        assert result.exit_code == 0, result.output
        report = _read_json(out / "eval_report.json")
        assert report["mean_accuracy"] >= 0.90
        for name in ("model.cmap", "training_log.tsv", "map_accuracy.json", "run_manifest.json"):
            assert (out / name).exists()
        assert (out / "maps" / "synth_a_predicted_all.png").exists()

    def test_full_run_is_deterministic(self, tmp_path):
        outputs = []
        for name in ("one", "two"):
            out = tmp_path / name
            result = _run(
                "--config", CITY_A, "--output-dir", str(out), "--set", "train.iterations=50", "full-run"
            )
            assert result.exit_code == 0, result.output
            outputs.append(out)

        one, two = outputs
        for name in (
            "labels.jsonl",
            "balanced.jsonl",
            "dataset/manifest.tsv",
            "model.cmap",
            "eval_report.json",
            "maps/synth_a_predicted.json",
            "maps/synth_a_predicted_all.png",
        ):
            assert (one / name).read_bytes() == (two / name).read_bytes(), name

    def test_cross_city_transfer(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert _run("--config", CITY_A, "--output-dir", str(a), "full-run").exit_code == 0

        assert _run("--config", CITY_B, "--output-dir", str(b), "synth-city").exit_code == 0
        reports = str(b / "synth_reports.csv")
        assert _run("--config", CITY_B, "--output-dir", str(b), "ingest", reports).exit_code == 0
        assert _run("--config", CITY_B, "--output-dir", str(b), "label").exit_code == 0
        result = _run(
            "--config", CITY_B, "--output-dir", str(b), "predict-map", "--model", str(a / "model.cmap")
        )

        assert result.exit_code == 0, result.output
        assert _read_json(b / "map_accuracy.json")["accuracy"] >= 0.80
