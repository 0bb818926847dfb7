"""Tests for the command-line commands"""

import json
import os
from pathlib import Path
from unittest.mock import patch
import pytest
from smore.interface.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, build_parser, run
from smore.interface.export import read_csv
from smore.services.experts import load_bank

ROOT = Path(__file__).parent.parent.parent
CONFIGS = ROOT / "configs"
FIXTURES = ROOT / "tests" / "fixtures"


@pytest.fixture
def out(tmp_path: Path) -> Path:
    os.environ["DISABLE_SMORE_LOGGING"] = "true"
    return tmp_path / "out"


def _tokens(tmp_path: Path, tokens: list[list[float]]) -> Path:
    path = tmp_path / "tokens.json"
    path.write_text(json.dumps(tokens), encoding="utf-8")
    return path


class TestFlexCommand:
    """Test suite for the flex command"""

    def test_writes_reference_row(self, out: Path) -> None:
        """Should write 216 and 66 for two layers of four experts"""
        code = run(["flex", "--s", "4", "--f", "2", "--lmax", "4", "--out", str(out)])
        assert code == EXIT_OK
        digest, rows = read_csv(out / "flex.csv")
        assert digest is not None
        assert len(rows) == 4
        assert rows[1]["gamma_smore"] == "216"
        assert rows[1]["gamma_momor_bound"] == "66"
        assert rows[1]["gamma_star"] == "126"

    def test_fanout_above_experts(self, out: Path) -> None:
        """Should exit 2 when f > s"""
        code = run(["flex", "--s", "2", "--f", "3", "--lmax", "2", "--out", str(out)])
        assert code == EXIT_CONFIG
        assert not (out / "flex.csv").exists()

    def test_reproducible_bytes(self, out: Path) -> None:
        """Should write identical files on a rerun"""
        args = ["flex", "--s", "3", "--f", "1", "--lmax", "3", "--out", str(out)]
        run(args)
        first = (out / "flex.csv").read_bytes()
        run(args)
        assert (out / "flex.csv").read_bytes() == first


class TestCostCommand:
    """Test suite for the cost command"""

    def test_reference_tables(self, out: Path) -> None:
        """Should reproduce the golden overhead tables"""
        assert run(["cost", "--out", str(out)]) == EXIT_OK
        for name in ("params_overhead.csv", "flops_overhead.csv"):
            digest, rows = read_csv(out / name)
            _, expected = read_csv(FIXTURES / name)
            assert digest is not None
            assert rows == expected
        _, router = read_csv(out / "router_cost.csv")
        assert len(router) == 8
        assert all(float(row["ratio"]) < 0.26 for row in router)

    def test_config_file_matches_defaults(self, out: Path) -> None:
        """Should hash the shipped grid like the built-in one"""
        run(["cost", "--out", str(out / "a")])
        run(["cost", "--config", str(CONFIGS / "cost_grid.json"), "--out", str(out / "b")])
        first, _ = read_csv(out / "a" / "params_overhead.csv")
        second, _ = read_csv(out / "b" / "params_overhead.csv")
        assert first == second

    def test_empty_grid(self, tmp_path: Path, out: Path) -> None:
        """Should write header-only tables for an empty grid"""
        config = tmp_path / "grid.json"
        config.write_text('{"ranks": []}', encoding="utf-8")
        assert run(["cost", "--config", str(config), "--out", str(out)]) == EXIT_OK
        digest, rows = read_csv(out / "params_overhead.csv")
        assert digest is not None
        assert rows == []

    def test_width_override(self, out: Path) -> None:
        """Should rescale the main term with --d"""
        run(["cost", "--d", "2048", "--out", str(out)])
        _, rows = read_csv(out / "params_overhead.csv")
        assert rows[0]["main_exact"] == str(2 * 2048 * 64)

    def test_bad_json(self, tmp_path: Path, out: Path) -> None:
        """Should exit 2 on malformed JSON"""
        config = tmp_path / "grid.json"
        config.write_text("{", encoding="utf-8")
        assert run(["cost", "--config", str(config), "--out", str(out)]) == EXIT_CONFIG

    def test_unknown_key(self, tmp_path: Path, out: Path) -> None:
        """Should exit 2 on keys outside the schema"""
        config = tmp_path / "grid.json"
        config.write_text('{"width": 3}', encoding="utf-8")
        assert run(["cost", "--config", str(config), "--out", str(out)]) == EXIT_CONFIG


class TestVerifyCommand:
    """Test suite for the verify command"""

    def test_three_tree_suite(self, out: Path) -> None:
        """Should pass and record the verdict"""
        assert run(["verify", "--suite", "fig5", "--out", str(out)]) == EXIT_OK
        lines = (out / "verify.txt").read_text(encoding="utf-8").splitlines()
        assert lines[-1] == "fig5: PASS"
        report = json.loads((out / "verify.json").read_text(encoding="utf-8"))
        assert report["passed"] is True

    def test_unknown_suite(self, out: Path) -> None:
        """Should let argparse reject the choice"""
        with pytest.raises(SystemExit):
            run(["verify", "--suite", "speed", "--out", str(out)])


class TestRoutingCommands:
    """Test suite for route-dump and inspect"""

    def test_dense_routes_are_complete(self, tmp_path: Path, out: Path) -> None:
        """Should route every expert under the dense gate"""
        code = run(
            [
                "route-dump",
                "--config",
                str(CONFIGS / "spec_dense.json"),
                "--tokens",
                str(CONFIGS / "tokens_example.json"),
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        payload = json.loads((out / "routes.json").read_text(encoding="utf-8"))
        assert len(payload["trees"]) == 2
        for tree in payload["trees"]:
            assert len(tree["nodes"]) == 2 + 2 * 3

    def test_zero_token_trace(self, tmp_path: Path, out: Path) -> None:
        """Should propagate zeros for a zero token without biases"""
        tokens = _tokens(tmp_path, [[0.0, 0.0, 0.0, 0.0]])
        code = run(
            [
                "inspect",
                "--config",
                str(CONFIGS / "spec_dense.json"),
                "--tokens",
                str(tokens),
                "--full",
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        trace = json.loads((out / "trace.json").read_text(encoding="utf-8"))["traces"][0]
        assert all(value == 0.0 for value in trace["output"])
        for node in trace["nodes"]:
            assert all(value == 0.0 for value in node["embedding"])

    def test_width_mismatch(self, tmp_path: Path, out: Path) -> None:
        """Should exit 2 on tokens of the wrong width"""
        tokens = _tokens(tmp_path, [[1.0, 2.0]])
        code = run(
            [
                "route-dump",
                "--config",
                str(CONFIGS / "spec_dense.json"),
                "--tokens",
                str(tokens),
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_CONFIG

    def test_missing_file(self, out: Path) -> None:
        """Should exit 2 when the spec file does not exist"""
        code = run(
            ["inspect", "--config", "missing.json", "--tokens", "missing.json", "--out", str(out)]
        )
        assert code == EXIT_CONFIG


class TestTrainCommand:
    """Test suite for the train command"""

    def test_short_run_writes_outputs(self, tmp_path: Path, out: Path) -> None:
        """Should write the step log, summary and a reloadable bank"""
        code = run(
            [
                "train",
                "--config",
                str(CONFIGS / "train_example.json"),
                "--steps",
                "3",
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        digest, rows = read_csv(out / "train.csv")
        assert digest is not None
        assert [row["step"] for row in rows] == ["0", "1", "2"]
        summary = json.loads((out / "train.json").read_text(encoding="utf-8"))
        assert summary["steps"] == 3
        assert summary["config_sha256"] == digest
        bank = load_bank(out / "bank")
        assert bank.version == 3

        tokens = _tokens(tmp_path, [[0.1] * 16])
        spec = tmp_path / "spec.json"
        spec.write_text(
            json.dumps(json.loads((CONFIGS / "train_example.json").read_text())["spec"]),
            encoding="utf-8",
        )
        reuse = [
            "route-dump",
            "--config",
            str(spec),
            "--tokens",
            str(tokens),
            "--bank",
            str(out / "bank"),
            "--out",
            str(out),
        ]
        assert run(reuse) == EXIT_OK

    def test_bank_for_other_spec(self, tmp_path: Path, out: Path) -> None:
        """Should exit 2 when the bank was trained for another spec"""
        config = str(CONFIGS / "train_example.json")
        run(["train", "--config", config, "--steps", "1", "--out", str(out)])
        code = run(
            [
                "route-dump",
                "--config",
                str(CONFIGS / "spec_dense.json"),
                "--tokens",
                str(CONFIGS / "tokens_example.json"),
                "--bank",
                str(out / "bank"),
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_CONFIG


class TestExitCodes:
    """Test suite for mapping errors to exit codes"""

    @pytest.mark.parametrize(
        "error", [ValueError("matrix is singular"), FloatingPointError("overflow")]
    )
    def test_internal_errors_are_failures(self, out: Path, error: Exception) -> None:
        """Should exit 1 rather than 2 when a computation fails on valid input"""
        with patch("smore.interface.cli.flexibility_table", side_effect=error):
            code = run(["flex", "--s", "4", "--f", "2", "--lmax", "2", "--out", str(out)])
        assert code == EXIT_FAILED

    def test_unreadable_bank_is_bad_input(self, tmp_path: Path, out: Path) -> None:
        """Should exit 2 when --bank names a directory without a saved bank"""
        bank = tmp_path / "bank"
        bank.mkdir()
        code = run(
            [
                "route-dump",
                "--config",
                str(CONFIGS / "spec_dense.json"),
                "--tokens",
                str(CONFIGS / "tokens_example.json"),
                "--bank",
                str(bank),
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_CONFIG


class TestParser:
    """Test suite for argument parsing"""

    def test_requires_command(self) -> None:
        """Should refuse an empty command line"""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_parallel_must_be_positive(self, out: Path) -> None:
        """Should reject --parallel 0"""
        with pytest.raises(SystemExit):
            run(["verify", "--suite", "fig5", "--parallel", "0", "--out", str(out)])

    def test_out_from_environment(self, monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
        """Should default --out to SMORE_OUT"""
        monkeypatch.setenv("SMORE_OUT", str(tmp_path / "env"))
        args = build_parser().parse_args(["flex", "--s", "2", "--f", "1", "--lmax", "1"])
        assert args.out == str(tmp_path / "env")
