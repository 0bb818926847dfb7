"""
CSV and JSON writers for command outputs

Every CSV starts with a "# config_sha256=<hash>" line naming the resolved
configuration it was produced from. Files are written with "\\n" line endings
so re-running a command reproduces them byte for byte.
"""

import csv
import hashlib
import json
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any
import numpy as np
from pydantic import BaseModel
from ..models.numerics import Matrix
from ..models.reports import CostRow, FlexRow, RouterCostRow, VerifyReport
from ..models.training import TrainRun, UtilizationSummary
from ..services.costmodel import format_millions, format_overhead, format_ratio

HASH_PREFIX = "# config_sha256="

FLEX_COLUMNS = ("L", "gamma_smore", "gamma_momor_bound", "gamma_star", "gamma_shared")
COST_COLUMNS = ("r", "L", "d_L", "main", "delta", "ratio", "main_exact", "delta_exact")
ROUTER_COST_COLUMNS = ("r", "L", "router_flops", "expert_flops", "ratio")
TRAIN_COLUMNS = ("step", "task_loss", "aux_loss", "grad_norm", "util_min", "util_max")


class InputError(ValueError):
    """Raised when a token file or stored bank does not fit the command"""


def config_hash(config: BaseModel | dict[str, Any]) -> str:
    """SHA-256 of a model's JSON dump, or of a dict dumped with sorted keys"""
    if isinstance(config, BaseModel):
        text = config.model_dump_json()
    else:
        text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_csv(
    path: Path,
    columns: Sequence[str],
    rows: Iterable[Sequence[object]],
    digest: str,
) -> Path:
    """Write the hash line, a header and the rows; returns path"""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"{HASH_PREFIX}{digest}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def read_csv(path: Path) -> tuple[str | None, list[dict[str, str]]]:
    """
    Read a CSV written by write_csv

    Returns:
        The config hash (None when the hash line is missing) and the rows
    """
    with path.open(encoding="utf-8", newline="") as handle:
        lines = handle.read().splitlines()
    digest: str | None = None
    if lines and lines[0].startswith(HASH_PREFIX):
        digest = lines[0].removeprefix(HASH_PREFIX)
        lines = lines[1:]
    return digest, list(csv.DictReader(lines))


def write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    return path


def write_flex_csv(path: Path, rows: list[FlexRow], digest: str) -> Path:
    return write_csv(
        path,
        FLEX_COLUMNS,
        (
            (row.depth, row.gamma_smore, row.gamma_momor_bound, row.gamma_star, row.gamma_shared)
            for row in rows
        ),
        digest,
    )


def write_cost_csv(path: Path, rows: list[CostRow], digest: str) -> Path:
    """Overhead table with the printed rounding next to the exact integers"""
    return write_csv(
        path,
        COST_COLUMNS,
        (
            (
                row.rank,
                row.depth,
                row.d_final,
                format_millions(row.main),
                format_overhead(row.delta),
                format_ratio(row.ratio),
                row.main,
                row.delta,
            )
            for row in rows
        ),
        digest,
    )


def write_router_cost_csv(path: Path, rows: list[RouterCostRow], digest: str) -> Path:
    return write_csv(
        path,
        ROUTER_COST_COLUMNS,
        (
            (row.rank, row.depth, row.router_flops, row.expert_flops, f"{row.ratio:.4f}")
            for row in rows
        ),
        digest,
    )


def write_train_csv(path: Path, run: TrainRun, digest: str) -> Path:
    return write_csv(
        path,
        TRAIN_COLUMNS,
        (
            (
                record.step,
                repr(record.task_loss),
                repr(record.aux_loss),
                repr(record.grad_norm),
                repr(record.util_min),
                repr(record.util_max),
            )
            for record in run.records
        ),
        digest,
    )


def train_summary(
    run: TrainRun, utilization: list[UtilizationSummary], digest: str
) -> dict[str, Any]:
    """JSON summary of a run: losses, final utilization and provenance"""
    return {
        "config_sha256": digest,
        "spec_sha256": run.config_hash,
        "seed": run.seed,
        "steps": len(run.records),
        "initial_loss": run.initial_loss,
        "final_loss": run.final_loss,
        "loss_ratio": run.final_loss / run.initial_loss if run.initial_loss else None,
        "utilization": [summary.model_dump() for summary in utilization],
    }


def write_verify(directory: Path, report: VerifyReport) -> tuple[Path, Path]:
    """verify.txt with one line per check, verify.json with the full report"""
    directory.mkdir(parents=True, exist_ok=True)
    text = directory / "verify.txt"
    lines = [check.line() for check in report.checks]
    lines.append(f"{report.suite}: {'PASS' if report.passed else 'FAIL'}")
    text.write_text("\n".join(lines) + "\n", encoding="utf-8")
    payload = report.model_dump()
    payload["passed"] = report.passed
    return text, write_json(directory / "verify.json", payload)


def read_tokens(path: Path, width: int) -> Matrix:
    """
    Load tokens from a JSON file holding one vector or a list of vectors

    Raises:
        json.JSONDecodeError: If the file is not valid JSON
        InputError: If the values are not a list of width-wide numeric vectors
    """
    data = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(data, list) and data and not isinstance(data[0], list):
        data = [data]
    if not isinstance(data, list) or not data:
        raise InputError(f"token file {path} must hold a vector or a non-empty list of vectors")
    try:
        tokens = np.array(data, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InputError(f"token file {path} holds non-numeric or ragged values") from exc
    if tokens.ndim != 2 or tokens.shape[1] != width:
        raise InputError(
            f"tokens in {path} must have width {width}, got shape {list(tokens.shape)}"
        )
    return tokens
