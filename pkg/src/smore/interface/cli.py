"""
Command-line front door: flexibility tables, cost tables, verification
suites, training runs and routing/trace dumps
"""

import argparse
import json
import os
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any
from pydantic import ValidationError
from rich.console import Console
from rich.markup import escape
from rich.table import Table
from ..models.bank import ExpertBank
from ..models.config import ArchitectureSpec, SpecError, load_spec
from ..models.numerics import RngState
from ..models.reports import CostRow
from ..models.training import CostGridConfig, TrainConfig
from ..services.costmodel import (
    cost_table,
    format_millions,
    format_overhead,
    format_ratio,
    router_cost_grid,
)
from ..services.experts import init_bank, load_bank, save_bank
from ..services.flexibility import flexibility_table
from ..services.propagate import forward
from ..services.router import route
from ..services.trainer import (
    TrainingDiverged,
    TrainingService,
    gen_synthetic,
    utilization_report,
)
from ..services.verification import SUITES, VerificationService
from .export import (
    InputError,
    config_hash,
    read_tokens,
    train_summary,
    write_cost_csv,
    write_flex_csv,
    write_json,
    write_router_cost_csv,
    write_train_csv,
    write_verify,
)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

DEFAULT_OUT = "out"


def _get_console() -> Console:
    """Lazy-load console only when needed"""
    return Console(file=sys.stderr)


def _logging_disabled() -> bool:
    return os.environ.get("DISABLE_SMORE_LOGGING", "").lower() == "true"


def _info(message: str) -> None:
    if not _logging_disabled():
        _get_console().print(message)


def _wrote(path: Path) -> None:
    _info(f"[green]✓[/green] wrote {path}")


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out)


def _load_bank_for(spec: ArchitectureSpec, args: argparse.Namespace) -> ExpertBank:
    """Bank from --bank, or a fresh one with random up-projections"""
    if args.bank is None:
        return init_bank(spec, RngState(args.seed).substream(0), up_init="normal-scaled")
    try:
        bank = load_bank(Path(args.bank))
    except (ValueError, KeyError) as exc:
        raise InputError(f"cannot load bank from {args.bank}: {exc}") from exc
    if bank.spec != spec:
        raise InputError(f"bank in {args.bank} was built for a different spec")
    return bank


def cmd_flex(args: argparse.Namespace) -> int:
    rows = flexibility_table(args.s, args.f, args.lmax)
    digest = config_hash({"command": "flex", "s": args.s, "f": args.f, "lmax": args.lmax})
    _wrote(write_flex_csv(_out_dir(args) / "flex.csv", rows, digest))
    return EXIT_OK


def cmd_cost(args: argparse.Namespace) -> int:
    grid = CostGridConfig()
    if args.config is not None:
        grid = CostGridConfig.model_validate_json(Path(args.config).read_text(encoding="utf-8"))
    if args.d is not None:
        grid = CostGridConfig.model_validate({**grid.model_dump(), "d_model": args.d})
    digest = config_hash(grid)
    out = _out_dir(args)

    for name, kind in (("params_overhead.csv", "params"), ("flops_overhead.csv", "flops")):
        rows = cost_table(grid.rows, kind, grid.d_model, grid.experts, grid.fanout)
        _wrote(write_cost_csv(out / name, rows, digest))
        if not _logging_disabled():
            _render_cost(name, rows)
    router_rows = router_cost_grid(
        grid.router_ranks,
        grid.router_depths,
        grid.router_d_model,
        grid.router_d_down,
        grid.router_key_dim,
        grid.experts,
        grid.fanout,
    )
    _wrote(write_router_cost_csv(out / "router_cost.csv", router_rows, digest))
    return EXIT_OK


def _render_cost(title: str, rows: list[CostRow]) -> None:
    table = Table(title=title)
    for column in ("r", "L", "d_L", "main", "delta", "ratio"):
        table.add_column(column, justify="right")
    for row in rows:
        table.add_row(
            str(row.rank),
            str(row.depth),
            str(row.d_final),
            format_millions(row.main),
            format_overhead(row.delta),
            format_ratio(row.ratio),
        )
    _get_console().print(table)


def cmd_verify(args: argparse.Namespace) -> int:
    report = VerificationService(seed=args.seed).run(args.suite)
    text, _ = write_verify(_out_dir(args), report)
    _wrote(text)
    if not report.passed:
        for check in report.failures:
            _get_console().print(f"[red]✗[/red] {escape(check.line())}")
        return EXIT_FAILED
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = TrainConfig.model_validate_json(Path(args.config).read_text(encoding="utf-8"))
    if args.steps is not None:
        config = TrainConfig.model_validate(
            {**config.model_dump(), "steps": args.steps}, strict=False
        )
    spec = config.spec.checked()
    task = gen_synthetic(
        args.seed,
        config.task.samples,
        config.task.clusters,
        spec.d_model,
        config.task.noise,
        spec.output_dim,
    )
    rng = RngState(args.seed)
    bank = init_bank(spec, rng.substream(0), up_init=config.up_init)
    run, bank = TrainingService(workers=args.parallel).train(
        spec,
        task,
        config.steps,
        config.lr,
        config.batch,
        rng,
        optimizer=config.optimizer,
        bank=bank,
        log_every=config.log_every,
    )
    digest = config_hash(config)
    out = _out_dir(args)
    _wrote(write_train_csv(out / "train.csv", run, digest))
    summary = train_summary(run, utilization_report(run), digest)
    _wrote(write_json(out / "train.json", summary))
    save_bank(bank, out / "bank")
    _wrote(out / "bank")
    return EXIT_OK


def cmd_route_dump(args: argparse.Namespace) -> int:
    spec = load_spec(Path(args.config))
    tokens = read_tokens(Path(args.tokens), spec.d_model)
    bank = _load_bank_for(spec, args)
    rng = RngState(args.seed).substream(1)
    trees: list[dict[str, Any]] = []
    for index, x in enumerate(tokens):
        tree, _ = route(x, bank, spec, rng.substream(index), "eval")
        trees.append({"token": index, "nodes": tree.to_json()})
    payload = {"config_sha256": spec.config_hash(), "trees": trees}
    _wrote(write_json(_out_dir(args) / "routes.json", payload))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    spec = load_spec(Path(args.config))
    tokens = read_tokens(Path(args.tokens), spec.d_model)
    bank = _load_bank_for(spec, args)
    rng = RngState(args.seed).substream(1)
    traces: list[dict[str, Any]] = []
    for index, x in enumerate(tokens):
        _, trace, _ = forward(x, bank, spec, rng.substream(index), "eval")
        traces.append({"token": index, **trace.to_json(full=args.full)})
    payload = {"config_sha256": spec.config_hash(), "traces": traces}
    _wrote(write_json(_out_dir(args) / "trace.json", payload))
    return EXIT_OK


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Root seed of every random draw")
    common.add_argument(
        "--out",
        default=os.environ.get("SMORE_OUT", DEFAULT_OUT),
        help="Output directory (env SMORE_OUT)",
    )
    common.add_argument(
        "--parallel", type=int, default=1, help="Worker threads for per-token work"
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog="smore", description="Structural mixture of residual experts toolkit"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    flex = commands.add_parser("flex", parents=[common], help="Flexibility table per depth")
    flex.add_argument("--s", type=int, required=True, help="Experts per layer")
    flex.add_argument("--f", type=int, required=True, help="Children per parent")
    flex.add_argument("--lmax", type=int, required=True, help="Deepest layer count")
    flex.set_defaults(handler=cmd_flex)

    cost = commands.add_parser("cost", parents=[common], help="Parameter and FLOP overhead tables")
    cost.add_argument("--config", help="Cost grid JSON, defaults to the published grid")
    cost.add_argument("--d", type=int, help="Override the token width of the tables")
    cost.set_defaults(handler=cmd_cost)

    verify = commands.add_parser("verify", parents=[common], help="Run verification suites")
    verify.add_argument("--suite", choices=[*SUITES, "all"], default="all")
    verify.set_defaults(handler=cmd_verify)

    train = commands.add_parser("train", parents=[common], help="Train on the synthetic task")
    train.add_argument("--config", required=True, help="Training config JSON")
    train.add_argument("--steps", type=int, help="Override the number of steps")
    train.set_defaults(handler=cmd_train)

    for name, handler, text in (
        ("route-dump", cmd_route_dump, "Routing tree of every token as JSON"),
        ("inspect", cmd_inspect, "Forward trace of every token as JSON"),
    ):
        sub = commands.add_parser(name, parents=[common], help=text)
        sub.add_argument("--config", required=True, help="Architecture spec JSON")
        sub.add_argument("--tokens", required=True, help="JSON vector or list of vectors")
        sub.add_argument("--bank", help="Bank directory written by train")
        if name == "inspect":
            sub.add_argument("--full", action="store_true", help="Keep every embedding value")
        sub.set_defaults(handler=handler)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    """
    Parse argv and run one command

    Returns:
        0 on success, 2 on a bad spec, config or input file, 1 on any other
        failure (a failed check, diverged training or a numeric error)
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.parallel < 1:
        parser.error(f"--parallel must be at least 1, got {args.parallel}")
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except TrainingDiverged as exc:
        _get_console().print(f"[red]✗[/red] {escape(str(exc))}")
        return EXIT_FAILED
    except (SpecError, ValidationError, InputError, json.JSONDecodeError, OSError) as exc:
        _get_console().print(f"[red]error:[/red] {escape(str(exc))}", highlight=False)
        return EXIT_CONFIG
    except (ValueError, ArithmeticError) as exc:
        _get_console().print(f"[red]failed:[/red] {escape(str(exc))}", highlight=False)
        return EXIT_FAILED
