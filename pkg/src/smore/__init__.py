"""
smore - structural mixture of residual experts: hierarchical low-rank
adapters, tree routing and exact flexibility oracles
"""

from .models.bank import BaselineParams, ExpertBank
from .models.config import ArchitectureSpec, DimensionSchedule, SpecError, load_spec
from .models.numerics import RngState
from .models.reports import CheckResult, CostReport, DistinctnessReport, FlexRow, VerifyReport
from .models.trace import ForwardTrace
from .models.training import SyntheticTask, TrainConfig, TrainRecord, TrainRun
from .models.tree import CanonicalTree, GateStats, RoutingTree
from .services.costmodel import flop_count, param_count, router_cost_ratio
from .services.experts import init_baseline, init_bank
from .services.flexibility import (
    count_nonisomorphic,
    enumerate_trees,
    flexibility_table,
    gamma_momor_bound,
    gamma_smore,
    gamma_smore_star,
)
from .services.propagate import backward, forward, forward_smore, forward_smore_star
from .services.router import route, route_bottomup, route_topdown
from .services.trainer import TrainingDiverged, TrainingService, gen_synthetic, train
from .services.verification import VerificationService
from .interface.cli import build_parser, run

__all__ = [
    # Models layer
    "ArchitectureSpec",
    "BaselineParams",
    "CanonicalTree",
    "CheckResult",
    "CostReport",
    "DimensionSchedule",
    "DistinctnessReport",
    "ExpertBank",
    "FlexRow",
    "ForwardTrace",
    "GateStats",
    "RngState",
    "RoutingTree",
    "SpecError",
    "SyntheticTask",
    "TrainConfig",
    "TrainRecord",
    "TrainRun",
    "VerifyReport",
    "load_spec",
    # Services layer
    "TrainingDiverged",
    "TrainingService",
    "VerificationService",
    "backward",
    "count_nonisomorphic",
    "enumerate_trees",
    "flexibility_table",
    "flop_count",
    "forward",
    "forward_smore",
    "forward_smore_star",
    "gamma_momor_bound",
    "gamma_smore",
    "gamma_smore_star",
    "gen_synthetic",
    "init_bank",
    "init_baseline",
    "param_count",
    "route",
    "route_bottomup",
    "route_topdown",
    "router_cost_ratio",
    "train",
    # Interface layer
    "build_parser",
    "run",
]
