from dataclasses import dataclass
from typing import Annotated, Literal
import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, Field, field_validator
from .config import ArchitectureSpec
from .numerics import InitScheme, Matrix

Optimizer = Literal["sgd", "adam"]


@dataclass(frozen=True)
class SyntheticTask:
    """
    Model: Clustered regression task

    Sample j sits near centers[labels[j]] and its target is
    maps[labels[j]] @ inputs[j], so each cluster wants its own linear map.
    """

    inputs: Matrix
    targets: Matrix
    labels: npt.NDArray[np.int64]
    centers: Matrix
    maps: npt.NDArray[np.float64]
    noise: float

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def clusters(self) -> int:
        return int(self.centers.shape[0])


class TaskConfig(BaseModel):
    """
    Model: Shape of the synthetic task a training run uses
    """

    model_config = {"strict": True, "extra": "forbid", "frozen": True}

    samples: Annotated[int, Field(ge=2, description="Number of samples n")] = 256
    clusters: Annotated[int, Field(ge=2, description="Number of clusters k")] = 4
    noise: Annotated[float, Field(ge=0.0, description="Per-coordinate noise scale")] = 0.05


class TrainConfig(BaseModel):
    """
    Model: Everything a training run needs besides the seed
    """

    model_config = {"strict": True, "extra": "forbid", "frozen": True}

    spec: Annotated[ArchitectureSpec, Field(description="Adapter architecture")]
    task: Annotated[TaskConfig, Field(default_factory=TaskConfig)]
    steps: Annotated[int, Field(ge=1, description="Gradient steps")] = 2000
    lr: Annotated[float, Field(ge=0.0, description="Learning rate")] = 0.3
    batch: Annotated[int, Field(ge=1, description="Tokens per step")] = 16
    optimizer: Annotated[Optimizer, Field(description="sgd or adam")] = "sgd"
    up_init: Annotated[
        InitScheme, Field(description="Initialization of the up-projections")
    ] = "zeros"
    log_every: Annotated[int, Field(ge=1, description="Progress line interval")] = 100


class CostGridConfig(BaseModel):
    """
    Model: Grid evaluated by the cost command
    """

    model_config = {"strict": True, "extra": "forbid", "frozen": True}

    d_model: Annotated[int, Field(ge=1)] = 4096
    experts: Annotated[int, Field(ge=1)] = 4
    fanout: Annotated[int, Field(ge=1)] = 2
    ranks: Annotated[list[int], Field(description="Ranks of the overhead tables")] = [8, 16]
    depths: Annotated[list[int], Field(description="Depths of the overhead tables")] = [
        2,
        3,
        4,
    ]
    router_d_model: Annotated[int, Field(ge=1)] = 2048
    router_d_down: Annotated[int, Field(ge=0)] = 24
    router_key_dim: Annotated[int, Field(ge=0)] = 16
    router_ranks: list[int] = [8, 16, 32, 64]
    router_depths: list[int] = [2, 3]

    @field_validator("ranks", "depths", "router_ranks", "router_depths")
    @classmethod
    def validate_positive(cls, v: list[int]) -> list[int]:
        for value in v:
            if value < 1:
                raise ValueError(f"grid entries must be >= 1, got {value}")
        return v

    @property
    def rows(self) -> list[tuple[int, int]]:
        """(r, L) pairs, rank-major as in the printed tables"""
        return [(r, depth) for r in self.ranks for depth in self.depths]


class TrainRecord(BaseModel):
    """
    Model: One optimization step
    """

    model_config = {"strict": True, "frozen": True}

    step: Annotated[int, Field(ge=0)]
    task_loss: Annotated[float, Field(description="Mean squared error of the batch")]
    aux_loss: Annotated[float, Field(description="Load-balance loss, gamma included")]
    grad_norm: Annotated[float, Field(ge=0.0)]
    utilization: Annotated[
        list[list[float]], Field(description="Per pool, per expert selection fraction")
    ]

    @property
    def total_loss(self) -> float:
        return self.task_loss + self.aux_loss

    @property
    def util_min(self) -> float:
        return min(min(pool) for pool in self.utilization)

    @property
    def util_max(self) -> float:
        return max(max(pool) for pool in self.utilization)


class TrainRun(BaseModel):
    """
    Model: Append-only, step-indexed history of a training run
    """

    model_config = {"strict": True}

    config_hash: Annotated[str, Field(description="SHA-256 of the architecture spec")]
    seed: Annotated[int, Field(ge=0)]
    records: Annotated[list[TrainRecord], Field(default_factory=list)]

    def append(self, record: TrainRecord) -> None:
        """
        Raises:
            ValueError: If the step does not follow the last recorded one
        """
        expected = len(self.records)
        if record.step != expected:
            raise ValueError(f"expected record for step {expected}, got step {record.step}")
        self.records.append(record)

    @property
    def initial_loss(self) -> float:
        return self.records[0].task_loss

    @property
    def final_loss(self) -> float:
        return self.records[-1].task_loss

    def tail(self, fraction: float = 0.1) -> list[TrainRecord]:
        """Last fraction of the records, at least one"""
        count = max(1, int(round(len(self.records) * fraction)))
        return self.records[-count:]


class UtilizationSummary(BaseModel):
    """
    Model: Expert utilization of one pool averaged over a window of steps
    """

    model_config = {"strict": True, "frozen": True}

    pool: Annotated[int, Field(ge=0)]
    min: Annotated[float, Field(ge=0.0, le=1.0)]
    max: Annotated[float, Field(ge=0.0, le=1.0)]
    mean: Annotated[float, Field(ge=0.0, le=1.0)]

    @property
    def imbalance(self) -> float:
        return self.max - self.min


class PairedBalance(BaseModel):
    """
    Model: Same seed trained without and with the load-balance loss
    """

    model_config = {"strict": True, "frozen": True}

    gamma: Annotated[float, Field(gt=0.0)]
    unbalanced: list[UtilizationSummary]
    balanced: list[UtilizationSummary]

    @staticmethod
    def _imbalance(pools: list[UtilizationSummary]) -> float:
        return max(pool.imbalance for pool in pools)

    @property
    def unbalanced_imbalance(self) -> float:
        return self._imbalance(self.unbalanced)

    @property
    def balanced_imbalance(self) -> float:
        return self._imbalance(self.balanced)
