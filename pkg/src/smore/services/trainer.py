"""
Toy regression training that exercises routing, propagation, backprop and
the load-balance loss together
"""

import math
import os
import sys
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TypeVar
import numpy as np
from rich.console import Console
from ..models.bank import ExpertBank
from ..models.config import ArchitectureSpec
from ..models.numerics import RngState, Vector
from ..models.trace import ForwardTrace
from ..models.training import (
    Optimizer,
    PairedBalance,
    SyntheticTask,
    TrainRecord,
    TrainRun,
    UtilizationSummary,
)
from ..models.tree import GateStats, PoolGrads
from .experts import init_bank
from .propagate import backward, forward
from .router import aux_loss_grads, aux_losses

# A step whose loss exceeds this is treated as diverged
DIVERGENCE_LIMIT = 1e6
# Loss growth between consecutive steps that earns a warning
_JUMP_FACTOR = 10.0
_MAX_CENTER_DRAWS = 1000
_ADAM_BETAS = (0.9, 0.999)
_ADAM_EPS = 1e-8

R = TypeVar("R")


def _get_console() -> Console:
    """Lazy-load console only when needed"""
    return Console(file=sys.stderr)


class TrainingDiverged(ValueError):
    """Raised when the loss becomes non-finite or exceeds the divergence limit"""

    def __init__(self, step: int, loss: float) -> None:
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step}: loss {loss}")


def gen_synthetic(
    seed: int,
    n: int,
    k: int,
    d: int,
    noise: float,
    d_out: int | None = None,
) -> SyntheticTask:
    """
    Clustered regression data with one random linear map per cluster

    Centers lie on the unit sphere and are redrawn until every pair is at
    least 4 * noise * sqrt(d) apart. Cluster sizes differ by at most one.

    Args:
        seed: Root seed
        n: Number of samples (>= k)
        k: Number of clusters (>= 2)
        d: Input width
        noise: Standard deviation of the per-coordinate noise
        d_out: Target width, defaults to d

    Raises:
        ValueError: On k < 2, n < k, or centers that cannot be separated
    """
    if k < 2:
        raise ValueError(f"need at least 2 clusters, got {k}")
    if n < k:
        raise ValueError(f"need at least one sample per cluster, got n={n} < k={k}")
    width = d_out if d_out is not None else d
    rng = RngState(seed)
    separation = 4.0 * noise * math.sqrt(d)

    centers: Vector | None = None
    for attempt in range(_MAX_CENTER_DRAWS):
        draw = rng.substream(0).substream(attempt).standard_normal((k, d))
        draw /= np.linalg.norm(draw, axis=1, keepdims=True)
        gaps = np.linalg.norm(draw[:, None, :] - draw[None, :, :], axis=2)
        if np.min(gaps[np.triu_indices(k, 1)]) >= separation:
            centers = draw
            break
    if centers is None:
        raise ValueError(
            f"cannot place {k} unit centers {separation:.3f} apart in {d} dimensions"
        )

    order = rng.substream(1).permutation(n)
    labels = np.array([i % k for i in order], dtype=np.int64)
    maps = rng.substream(2).standard_normal((k, width, d)) / math.sqrt(d)
    inputs = centers[labels] + noise * rng.substream(3).standard_normal((n, d))
    targets = np.einsum("nij,nj->ni", maps[labels], inputs)
    return SyntheticTask(
        inputs=inputs,
        targets=targets,
        labels=labels,
        centers=centers,
        maps=maps,
        noise=noise,
    )


@dataclass
class _Adam:
    first: ExpertBank
    second: ExpertBank
    steps: int = 0

    @classmethod
    def like(cls, bank: ExpertBank) -> "_Adam":
        return cls(first=bank.zeros_like(), second=bank.zeros_like())

    def direction(self, grads: ExpertBank) -> ExpertBank:
        """Bias-corrected update direction; the caller scales it by lr"""
        beta1, beta2 = _ADAM_BETAS
        self.steps += 1
        update = grads.zeros_like()
        for (_, m), (_, v), (_, g), (_, u) in zip(
            self.first.named_tensors(),
            self.second.named_tensors(),
            grads.named_tensors(),
            update.named_tensors(),
        ):
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1**self.steps)
            v_hat = v / (1.0 - beta2**self.steps)
            u += m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        return update


class TrainingService:
    """
    Service: Runs gradient descent on a synthetic task
    Tokens of a batch are independent; with workers > 1 they are evaluated on
    a thread pool and their gradients merged in token order.
    """

    def __init__(self, workers: int = 1) -> None:
        if workers < 1:
            raise ValueError(f"workers must be at least 1, got {workers}")
        self._disable_logging = (
            os.environ.get("DISABLE_SMORE_LOGGING", "").lower() == "true"
        )
        self._workers = workers

    def _map(self, fn: Callable[[int], R], items: range) -> list[R]:
        if self._workers == 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self._workers) as pool:
            return list(pool.map(fn, items))

    def train(
        self,
        spec: ArchitectureSpec,
        task: SyntheticTask,
        steps: int,
        lr: float,
        batch: int,
        rng: RngState,
        optimizer: Optimizer = "sgd",
        bank: ExpertBank | None = None,
        log_every: int = 100,
    ) -> tuple[TrainRun, ExpertBank]:
        """
        Minimize mean ||x' - y||^2 + aux_losses with plain gradient descent

        Args:
            spec: Structural adapter spec
            task: Data set
            steps: Number of steps (>= 1)
            lr: Learning rate
            batch: Tokens per step; a batch covering the data set uses every
                sample in order
            rng: Root stream; step t draws from rng.substream(1).substream(t)
            optimizer: sgd, or adam for experiments
            bank: Initial parameters, defaults to init_bank(spec, rng.substream(0))
                with zero up-projections
            log_every: Steps between progress lines

        Returns:
            The run record and the trained bank

        Raises:
            TrainingDiverged: If the loss stops being finite or exceeds 1e6
        """
        spec = spec.checked()
        if steps < 1:
            raise ValueError(f"steps must be at least 1, got {steps}")
        if task.inputs.shape[1] != spec.d_model:
            raise ValueError(
                f"task inputs have width {task.inputs.shape[1]}, spec expects {spec.d_model}"
            )
        if task.targets.shape[1] != spec.output_dim:
            raise ValueError(
                f"task targets have width {task.targets.shape[1]}, spec outputs {spec.output_dim}"
            )
        steps_rng = rng.substream(1)
        if bank is None:
            bank = init_bank(spec, rng.substream(0))
        adam = _Adam.like(bank) if optimizer == "adam" else None
        run = TrainRun(config_hash=spec.config_hash(), seed=rng.seed)
        previous: float | None = None

        for step in range(steps):
            step_rng = steps_rng.substream(step)
            if batch >= task.size:
                indices = list(range(task.size))
            else:
                indices = step_rng.substream(0).permutation(task.size)[:batch]
            record, grads = self._step(spec, bank, task, indices, step, step_rng)
            loss = record.total_loss
            if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                raise TrainingDiverged(step, loss)
            if previous is not None and loss > _JUMP_FACTOR * previous:
                self._warn(f"loss jumped from {previous:.4g} to {loss:.4g} at step {step}")
            previous = loss
            run.append(record)
            if not self._disable_logging and step % log_every == 0:
                _get_console().print(
                    f"[dim]step {step}: task {record.task_loss:.5f} "
                    f"aux {record.aux_loss:.5f} |g| {record.grad_norm:.4f}[/dim]"
                )
            if adam is not None:
                bank.apply_update(adam.direction(grads), lr)
            else:
                bank.apply_update(grads, lr)
        return run, bank

    def _step(
        self,
        spec: ArchitectureSpec,
        bank: ExpertBank,
        task: SyntheticTask,
        indices: list[int],
        step: int,
        step_rng: RngState,
    ) -> tuple[TrainRecord, ExpertBank]:
        size = len(indices)

        def run_forward(t: int) -> tuple[Vector, ForwardTrace, GateStats]:
            x = task.inputs[indices[t]]
            return forward(x, bank, spec, step_rng.substream(1 + t), "train")

        passes = self._map(run_forward, range(size))
        stats = passes[0][2]
        for _, _, token_stats in passes[1:]:
            stats = stats.merge(token_stats)
        errors = [output - task.targets[indices[t]] for t, (output, _, _) in enumerate(passes)]
        task_loss = float(np.mean([error @ error for error in errors]))
        gamma = spec.balance_coef
        aux_loss = aux_losses(stats, gamma)
        aux: list[PoolGrads] | None = aux_loss_grads(stats, gamma) if gamma > 0 else None

        def run_backward(t: int) -> ExpertBank:
            return backward(passes[t][1], 2.0 * errors[t] / size, bank, spec, aux)

        token_grads = self._map(run_backward, range(size))
        grads = token_grads[0]
        for other in token_grads[1:]:
            grads.add_(other)
        record = TrainRecord(
            step=step,
            task_loss=task_loss,
            aux_loss=float(aux_loss),
            grad_norm=math.sqrt(grads.squared_norm()),
            utilization=[[float(u) for u in pool.utilization] for pool in stats.pools],
        )
        return record, grads

    def _warn(self, message: str) -> None:
        if not self._disable_logging:
            _get_console().print(f"[yellow]⚠️  {message}[/yellow]")


def train(
    spec: ArchitectureSpec,
    task: SyntheticTask,
    steps: int,
    lr: float,
    batch: int,
    rng: RngState,
    optimizer: Optimizer = "sgd",
    bank: ExpertBank | None = None,
) -> TrainRun:
    """Single-threaded training run; see TrainingService.train"""
    run, _ = TrainingService().train(
        spec, task, steps, lr, batch, rng, optimizer=optimizer, bank=bank
    )
    return run


def utilization_report(run: TrainRun, fraction: float = 0.1) -> list[UtilizationSummary]:
    """
    Per-pool utilization averaged over the last fraction of the steps

    Raises:
        ValueError: If the run has no records
    """
    if not run.records:
        raise ValueError("utilization report needs at least one recorded step")
    window = run.tail(fraction)
    summaries: list[UtilizationSummary] = []
    for pool in range(len(window[0].utilization)):
        average = np.mean([record.utilization[pool] for record in window], axis=0)
        summaries.append(
            UtilizationSummary(
                pool=pool,
                min=float(np.min(average)),
                max=float(np.max(average)),
                mean=float(np.mean(average)),
            )
        )
    return summaries


def paired_balance_runs(
    spec: ArchitectureSpec,
    task: SyntheticTask,
    steps: int,
    lr: float,
    batch: int,
    seed: int,
    gamma: float = 0.01,
) -> PairedBalance:
    """Train twice on one seed, without and with the load-balance loss"""
    summaries: list[list[UtilizationSummary]] = []
    for coef in (0.0, gamma):
        variant = spec.model_copy(update={"balance_coef": coef})
        run = train(variant, task, steps, lr, batch, RngState(seed))
        summaries.append(utilization_report(run))
    return PairedBalance(gamma=gamma, unbalanced=summaries[0], balanced=summaries[1])
