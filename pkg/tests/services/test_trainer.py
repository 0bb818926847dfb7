import os
import numpy as np
import pytest
from smore.models.config import ArchitectureSpec
from smore.models.numerics import RngState
from smore.models.training import TrainRun
from smore.services.experts import init_bank
from smore.services.trainer import (
    TrainingDiverged,
    TrainingService,
    gen_synthetic,
    paired_balance_runs,
    train,
    utilization_report,
)


@pytest.fixture(autouse=True)
def quiet() -> None:
    os.environ["DISABLE_SMORE_LOGGING"] = "true"


def _dense_spec() -> ArchitectureSpec:
    return ArchitectureSpec.uniform(2, 4, 2, 2, d_model=8, gate="dense", d_down=8, key_dim=8)


class TestGenSynthetic:
    """Test suite for the clustered regression task"""

    def test_shapes_and_balance(self) -> None:
        """Should emit balanced clusters with per-cluster linear targets"""
        task = gen_synthetic(0, 64, 4, 8, 0.05, d_out=3)
        assert task.inputs.shape == (64, 8)
        assert task.targets.shape == (64, 3)
        assert task.size == 64
        assert task.clusters == 4
        counts = np.bincount(task.labels, minlength=4)
        assert counts.max() - counts.min() <= 1
        np.testing.assert_allclose(np.linalg.norm(task.centers, axis=1), np.ones(4))
        j = 5
        np.testing.assert_allclose(
            task.targets[j], task.maps[task.labels[j]] @ task.inputs[j], rtol=1e-12
        )

    def test_seed_determinism(self) -> None:
        """Should reproduce the same task from the same seed"""
        a = gen_synthetic(3, 32, 2, 4, 0.1)
        b = gen_synthetic(3, 32, 2, 4, 0.1)
        c = gen_synthetic(4, 32, 2, 4, 0.1)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_centers_are_separated(self) -> None:
        """Should place every pair of centers at least 4 noise sqrt(d) apart"""
        task = gen_synthetic(1, 40, 5, 6, 0.1)
        gaps = np.linalg.norm(task.centers[:, None, :] - task.centers[None, :, :], axis=2)
        assert np.min(gaps[np.triu_indices(5, 1)]) >= 4 * 0.1 * np.sqrt(6)

    def test_reject_bad_shapes(self) -> None:
        """Should need two clusters and a sample per cluster"""
        with pytest.raises(ValueError, match="at least 2 clusters"):
            gen_synthetic(0, 10, 1, 4, 0.1)
        with pytest.raises(ValueError, match="one sample per cluster"):
            gen_synthetic(0, 3, 4, 4, 0.1)

    def test_reject_unseparable_noise(self) -> None:
        """Should give up when the noise swamps the unit sphere"""
        with pytest.raises(ValueError, match="cannot place 4 unit centers"):
            gen_synthetic(0, 16, 4, 2, 10.0)


class TestTrainingService:
    """Test suite for TrainingService"""

    def test_full_batch_descent(self) -> None:
        """Should lower the task loss on a deterministic full batch"""
        spec = _dense_spec()
        task = gen_synthetic(0, 32, 4, 8, 0.05)
        run, bank = TrainingService().train(spec, task, 30, 0.05, 32, RngState(0))
        assert len(run.records) == 30
        assert run.final_loss < run.initial_loss
        assert bank.version == 30
        assert run.config_hash == spec.config_hash()

    def test_parallel_matches_serial(self) -> None:
        """Should produce identical records with a thread pool"""
        spec = ArchitectureSpec.uniform(2, 4, 2, 2, d_model=8, d_down=8, key_dim=8)
        task = gen_synthetic(2, 32, 4, 8, 0.05)
        serial, _ = TrainingService(workers=1).train(spec, task, 5, 0.1, 8, RngState(7))
        threaded, _ = TrainingService(workers=4).train(spec, task, 5, 0.1, 8, RngState(7))
        assert serial.model_dump() == threaded.model_dump()

    def test_records_aux_loss_and_utilization(self) -> None:
        """Should log the load-balance loss and per-pool utilization every step"""
        spec = ArchitectureSpec.uniform(2, 4, 2, 2, d_model=8, d_down=8, key_dim=8)
        task = gen_synthetic(2, 32, 4, 8, 0.05)
        run = train(spec, task, 3, 0.1, 8, RngState(1))
        for record in run.records:
            assert record.aux_loss >= 0.0
            assert [len(pool) for pool in record.utilization] == [4, 4]

    def test_adam_runs(self) -> None:
        """Should accept the adam optimizer"""
        task = gen_synthetic(0, 16, 2, 8, 0.05)
        run = train(_dense_spec(), task, 3, 0.01, 16, RngState(0), optimizer="adam")
        assert len(run.records) == 3

    def test_keeps_given_bank(self) -> None:
        """Should train the bank it is handed"""
        spec = _dense_spec()
        bank = init_bank(spec, RngState(9), up_init="normal-scaled")
        task = gen_synthetic(0, 16, 2, 8, 0.05)
        _, trained = TrainingService().train(spec, task, 2, 0.01, 16, RngState(0), bank=bank)
        assert trained is bank
        assert bank.version == 2

    def test_reject_bad_arguments(self) -> None:
        """Should validate steps, workers and task widths"""
        spec = _dense_spec()
        task = gen_synthetic(0, 16, 2, 8, 0.05)
        with pytest.raises(ValueError, match="steps must be at least 1"):
            TrainingService().train(spec, task, 0, 0.1, 4, RngState(0))
        with pytest.raises(ValueError, match="workers must be at least 1"):
            TrainingService(workers=0)
        narrow = gen_synthetic(0, 16, 2, 4, 0.05)
        with pytest.raises(ValueError, match="task inputs have width 4"):
            TrainingService().train(spec, narrow, 1, 0.1, 4, RngState(0))

    def test_diverged_error(self) -> None:
        """Should name the step and loss and count as a ValueError"""
        error = TrainingDiverged(3, float("inf"))
        assert str(error) == "training diverged at step 3: loss inf"
        assert isinstance(error, ValueError)
        assert error.step == 3


class TestUtilizationReport:
    """Test suite for utilization summaries"""

    def test_requires_records(self) -> None:
        """Should refuse an empty run"""
        with pytest.raises(ValueError, match="at least one recorded step"):
            utilization_report(TrainRun(config_hash="x", seed=0))

    def test_dense_gate_uses_everything(self) -> None:
        """Should report full utilization when every expert is routed"""
        task = gen_synthetic(0, 16, 2, 8, 0.05)
        run = train(_dense_spec(), task, 2, 0.01, 16, RngState(0))
        for summary in utilization_report(run):
            assert summary.min == summary.max == 1.0


@pytest.mark.slow
class TestDemonstrationRuns:
    """Test suite for the long reference runs"""

    @staticmethod
    def _reference_spec() -> ArchitectureSpec:
        return ArchitectureSpec.uniform(2, 4, 2, 2, d_model=16)

    def test_reference_training_run(self) -> None:
        """Should cut the loss to a fifth and keep every expert in use"""
        task = gen_synthetic(0, 256, 4, 16, 0.05)
        run = train(self._reference_spec(), task, 2000, 0.3, 16, RngState(0))
        assert run.final_loss <= 0.2 * run.initial_loss
        for summary in utilization_report(run):
            assert summary.min > 0.05

    def test_paired_balance(self) -> None:
        """Should spread the load more evenly with the balance loss than without"""
        task = gen_synthetic(0, 256, 4, 16, 0.05)
        pair = paired_balance_runs(self._reference_spec(), task, 500, 0.3, 16, seed=0)
        assert pair.gamma == 0.01
        assert len(pair.unbalanced) == len(pair.balanced) == 2
        assert pair.balanced_imbalance < pair.unbalanced_imbalance
