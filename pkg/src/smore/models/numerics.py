"""
Array aliases and the caller-owned random stream
"""

from typing import Literal, TypeAlias
import numpy as np
import numpy.typing as npt

Matrix: TypeAlias = npt.NDArray[np.float64]
Vector: TypeAlias = npt.NDArray[np.float64]

InitScheme = Literal["zeros", "uniform-scaled", "normal-scaled"]
ActivationKind = Literal["identity", "relu", "tanh"]


class RngState:
    """
    Model: Caller-owned deterministic random stream
    Backed by a Philox counter-based generator so a seed replays identically
    on every platform. Substreams are addressed by integer paths, which lets
    per-token routing run in parallel without sharing state.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()) -> None:
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self._seed = seed
        self._path = path
        sequence = np.random.SeedSequence(seed, spawn_key=path)
        self._generator = np.random.Generator(np.random.Philox(sequence))

    @property
    def seed(self) -> int:
        """Root seed of this stream"""
        return self._seed

    @property
    def path(self) -> tuple[int, ...]:
        """Substream address below the root seed"""
        return self._path

    def substream(self, index: int) -> "RngState":
        """Independent child stream derived from (seed, path, index)"""
        if index < 0:
            raise ValueError(f"substream index must be non-negative, got {index}")
        return RngState(self._seed, self._path + (index,))

    def standard_normal(self, size: int | tuple[int, ...]) -> npt.NDArray[np.float64]:
        return self._generator.standard_normal(size)

    def uniform(
        self, low: float, high: float, size: int | tuple[int, ...]
    ) -> npt.NDArray[np.float64]:
        return self._generator.uniform(low, high, size)

    def permutation(self, n: int) -> list[int]:
        return [int(i) for i in self._generator.permutation(n)]

    def integers(self, low: int, high: int) -> int:
        return int(self._generator.integers(low, high))
