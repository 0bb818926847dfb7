from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Literal
import numpy as np
import numpy.typing as npt
from .config import ArchitectureSpec, DimensionSchedule
from .numerics import Matrix, Vector

Tensor = npt.NDArray[np.float64]
NamedTensor = tuple[str, Tensor]
TensorMap = Callable[[Tensor], Tensor]


@dataclass
class Perceptron:
    """
    Model: Two-level perceptron out = W2 tanh(W1 u + b1) + b2
    Used for router query networks, bottom-up scorers and the mlp activation
    """

    w1: Matrix
    b1: Vector
    w2: Matrix
    b2: Vector

    @property
    def in_dim(self) -> int:
        return int(self.w1.shape[1])

    @property
    def hidden(self) -> int:
        return int(self.w1.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.w2.shape[0])

    @property
    def param_count(self) -> int:
        return int(self.w1.size + self.b1.size + self.w2.size + self.b2.size)

    def forward(self, u: Vector) -> tuple[Vector, Vector]:
        """Return the output and the hidden pre-activation kept for backprop"""
        pre: Vector = self.w1 @ u + self.b1
        out: Vector = self.w2 @ np.tanh(pre) + self.b2
        return out, pre

    def backward(
        self, u: Vector, pre: Vector, grad_out: Vector, grads: "Perceptron"
    ) -> Vector:
        """
        Accumulate parameter gradients into grads and return the input gradient

        Args:
            u: Input of the matching forward call
            pre: Hidden pre-activation of the matching forward call
            grad_out: Gradient w.r.t. the output
            grads: Perceptron of the same shapes receiving the gradients
        """
        hidden = np.tanh(pre)
        grads.w2 += np.outer(grad_out, hidden)
        grads.b2 += grad_out
        grad_pre = (self.w2.T @ grad_out) * (1.0 - hidden**2)
        grads.w1 += np.outer(grad_pre, u)
        grads.b1 += grad_pre
        result: Vector = self.w1.T @ grad_pre
        return result

    def tensors(self, prefix: str) -> list[NamedTensor]:
        return [
            (f"{prefix}.w1", self.w1),
            (f"{prefix}.b1", self.b1),
            (f"{prefix}.w2", self.w2),
            (f"{prefix}.b2", self.b2),
        ]


@dataclass
class RouterParams:
    """
    Model: Top-down router
    A token down-projection, per-pool expert keys and one query perceptron
    per pool; pool l reads x_down plus the keys of its L-l-1 ancestors
    """

    down: Matrix
    keys: list[Matrix]
    queries: list[Perceptron]
    noise_keys: list[Matrix] | None = None

    def tensors(self) -> list[NamedTensor]:
        named: list[NamedTensor] = [("router.down", self.down)]
        for level, keys in enumerate(self.keys):
            named.append((f"router.keys[{level}]", keys))
            if self.noise_keys is not None:
                named.append((f"router.noise_keys[{level}]", self.noise_keys[level]))
            named.extend(self.queries[level].tensors(f"router.query[{level}]"))
        return named


@dataclass
class BottomUpRouterParams:
    """
    Model: Bottom-up router
    Pool-0 children are scored per parent position by leaf_keys (F_1 x s_0 x d_down);
    higher pools score every tree position from its aggregated child embedding
    concatenated with a position key. Lists are indexed by pool - 1.
    """

    down: Matrix
    leaf_keys: Tensor
    position_keys: list[Matrix]
    scorers: list[Perceptron]
    leaf_noise_keys: Tensor | None = None

    def tensors(self) -> list[NamedTensor]:
        named: list[NamedTensor] = [
            ("router.down", self.down),
            ("router.leaf_keys", self.leaf_keys),
        ]
        if self.leaf_noise_keys is not None:
            named.append(("router.leaf_noise_keys", self.leaf_noise_keys))
        for offset, keys in enumerate(self.position_keys):
            named.append((f"router.position_keys[{offset + 1}]", keys))
            named.extend(self.scorers[offset].tensors(f"router.scorer[{offset + 1}]"))
        return named


@dataclass
class ExpertBank:
    """
    Model: Every learnable tensor of one structural adapter

    down[p][i] (r x d) and up[p][i] (d_{l+1} x r) are indexed by expert pool p;
    the shared variant keeps a single pool referenced by every layer.
    mixers[l] is W_l (d_{l+1} x d_l), with W_0 of shape d_1 x 0.
    """

    spec: ArchitectureSpec
    schedule: DimensionSchedule
    down: list[list[Matrix]]
    up: list[list[Matrix]]
    mixers: list[Matrix]
    proj: Matrix
    router: RouterParams | BottomUpRouterParams
    biases: list[list[Vector]] | None = None
    sigma: list[Perceptron] | None = None
    version: int = field(default=0, compare=False)

    def pool_of(self, level: int) -> int:
        """Expert pool that serves layer `level`"""
        return 0 if self.spec.is_shared else level

    def down_proj(self, level: int, expert: int) -> Matrix:
        return self.down[self.pool_of(level)][expert]

    def up_proj(self, level: int, expert: int) -> Matrix:
        return self.up[self.pool_of(level)][expert]

    def bias(self, level: int, expert: int) -> Vector | None:
        if self.biases is None:
            return None
        return self.biases[level][expert]

    def named_tensors(self, include_router: bool = True) -> list[NamedTensor]:
        """
        Every tensor in flattening order

        Order: per pool and expert A then B; mixers W_0..W_{L-1}; biases
        layer-major; sigma perceptrons; proj; router tensors last.
        """
        named: list[NamedTensor] = []
        for pool, (downs, ups) in enumerate(zip(self.down, self.up)):
            for expert, (a, b) in enumerate(zip(downs, ups)):
                named.append((f"A[{pool}][{expert}]", a))
                named.append((f"B[{pool}][{expert}]", b))
        for level, mixer in enumerate(self.mixers):
            named.append((f"W[{level}]", mixer))
        if self.biases is not None:
            for level, layer_biases in enumerate(self.biases):
                for expert, b in enumerate(layer_biases):
                    named.append((f"b[{level}][{expert}]", b))
        if self.sigma is not None:
            for level, perceptron in enumerate(self.sigma):
                named.extend(perceptron.tensors(f"sigma[{level}]"))
        named.append(("proj", self.proj))
        if include_router:
            named.extend(self.router.tensors())
        return named

    def size(self, include_router: bool = True) -> int:
        return sum(t.size for _, t in self.named_tensors(include_router))

    def map_tensors(self, fn: TensorMap) -> "ExpertBank":
        """New bank of identical structure with fn applied to every tensor"""

        def perceptron(p: Perceptron) -> Perceptron:
            return Perceptron(fn(p.w1), fn(p.b1), fn(p.w2), fn(p.b2))

        router: RouterParams | BottomUpRouterParams
        if isinstance(self.router, RouterParams):
            router = RouterParams(
                down=fn(self.router.down),
                keys=[fn(k) for k in self.router.keys],
                queries=[perceptron(q) for q in self.router.queries],
                noise_keys=(
                    None
                    if self.router.noise_keys is None
                    else [fn(k) for k in self.router.noise_keys]
                ),
            )
        else:
            router = BottomUpRouterParams(
                down=fn(self.router.down),
                leaf_keys=fn(self.router.leaf_keys),
                position_keys=[fn(k) for k in self.router.position_keys],
                scorers=[perceptron(p) for p in self.router.scorers],
                leaf_noise_keys=(
                    None
                    if self.router.leaf_noise_keys is None
                    else fn(self.router.leaf_noise_keys)
                ),
            )
        return ExpertBank(
            spec=self.spec,
            schedule=self.schedule,
            down=[[fn(a) for a in pool] for pool in self.down],
            up=[[fn(b) for b in pool] for pool in self.up],
            mixers=[fn(w) for w in self.mixers],
            proj=fn(self.proj),
            router=router,
            biases=(
                None
                if self.biases is None
                else [[fn(b) for b in layer] for layer in self.biases]
            ),
            sigma=None if self.sigma is None else [perceptron(p) for p in self.sigma],
        )

    def copy(self) -> "ExpertBank":
        return self.map_tensors(lambda t: t.copy())

    def zeros_like(self) -> "ExpertBank":
        """Gradient accumulator with this bank's shapes"""
        return self.map_tensors(lambda t: np.zeros_like(t))

    def add_(self, other: "ExpertBank") -> None:
        """Elementwise in-place sum, used to merge per-token gradients"""
        for (name, mine), (other_name, theirs) in zip(
            self.named_tensors(), other.named_tensors()
        ):
            if name != other_name or mine.shape != theirs.shape:
                raise ValueError(f"cannot merge banks: {name} vs {other_name}")
            mine += theirs

    def scale_(self, factor: float) -> None:
        for _, tensor in self.named_tensors():
            tensor *= factor

    def squared_norm(self) -> float:
        return float(sum(np.sum(t * t) for _, t in self.named_tensors()))

    def apply_update(self, grads: "ExpertBank", lr: float) -> None:
        """
        Gradient-descent step, the only mutation entry point of a bank
        Bumps the version so traces from before the step are rejected
        """
        for (name, param), (_, grad) in zip(
            self.named_tensors(), grads.named_tensors()
        ):
            if param.shape != grad.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            param -= lr * grad
        self.version += 1


Selection = dict[tuple[int, int], float]


@dataclass
class BaselineParams:
    """
    Model: Single-layer baselines
    MoLRE has one order; MoMOR has one order per residual level. down[l][i] is
    r_l x d, up[l][i] maps back to d_out, gates[l] scores order l linearly.
    """

    kind: Literal["molre", "momor"]
    down: list[list[Matrix]]
    up: list[list[Matrix]]
    gates: list[Matrix] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.down) != len(self.up):
            raise ValueError(
                f"baseline needs matching orders, got {len(self.down)} down and {len(self.up)} up"
            )
        if self.kind == "molre" and len(self.down) != 1:
            raise ValueError(f"molre baseline has exactly one order, got {len(self.down)}")

    @property
    def orders(self) -> int:
        return len(self.down)

    @property
    def d_model(self) -> int:
        return int(self.down[0][0].shape[1])

    @property
    def d_out(self) -> int:
        return int(self.up[0][0].shape[0])

    def expert_counts(self) -> list[int]:
        return [len(order) for order in self.down]

    def ranks(self) -> list[int]:
        """Rank of each order; raises if an order mixes ranks"""
        ranks: list[int] = []
        for level, order in enumerate(self.down):
            order_ranks = {int(a.shape[0]) for a in order}
            if len(order_ranks) != 1:
                raise ValueError(
                    f"rank mismatch in order {level}: experts have ranks {sorted(order_ranks)}"
                )
            ranks.append(order_ranks.pop())
        return ranks
