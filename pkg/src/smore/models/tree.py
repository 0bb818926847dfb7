from dataclasses import dataclass, field
from typing import Any
import numpy as np
from .config import ArchitectureSpec, GateKind, RoutingDirection
from .numerics import RngState, Vector

# A node's identity: (pool, expert) pairs from the top of the tree down to the node
Path = tuple[tuple[int, int], ...]
ROOT: Path = ()


@dataclass(slots=True)
class RouteNode:
    """
    Model: One activated expert inside a routing tree
    """

    path: Path
    weight: float
    children: list[Path] = field(default_factory=list)

    @property
    def pool(self) -> int:
        return self.path[-1][0]

    @property
    def expert(self) -> int:
        return self.path[-1][1]


@dataclass(slots=True)
class GateRecord:
    """
    Model: Everything needed to recompute or differentiate one gate decision

    `selected` lists the chosen experts in selection order and `weights` is
    aligned with it. Score-like vectors span the whole pool.
    """

    pool: int
    selected: tuple[int, ...]
    weights: Vector
    clean: Vector
    probs: Vector
    soft_load: Vector
    noise: Vector | None = None
    noise_logits: Vector | None = None
    noisy: Vector | None = None
    query_input: Vector | None = None
    query_pre: Vector | None = None
    query: Vector | None = None
    jitter: Vector | None = None
    position: int | None = None


@dataclass(slots=True)
class SiblingRecord:
    """
    Model: Bottom-up decision for one group of sibling positions

    Each position is scored by its own perceptron call; siblings receive
    distinct experts. `positions[j]` holds the j-th sibling's GateRecord with
    a single selected expert; `weights` are the group-level gate weights.
    """

    pool: int
    positions: list[GateRecord]
    weights: Vector


@dataclass
class RoutingTree:
    """
    Model: Token-specific activated tree below a virtual root

    Nodes are keyed by their path. records[parent] keeps the gate decision
    that produced parent's children (ROOT for the top pool).
    """

    depth: int
    nodes: dict[Path, RouteNode] = field(default_factory=dict)
    root_children: list[Path] = field(default_factory=list)
    records: dict[Path, GateRecord | SiblingRecord] = field(default_factory=dict)
    direction: RoutingDirection = "top-down"
    x_down: Vector | None = None
    jitter: Vector | None = None

    def add(self, parent: Path, pool: int, expert: int, weight: float) -> Path:
        """
        Attach a child to parent (ROOT for the top pool)

        Raises:
            ValueError: If the parent is unknown, the pool is not one below the
                parent's, or the expert is already a child of that parent
        """
        expected_pool = self.depth - 1 if parent == ROOT else parent[-1][0] - 1
        if pool != expected_pool:
            raise ValueError(
                f"child of {parent} must come from pool {expected_pool}, got pool {pool}"
            )
        siblings = self.root_children if parent == ROOT else self.node(parent).children
        if any(sibling[-1][1] == expert for sibling in siblings):
            raise ValueError(f"expert {expert} selected twice under {parent}")
        path = parent + ((pool, expert),)
        self.nodes[path] = RouteNode(path=path, weight=weight)
        siblings.append(path)
        return path

    def node(self, path: Path) -> RouteNode:
        if path not in self.nodes:
            raise ValueError(f"no node at path {path}")
        return self.nodes[path]

    def children(self, path: Path) -> list[RouteNode]:
        """Children of path in ascending expert order (the aggregation order)"""
        keys = self.root_children if path == ROOT else self.node(path).children
        return sorted((self.nodes[k] for k in keys), key=lambda n: n.expert)

    def level(self, pool: int) -> list[RouteNode]:
        """Nodes drawn from one pool, in path order"""
        return sorted(
            (n for n in self.nodes.values() if n.pool == pool), key=lambda n: n.path
        )

    def leaves(self) -> list[RouteNode]:
        return [n for n in self.nodes.values() if not n.children]

    def set_weight(self, path: Path, weight: float) -> None:
        self.node(path).weight = weight

    def check(self, spec: ArchitectureSpec) -> None:
        """
        Verify the tree fits the spec

        Raises:
            ValueError: On a depth, pool, expert-index or path mismatch
        """
        if self.depth != spec.depth:
            raise ValueError(f"tree depth {self.depth} does not match spec depth {spec.depth}")
        for path, node in self.nodes.items():
            pool, expert = path[-1]
            if not 0 <= pool < spec.depth:
                raise ValueError(f"node {path} references pool {pool} outside the spec")
            if not 0 <= expert < spec.experts[pool]:
                raise ValueError(
                    f"node {path} selects expert {expert} but pool {pool} has "
                    f"{spec.experts[pool]} experts"
                )
            if pool != spec.depth - len(path):
                raise ValueError(f"node {path} sits at the wrong tree level")
            for child in node.children:
                if child[:-1] != path:
                    raise ValueError(f"child {child} does not extend its parent {path}")

    def permuted(self, rng: RngState) -> "RoutingTree":
        """Copy with every child list shuffled; isomorphic to self"""
        copy = RoutingTree(
            depth=self.depth,
            direction=self.direction,
            records=dict(self.records),
            x_down=self.x_down,
            jitter=self.jitter,
        )
        order = rng.permutation(len(self.root_children))
        copy.root_children = [self.root_children[i] for i in order]
        for path, node in self.nodes.items():
            shuffle = rng.permutation(len(node.children))
            copy.nodes[path] = RouteNode(
                path=path,
                weight=node.weight,
                children=[node.children[i] for i in shuffle],
            )
        return copy

    def to_json(self) -> list[dict[str, Any]]:
        """Nodes as JSON-ready dicts, ordered by path"""
        return [
            {
                "path": [list(step) for step in path],
                "pool": node.pool,
                "expert": node.expert,
                "weight": node.weight,
            }
            for path, node in sorted(self.nodes.items())
        ]


@dataclass(frozen=True)
class CanonicalTree:
    """
    Model: Isomorphism-class representative of a routing tree
    The sorted tuple of leaf paths; equal values iff the trees are isomorphic.
    """

    paths: tuple[Path, ...]

    @property
    def leaf_count(self) -> int:
        return len(self.paths)

    def to_json(self) -> list[list[list[int]]]:
        return [[list(step) for step in path] for path in self.paths]


@dataclass
class PoolStats:
    """Per-pool gate statistics summed over routed tokens"""

    importance: Vector
    load: Vector
    soft_load: Vector
    prob_sum: Vector
    score_sum: Vector
    groups: int = 0

    @classmethod
    def empty(cls, size: int) -> "PoolStats":
        return cls(
            importance=np.zeros(size),
            load=np.zeros(size),
            soft_load=np.zeros(size),
            prob_sum=np.zeros(size),
            score_sum=np.zeros(size),
        )

    def merged(self, other: "PoolStats") -> "PoolStats":
        return PoolStats(
            importance=self.importance + other.importance,
            load=self.load + other.load,
            soft_load=self.soft_load + other.soft_load,
            prob_sum=self.prob_sum + other.prob_sum,
            score_sum=self.score_sum + other.score_sum,
            groups=self.groups + other.groups,
        )

    @property
    def utilization(self) -> Vector:
        """Fraction of routed parent groups that selected each expert"""
        if self.groups == 0:
            return np.zeros_like(self.load)
        result: Vector = self.load / self.groups
        return result


@dataclass
class PoolGrads:
    """Derivatives of the auxiliary loss w.r.t. one pool's merged sums"""

    importance: Vector
    soft_load: Vector
    prob_sum: Vector

    @classmethod
    def zeros(cls, size: int) -> "PoolGrads":
        return cls(
            importance=np.zeros(size), soft_load=np.zeros(size), prob_sum=np.zeros(size)
        )


@dataclass
class GateStats:
    """
    Model: Associatively mergeable routing statistics
    """

    gate: GateKind
    pools: list[PoolStats]
    tokens: int = 0

    @classmethod
    def empty(cls, spec: ArchitectureSpec) -> "GateStats":
        return cls(gate=spec.gate, pools=[PoolStats.empty(s) for s in spec.experts])

    def merge(self, other: "GateStats") -> "GateStats":
        if self.gate != other.gate or len(self.pools) != len(other.pools):
            raise ValueError("cannot merge gate stats of different architectures")
        return GateStats(
            gate=self.gate,
            pools=[a.merged(b) for a, b in zip(self.pools, other.pools)],
            tokens=self.tokens + other.tokens,
        )

    def record(self, pool: int, record: GateRecord) -> None:
        """Fold one gate decision into the per-pool sums"""
        stats = self.pools[pool]
        for expert, weight in zip(record.selected, record.weights):
            stats.importance[expert] += weight
            stats.load[expert] += 1.0
        stats.soft_load += record.soft_load
        stats.prob_sum += record.probs
        stats.score_sum += record.clean
        stats.groups += 1

    def record_siblings(self, pool: int, record: SiblingRecord) -> None:
        """
        Fold one bottom-up sibling group into the per-pool sums

        The group counts as one routed parent; probabilities are averaged over
        its positions so every pool's prob_sum grows by one per group.
        """
        stats = self.pools[pool]
        count = len(record.positions)
        for position, weight in zip(record.positions, record.weights):
            expert = position.selected[0]
            stats.importance[expert] += weight
            stats.load[expert] += 1.0
            stats.soft_load += position.soft_load
            stats.prob_sum += position.probs / count
            stats.score_sum += position.clean / count
        stats.groups += 1
