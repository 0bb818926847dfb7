from dataclasses import dataclass
from typing import Any
from .config import Variant
from .numerics import Vector
from .tree import Path, RoutingTree

# Embeddings longer than this are truncated in JSON exports unless full=True
_PREVIEW = 8


@dataclass(slots=True)
class NodeTrace:
    """
    Model: Intermediates of one tree node during a forward pass

    child_sum is the node's own embedding (sum over its children, width d_l);
    low_rank is B A x; sigma_in is what the activation was applied to
    (the pre-activation z for SMoRE, child_sum for SMoRE*); output is the
    node's contribution to its parent before weighting.
    """

    path: Path
    weight: float
    child_sum: Vector
    down: Vector
    low_rank: Vector
    sigma_in: Vector
    sigma_out: Vector
    output: Vector
    sigma_pre: Vector | None = None


@dataclass
class ForwardTrace:
    """
    Model: Everything a forward pass retains for backprop and inspection
    """

    x: Vector
    tree: RoutingTree
    variant: Variant
    theory: bool
    nodes: dict[Path, NodeTrace]
    root: Vector
    output: Vector
    bank_id: int
    bank_version: int

    def embedding(self, path: Path) -> Vector:
        return self.nodes[path].child_sum

    def to_json(self, full: bool = False) -> dict[str, Any]:
        """JSON-ready view; vectors truncated to 8 values unless full"""

        def values(v: Vector) -> list[float]:
            data = [float(a) for a in v]
            return data if full else data[:_PREVIEW]

        return {
            "variant": self.variant,
            "theory": self.theory,
            "input": values(self.x),
            "root": values(self.root),
            "output": values(self.output),
            "nodes": [
                {
                    "path": [list(step) for step in path],
                    "weight": node.weight,
                    "embedding": values(node.child_sum),
                    "pre_activation": values(node.sigma_in),
                    "contribution": values(node.output),
                }
                for path, node in sorted(self.nodes.items())
            ],
        }
