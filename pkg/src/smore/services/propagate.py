"""
Forward passes of every adapter variant, analytic backprop and the
identity-activation collapse onto a single-layer mixture
"""

import numpy as np
from ..models.bank import BaselineParams, ExpertBank, Selection
from ..models.config import ArchitectureSpec, Mode
from ..models.numerics import Matrix, RngState, Vector
from ..models.trace import ForwardTrace, NodeTrace
from ..models.tree import (
    ROOT,
    GateRecord,
    GateStats,
    Path,
    PoolGrads,
    RoutingTree,
    SiblingRecord,
)
from .layers import ProductCache, node_backward, node_forward
from .router import record_backward, route, route_baseline


def _propagate(
    x: Vector,
    tree: RoutingTree,
    bank: ExpertBank,
    spec: ArchitectureSpec,
    theory: bool,
    star: bool,
) -> tuple[Vector, ForwardTrace]:
    if x.shape != (spec.d_model,):
        raise ValueError(f"token must have shape ({spec.d_model},), got {x.shape}")
    if bank.spec != spec:
        raise ValueError("bank was built for a different architecture spec")
    tree.check(spec)
    cache: ProductCache = {}
    nodes: dict[Path, NodeTrace] = {}

    def weight(path: Path) -> float:
        return 1.0 if theory else tree.node(path).weight

    def aggregate(parent: Path, width: int) -> Vector:
        total = np.zeros(width, dtype=np.float64)
        for child in tree.children(parent):
            total = total + nodes[child.path].weight * nodes[child.path].output
        return total

    for level in range(spec.depth):
        for node in tree.level(level):
            child_sum = aggregate(node.path, bank.schedule[level])
            nodes[node.path] = node_forward(
                x, node.path, weight(node.path), child_sum, bank, cache, star
            )
    root = aggregate(ROOT, bank.schedule.final)
    if bank.proj.shape[1] != root.size:
        raise ValueError(
            f"dimension schedule mismatch: projection expects {bank.proj.shape[1]}, "
            f"got x_L of length {root.size}"
        )
    output: Vector = bank.proj @ root
    trace = ForwardTrace(
        x=x,
        tree=tree,
        variant=spec.variant,
        theory=theory,
        nodes=nodes,
        root=root,
        output=output,
        bank_id=id(bank),
        bank_version=bank.version,
    )
    return output, trace


def forward_smore(
    x: Vector,
    tree: RoutingTree,
    bank: ExpertBank,
    spec: ArchitectureSpec,
    theory: bool = False,
) -> tuple[Vector, ForwardTrace]:
    """
    Propagate a token through its routing tree, leaves first

    Every node contributes sigma(B A x + W h + b) where h is the weighted sum
    of its own children; the root sum x_L is projected to the output.

    Args:
        x: Token of length d
        tree: Routing tree of the token
        bank: Adapter parameters (smore or smore-shared)
        spec: Architecture spec the bank was built from
        theory: Treat every gate weight as 1 (binary masks)

    Returns:
        (x', trace)

    Raises:
        ValueError: On a tree/spec or dimension mismatch
    """
    return _propagate(x, tree, bank, spec, theory, star=False)


def forward_smore_star(
    x: Vector,
    tree: RoutingTree,
    bank: ExpertBank,
    spec: ArchitectureSpec,
    theory: bool = False,
) -> tuple[Vector, ForwardTrace]:
    """Like forward_smore, but each node contributes B A x + W sigma(h) + b"""
    return _propagate(x, tree, bank, spec, theory, star=True)


def forward(
    x: Vector,
    bank: ExpertBank,
    spec: ArchitectureSpec,
    rng: RngState,
    mode: Mode = "eval",
    theory: bool = False,
) -> tuple[Vector, ForwardTrace, GateStats]:
    """Route a token and propagate it with the variant's layer rule"""
    tree, stats = route(x, bank, spec, rng, mode)
    propagate = forward_smore_star if spec.variant == "smore-star" else forward_smore
    output, trace = propagate(x, tree, bank, spec, theory)
    return output, trace, stats


def _mixture(x: Vector, selection: Selection, base: BaselineParams) -> Vector:
    total = np.zeros(base.d_out, dtype=np.float64)
    counts = base.expert_counts()
    for (order, expert), alpha in sorted(selection.items()):
        if not (0 <= order < base.orders and 0 <= expert < counts[order]):
            raise ValueError(f"selection references missing expert ({order}, {expert})")
        total = total + alpha * (base.up[order][expert] @ (base.down[order][expert] @ x))
    return total


def forward_molre(x: Vector, selection: Selection, base: BaselineParams) -> Vector:
    """x' = sum_i alpha_i B_i A_i x over the selected low-rank experts"""
    if base.orders != 1:
        raise ValueError(f"molre has a single order, got {base.orders}")
    return _mixture(x, selection, base)


def forward_momor(x: Vector, selection: Selection, base: BaselineParams) -> Vector:
    """x' = sum over orders l and experts i of alpha_l^i B_l^i A_l^i x"""
    return _mixture(x, selection, base)


def forward_baseline(
    x: Vector,
    base: BaselineParams,
    spec: ArchitectureSpec,
    rng: RngState,
    mode: Mode = "eval",
) -> tuple[Vector, Selection, GateStats]:
    selection, stats = route_baseline(x, base, spec, rng, mode)
    run = forward_molre if base.kind == "molre" else forward_momor
    return run(x, selection, base), selection, stats


def path_coefficients(tree: RoutingTree, theory: bool = False) -> Selection:
    """
    Aggregated coefficient of every (pool, expert) in the tree

    Each node contributes the product of the gate weights along its path;
    with theory=True this counts the nodes holding each expert.
    """
    coefficients: Selection = {}
    for path in sorted(tree.nodes):
        product = 1.0
        if not theory:
            for depth in range(1, len(path) + 1):
                product *= tree.node(path[:depth]).weight
        key = path[-1]
        coefficients[key] = coefficients.get(key, 0.0) + product
    return coefficients


def collapse_to_single_layer(
    bank: ExpertBank, tree: RoutingTree, theory: bool = False
) -> tuple[BaselineParams, Selection]:
    """
    Rewrite an identity-activation adapter on a fixed tree as a MoMOR

    Order l, expert i keeps A_l^i and gets up-projection
    W_proj W_{L-1} ... W_{l+1} B_l^i; the coefficients come from
    path_coefficients.

    Raises:
        ValueError: If the activation is not the identity or the bank has biases
    """
    spec = bank.spec
    if spec.activation != "identity":
        raise ValueError(
            f"collapse defined only for identity activation, got {spec.activation!r}"
        )
    if bank.biases is not None:
        raise ValueError("collapse requires a bank without biases")
    downs: list[list[Matrix]] = []
    ups: list[list[Matrix]] = []
    carry = bank.proj
    stack: list[Matrix] = []
    for level in reversed(range(spec.depth)):
        stack.append(carry)
        carry = carry @ bank.mixers[level]
    for level, product in zip(range(spec.depth), reversed(stack)):
        downs.append([bank.down_proj(level, i).copy() for i in range(spec.experts[level])])
        ups.append([product @ bank.up_proj(level, i) for i in range(spec.experts[level])])
    base = BaselineParams(kind="momor", down=downs, up=ups)
    return base, path_coefficients(tree, theory)


def _aligned(record: GateRecord | SiblingRecord, g_weights: dict[int, float]) -> Vector:
    """Per-expert weight gradients in the record's selection order"""
    if isinstance(record, SiblingRecord):
        experts = [position.selected[0] for position in record.positions]
    else:
        experts = list(record.selected)
    return np.array([g_weights[e] for e in experts], dtype=np.float64)


def backward(
    trace: ForwardTrace,
    grad_out: Vector,
    bank: ExpertBank,
    spec: ArchitectureSpec,
    aux: list[PoolGrads] | None = None,
) -> ExpertBank:
    """
    Reverse-mode gradients of <grad_out, x'> w.r.t. every tensor of the bank

    Gate weights carry gradient into the router; the discrete selection does
    not. aux, when given, adds the load-balance gradients through this
    token's gate records.

    Args:
        trace: Trace of a forward pass with this bank
        grad_out: d loss / d x'
        bank: Parameters of the forward pass
        spec: Architecture spec
        aux: Per-pool auxiliary-loss gradients from aux_loss_grads

    Returns:
        Gradient bank with the bank's shapes

    Raises:
        ValueError: If the bank changed since the trace was taken
    """
    if trace.bank_id != id(bank) or trace.bank_version != bank.version:
        raise ValueError(
            f"stale trace: recorded against bank version {trace.bank_version}, "
            f"bank is now at version {bank.version}"
        )
    if grad_out.shape != (spec.output_dim,):
        raise ValueError(
            f"grad_out must have shape ({spec.output_dim},), got {grad_out.shape}"
        )
    tree = trace.tree
    star = trace.variant == "smore-star"
    grads = bank.zeros_like()
    grads.proj += np.outer(grad_out, trace.root)

    width = bank.router.down.shape[0]
    g_router_input = np.zeros(width, dtype=np.float64)
    g_child_sum: dict[Path, Vector] = {ROOT: bank.proj.T @ grad_out}

    parents: list[Path] = [ROOT]
    for level in reversed(range(spec.depth)):
        for parent in parents:
            g_parent = g_child_sum[parent]
            g_weights: dict[int, float] = {}
            for child in tree.children(parent):
                node = trace.nodes[child.path]
                g_weights[child.expert] = float(g_parent @ node.output)
                g_child_sum[child.path] = node_backward(
                    trace.x, node, node.weight * g_parent, bank, grads, star
                )
            if trace.theory or parent not in tree.records:
                continue
            record = tree.records[parent]
            embedding_grads = record_backward(
                record,
                parent,
                _aligned(record, g_weights),
                bank,
                grads,
                aux,
                g_router_input,
            )
            for expert, g_h in embedding_grads.items():
                child_path = parent + ((level, expert),)
                g_child_sum[child_path] = g_child_sum[child_path] + g_h
        parents = [node.path for node in tree.level(level)]

    if not trace.theory:
        g_down = g_router_input if tree.jitter is None else g_router_input * tree.jitter
        grads.router.down += np.outer(g_down, trace.x)
    return grads
