"""
Gates, routing-tree construction and load-balance losses

Top-down routing scores the top pool from the token alone and conditions
every deeper choice on the keys of the experts above it. Bottom-up routing
picks leaves first and scores higher positions from their aggregated child
embeddings.
"""

import math
import numpy as np
import numpy.typing as npt
from scipy.special import ndtr
from ..models.bank import (
    BaselineParams,
    BottomUpRouterParams,
    ExpertBank,
    RouterParams,
    Selection,
)
from ..models.config import ArchitectureSpec, GateKind, Mode, total_fanout
from ..models.numerics import RngState, Vector
from ..models.tree import (
    ROOT,
    GateRecord,
    GateStats,
    Path,
    PoolGrads,
    PoolStats,
    RoutingTree,
    SiblingRecord,
)
from .layers import ProductCache, node_forward
from .numerics import sigmoid, softmax, softmax_backward, softplus

# Added to the learned noise scale so a noisy gate never becomes deterministic
NOISE_FLOOR = 0.01
_CV_EPS = 1e-10
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _top(values: Vector, count: int) -> tuple[int, ...]:
    """Indices of the `count` largest values; the lowest index wins ties"""
    order = np.argsort(-values, kind="stable")
    return tuple(int(i) for i in order[:count])


def _indicator(size: int, selected: tuple[int, ...]) -> Vector:
    hits = np.zeros(size, dtype=np.float64)
    hits[list(selected)] = 1.0
    return hits


def _thresholds(noisy: Vector, k: int) -> npt.NDArray[np.intp]:
    """
    For each expert, the index of the noisy value it has to beat to be in the top k

    Experts already in the top k compete with the (k+1)-th value, the rest
    with the k-th.
    """
    order = np.argsort(-noisy, kind="stable")
    in_top = np.zeros(noisy.size, dtype=bool)
    in_top[order[:k]] = True
    return np.where(in_top, order[k], order[k - 1])


def noise_scale(noise_logits: Vector) -> Vector:
    result: Vector = softplus(noise_logits) + NOISE_FLOOR
    return result


def smooth_load(
    clean: Vector, noise_logits: Vector, noisy: Vector, k: int
) -> Vector:
    """
    Probability that each expert stays in the top k under a fresh noise draw

    Holding the other experts' noisy values fixed, expert i is selected when
    clean_i + eps * std_i beats its threshold, so P_i = Phi((clean_i - thr_i) / std_i).
    """
    if k >= clean.size:
        return np.ones_like(clean)
    std = noise_scale(noise_logits)
    threshold = noisy[_thresholds(noisy, k)]
    result: Vector = ndtr((clean - threshold) / std)
    return result


def _decide(
    clean: Vector,
    noise_logits: Vector | None,
    gate: GateKind,
    f: int,
    rng: RngState,
    mode: Mode,
    pool: int,
    fixed: GateRecord | None = None,
) -> GateRecord:
    """Select and weight experts; a fixed record pins selection and noise"""
    s = clean.size
    if f > s:
        raise ValueError(f"fanout exceeds expert count ({f} > {s})")
    if f < 1:
        raise ValueError(f"fanout must be at least 1, got {f}")
    probs = softmax(clean)

    if gate == "dense":
        everyone = tuple(range(s))
        return GateRecord(
            pool=pool,
            selected=everyone,
            weights=probs.copy(),
            clean=clean,
            probs=probs,
            soft_load=np.ones(s, dtype=np.float64),
        )

    if gate == "switch":
        selected = fixed.selected if fixed is not None else _top(probs, f)
        return GateRecord(
            pool=pool,
            selected=selected,
            weights=probs[list(selected)],
            clean=clean,
            probs=probs,
            soft_load=_indicator(s, selected),
        )

    logits = noise_logits if noise_logits is not None else np.zeros(s, dtype=np.float64)
    noise: Vector | None = None
    if fixed is not None:
        noise = fixed.noise
    elif mode == "train":
        noise = rng.standard_normal(s)
    noisy = clean if noise is None else clean + noise * noise_scale(logits)
    selected = fixed.selected if fixed is not None else _top(noisy, f)
    if noise is None:
        load = _indicator(s, selected)
    else:
        load = smooth_load(clean, logits, noisy, f)
    return GateRecord(
        pool=pool,
        selected=selected,
        weights=softmax(noisy[list(selected)]),
        clean=clean,
        probs=probs,
        soft_load=load,
        noise=noise,
        noise_logits=logits,
        noisy=None if noise is None else noisy,
    )


def gate_select(
    scores: Vector,
    gate: GateKind,
    f: int,
    rng: RngState,
    mode: Mode,
    noise_logits: Vector | None = None,
    pool: int = 0,
) -> GateRecord:
    """
    Select f experts of one pool from their scores

    dense: every expert, softmax weights. noisy-topk: in train mode add
    eps * (softplus(noise_logits) + 0.01), keep the top f and softmax over the
    survivors. switch: softmax over the whole pool, keep the top f
    probabilities as weights.

    Args:
        scores: Clean score of every expert in the pool
        gate: Gate type
        f: Number of experts to select (ignored by the dense gate)
        rng: Stream for the noise draw
        mode: train or eval; eval disables noise
        noise_logits: Learned noise scores of the noisy gate, zero when omitted
        pool: Pool index written into the record

    Returns:
        GateRecord with the selection, aligned weights and the pool-wide scores

    Raises:
        ValueError: If f exceeds the pool size
    """
    return _decide(scores, noise_logits, gate, f, rng, mode, pool)


def _jitter(
    spec: ArchitectureSpec,
    rng: RngState,
    mode: Mode,
    width: int,
    fixed: RoutingTree | None,
) -> Vector | None:
    """Multiplicative uniform jitter of the router input (switch gate, training only)"""
    if fixed is not None:
        return fixed.jitter
    if spec.gate != "switch" or mode != "train" or spec.switch_jitter == 0.0:
        return None
    eps = spec.switch_jitter
    return rng.uniform(1.0 - eps, 1.0 + eps, width)


def _router_input(
    x: Vector,
    down: npt.NDArray[np.float64],
    spec: ArchitectureSpec,
    rng: RngState,
    mode: Mode,
    fixed: RoutingTree | None,
) -> tuple[Vector, Vector | None, Vector]:
    if x.shape != (spec.d_model,):
        raise ValueError(f"token must have shape ({spec.d_model},), got {x.shape}")
    x_down: Vector = down @ x
    jitter = _jitter(spec, rng, mode, x_down.size, fixed)
    x_in = x_down if jitter is None else x_down * jitter
    return x_down, jitter, x_in


def _route_topdown(
    x: Vector,
    bank: ExpertBank,
    spec: ArchitectureSpec,
    rng: RngState,
    mode: Mode,
    fixed: RoutingTree | None = None,
) -> tuple[RoutingTree, GateStats]:
    router = bank.router
    if not isinstance(router, RouterParams):
        raise ValueError("bank carries a bottom-up router; use route_bottomup")
    x_down, jitter, x_in = _router_input(x, router.down, spec, rng, mode, fixed)
    tree = RoutingTree(
        depth=spec.depth, direction="top-down", x_down=x_down, jitter=jitter
    )
    stats = GateStats.empty(spec)
    stats.tokens = 1
    fanouts = spec.effective_fanouts

    parents: list[Path] = [ROOT]
    for pool in reversed(range(spec.depth)):
        children: list[Path] = []
        for parent in parents:
            ancestors = [router.keys[p][e] for p, e in reversed(parent)]
            u = np.concatenate([x_in, *ancestors])
            q, pre = router.queries[pool].forward(u)
            clean: Vector = router.keys[pool] @ q
            logits = None
            if router.noise_keys is not None:
                logits = router.noise_keys[pool] @ q
            pinned = None
            if fixed is not None:
                stored = fixed.records[parent]
                assert isinstance(stored, GateRecord)
                pinned = stored
            record = _decide(
                clean, logits, spec.gate, fanouts[pool], rng, mode, pool, pinned
            )
            record.query_input, record.query_pre, record.query = u, pre, q
            tree.records[parent] = record
            stats.record(pool, record)
            for expert, weight in zip(record.selected, record.weights):
                children.append(tree.add(parent, pool, expert, float(weight)))
        parents = sorted(children)
    return tree, stats


def route_topdown(
    x: Vector, bank: ExpertBank, spec: ArchitectureSpec, rng: RngState, mode: Mode
) -> tuple[RoutingTree, GateStats]:
    """
    Build a token's routing tree from the top pool down

    The top pool is scored from x_down alone; every other parent scores its
    children from concat(x_down, k_parent, ..., k_top). Parents are visited
    level by level in path order, so a seed replays the same tree.
    """
    return _route_topdown(x, bank, spec, rng, mode)


def _decide_position(
    clean: Vector,
    noise_logits: Vector | None,
    gate: GateKind,
    rng: RngState,
    mode: Mode,
    pool: int,
    taken: set[int],
    fixed: GateRecord | None,
) -> GateRecord:
    """One sibling position: best expert not already taken by an earlier sibling"""
    s = clean.size
    probs = softmax(clean)
    noise: Vector | None = None
    noisy: Vector | None = None
    load: Vector
    if gate == "noisy-topk":
        assert noise_logits is not None
        if fixed is not None:
            noise = fixed.noise
        elif mode == "train":
            noise = rng.standard_normal(s)
        if noise is not None:
            noisy = clean + noise * noise_scale(noise_logits)
        values = noisy if noisy is not None else clean
    else:
        values = probs

    if fixed is not None:
        expert = fixed.selected[0]
    else:
        order = np.argsort(-values, kind="stable")
        expert = next(int(i) for i in order if int(i) not in taken)
    if noisy is not None and noise_logits is not None:
        load = smooth_load(clean, noise_logits, noisy, 1)
    else:
        load = _indicator(s, (expert,))
    return GateRecord(
        pool=pool,
        selected=(expert,),
        weights=np.ones(1, dtype=np.float64),
        clean=clean,
        probs=probs,
        soft_load=load,
        noise=noise,
        noise_logits=noise_logits,
        noisy=noisy,
    )


def _pinned_positions(tree: RoutingTree) -> dict[tuple[int, int], GateRecord]:
    pinned: dict[tuple[int, int], GateRecord] = {}
    for record in tree.records.values():
        if isinstance(record, SiblingRecord):
            for position in record.positions:
                assert position.position is not None
                pinned[(record.pool, position.position)] = position
        else:
            assert record.position is not None
            pinned[(0, record.position)] = record
    return pinned


def _route_bottomup(
    x: Vector,
    bank: ExpertBank,
    spec: ArchitectureSpec,
    rng: RngState,
    mode: Mode,
    fixed: RoutingTree | None = None,
) -> tuple[RoutingTree, GateStats]:
    router = bank.router
    if spec.gate == "dense":
        raise ValueError("bottom-up routing is unsupported with the dense gate")
    if not isinstance(router, BottomUpRouterParams):
        raise ValueError("bank carries a top-down router; use route_topdown")
    x_down, jitter, x_in = _router_input(x, router.down, spec, rng, mode, fixed)
    pinned = _pinned_positions(fixed) if fixed is not None else {}
    star = spec.variant == "smore-star"
    fanouts = spec.fanouts
    cache: ProductCache = {}
    stats = GateStats.empty(spec)
    stats.tokens = 1

    # Per pool and position: chosen expert, gate weight, contribution
    experts: list[list[int]] = []
    weights: list[list[float]] = []
    outputs: list[list[Vector]] = []
    records: list[list[GateRecord | SiblingRecord]] = []

    leaf_experts: list[int] = []
    leaf_weights: list[float] = []
    leaf_outputs: list[Vector] = []
    leaf_records: list[GateRecord | SiblingRecord] = []
    empty = np.zeros(0, dtype=np.float64)
    for parent in range(total_fanout(spec, 1)):
        clean: Vector = router.leaf_keys[parent] @ x_in
        logits = None
        if router.leaf_noise_keys is not None:
            logits = router.leaf_noise_keys[parent] @ x_in
        record = _decide(
            clean, logits, spec.gate, fanouts[0], rng, mode, 0, pinned.get((0, parent))
        )
        record.position = parent
        record.query_input = x_in
        leaf_records.append(record)
        stats.record(0, record)
        for expert, weight in zip(record.selected, record.weights):
            node = node_forward(x, ((0, expert),), float(weight), empty, bank, cache, star)
            leaf_experts.append(expert)
            leaf_weights.append(float(weight))
            leaf_outputs.append(node.output)
    experts.append(leaf_experts)
    weights.append(leaf_weights)
    outputs.append(leaf_outputs)
    records.append(leaf_records)

    for pool in range(1, spec.depth):
        below = fanouts[pool - 1]
        width = bank.schedule[pool]
        embeddings: list[Vector] = []
        for position in range(total_fanout(spec, pool)):
            members = range(position * below, (position + 1) * below)
            h = np.zeros(width, dtype=np.float64)
            for child in sorted(members, key=lambda c: experts[pool - 1][c]):
                h = h + weights[pool - 1][child] * outputs[pool - 1][child]
            embeddings.append(h)

        scorer = router.scorers[pool - 1]
        keys = router.position_keys[pool - 1]
        s = spec.experts[pool]
        level_experts: list[int] = []
        level_weights: list[float] = []
        level_outputs: list[Vector] = []
        level_records: list[GateRecord | SiblingRecord] = []
        for group in range(total_fanout(spec, pool + 1)):
            taken: set[int] = set()
            positions: list[GateRecord] = []
            for offset in range(fanouts[pool]):
                index = group * fanouts[pool] + offset
                u = np.concatenate([embeddings[index], keys[index]])
                scores, pre = scorer.forward(u)
                logits = scores[s:] if spec.gate == "noisy-topk" else None
                decision = _decide_position(
                    scores[:s],
                    logits,
                    spec.gate,
                    rng,
                    mode,
                    pool,
                    taken,
                    pinned.get((pool, index)),
                )
                decision.position = index
                decision.query_input, decision.query_pre = u, pre
                taken.add(decision.selected[0])
                positions.append(decision)

            if spec.gate == "noisy-topk":
                values = np.array(
                    [
                        (p.noisy if p.noisy is not None else p.clean)[p.selected[0]]
                        for p in positions
                    ]
                )
                group_weights = softmax(values)
            else:
                group_weights = np.array([p.probs[p.selected[0]] for p in positions])
            for position, weight in zip(positions, group_weights):
                position.weights = np.array([weight])
            siblings = SiblingRecord(pool=pool, positions=positions, weights=group_weights)
            stats.record_siblings(pool, siblings)
            level_records.append(siblings)

            for position, weight in zip(positions, group_weights):
                assert position.position is not None
                expert = position.selected[0]
                node = node_forward(
                    x,
                    ((pool, expert),),
                    float(weight),
                    embeddings[position.position],
                    bank,
                    cache,
                    star,
                )
                level_experts.append(expert)
                level_weights.append(float(weight))
                level_outputs.append(node.output)
        experts.append(level_experts)
        weights.append(level_weights)
        outputs.append(level_outputs)
        records.append(level_records)

    tree = RoutingTree(
        depth=spec.depth, direction="bottom-up", x_down=x_down, jitter=jitter
    )
    above: list[Path] = [ROOT]
    for pool in reversed(range(spec.depth)):
        paths: list[Path] = []
        for index, expert in enumerate(experts[pool]):
            parent = above[index // fanouts[pool]]
            paths.append(tree.add(parent, pool, expert, weights[pool][index]))
        for group, stored in enumerate(records[pool]):
            tree.records[above[group]] = stored
        above = paths
    return tree, stats


def route_bottomup(
    x: Vector, bank: ExpertBank, spec: ArchitectureSpec, rng: RngState, mode: Mode
) -> tuple[RoutingTree, GateStats]:
    """
    Build a token's routing tree from the leaves up

    Each pool-1 position scores the leaf pool with its own key tensor. A
    higher position is scored by a perceptron on concat(child embedding,
    position key); siblings take distinct experts greedily in position order.
    Noisy groups softmax over their chosen noisy scores, switch groups keep
    each position's probability.

    Raises:
        ValueError: With the dense gate or a top-down bank
    """
    return _route_bottomup(x, bank, spec, rng, mode)


def route(
    x: Vector, bank: ExpertBank, spec: ArchitectureSpec, rng: RngState, mode: Mode
) -> tuple[RoutingTree, GateStats]:
    """Dispatch on the spec's routing direction"""
    if spec.routing == "bottom-up":
        return route_bottomup(x, bank, spec, rng, mode)
    return route_topdown(x, bank, spec, rng, mode)


def reweight(
    tree: RoutingTree, x: Vector, bank: ExpertBank, spec: ArchitectureSpec
) -> tuple[RoutingTree, GateStats]:
    """
    Recompute gate weights of a fixed tree under the bank's current values

    Selections, noise draws and jitter are taken from tree, so the result is
    a smooth function of the parameters wherever no score gap closes.
    """
    rng = RngState(0)
    if tree.direction == "bottom-up":
        return _route_bottomup(x, bank, spec, rng, "eval", fixed=tree)
    return _route_topdown(x, bank, spec, rng, "eval", fixed=tree)


def route_baseline(
    x: Vector, base: BaselineParams, spec: ArchitectureSpec, rng: RngState, mode: Mode
) -> tuple[Selection, GateStats]:
    """Gate every order of a MoLRE / MoMOR from a linear score of the token"""
    if len(base.gates) != base.orders:
        raise ValueError(
            f"baseline needs one gate per order, got {len(base.gates)} for {base.orders}"
        )
    selection: Selection = {}
    stats = GateStats.empty(spec)
    stats.tokens = 1
    fanouts = spec.effective_fanouts
    for order, gate in enumerate(base.gates):
        record = gate_select(gate @ x, spec.gate, fanouts[order], rng, mode, pool=order)
        for expert, weight in zip(record.selected, record.weights):
            selection[(order, expert)] = float(weight)
        stats.record(order, record)
    return selection, stats


def cv_squared(v: Vector) -> float:
    """Squared coefficient of variation (unbiased variance), 0 for one entry"""
    if v.size <= 1:
        return 0.0
    return float(np.var(v, ddof=1) / (np.mean(v) ** 2 + _CV_EPS))


def _cv_squared_grad(v: Vector) -> Vector:
    n = v.size
    if n <= 1:
        return np.zeros_like(v)
    mean = float(np.mean(v))
    var = float(np.var(v, ddof=1))
    denom = mean**2 + _CV_EPS
    result: Vector = 2.0 * (v - mean) / ((n - 1) * denom) - var * 2.0 * mean / (
        n * denom**2
    )
    return result


def _switch_fractions(stats: PoolStats) -> tuple[Vector, Vector]:
    total = float(stats.load.sum())
    fraction = stats.load / total if total > 0 else np.zeros_like(stats.load)
    mean_prob = stats.prob_sum / stats.groups if stats.groups else np.zeros_like(stats.prob_sum)
    return fraction, mean_prob


def aux_losses(stats: GateStats, gamma: float) -> float:
    """
    Load-balance loss gamma * sum over pools

    noisy-topk pools add CV^2(importance) + CV^2(load); switch pools add
    s * sum_i fraction_i * mean_prob_i; dense pools add nothing.

    Raises:
        ValueError: If no token was routed
    """
    if stats.tokens < 1:
        raise ValueError("aux_losses needs statistics from at least one token")
    total = 0.0
    for pool in stats.pools:
        if stats.gate == "noisy-topk":
            total += cv_squared(pool.importance) + cv_squared(pool.soft_load)
        elif stats.gate == "switch":
            fraction, mean_prob = _switch_fractions(pool)
            total += pool.load.size * float(fraction @ mean_prob)
    return gamma * total


def aux_loss_grads(stats: GateStats, gamma: float) -> list[PoolGrads]:
    """
    Derivatives of aux_losses w.r.t. each pool's importance, soft load and
    probability sums; hard load counts are constants
    """
    grads: list[PoolGrads] = []
    for pool in stats.pools:
        size = pool.importance.size
        grad = PoolGrads.zeros(size)
        if stats.gate == "noisy-topk":
            grad.importance = gamma * _cv_squared_grad(pool.importance)
            grad.soft_load = gamma * _cv_squared_grad(pool.soft_load)
        elif stats.gate == "switch" and pool.groups:
            fraction, _ = _switch_fractions(pool)
            grad.prob_sum = gamma * size * fraction / pool.groups
        grads.append(grad)
    return grads


def gate_backward(
    record: GateRecord,
    gate: GateKind,
    k: int,
    g_weights: Vector | None = None,
    g_values: Vector | None = None,
    g_probs: Vector | None = None,
    g_load: Vector | None = None,
) -> tuple[Vector, Vector | None]:
    """
    Push gradients of one gate decision back to its clean and noise scores

    Args:
        record: The decision
        gate: Gate type that produced it
        k: Top-k size used by the smooth load estimator
        g_weights: d/d record.weights
        g_values: d/d the (noisy) score of each selected expert, bypassing
            the weight softmax (used by bottom-up sibling groups)
        g_probs: d/d record.probs
        g_load: d/d record.soft_load

    Returns:
        (d/d clean scores, d/d noise logits or None)
    """
    s = record.clean.size
    selected = list(record.selected)
    g_clean = np.zeros(s, dtype=np.float64)
    g_logits = None if record.noise_logits is None else np.zeros(s, dtype=np.float64)
    g_p = np.zeros(s, dtype=np.float64) if g_probs is None else g_probs.copy()
    values = None if g_values is None else g_values.copy()

    if g_weights is not None:
        if gate == "dense":
            g_clean += softmax_backward(record.weights, g_weights)
        elif gate == "switch":
            np.add.at(g_p, selected, g_weights)
        else:
            from_weights = softmax_backward(record.weights, g_weights)
            values = from_weights if values is None else values + from_weights

    if values is not None:
        np.add.at(g_clean, selected, values)
        if record.noise is not None and g_logits is not None:
            assert record.noise_logits is not None
            slope = record.noise[selected] * sigmoid(record.noise_logits[selected])
            np.add.at(g_logits, selected, values * slope)

    g_clean += softmax_backward(record.probs, g_p)

    if (
        gate == "noisy-topk"
        and g_load is not None
        and record.noise is not None
        and record.noisy is not None
        and record.noise_logits is not None
        and g_logits is not None
        and k < s
    ):
        logits = record.noise_logits
        std = noise_scale(logits)
        thresholds = _thresholds(record.noisy, k)
        z = (record.clean - record.noisy[thresholds]) / std
        g_z = g_load * np.exp(-0.5 * z * z) * _INV_SQRT_2PI
        g_clean += g_z / std
        g_std = -g_z * z / std
        g_threshold = -g_z / std
        np.add.at(g_clean, thresholds, g_threshold)
        np.add.at(g_std, thresholds, g_threshold * record.noise[thresholds])
        g_logits += g_std * sigmoid(logits)
    return g_clean, g_logits


def record_backward(
    record: GateRecord | SiblingRecord,
    parent: Path,
    g_weights: Vector,
    bank: ExpertBank,
    grads: ExpertBank,
    aux: list[PoolGrads] | None,
    g_router_input: Vector,
) -> dict[int, Vector]:
    """
    Accumulate router gradients of the decision made under `parent`

    Args:
        record: Decision stored in tree.records[parent]
        parent: Path of the deciding node (ROOT for the top pool)
        g_weights: d/d gate weight of each selected child, aligned with the
            record's selection (sibling groups: position order)
        bank: Parameters used in the forward pass
        grads: Gradient bank receiving the contributions
        aux: Auxiliary-loss gradients per pool, or None
        g_router_input: Running d/d of the jittered x_down, updated in place

    Returns:
        For bottom-up sibling groups, d/d child embedding keyed by the chosen
        expert; empty otherwise
    """
    gate = bank.spec.gate
    pool = record.pool
    if isinstance(record, SiblingRecord):
        return _siblings_backward(record, g_weights, bank, grads, aux)

    selected = list(record.selected)
    pool_aux = aux[pool] if aux is not None else None
    g_w = g_weights.copy()
    if pool_aux is not None:
        g_w += pool_aux.importance[selected]
    g_clean, g_logits = gate_backward(
        record,
        gate,
        len(selected),
        g_weights=g_w,
        g_probs=None if pool_aux is None else pool_aux.prob_sum,
        g_load=None if pool_aux is None else pool_aux.soft_load,
    )

    router, router_grads = bank.router, grads.router
    if isinstance(router, BottomUpRouterParams):
        assert isinstance(router_grads, BottomUpRouterParams)
        assert record.position is not None and record.query_input is not None
        x_in = record.query_input
        router_grads.leaf_keys[record.position] += np.outer(g_clean, x_in)
        g_router_input += router.leaf_keys[record.position].T @ g_clean
        if g_logits is not None and router.leaf_noise_keys is not None:
            assert router_grads.leaf_noise_keys is not None
            router_grads.leaf_noise_keys[record.position] += np.outer(g_logits, x_in)
            g_router_input += router.leaf_noise_keys[record.position].T @ g_logits
        return {}

    assert isinstance(router_grads, RouterParams)
    assert (
        record.query is not None
        and record.query_input is not None
        and record.query_pre is not None
    )
    router_grads.keys[pool] += np.outer(g_clean, record.query)
    g_query = router.keys[pool].T @ g_clean
    if g_logits is not None and router.noise_keys is not None:
        assert router_grads.noise_keys is not None
        router_grads.noise_keys[pool] += np.outer(g_logits, record.query)
        g_query = g_query + router.noise_keys[pool].T @ g_logits
    g_input = router.queries[pool].backward(
        record.query_input, record.query_pre, g_query, router_grads.queries[pool]
    )
    width = g_router_input.size
    g_router_input += g_input[:width]
    m = bank.spec.key_dim
    offset = width
    for ancestor_pool, expert in reversed(parent):
        router_grads.keys[ancestor_pool][expert] += g_input[offset : offset + m]
        offset += m
    return {}


def _siblings_backward(
    record: SiblingRecord,
    g_weights: Vector,
    bank: ExpertBank,
    grads: ExpertBank,
    aux: list[PoolGrads] | None,
) -> dict[int, Vector]:
    gate = bank.spec.gate
    pool = record.pool
    router, router_grads = bank.router, grads.router
    assert isinstance(router, BottomUpRouterParams)
    assert isinstance(router_grads, BottomUpRouterParams)
    pool_aux = aux[pool] if aux is not None else None
    count = len(record.positions)

    g_w = g_weights.copy()
    if pool_aux is not None:
        for k, position in enumerate(record.positions):
            g_w[k] += pool_aux.importance[position.selected[0]]
    g_values = softmax_backward(record.weights, g_w) if gate == "noisy-topk" else None

    width = bank.schedule[pool]
    scorer = router.scorers[pool - 1]
    embedding_grads: dict[int, Vector] = {}
    for k, position in enumerate(record.positions):
        g_probs = None if pool_aux is None else pool_aux.prob_sum / count
        g_load = None if pool_aux is None else pool_aux.soft_load
        if g_values is not None:
            g_clean, g_logits = gate_backward(
                position, gate, 1, g_values=g_values[k : k + 1], g_probs=g_probs, g_load=g_load
            )
        else:
            g_clean, g_logits = gate_backward(
                position, gate, 1, g_weights=g_w[k : k + 1], g_probs=g_probs, g_load=g_load
            )
        g_scores = g_clean if g_logits is None else np.concatenate([g_clean, g_logits])
        assert position.query_input is not None and position.query_pre is not None
        assert position.position is not None
        g_input = scorer.backward(
            position.query_input,
            position.query_pre,
            g_scores,
            router_grads.scorers[pool - 1],
        )
        embedding_grads[position.selected[0]] = g_input[:width]
        router_grads.position_keys[pool - 1][position.position] += g_input[width:]
    return embedding_grads
