"""
Structural-flexibility formulas and the exhaustive oracles that certify them

Counts are exact Python integers. Enumeration refuses to run past its cap
rather than sampling, since a sample cannot certify an equality.
"""

import itertools
import math
from collections.abc import Iterator
from typing import Any
import numpy as np
from ..models.bank import ExpertBank, Selection
from ..models.config import ArchitectureSpec, total_fanout
from ..models.numerics import RngState, Vector
from ..models.reports import DistinctnessReport, FlexRow
from ..models.tree import ROOT, CanonicalTree, Path, RoutingTree
from .experts import init_baseline
from .propagate import forward_momor, forward_smore, forward_smore_star, path_coefficients

DEFAULT_CAP = 10**6
# Outputs closer than this in the infinity norm count as one
CLUSTER_TOL = 1e-9
# Classes whose members are re-evaluated from permuted copies
_PERMUTED_CLASSES = 8

# Nested tuples of expert indices; equal iff two embeddings are indistinguishable under SMoRE*
StarSignature = tuple[Any, ...]


def gamma_smore(spec: ArchitectureSpec) -> int:
    """prod over pools of C(s_l, f_l) ** F_{l+1}"""
    total = 1
    for level, (s, f) in enumerate(zip(spec.experts, spec.effective_fanouts)):
        total *= math.comb(s, f) ** total_fanout(spec, level + 1)
    return total


def gamma_momor_bound(spec: ArchitectureSpec) -> int:
    """
    Upper bound on the distinct selections a MoMOR can make

    The top pool chooses C(s, f) sets; every lower pool activates the union
    of F_{l+1} size-f sets, anything from f to min(F_l, s_l) experts.
    """
    fanouts = spec.effective_fanouts
    top = spec.depth - 1
    total = math.comb(spec.experts[top], fanouts[top])
    for level in range(top):
        s, f = spec.experts[level], fanouts[level]
        widest = min(total_fanout(spec, level), s)
        total *= sum(math.comb(s, i) for i in range(f, widest + 1))
    return total


def gamma_smore_star(spec: ArchitectureSpec) -> int:
    """
    Flexibility of the star variant by recursion over depth

    G_0 = 1 and G_l = C(s, f) * C(G_{l-1} + f - 1, f): each node picks a
    child expert set and, independently, a multiset of child embedding classes.
    """
    classes = 1
    for s, f in zip(spec.experts, spec.effective_fanouts):
        classes = math.comb(s, f) * math.comb(classes + f - 1, f)
    return classes


def gamma_smore_shared(spec: ArchitectureSpec) -> int:
    """
    Flexibility of the shared-bank variant

    Raises:
        ValueError: If expert counts or fanouts differ between layers
    """
    if len(set(spec.experts)) > 1 or len(set(spec.effective_fanouts)) > 1:
        raise ValueError(
            f"shared bank needs uniform experts and fanouts, got {spec.experts} / {spec.fanouts}"
        )
    return gamma_smore(spec)


def tree_count(spec: ArchitectureSpec) -> int:
    """Number of labeled routing trees, one per combination of per-parent choices"""
    return gamma_smore(spec)


def check_cap(spec: ArchitectureSpec, cap: int = DEFAULT_CAP) -> int:
    """
    Return the tree count, refusing specs whose enumeration exceeds cap

    Raises:
        ValueError: If the tree count exceeds cap
    """
    count = tree_count(spec)
    if count > cap:
        raise ValueError(f"enumeration cap exceeded: {count} trees > cap {cap}")
    return count


def near_cap(spec: ArchitectureSpec, cap: int = DEFAULT_CAP) -> bool:
    """True when an enumeration would use more than half of its cap"""
    return tree_count(spec) * 2 > cap


def enumerate_trees(
    spec: ArchitectureSpec, cap: int = DEFAULT_CAP
) -> Iterator[RoutingTree]:
    """
    Every tree a router could produce, all gate weights 1

    Choices are made top pool first, parents in path order, subsets in
    lexicographic order, so the sequence is stable across runs.

    Raises:
        ValueError: If the tree count exceeds cap
    """
    check_cap(spec, cap)
    fanouts = spec.effective_fanouts
    slots: list[list[tuple[int, ...]]] = []
    for level in reversed(range(spec.depth)):
        subsets = list(itertools.combinations(range(spec.experts[level]), fanouts[level]))
        slots.extend([subsets] * total_fanout(spec, level + 1))

    for choice in itertools.product(*slots):
        tree = RoutingTree(depth=spec.depth)
        picks = iter(choice)
        parents: list[Path] = [ROOT]
        for level in reversed(range(spec.depth)):
            children: list[Path] = []
            for parent in parents:
                for expert in next(picks):
                    children.append(tree.add(parent, level, expert, 1.0))
            parents = sorted(children)
        yield tree


def canonicalize(tree: RoutingTree) -> CanonicalTree:
    """Sorted leaf paths; invariant under any reordering of child lists"""
    return CanonicalTree(paths=tuple(sorted(node.path for node in tree.leaves())))


def count_nonisomorphic(spec: ArchitectureSpec, cap: int = DEFAULT_CAP) -> int:
    return len({canonicalize(tree) for tree in enumerate_trees(spec, cap)})


def star_signature(tree: RoutingTree, path: Path = ROOT) -> StarSignature:
    """
    Class of the embedding below path as far as SMoRE* can tell

    A star node adds its own low-rank term to W sigma(h); summing over
    siblings separates the expert identities from the child embeddings, so a
    node's embedding is fixed by the set of child experts and the multiset of
    the children's own embedding classes.
    """
    children = tree.children(path)
    experts = tuple(child.expert for child in children)
    below = tuple(sorted(star_signature(tree, child.path) for child in children))
    return (experts, below)


def count_star_classes(spec: ArchitectureSpec, cap: int = DEFAULT_CAP) -> int:
    return len({star_signature(tree) for tree in enumerate_trees(spec, cap)})


def momor_selection(tree: RoutingTree) -> tuple[frozenset[int], ...]:
    """Set of activated experts per pool, pool 0 first"""
    pools: list[set[int]] = [set() for _ in range(tree.depth)]
    for node in tree.nodes.values():
        pools[node.pool].add(node.expert)
    return tuple(frozenset(p) for p in pools)


def count_momor_selections(spec: ArchitectureSpec, cap: int = DEFAULT_CAP) -> int:
    """Distinct per-pool activation sets over all trees; attains gamma_momor_bound"""
    return len({momor_selection(tree) for tree in enumerate_trees(spec, cap)})


def count_distinct(outputs: list[Vector], tol: float = CLUSTER_TOL) -> int:
    """Greedy clustering: an output joins the first representative within tol"""
    representatives: list[Vector] = []
    for output in outputs:
        if not any(np.max(np.abs(output - r), initial=0.0) <= tol for r in representatives):
            representatives.append(output)
    return len(representatives)


def count_momor_outputs(
    spec: ArchitectureSpec, rng: RngState, cap: int = DEFAULT_CAP
) -> int:
    """
    Distinct outputs of a random MoMOR driven by every tree's activation sets

    Each activated expert enters with coefficient 1, as in the binary-mask
    reading of the bound.
    """
    momor = spec.model_copy(update={"variant": "momor"})
    streams = (rng.substream(i) for i in itertools.count())
    base = init_baseline(momor, next(streams), up_init="normal-scaled")
    x = next(streams).standard_normal(spec.d_model)
    outputs: list[Vector] = []
    seen: set[tuple[frozenset[int], ...]] = set()
    for tree in enumerate_trees(spec, cap):
        pools = momor_selection(tree)
        if pools in seen:
            continue
        seen.add(pools)
        selection: Selection = {
            (level, expert): 1.0 for level, experts in enumerate(pools) for expert in experts
        }
        outputs.append(forward_momor(x, selection, base))
    return count_distinct(outputs)


def count_coefficient_vectors(spec: ArchitectureSpec, cap: int = DEFAULT_CAP) -> int:
    """
    Distinct per-expert node counts over every tree

    With an identity activation the adapter output depends on a tree only
    through these counts, so this is the number of outputs it can tell apart.
    A lower-pool expert can sit under several parents, so counts are not
    binary and the total can exceed the MoMOR bound.
    """
    vectors = {
        tuple(sorted(path_coefficients(tree, theory=True).items()))
        for tree in enumerate_trees(spec, cap)
    }
    return len(vectors)


def _min_pairwise(outputs: list[Vector]) -> float:
    if len(outputs) < 2:
        return float("inf")
    stacked = np.stack(outputs)
    gaps = np.max(np.abs(stacked[:, None, :] - stacked[None, :, :]), axis=2)
    upper = np.triu_indices(len(outputs), k=1)
    return float(np.min(gaps[upper]))


def distinctness_report(
    spec: ArchitectureSpec,
    bank: ExpertBank,
    rng: RngState,
    cap: int = DEFAULT_CAP,
) -> DistinctnessReport:
    """
    Evaluate SMoRE on every enumerated tree and measure class separation

    Classes are counted by grouping the enumerated trees on their canonical
    form; a few trees are also re-evaluated from child-permuted copies to
    measure the intra-class gap.
    """
    x = rng.substream(0).standard_normal(spec.d_model)
    permute = rng.substream(1)
    outputs: list[Vector] = []
    classes: set[CanonicalTree] = set()
    intra = 0.0
    for index, tree in enumerate(enumerate_trees(spec, cap)):
        output, _ = forward_smore(x, tree, bank, spec, theory=True)
        outputs.append(output)
        classes.add(canonicalize(tree))
        if index < _PERMUTED_CLASSES:
            copy, _ = forward_smore(x, tree.permuted(permute), bank, spec, theory=True)
            intra = max(intra, float(np.max(np.abs(copy - output), initial=0.0)))
    return DistinctnessReport(
        trees=len(outputs),
        classes=len(classes),
        distinct_outputs=count_distinct(outputs),
        min_inter_class=_min_pairwise(outputs),
        max_intra_class=intra,
    )


def star_distinctness_report(
    spec: ArchitectureSpec,
    bank: ExpertBank,
    rng: RngState,
    cap: int = DEFAULT_CAP,
) -> DistinctnessReport:
    """
    Evaluate SMoRE* on every tree and group the outputs by star signature

    Trees sharing a signature must agree (up to summation order); distinct
    signatures must separate.
    """
    x = rng.substream(0).standard_normal(spec.d_model)
    by_class: dict[StarSignature, list[Vector]] = {}
    trees = 0
    for tree in enumerate_trees(spec, cap):
        output, _ = forward_smore_star(x, tree, bank, spec, theory=True)
        by_class.setdefault(star_signature(tree), []).append(output)
        trees += 1
    intra = 0.0
    for members in by_class.values():
        for member in members[1:]:
            intra = max(intra, float(np.max(np.abs(member - members[0]), initial=0.0)))
    representatives = [members[0] for members in by_class.values()]
    everything = [output for members in by_class.values() for output in members]
    return DistinctnessReport(
        trees=trees,
        classes=len(by_class),
        distinct_outputs=count_distinct(everything),
        min_inter_class=_min_pairwise(representatives),
        max_intra_class=intra,
    )


def flexibility_table(s: int, f: int, lmax: int) -> list[FlexRow]:
    """
    One row per depth 1..lmax for uniform expert count s and fanout f

    Raises:
        SpecError: If f > s or an argument is out of range
    """
    rows: list[FlexRow] = []
    for depth in range(1, lmax + 1):
        spec = ArchitectureSpec.uniform(depth, s, 1, f, gate="switch").checked()
        rows.append(
            FlexRow(
                depth=depth,
                gamma_smore=gamma_smore(spec),
                gamma_momor_bound=gamma_momor_bound(spec),
                gamma_star=gamma_smore_star(spec),
                gamma_shared=gamma_smore_shared(spec),
            )
        )
    return rows


def reference_spec(**overrides: Any) -> ArchitectureSpec:
    """Two layers of four experts, two children per parent"""
    fields: dict[str, Any] = {"gate": "switch", "d_model": 8}
    fields.update(overrides)
    return ArchitectureSpec.uniform(2, 4, 2, 2, **fields).checked()


def reference_trees() -> dict[str, RoutingTree]:
    """
    Three trees with identical per-pool activation sets

    Top experts 0 and 1 always pick two leaves each. In (a) they hold {0, 2}
    and {1, 3}; in (b) {0, 1} and {2, 3}; (c) swaps the leaf sets of (b).
    """
    layouts = {
        "a": {0: (0, 2), 1: (1, 3)},
        "b": {0: (0, 1), 1: (2, 3)},
        "c": {0: (2, 3), 1: (0, 1)},
    }
    trees: dict[str, RoutingTree] = {}
    for name, layout in layouts.items():
        tree = RoutingTree(depth=2)
        for top, leaves in layout.items():
            parent = tree.add(ROOT, 1, top, 1.0)
            for leaf in leaves:
                tree.add(parent, 0, leaf, 1.0)
        trees[name] = tree
    return trees
