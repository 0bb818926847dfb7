"""
Single-node arithmetic of the structural layers, shared by routing and propagation
"""

import numpy as np
from ..models.bank import ExpertBank
from ..models.numerics import Vector
from ..models.trace import NodeTrace
from ..models.tree import Path
from .numerics import activate, activate_grad

# (Ax, BAx) per (pool, expert), filled once per token
ProductCache = dict[tuple[int, int], tuple[Vector, Vector]]


def expert_product(
    x: Vector, level: int, expert: int, bank: ExpertBank, cache: ProductCache
) -> tuple[Vector, Vector]:
    """
    Low-rank term of one expert, computed once per token

    Shared banks key the cache by their single pool, so an expert reused on
    several layers multiplies x only once.
    """
    key = (bank.pool_of(level), expert)
    if key not in cache:
        down: Vector = bank.down_proj(level, expert) @ x
        cache[key] = (down, bank.up_proj(level, expert) @ down)
    return cache[key]


def sigma_forward(
    bank: ExpertBank, level: int, z: Vector
) -> tuple[Vector, Vector | None]:
    """Apply the layer activation; returns the hidden pre-activation for mlp"""
    kind = bank.spec.activation
    if kind == "mlp":
        if bank.sigma is None:
            raise ValueError("activation 'mlp' needs sigma perceptrons in the bank")
        return bank.sigma[level].forward(z)
    return activate(kind, z), None


def sigma_backward(
    bank: ExpertBank,
    grads: ExpertBank,
    level: int,
    z: Vector,
    pre: Vector | None,
    grad_out: Vector,
) -> Vector:
    kind = bank.spec.activation
    if kind == "mlp":
        assert bank.sigma is not None and grads.sigma is not None and pre is not None
        return bank.sigma[level].backward(z, pre, grad_out, grads.sigma[level])
    result: Vector = grad_out * activate_grad(kind, z)
    return result


def node_forward(
    x: Vector,
    path: Path,
    weight: float,
    child_sum: Vector,
    bank: ExpertBank,
    cache: ProductCache,
    star: bool = False,
) -> NodeTrace:
    """
    Contribution of the node at path to its parent, before gate weighting

    smore:       sigma(B A x + W h + b)
    smore-star:  B A x + W sigma(h) + b

    Raises:
        ValueError: If child_sum does not have the width of its layer
    """
    level, expert = path[-1]
    expected = bank.schedule[level]
    if child_sum.shape != (expected,):
        raise ValueError(
            f"dimension schedule mismatch at {path}: child embedding has shape "
            f"{child_sum.shape}, layer {level} expects width {expected}"
        )
    down, low_rank = expert_product(x, level, expert, bank, cache)
    mixer = bank.mixers[level]
    bias = bank.bias(level, expert)

    if star:
        sigma_out, sigma_pre = sigma_forward(bank, level, child_sum)
        output = low_rank + mixer @ sigma_out
        if bias is not None:
            output = output + bias
        return NodeTrace(
            path=path,
            weight=weight,
            child_sum=child_sum,
            down=down,
            low_rank=low_rank,
            sigma_in=child_sum,
            sigma_out=sigma_out,
            output=output,
            sigma_pre=sigma_pre,
        )

    z = low_rank + mixer @ child_sum
    if bias is not None:
        z = z + bias
    sigma_out, sigma_pre = sigma_forward(bank, level, z)
    return NodeTrace(
        path=path,
        weight=weight,
        child_sum=child_sum,
        down=down,
        low_rank=low_rank,
        sigma_in=z,
        sigma_out=sigma_out,
        output=sigma_out,
        sigma_pre=sigma_pre,
    )


def node_backward(
    x: Vector,
    node: NodeTrace,
    grad_output: Vector,
    bank: ExpertBank,
    grads: ExpertBank,
    star: bool = False,
) -> Vector:
    """
    Accumulate the node's parameter gradients and return d/d child_sum
    """
    level, expert = node.path[-1]
    mixer = bank.mixers[level]

    if star:
        grad_z = grad_output
        grads.mixers[level] += np.outer(grad_z, node.sigma_out)
        grad_sigma = mixer.T @ grad_z
        grad_child = sigma_backward(
            bank, grads, level, node.sigma_in, node.sigma_pre, grad_sigma
        )
    else:
        grad_z = sigma_backward(
            bank, grads, level, node.sigma_in, node.sigma_pre, grad_output
        )
        grads.mixers[level] += np.outer(grad_z, node.child_sum)
        grad_child = mixer.T @ grad_z

    pool = bank.pool_of(level)
    grads.up[pool][expert] += np.outer(grad_z, node.down)
    grad_down = bank.up_proj(level, expert).T @ grad_z
    grads.down[pool][expert] += np.outer(grad_down, x)
    if grads.biases is not None:
        grads.biases[level][expert] += grad_z
    return grad_child
