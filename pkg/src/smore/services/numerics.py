"""
Dense numerics shared by every layer of the package

Arrays are plain float64 numpy arrays; shapes are fixed by the owning types.
"""

from collections.abc import Callable
import numpy as np
import numpy.typing as npt
from scipy.special import expit
from ..models.numerics import ActivationKind, InitScheme, Matrix, RngState, Vector

# Normal-scaled draws are truncated at this many standard deviations
_NORMAL_CLIP = 2.0


def seeded_init(
    rows: int,
    cols: int,
    scheme: InitScheme,
    rng: RngState,
    scale: float | None = None,
) -> Matrix:
    """
    Allocate a rows x cols matrix under an initialization scheme

    Args:
        rows: Number of rows (>= 1)
        cols: Number of columns (>= 1), also the fan-in
        scheme: zeros, uniform-scaled or normal-scaled
        rng: Stream the draws are taken from
        scale: Bound (uniform) or standard deviation (normal); defaults to 1/sqrt(cols)

    Returns:
        Matrix of the requested shape

    Raises:
        ValueError: If either dimension is zero
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"empty shape: cannot initialize a {rows}x{cols} matrix")
    if scheme == "zeros":
        return np.zeros((rows, cols), dtype=np.float64)
    width = scale if scale is not None else 1.0 / np.sqrt(cols)
    if scheme == "uniform-scaled":
        return rng.uniform(-width, width, (rows, cols))
    if scheme == "normal-scaled":
        draws = rng.standard_normal((rows, cols)) * width
        return np.clip(draws, -_NORMAL_CLIP * width, _NORMAL_CLIP * width)
    raise ValueError(
        f"unknown init scheme {scheme!r}; expected zeros, uniform-scaled or normal-scaled"
    )


def seeded_vector(
    size: int, scheme: InitScheme, rng: RngState, scale: float | None = None
) -> Vector:
    """Vector counterpart of seeded_init; zero length yields an empty vector"""
    if size == 0:
        return np.zeros(0, dtype=np.float64)
    return seeded_init(1, size, scheme, rng, scale=scale)[0]


def softmax(v: Vector) -> Vector:
    """Numerically stable softmax (max-subtracted)"""
    if v.size == 0:
        raise ValueError("softmax of an empty vector is undefined")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"softmax input must be finite, got {v}")
    shifted = np.exp(v - np.max(v))
    result: Vector = shifted / shifted.sum()
    return result


def softmax_backward(probs: Vector, grad_probs: Vector) -> Vector:
    """Vector-Jacobian product of softmax at its output probs"""
    result: Vector = probs * (grad_probs - float(probs @ grad_probs))
    return result


def softplus(z: Vector) -> Vector:
    result: Vector = np.logaddexp(0.0, z)
    return result


def sigmoid(z: Vector) -> Vector:
    result: Vector = expit(z)
    return result


def activate(kind: ActivationKind, z: Vector) -> Vector:
    """Elementwise activation"""
    if kind == "identity":
        return z.copy()
    if kind == "relu":
        result: Vector = np.maximum(z, 0.0)
        return result
    if kind == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(kind: ActivationKind, z: Vector) -> Vector:
    """
    Elementwise derivative of activate at z

    The ReLU derivative at exactly 0 is taken from the right, so units that
    start at zero (zero-initialized up-projections) still receive gradient.
    """
    if kind == "identity":
        return np.ones_like(z)
    if kind == "relu":
        return (z >= 0.0).astype(np.float64)
    if kind == "tanh":
        result: Vector = 1.0 - np.tanh(z) ** 2
        return result
    raise ValueError(f"unknown activation {kind!r}")


def finite_diff_grad(
    f: Callable[[Vector], float], theta: Vector, h: float = 1e-5
) -> Vector:
    """
    Central-difference gradient of a scalar function

    Args:
        f: Scalar objective of a flat parameter vector (must not mutate its input)
        theta: Point to differentiate at
        h: Step size (> 0)

    Returns:
        (f(theta + h e_i) - f(theta - h e_i)) / 2h for every coordinate i

    Raises:
        ValueError: If h is not positive or f is non-finite at a shifted point
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    shifted = np.array(theta, dtype=np.float64, copy=True)
    grad = np.zeros_like(shifted)
    for i in range(shifted.size):
        original = shifted[i]
        shifted[i] = original + h
        upper = float(f(shifted))
        shifted[i] = original - h
        lower = float(f(shifted))
        shifted[i] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise ValueError(f"objective is not finite at coordinate {i}")
        grad[i] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(analytic: Vector, numeric: Vector, floor: float = 1e-4) -> Vector:
    """Coordinatewise |a - n| / max(|a|, |n|, floor)"""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    result: Vector = np.abs(analytic - numeric) / scale
    return result


def require_finite(name: str, value: npt.NDArray[np.float64]) -> None:
    """Raise if any entry of value is NaN or infinite"""
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name} contains non-finite entries")
