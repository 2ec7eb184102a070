"""Dense/sparse primitives with explicit backward passes.

The model is a fixed shallow composition, so every differentiable step is
a forward function plus a matching ``*_backward``.  Gradients never flow
into adjacency weights through :func:`sparse_dense_matmul`; callers that
learn edge weights use :func:`sparse_dense_matmul_data_grad`.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from gcmtal.graphbuild import SparseAdjacency


class ShapeError(ValueError):
    pass


class ParamTensor:
    """A learnable matrix and its gradient accumulator."""

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


def dense_affine(X: np.ndarray, W: ParamTensor, b: ParamTensor | None = None) -> np.ndarray:
    """``X @ W (+ b)``."""
    if X.ndim != 2 or X.shape[1] != W.value.shape[0]:
        raise ShapeError(f"cannot multiply {X.shape} by {W.value.shape}")
    out = X @ W.value
    if b is not None:
        out = out + b.value
    return out


def dense_affine_backward(dY: np.ndarray, X: np.ndarray, W: ParamTensor,
                          b: ParamTensor | None = None) -> np.ndarray:
    """Accumulate ``dW``/``db`` and return ``dX``."""
    W.grad += X.T @ dY
    if b is not None:
        b.grad += dY.sum(axis=0)
    return dY @ W.value.T


def sparse_dense_matmul(A: SparseAdjacency, X: np.ndarray) -> np.ndarray:
    if A.shape[1] != X.shape[0]:
        raise ShapeError(f"adjacency {A.shape} incompatible with features {X.shape}")
    return A.to_scipy() @ X


def sparse_dense_matmul_backward(A: SparseAdjacency, dY: np.ndarray) -> np.ndarray:
    """``dX = A^T dY``; the weights of ``A`` are treated as constants."""
    return A.to_scipy().T @ dY


def sparse_dense_matmul_data_grad(A: SparseAdjacency, X: np.ndarray, dY: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the stored weights of ``A`` (aligned with ``A.data``)."""
    return np.einsum("ij,ij->i", dY[A.row_ids()], X[A.indices])


def relu(X: np.ndarray) -> np.ndarray:
    return np.maximum(X, 0.0)


def relu_backward(dY: np.ndarray, X: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return dY * (X > 0)


def softmax_rows(X: np.ndarray) -> np.ndarray:
    z = np.exp(X - X.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


Params = Union[np.ndarray, Sequence[np.ndarray]]


def finite_difference_gradcheck(f: Callable[[], float], theta: Params, grad: Params,
                                eps: float = 1e-5, floor: float = 1e-7) -> float:
    """Largest relative error between ``grad`` and central differences of ``f``.

    ``theta`` arrays are perturbed in place (and restored); ``f`` takes no
    arguments and reads them.  Coordinates whose gradients are both below
    ``floor`` are compared on the absolute scale of ``floor``.
    """
    if isinstance(theta, np.ndarray):
        theta, grad = [theta], [grad]
    worst = 0.0
    for t, g in zip(theta, grad):
        g = np.asarray(g)
        if g.shape != t.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {t.shape}")
        flat = t.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = f()
            flat[k] = orig - eps
            down = f()
            flat[k] = orig
            num = (up - down) / (2.0 * eps)
            ana = float(g.reshape(-1)[k])
            denom = max(abs(num), abs(ana), floor)
            worst = max(worst, abs(num - ana) / denom)
    return worst
