"""Dense tensor ops with reverse-mode differentiation.

Thin, shape-checked wrappers over torch's autograd. Every op records itself on
the autograd tape when an input requires grad; :func:`backward` pulls the
gradients for an explicit list of leaves so callers never touch ``.grad``.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Operand shapes do not conform for the requested op."""


class ContractError(ValueError):
    """A precondition of a differentiation call was violated."""


def _shape(t: torch.Tensor) -> tuple[int, ...]:
    return tuple(t.shape)


def as_tensor(data, requires_grad: bool = False, dtype=torch.float32) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=dtype).clone()
    if t.ndim > 0 and any(s < 1 for s in t.shape):
        raise DimensionError(f"all dimension sizes must be >= 1, got {_shape(t)}")
    return t.requires_grad_(requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: cannot contract {_shape(a)} with {_shape(b)}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ {_shape(a)} vs {_shape(b)}")
    return a @ b


def _check_same(name: str, a: torch.Tensor, b) -> None:
    if isinstance(b, torch.Tensor) and b.ndim > 0 and a.shape != b.shape:
        raise DimensionError(f"{name}: shape mismatch {_shape(a)} vs {_shape(b)}")


def add(a: torch.Tensor, b: torch.Tensor | float) -> torch.Tensor:
    _check_same("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor | float) -> torch.Tensor:
    _check_same("mul", a, b)
    return a * b


def softmax(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis (max-shifted)."""
    return torch.softmax(x, dim=-1)


def layer_norm(
    x: torch.Tensor,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = LAYER_NORM_EPS,
) -> torch.Tensor:
    d = x.shape[-1]
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None and _shape(p) != (d,):
            raise DimensionError(f"layer_norm: {name} {_shape(p)} vs last axis {d}")
    return F.layer_norm(x, (d,), weight, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # tanh approximation
    return 0.5 * x * (1.0 + torch.tanh(_GELU_C * (x + 0.044715 * x.pow(3))))


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    if logits.ndim != 2 or targets.ndim != 1 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(
            f"cross_entropy: logits {_shape(logits)} and targets {_shape(targets)} do not conform"
        )
    return F.cross_entropy(logits, targets, reduction=reduction)


def l2_norm(x: torch.Tensor, dim: int | Sequence[int] | None = None) -> torch.Tensor:
    return torch.linalg.vector_norm(x, ord=2, dim=dim)


def argmax(x: torch.Tensor) -> torch.Tensor:
    """Index of the first maximum along the last axis."""
    return torch.argmax(x, dim=-1)


def argsort(x: torch.Tensor) -> torch.Tensor:
    return torch.argsort(x, dim=-1, stable=True)


def backward(loss: torch.Tensor, leaves: Iterable[torch.Tensor]) -> list[torch.Tensor]:
    """Gradients of a scalar ``loss`` for each leaf, in order.

    Leaves that do not influence ``loss`` get an all-zero gradient. Fan-out
    contributions are summed by the autograd engine.
    """
    leaves = list(leaves)
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    if not leaves:
        return []
    if not loss.requires_grad:
        return [torch.zeros_like(t) for t in leaves]
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for t, g in zip(leaves, grads)]
