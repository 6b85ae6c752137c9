"""Differentiable-computation layer.

Tensors, operators and gradient propagation come from PyTorch. This module
pins down the small operator set the networks rely on, with explicit shape
validation, a stop-gradient primitive, a scalar-only ``backward`` and a
central-difference gradient checker used throughout the tests.
"""

from __future__ import annotations

from typing import Callable, Iterable

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

OPERATORS = ("conv2d", "conv2d_transpose", "relu", "linear", "mse_loss", "add", "stop_gradient")


class ShapeError(ValueError):
    """Operator inputs have incompatible shapes."""


class NonDeterministicError(RuntimeError):
    """A function meant to be pure returned different values for equal inputs."""


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass; blocks all gradient to ``x``."""
    return x.detach()


def _require_ndim(name: str, t: Tensor, ndim: int):
    if t.dim() != ndim:
        raise ShapeError(f"{name}: expected {ndim} dimensions, got shape {tuple(t.shape)}")


def _check_conv(x: Tensor, weight: Tensor, in_dim: int, kind: str):
    _require_ndim(f"{kind} input", x, 4)
    _require_ndim(f"{kind} weight", weight, 4)
    if x.shape[1] != weight.shape[in_dim]:
        raise ShapeError(
            f"{kind}: input channel dimension (dim 1) is {x.shape[1]} but weight "
            f"expects {weight.shape[in_dim]}")


def forward(kind: str, *inputs: Tensor, stride: int = 1, padding: int = 0,
            output_padding: int = 0) -> Tensor:
    """Apply one operator of the substrate.

    ``conv2d`` and ``conv2d_transpose`` take ``(x, weight[, bias])`` with
    PyTorch weight layouts; ``linear`` takes ``(x, weight[, bias])`` with
    ``weight`` shaped (out, in).
    """
    if kind == "relu":
        (x,) = inputs
        return F.relu(x)
    if kind == "stop_gradient":
        (x,) = inputs
        return stop_gradient(x)
    if kind == "add":
        a, b = inputs
        if a.shape != b.shape:
            dims = [i for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q]
            raise ShapeError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} differ "
                             f"at dimension {dims[0] if dims else 'count'}")
        return a + b
    if kind == "mse_loss":
        a, b = inputs
        if a.shape != b.shape:
            raise ShapeError(f"mse_loss: prediction {tuple(a.shape)} vs target {tuple(b.shape)}")
        return F.mse_loss(a, b)
    if kind == "linear":
        x, weight, *rest = inputs
        if x.shape[-1] != weight.shape[1]:
            raise ShapeError(f"linear: input feature dimension (last) is {x.shape[-1]}, "
                             f"weight expects {weight.shape[1]}")
        return F.linear(x, weight, rest[0] if rest else None)
    if kind == "conv2d":
        x, weight, *rest = inputs
        _check_conv(x, weight, 1, kind)
        for d, k in ((2, weight.shape[2]), (3, weight.shape[3])):
            if x.shape[d] + 2 * padding < k:
                raise ShapeError(f"conv2d: spatial dimension {d} ({x.shape[d]}) with padding "
                                 f"{padding} is smaller than kernel size {k}")
        return F.conv2d(x, weight, rest[0] if rest else None, stride=stride, padding=padding)
    if kind == "conv2d_transpose":
        x, weight, *rest = inputs
        _check_conv(x, weight, 0, kind)
        return F.conv_transpose2d(x, weight, rest[0] if rest else None, stride=stride,
                                  padding=padding, output_padding=output_padding)
    raise ValueError(f"unknown operator {kind!r}; expected one of {OPERATORS}")


def backward(loss: Tensor, tensors: Iterable[Tensor] = ()) -> None:
    """Backpropagate a scalar loss.

    Tensors listed in ``tensors`` that the loss does not depend on receive a
    zero gradient instead of ``None``.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    tensors = [t for t in tensors if t.requires_grad]
    loss.backward()
    for t in tensors:
        if t.grad is None:
            t.grad = torch.zeros_like(t)


def numeric_gradient(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float) -> Tensor:
    """Central-difference gradient of a scalar function at ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(fn(x))
            flat[i] = orig - eps
            fm = float(fn(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def analytic_gradient(fn: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    if out.numel() != 1:
        raise ValueError("finite-difference check needs a scalar function")
    (g,) = torch.autograd.grad(out, x, allow_unused=True)
    return torch.zeros_like(x) if g is None else g


def finite_difference_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    The relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    Raises ``NonDeterministicError`` if two evaluations at ``x`` disagree.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with torch.no_grad():
        if not torch.equal(torch.as_tensor(fn(x.detach())), torch.as_tensor(fn(x.detach()))):
            raise NonDeterministicError("function returned different values for the same input")
    a = analytic_gradient(fn, x).double()
    n = numeric_gradient(fn, x, eps).double()
    denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=1e-8)
    return float(((a - n).abs() / denom).max()) if a.numel() else 0.0
