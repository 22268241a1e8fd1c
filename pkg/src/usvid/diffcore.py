"""Differentiable tensor substrate.

Tensors are ``torch.Tensor`` values (float32 for training) and reverse-mode
gradients come from torch autograd. What lives here is the thin contract layer
the rest of the package relies on: ``grad`` with scalar / non-finite checks,
an independent central finite-difference oracle, a gradient comparison report,
inverted dropout with an explicit generator, and a direct (loop) convolution
used to cross-check the fast kernels.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

Tensor = torch.Tensor
Gradients = Dict[str, Tensor]
LossFn = Callable[[Mapping[str, Tensor]], Tensor]


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class _FiniteGuard(TorchFunctionMode):
    # Checks the output of every torch op evaluated inside the block.
    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if isinstance(out, Tensor) and out.is_floating_point() and out.numel():
            if not bool(torch.isfinite(out).all()):
                raise NonFiniteError(getattr(func, "__name__", repr(func)))
        return out


def finite_guard() -> TorchFunctionMode:
    """Context manager raising :class:`NonFiniteError` at the first op that emits NaN/Inf."""
    return _FiniteGuard()


def _leaf_copies(params: Mapping[str, Tensor]) -> Dict[str, Tensor]:
    return {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}


def value_and_grad(
    loss_fn: LossFn, params: Mapping[str, Tensor], check_finite: bool = True
) -> tuple[Tensor, Gradients]:
    """Scalar loss value and its reverse-mode gradient w.r.t. every entry of ``params``.

    Parameters not reached by the loss get an all-zero gradient so the result
    always has exactly one entry per parameter.
    """
    leaves = _leaf_copies(params)
    if check_finite:
        with finite_guard():
            loss = loss_fn(leaves)
    else:
        loss = loss_fn(leaves)
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(leaves)
    gs = torch.autograd.grad(loss.reshape(()), [leaves[n] for n in names], allow_unused=True)
    grads = {
        n: (g.detach() if g is not None else torch.zeros_like(leaves[n].detach()))
        for n, g in zip(names, gs)
    }
    return loss.detach(), grads


def grad(loss_fn: LossFn, params: Mapping[str, Tensor], check_finite: bool = True) -> Gradients:
    return value_and_grad(loss_fn, params, check_finite)[1]


def finite_difference_grad(
    loss_fn: LossFn,
    params: Mapping[str, Tensor],
    h: float = 1e-3,
    upcast: bool = True,
) -> Gradients:
    """Central-difference estimate ``(f(w + h e) - f(w - h e)) / 2h`` per coordinate.

    With ``upcast`` the parameters are promoted to float64 before perturbing, so
    ``loss_fn`` must accept float64 tensors (all ops in this package do).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    dtype = torch.float64 if upcast else None
    base = {k: v.detach().clone().to(dtype or v.dtype) for k, v in params.items()}
    out: Gradients = {}
    with torch.no_grad():
        for name, w in base.items():
            flat = w.view(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(loss_fn(base))
                flat[i] = orig - h
                fm = float(loss_fn(base))
                flat[i] = orig
                g[i] = (fp - fm) / (2.0 * h)
            out[name] = g.view_as(w).to(params[name].dtype)
    return out


@dataclass
class ParamCheck:
    name: str
    passed: bool
    max_abs_err: float
    max_rel_err: float
    worst_index: tuple[int, ...]


@dataclass
class GradCheckReport:
    params: list[ParamCheck]

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if not p.passed]

    def __str__(self) -> str:
        lines = []
        for p in self.params:
            flag = "ok  " if p.passed else "FAIL"
            lines.append(
                f"{flag} {p.name:<32} abs={p.max_abs_err:.3e} rel={p.max_rel_err:.3e} at {p.worst_index}"
            )
        return "\n".join(lines)


def check_gradients(
    analytic: Mapping[str, Tensor],
    numeric: Mapping[str, Tensor],
    rtol: float = 1e-3,
    atol: float = 1e-5,
) -> GradCheckReport:
    """Compare two gradient maps coordinate-wise with ``|a - n| <= atol + rtol * |n|``.

    The worst coordinate is the one with the largest excess over the tolerance.
    """
    if set(analytic) != set(numeric):
        raise ValueError(f"parameter sets differ: {sorted(set(analytic) ^ set(numeric))}")
    rows = []
    for name in analytic:
        a = np.asarray(analytic[name].detach().cpu(), dtype=np.float64)
        n = np.asarray(numeric[name].detach().cpu(), dtype=np.float64)
        if a.shape != n.shape:
            raise ValueError(f"shape mismatch for '{name}': {a.shape} vs {n.shape}")
        if a.size == 0:
            rows.append(ParamCheck(name, True, 0.0, 0.0, ()))
            continue
        diff = np.abs(a - n)
        excess = diff - (atol + rtol * np.abs(n))
        worst = np.unravel_index(int(np.argmax(excess)), a.shape)
        rel = diff / np.maximum(np.abs(n), 1e-12)
        rows.append(
            ParamCheck(
                name=name,
                passed=bool(np.all(excess <= 0)),
                max_abs_err=float(diff.max()),
                max_rel_err=float(np.where(diff == 0, 0.0, rel).max()),
                worst_index=tuple(int(i) for i in worst),
            )
        )
    return GradCheckReport(rows)


def dropout(x: Tensor, p: float, training: bool, generator: torch.Generator | None = None) -> Tensor:
    """Inverted dropout: keep with prob ``1 - p`` and rescale; identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout p must lie in [0, 1)")
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=torch.float32, device=x.device) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    return F.conv2d(x, w, b, stride=stride, padding=padding)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    return F.conv1d(x, w, b, stride=stride, padding=padding)


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                  stride: int = 1, padding: int = 0) -> np.ndarray:
    """Loop-based cross-correlation, (N,C,H,W) x (O,C,kh,kw); reference for :func:`conv2d`."""
    x = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    w = np.asarray(w, dtype=np.float64)
    n, c, hh, ww = x.shape
    o, c2, kh, kw = w.shape
    assert c == c2
    oh = (hh - kh) // stride + 1
    ow = (ww - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = x[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None, None]
    return out


def conv1d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                  stride: int = 1, padding: int = 0) -> np.ndarray:
    """Loop-based 1D cross-correlation, (N,C,L) x (O,C,k); reference for :func:`conv1d`."""
    x = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (padding, padding)))
    w = np.asarray(w, dtype=np.float64)
    k = w.shape[2]
    ol = (x.shape[2] - k) // stride + 1
    out = np.zeros((x.shape[0], w.shape[0], ol))
    for i in range(ol):
        out[:, :, i] = np.einsum("nck,ock->no", x[:, :, i * stride:i * stride + k], w)
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None]
    return out
