"""Reverse-mode differentiation helpers.

Values are plain ``torch.Tensor`` objects in float64.  A tensor with
``requires_grad`` (or a ``grad_fn``) is attached to the autograd tape; a
tensor without either is a constant.  Input gradients are taken with
``create_graph=True`` so they can be recorded again on an outer tape, which
is what the divergence terms and the FK loss need.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import torch

EXACT_DIVERGENCE_MAX_DIM = 8


def _attached(t: torch.Tensor) -> bool:
    return t.requires_grad or t.grad_fn is not None


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor],
             create_graph: bool = False) -> list[torch.Tensor]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Parameters that do not influence the loss get zero gradients with their
    own shape.
    """
    if loss.dim() != 0:
        raise ValueError(f"backward needs a rank-0 loss, got shape {tuple(loss.shape)}")
    if not _attached(loss):
        raise ValueError("loss is detached from any tape")
    params = list(params)
    grads = torch.autograd.grad(loss, params, create_graph=create_graph,
                                allow_unused=True, retain_graph=create_graph or None)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def _prepare_input(x: torch.Tensor) -> torch.Tensor:
    if x.requires_grad:
        return x
    return x.detach().requires_grad_(True)


def input_gradient(net: Callable, x: torch.Tensor, t, create_graph: bool = True,
                   return_value: bool = False):
    """Gradient of a scalar-per-sample network w.r.t. its input ``x`` ([n, d]).

    With ``create_graph`` the result stays differentiable w.r.t. the network
    parameters.
    """
    with torch.enable_grad():
        x = _prepare_input(x)
        out = net(x, t)
        if out.dim() == 2 and out.shape[1] == 1:
            out = out[:, 0]
        if out.dim() != 1 or out.shape[0] != x.shape[0]:
            raise ValueError(f"network output must be scalar per sample, got {tuple(out.shape)}")
        (grad,) = torch.autograd.grad(out.sum(), x, create_graph=create_graph,
                                      retain_graph=True if create_graph else None)
    if not create_graph:
        grad = grad.detach()
        out = out.detach()
    return (out, grad) if return_value else grad


def rademacher(shape, generator: torch.Generator | None = None, dtype=torch.float64) -> torch.Tensor:
    return torch.randint(0, 2, shape, generator=generator).to(dtype) * 2 - 1


def value_and_divergence(field: Callable, x: torch.Tensor, t, mode: str = "exact",
                         n_probes: int = 8, generator: torch.Generator | None = None,
                         create_graph: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Evaluate ``field(x, t)`` ([n, d]) and its divergence in x ([n]).

    ``mode="exact"`` sums the Jacobian diagonal one coordinate at a time and
    is limited to d <= 8.  ``mode="hutchinson"`` averages v^T J v over
    ``n_probes`` Rademacher probes, an unbiased estimate of the trace.
    """
    d = x.shape[-1]
    if mode == "exact" and d > EXACT_DIVERGENCE_MAX_DIM:
        raise ValueError(f"exact divergence limited to d <= {EXACT_DIVERGENCE_MAX_DIM}, got d={d}")
    if mode == "hutchinson" and n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    if mode not in ("exact", "hutchinson"):
        raise ValueError(f"unknown divergence mode {mode!r}")

    with torch.enable_grad():
        x = _prepare_input(x)
        out = field(x, t)
        if out.shape != x.shape:
            raise ValueError(f"field must map R^d to R^d, got {tuple(out.shape)} for input {tuple(x.shape)}")
        div = torch.zeros(x.shape[0], dtype=x.dtype)
        if mode == "exact":
            for i in range(d):
                (g,) = torch.autograd.grad(out[:, i].sum(), x, create_graph=create_graph,
                                           retain_graph=True)
                div = div + g[:, i]
        else:
            for _ in range(n_probes):
                v = rademacher(x.shape, generator, x.dtype)
                (g,) = torch.autograd.grad(out, x, grad_outputs=v, create_graph=create_graph,
                                           retain_graph=True)
                div = div + (g * v).sum(-1)
            div = div / n_probes
    if not create_graph:
        return out.detach(), div.detach()
    return out, div


def divergence(field: Callable, x: torch.Tensor, t, mode: str = "exact", n_probes: int = 8,
               generator: torch.Generator | None = None, create_graph: bool = True) -> torch.Tensor:
    return value_and_divergence(field, x, t, mode, n_probes, generator, create_graph)[1]


def default_divergence_mode(d: int) -> str:
    return "exact" if d <= 3 else "hutchinson"


def parameters_of(modules: Iterable[torch.nn.Module]) -> list[torch.nn.Parameter]:
    return [p for m in modules if m is not None for p in m.parameters()]
