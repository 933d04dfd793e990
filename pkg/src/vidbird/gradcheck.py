"""Central finite-difference checks of autograd parameter gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from torch import nn


def relative_error(analytic: float, numeric: float, floor: float = 1e-12) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def parameter_gradcheck(
    module: nn.Module,
    scalar_fn: Callable[[], torch.Tensor],
    eps: float = 1e-6,
    max_coords_per_tensor: int | None = None,
    seed: int = 0,
) -> tuple[float, int]:
    """Compare autograd gradients of ``scalar_fn()`` with central differences.

    ``scalar_fn`` must re-run the forward pass through ``module`` and return a
    0-d tensor. With ``max_coords_per_tensor`` only that many randomly chosen
    coordinates of each parameter are perturbed. Returns the maximum relative
    error and the number of coordinates checked.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    out = scalar_fn()
    analytic = torch.autograd.grad(out, params, allow_unused=True)
    rng = np.random.default_rng(seed)

    worst, checked = 0.0, 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            coords = np.arange(flat.numel())
            if max_coords_per_tensor is not None and flat.numel() > max_coords_per_tensor:
                coords = np.sort(rng.choice(flat.numel(), size=max_coords_per_tensor, replace=False))
            gflat = g.reshape(-1)
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + eps
                f_plus = scalar_fn().item()
                flat[c] = orig - eps
                f_minus = scalar_fn().item()
                flat[c] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                worst = max(worst, relative_error(gflat[c].item(), numeric))
                checked += 1
    return worst, checked


def calibrate_batchnorm(model: nn.Module, x: torch.Tensor) -> None:
    """Replace batch-norm running statistics with those of ``x``; leaves ``model`` in eval mode."""
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average: one pass sets the statistics exactly
    model.train()
    with torch.no_grad():
        model(x)
    for m, mom in zip(norms, saved):
        m.momentum = mom
    model.eval()


def directional_gradcheck(
    module: nn.Module,
    scalar_fn: Callable[[], torch.Tensor],
    eps: float = 1e-6,
    directions_per_tensor: int = 3,
    seed: int = 0,
) -> tuple[float, int]:
    """Check ``grad . v`` against ``(f(p + eps v) - f(p - eps v)) / 2 eps``.

    Each direction ``v`` is a random unit vector inside one parameter tensor.
    Unlike single coordinates, whose gradients in a deep network can sit many
    orders of magnitude below the scalar's rounding noise, a projection onto
    a random direction has a magnitude near the tensor's gradient norm, so the
    comparison stays well conditioned. Returns ``(max relative error, checks)``.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    analytic = torch.autograd.grad(scalar_fn(), params, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst, checked = 0.0, 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            for _ in range(directions_per_tensor):
                v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
                v /= v.norm()
                p.add_(v, alpha=eps)
                f_plus = scalar_fn().item()
                p.add_(v, alpha=-2 * eps)
                f_minus = scalar_fn().item()
                p.add_(v, alpha=eps)
                numeric = (f_plus - f_minus) / (2 * eps)
                worst = max(worst, relative_error((g * v).sum().item(), numeric))
                checked += 1
    return worst, checked


def detector_gradcheck(
    model: nn.Module,
    x: torch.Tensor,
    eps: float = 1e-6,
    directions_per_tensor: int = 3,
    seed: int = 0,
) -> tuple[float, int]:
    """End-to-end directional check of a detector in eval mode and float64.

    Batch-norm running statistics are first set from ``x``; with the initial
    (0, 1) statistics activations shrink layer by layer and deep gradients
    fall below what finite differences can resolve. The scalar is a fixed
    random projection of both head maps.
    """
    model = model.double()
    x = x.double()
    calibrate_batchnorm(model, x)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out = model(x)
    w_conf = torch.randn(out.conf.shape, generator=gen, dtype=torch.float64) / out.conf.numel()
    w_reg = torch.randn(out.reg.shape, generator=gen, dtype=torch.float64) / out.reg.numel()

    def scalar():
        o = model(x)
        return (o.conf * w_conf).sum() + (o.reg * w_reg).sum()

    return directional_gradcheck(model, scalar, eps, directions_per_tensor, seed)
