"""Correlation-attention fusion of n consecutive frames into one input image.

The n RGB frames are concatenated along channels and passed through::

    F1 = conv_in(X)            3n    -> C_agg
    F2 = conv_att(F1)          C_agg -> C_agg
    F4 = sigmoid(F2) * F2      spatial attention
    F5 = F4 + F1               residual
    F6 = conv_out(F5)          C_agg -> C_out

All convolutions are 3x3, stride 1, same padding, with bias and no
normalisation. ``C_agg`` and ``C_out`` default to ``3n + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .gradcheck import parameter_gradcheck


@dataclass
class AggregationOutputs:
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor
    f5: torch.Tensor
    f6: torch.Tensor


class CoAttentionAggregator(nn.Module):
    def __init__(self, n_frames: int, agg_channels: int | None = None, out_channels: int | None = None):
        super().__init__()
        if n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        self.n_frames = n_frames
        self.in_channels = 3 * n_frames
        self.agg_channels = agg_channels or 3 * n_frames + 1
        self.out_channels = out_channels or 3 * n_frames + 1
        self.conv_in = nn.Conv2d(self.in_channels, self.agg_channels, 3, 1, 1)
        self.conv_att = nn.Conv2d(self.agg_channels, self.agg_channels, 3, 1, 1)
        self.conv_out = nn.Conv2d(self.agg_channels, self.out_channels, 3, 1, 1)

    def _as_channels(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 5:  # (B, n, 3, H, W)
            b, n, c, h, w = x.shape
            x = x.reshape(b, n * c, h, w)
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, H, W) or (B, {self.n_frames}, 3, H, W), got {tuple(x.shape)}")
        return x

    def stages(self, x: torch.Tensor) -> AggregationOutputs:
        x = self._as_channels(x)
        f1 = self.conv_in(x)
        f2 = self.conv_att(f1)
        f3 = torch.sigmoid(f2)
        f4 = f3 * f2
        f5 = f4 + f1
        f6 = self.conv_out(f5)
        return AggregationOutputs(f1, f2, f3, f4, f5, f6)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x).f6


def frames_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """``(n, H, W, 3)`` frames (array or list of arrays) -> ``(1, 3n, H, W)`` tensor."""
    frames = [np.asarray(f) for f in images]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"all frames must share one shape, got {sorted(shapes)}")
    arr = np.stack(frames).astype(np.float64 if dtype == torch.float64 else np.float32)
    n, h, w, c = arr.shape
    if c != 3:
        raise ValueError(f"frames must be RGB (H, W, 3), got {arr.shape[1:]}")
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).reshape(1, n * 3, h, w).copy()).to(dtype)


def aggregate(images, params: CoAttentionAggregator) -> np.ndarray:
    """Fuse one window's frames; returns the aggregated image as ``(H, W, C_out)``."""
    p = next(params.parameters())
    x = frames_to_tensor(images, dtype=p.dtype)
    with torch.no_grad():
        out = params(x)
    return out[0].permute(1, 2, 0).cpu().numpy()


def aggregation_gradcheck(params: CoAttentionAggregator, images, epsilon: float = 1e-5) -> float:
    """Max relative error between autograd and central differences for ``sum(F6)``.

    Runs on a float64 copy of ``params``; every parameter coordinate is checked.
    """
    x = frames_to_tensor(images, dtype=torch.float64)
    if x.shape[-1] > 16 or x.shape[-2] > 16:
        raise ValueError("gradient check expects inputs of at most 16x16")
    module = CoAttentionAggregator(params.n_frames, params.agg_channels, params.out_channels).double()
    module.load_state_dict(params.state_dict())
    worst, _ = parameter_gradcheck(module, lambda: module(x).sum(), eps=epsilon)
    return worst
