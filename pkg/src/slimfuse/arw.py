"""Adaptive Radar Weighting: soft channel + spatial gating of radar features.

A 1x1 projection with GeLU produces the working feature; a channel softmax
over its global average pool reweights channels; a second 1x1 conv squeezed
to one channel, again through GeLU, gates each spatial position. The gate is
a GeLU output, so it is bounded below near -0.170 rather than by zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nd
from .nd import functional as F
from .nd.tensor import Tensor


@dataclass
class ArwResult:
    output: Tensor  # C x H x W (or batched), same shape as the input
    w_ca: Tensor    # channel weights, softmax-normalized, shape C (or B x C)
    w_sa: Tensor    # spatial gate, 1 x H x W (or B x 1 x H x W)


class AdaptiveRadarWeighting(nd.Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.proj = nd.Conv2d(channels, channels, 1, rng)
        self.spatial = nd.Conv2d(channels, 1, 1, rng)
        # the channel softmax scales features by ~1/C; start the spatial gate
        # flat at ~C (its GeLU is unbounded above) so the module is
        # magnitude-preserving at init and learns selectivity from there
        self.spatial.weight.data[:] = 0.0
        self.spatial.bias.data[:] = float(channels)

    def forward(self, f_r) -> ArwResult:
        f_r = nd.as_tensor(f_r)
        c_axis = 0 if f_r.ndim == 3 else 1
        if f_r.shape[c_axis] != self.channels:
            raise nd.ShapeError(
                f"ARW built for {self.channels} channels, input has {f_r.shape[c_axis]}"
            )
        f_hat = F.gelu(self.proj(f_r))
        pooled = F.adaptive_avg_pool2d(f_hat, (1, 1))
        w_ca = F.softmax(nd.reshape(pooled, pooled.shape[:-2]), axis=-1)
        f_cw = f_hat * nd.reshape(w_ca, w_ca.shape + (1, 1))
        w_sa = F.gelu(self.spatial(f_cw))
        out = f_cw * w_sa
        return ArwResult(out, w_ca, w_sa)


def arw_forward(f_r, module: AdaptiveRadarWeighting):
    """Functional form: returns (output, channel weights, spatial gate)."""
    res = module(f_r)
    return res.output, res.w_ca, res.w_sa
