"""Cross-attention fusion of an image-like sensor feature with text tokens.

Three interchangeable mechanisms share one calling convention
(sensor feature D x H x W as the query side, text feature L x D as
keys/values, optional leading batch axis, optional key pad mask):

* SlimCrossAttention: the sensor query is pooled to a small agent grid;
  the agent attends to the text, then the full-resolution query attends to
  the agent. Projections are depthwise kernel-1 convolutions, so the
  parameter count stays linear in the channel dim.
* VanillaCrossAttention: dense q/k/v/out projections, full query-token
  softmax attention.
* LinearCrossAttention: kernelized attention with feature map elu(x)+1;
  the implicit row-normalized weights are never materialized.

Masked key positions receive an additive -1e30 logit (slim/vanilla) or a
zeroed feature-map contribution (linear), which removes them exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nd
from .nd import functional as F
from .nd.tensor import Tensor


@dataclass(frozen=True)
class AttentionShape:
    """Static geometry of one fusion site.

    d: channel dim; heads: head count; height/width: sensor spatial size
    (positions = height*width); tokens: text length; agent: pooled query
    length (a perfect square, at most the position count).
    """

    d: int
    heads: int
    height: int
    width: int
    tokens: int
    agent: int

    def __post_init__(self):
        if min(self.d, self.heads, self.height, self.width, self.tokens, self.agent) <= 0:
            raise ValueError(f"all AttentionShape fields must be positive: {self}")
        if self.d % self.heads:
            raise ValueError(f"channel dim {self.d} not divisible by {self.heads} heads")
        if self.agent > self.positions:
            raise ValueError(
                f"agent length {self.agent} exceeds {self.positions} sensor positions"
            )
        side = math.isqrt(self.agent)
        if side * side != self.agent:
            raise ValueError(f"agent length {self.agent} is not a perfect square")
        if side > self.height or side > self.width:
            raise ValueError(
                f"agent grid {side}x{side} does not fit the {self.height}x{self.width} query"
            )

    @property
    def positions(self) -> int:
        return self.height * self.width

    @property
    def agent_hw(self) -> tuple[int, int]:
        side = math.isqrt(self.agent)
        return side, side

    @property
    def d_head(self) -> int:
        return self.d // self.heads


def _flatten_spatial(x, d):
    # ... x D x H x W -> ... x N x D
    n = x.shape[-2] * x.shape[-1]
    flat = nd.reshape(x, x.shape[:-3] + (d, n))
    axes = list(range(flat.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return nd.transpose(flat, tuple(axes))


def _unflatten_spatial(x, d, h, w):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return nd.reshape(nd.transpose(x, tuple(axes)), x.shape[:-2] + (d, h, w))


def _split_heads(x, heads):
    # ... x S x D -> ... x heads x S x d_head
    s, d = x.shape[-2], x.shape[-1]
    y = nd.reshape(x, x.shape[:-1] + (heads, d // heads))
    axes = list(range(y.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return nd.transpose(y, tuple(axes))


def _merge_heads(x):
    # ... x heads x S x d_head -> ... x S x D
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    y = nd.transpose(x, tuple(axes))
    return nd.reshape(y, y.shape[:-2] + (y.shape[-2] * y.shape[-1],))


def _swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return nd.transpose(x, tuple(axes))


def _mask_logits(logits, pad_mask):
    if pad_mask is None:
        return logits
    mask = np.asarray(pad_mask, dtype=bool)
    add = np.where(mask, 0.0, F.NEG_MASK_VALUE)
    # broadcast over head and query axes: ... x L -> ... x 1 x 1 x L
    add = add.reshape(add.shape[:-1] + (1, 1, add.shape[-1]))
    return logits + add


def _check_inputs(shape: AttentionShape, f_s, f_t):
    if f_s.shape[-3:] != (shape.d, shape.height, shape.width):
        raise nd.ShapeError(
            f"sensor feature {f_s.shape[-3:]} does not match "
            f"({shape.d}, {shape.height}, {shape.width})"
        )
    if f_t.shape[-1] != shape.d or f_t.shape[-2] != shape.tokens:
        raise nd.ShapeError(
            f"text feature {f_t.shape[-2:]} does not match ({shape.tokens}, {shape.d})"
        )


class SlimCrossAttention(nd.Module):
    """Agent-pooled two-stage softmax cross attention."""

    def __init__(self, shape: AttentionShape, rng: np.random.Generator):
        super().__init__()
        self.shape = shape
        d = shape.d
        scale = 1.0 / math.sqrt(d)
        dt = nd.default_dtype()
        self.w_q = nd.Parameter(np.ones(d, dtype=dt))
        self.b_q = nd.Parameter(np.zeros(d, dtype=dt))
        self.w_k = nd.Parameter(np.ones(d, dtype=dt))
        self.b_k = nd.Parameter(np.zeros(d, dtype=dt))
        self.w_v = nd.Parameter(np.ones(d, dtype=dt))
        self.b_v = nd.Parameter(np.zeros(d, dtype=dt))
        self.w_out = nd.Parameter(np.ones(d, dtype=dt))
        self.pos_sensor = nd.Parameter(
            rng.normal(0, scale, (d, shape.height, shape.width)).astype(dt))
        self.pos_text = nd.Parameter(rng.normal(0, scale, (shape.tokens, d)).astype(dt))

    def forward(self, f_s, f_t, pad_mask=None, use_residual: bool = True,
                use_out_proj: bool = True, parts: dict | None = None) -> Tensor:
        f_s, f_t = nd.as_tensor(f_s), nd.as_tensor(f_t)
        _check_inputs(self.shape, f_s, f_t)
        sh = self.shape
        inv_sqrt_dh = 1.0 / math.sqrt(sh.d_head)

        q = F.conv2d(f_s, nd.reshape(self.w_q, (sh.d, 1, 1, 1)), self.b_q,
                     groups=sh.d) + self.pos_sensor
        k = F.channel_affine(f_t, self.w_k, self.b_k, channel_axis=-1) + self.pos_text
        v = F.channel_affine(f_t, self.w_v, self.b_v, channel_axis=-1) + self.pos_text

        agent = F.adaptive_avg_pool2d(q, sh.agent_hw)
        a_hat = _split_heads(_flatten_spatial(agent, sh.d), sh.heads)   # ... h x n x dh
        q_hat = _split_heads(_flatten_spatial(q, sh.d), sh.heads)       # ... h x N x dh
        k_h = _split_heads(k, sh.heads)                                  # ... h x L x dh
        v_h = _split_heads(v, sh.heads)

        logits_a = _mask_logits((a_hat @ _swap_last(k_h)) * inv_sqrt_dh, pad_mask)
        attn_a = F.softmax(logits_a, axis=-1)
        v_agent = attn_a @ v_h                                           # ... h x n x dh

        logits_b = (q_hat @ _swap_last(a_hat)) * inv_sqrt_dh
        attn_b = F.softmax(logits_b, axis=-1)
        fused = attn_b @ v_agent                                         # ... h x N x dh

        f_ts = _unflatten_spatial(_merge_heads(fused), sh.d, sh.height, sh.width)
        if parts is not None:
            parts.update(attn_agent=attn_a, attn_broadcast=attn_b, pre_residual=f_ts,
                         agent=agent)
        out = f_ts + f_s if use_residual else f_ts
        if use_out_proj:
            out = F.conv2d(out, nd.reshape(self.w_out, (sh.d, 1, 1, 1)), None, groups=sh.d)
        return out


class VanillaCrossAttention(nd.Module):
    """Dense multi-head cross attention; the full-cost baseline."""

    def __init__(self, shape: AttentionShape, rng: np.random.Generator):
        super().__init__()
        self.shape = shape
        d = shape.d
        self.q = nd.Linear(d, d, rng)
        self.k = nd.Linear(d, d, rng)
        self.v = nd.Linear(d, d, rng)
        self.out = nd.Linear(d, d, rng)

    def _attend(self, f_s, f_t, pad_mask, parts):
        sh = self.shape
        inv_sqrt_dh = 1.0 / math.sqrt(sh.d_head)
        q = _split_heads(self.q(_flatten_spatial(f_s, sh.d)), sh.heads)
        k = _split_heads(self.k(f_t), sh.heads)
        v = _split_heads(self.v(f_t), sh.heads)
        logits = _mask_logits((q @ _swap_last(k)) * inv_sqrt_dh, pad_mask)
        attn = F.softmax(logits, axis=-1)
        if parts is not None:
            parts.update(attn=attn)
        return _merge_heads(attn @ v)

    def forward(self, f_s, f_t, pad_mask=None, use_residual: bool = True,
                use_out_proj: bool = True, parts: dict | None = None) -> Tensor:
        f_s, f_t = nd.as_tensor(f_s), nd.as_tensor(f_t)
        _check_inputs(self.shape, f_s, f_t)
        sh = self.shape
        mixed = self._attend(f_s, f_t, pad_mask, parts)
        if parts is not None:
            parts.update(pre_residual=_unflatten_spatial(mixed, sh.d, sh.height, sh.width))
        if use_out_proj:
            mixed = self.out(mixed)
        out = _unflatten_spatial(mixed, sh.d, sh.height, sh.width)
        return out + f_s if use_residual else out


class LinearCrossAttention(nd.Module):
    """Kernelized cross attention, feature map elu(x) + 1."""

    def __init__(self, shape: AttentionShape, rng: np.random.Generator):
        super().__init__()
        self.shape = shape
        d = shape.d
        self.q = nd.Linear(d, d, rng)
        self.k = nd.Linear(d, d, rng)
        self.v = nd.Linear(d, d, rng)
        self.out = nd.Linear(d, d, rng)

    def forward(self, f_s, f_t, pad_mask=None, use_residual: bool = True,
                use_out_proj: bool = True, parts: dict | None = None) -> Tensor:
        f_s, f_t = nd.as_tensor(f_s), nd.as_tensor(f_t)
        _check_inputs(self.shape, f_s, f_t)
        sh = self.shape
        q = F.elu(_split_heads(self.q(_flatten_spatial(f_s, sh.d)), sh.heads)) + 1.0
        k = F.elu(_split_heads(self.k(f_t), sh.heads)) + 1.0
        v = _split_heads(self.v(f_t), sh.heads)
        if pad_mask is not None:
            keep = np.asarray(pad_mask, dtype=bool).astype(k.dtype)
            k = k * keep.reshape(keep.shape[:-1] + (1, keep.shape[-1], 1))
        kv = _swap_last(k) @ v                       # ... h x dh x dh
        numer = q @ kv                               # ... h x N x dh
        denom = q @ _swap_last(nd.sum_(k, axis=-2, keepdims=True))  # ... h x N x 1
        mixed = _merge_heads(numer * (denom ** -1.0))
        if parts is not None:
            parts.update(pre_residual=_unflatten_spatial(mixed, sh.d, sh.height, sh.width))
        if use_out_proj:
            mixed = self.out(mixed)
        out = _unflatten_spatial(mixed, sh.d, sh.height, sh.width)
        return out + f_s if use_residual else out


ATTENTION_KINDS = {
    "mhsca": SlimCrossAttention,
    "mhca": VanillaCrossAttention,
    "mhlca": LinearCrossAttention,
}


def build_attention(kind: str, shape: AttentionShape, rng) -> nd.Module:
    try:
        cls = ATTENTION_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown attention kind {kind!r}; one of {sorted(ATTENTION_KINDS)}")
    return cls(shape, rng)
