"""Phased fusion pipeline: per-stage vision+radar merge, text cross
attention at stages 2-4, a lite path-aggregation neck with pyramid levels
P2-P5 (strides 8/16/32/64), decoupled detection heads on all four levels
and a lightweight segmentation decoder on P2-P4.

Channel law: P2/P3/P4 keep their stage widths (base*2, base*4, base*8);
P5 is synthesized inside the neck by a stride-2 conv on P4 and keeps P4's
width. The pyramid-pooling enrichment (bins 1/2/4) is applied on the
deepest map and feeds the segmentation path by default; `sppm_position =
"pan"` moves it in front of the neck instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nd
from .arw import AdaptiveRadarWeighting
from .attention import AttentionShape, build_attention
from .config import ModelConfig
from .encoders import SensorEncoder, TokenSeq, ToyTextEncoder
from .nd import functional as F
from .nd.tensor import Tensor


@dataclass
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    conf: float

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass
class FeaturePyramid:
    levels: list  # P2..P5, strides 8/16/32/64

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    @property
    def strides(self):
        return [8, 16, 32, 64][: len(self.levels)]


def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    ix = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iy = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ix * iy
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


class FusionStage(nd.Module):
    """One phase: F_S = F_I + ARW(F_R), then cross attention with text."""

    def __init__(self, channels: int, shape: AttentionShape, cfg: ModelConfig,
                 rng: np.random.Generator):
        super().__init__()
        self.use_radar = cfg.use_radar
        self.arw = AdaptiveRadarWeighting(channels, rng) if cfg.use_radar and cfg.use_arw else None
        self.attn = build_attention(cfg.fusion, shape, rng)

    def forward(self, f_img, f_radar=None, f_text=None, pad_mask=None, parts=None):
        if self.use_radar:
            if f_radar is None:
                raise nd.ShapeError("fusion stage expects a radar feature (use_radar=True)")
            if f_radar.shape != f_img.shape:
                raise nd.ShapeError(
                    f"stage features differ: image {f_img.shape} vs radar {f_radar.shape}"
                )
            merged = f_img + (self.arw(f_radar).output if self.arw is not None else f_radar)
        else:
            merged = f_img
        if parts is not None:
            parts["pre_attention"] = merged
        return self.attn(merged, f_text, pad_mask=pad_mask)


class Sppm(nd.Module):
    """Pyramid pooling at bins {1, 2, 4}: 1x1 convs, summed, upsampled."""

    BINS = (1, 2, 4)

    def __init__(self, channels: int, rng):
        super().__init__()
        self.convs = [nd.Conv2d(channels, channels, 1, rng) for _ in self.BINS]

    def forward(self, x):
        h, w = x.shape[-2], x.shape[-1]
        out = None
        for b, conv in zip(self.BINS, self.convs):
            bh, bw = min(b, h), min(b, w)
            piece = F.resize_nearest2d(conv(F.adaptive_avg_pool2d(x, (bh, bw))), (h, w))
            out = piece if out is None else out + piece
        return F.relu(out)


class Pan(nd.Module):
    """Lite path aggregation: top-down then bottom-up, plus the extra P5."""

    def __init__(self, channels: list[int], cfg: ModelConfig, rng):
        super().__init__()
        c2, c3, c4 = channels
        self.lat2 = nd.Conv2d(c2, c2, 1, rng)
        self.lat3 = nd.Conv2d(c3, c3, 1, rng)
        self.lat4 = nd.Conv2d(c4, c4, 1, rng)
        self.red4 = nd.Conv2d(c4, c3, 1, rng)
        self.red3 = nd.Conv2d(c3, c2, 1, rng)
        self.merge3 = nd.Conv2d(c3, c3, 3, rng, padding=1)
        self.merge2 = nd.Conv2d(c2, c2, 3, rng, padding=1)
        self.down2 = nd.Conv2d(c2, c3, 3, rng, stride=2, padding=1)
        self.down3 = nd.Conv2d(c3, c4, 3, rng, stride=2, padding=1)
        self.merge_b3 = nd.Conv2d(c3, c3, 3, rng, padding=1)
        self.merge_b4 = nd.Conv2d(c4, c4, 3, rng, padding=1)
        self.make_p5 = nd.Conv2d(c4, c4, 3, rng, stride=2, padding=1)
        self.sppm = Sppm(c4, rng) if cfg.sppm_position == "pan" else None

    def forward(self, fused, skip_bottom_up: bool = False) -> FeaturePyramid:
        c2, c3, c4 = fused
        if c2.shape[-1] != 2 * c3.shape[-1] or c3.shape[-1] != 2 * c4.shape[-1]:
            raise nd.ShapeError(
                f"fused stages must halve spatially: {c2.shape} {c3.shape} {c4.shape}"
            )
        t4 = F.relu(self.lat4(c4))
        if self.sppm is not None:
            t4 = t4 + self.sppm(t4)
        t3 = F.relu(self.merge3(F.relu(self.lat3(c3)) + F.upsample_nearest2d(self.red4(t4), 2)))
        t2 = F.relu(self.merge2(F.relu(self.lat2(c2)) + F.upsample_nearest2d(self.red3(t3), 2)))
        p2 = t2
        if skip_bottom_up:
            p3, p4 = t3, t4
        else:
            p3 = F.relu(self.merge_b3(t3 + self.down2(p2)))
            p4 = F.relu(self.merge_b4(t4 + self.down3(p3)))
        p5 = F.relu(self.make_p5(p4))
        return FeaturePyramid([p2, p3, p4, p5])


class RecHead(nd.Module):
    """Decoupled confidence + box-distribution branches per pyramid level.

    Output channel 0 holds the pre-sigmoid confidence logit; channels
    1..4*reg_max hold four side-distance bin distributions.
    """

    CONF_PRIOR_BIAS = -4.6  # start confidence near the rare-positive prior

    def __init__(self, channels: list[int], reg_max: int, rng):
        super().__init__()
        self.reg_max = reg_max
        self.conf_stem = [nd.Conv2d(c, c, 3, rng, padding=1) for c in channels]
        self.conf_out = [nd.Conv2d(c, 1, 1, rng) for c in channels]
        self.box_stem = [nd.Conv2d(c, c, 3, rng, padding=1) for c in channels]
        self.box_out = [nd.Conv2d(c, 4 * reg_max, 1, rng) for c in channels]
        for conv in self.conf_out:
            conv.bias.data[:] = self.CONF_PRIOR_BIAS

    def forward(self, pyramid: FeaturePyramid) -> list[Tensor]:
        outs = []
        for i, feat in enumerate(pyramid):
            conf = self.conf_out[i](F.relu(self.conf_stem[i](feat)))
            box = self.box_out[i](F.relu(self.box_stem[i](feat)))
            outs.append(nd.concatenate([conf, box], axis=-3))
        return outs


class ResHead(nd.Module):
    """Progressive P4 -> P3 -> P2 decoder, then x8 to input resolution."""

    def __init__(self, channels: list[int], cfg: ModelConfig, rng):
        super().__init__()
        c2, c3, c4 = channels
        mid = c2
        self.sppm = Sppm(c4, rng) if cfg.sppm_position == "res" else None
        self.top = nd.Conv2d(c4, mid, 3, rng, padding=1)
        self.lat3 = nd.Conv2d(c3, mid, 1, rng)
        self.fuse3 = nd.Conv2d(mid, mid, 3, rng, padding=1)
        self.lat2 = nd.Conv2d(c2, mid, 1, rng)
        self.fuse2 = nd.Conv2d(mid, mid, 3, rng, padding=1)
        self.logits = nd.Conv2d(mid, 2, 1, rng)

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        p2, p3, p4 = pyramid[0], pyramid[1], pyramid[2]
        if self.sppm is not None:
            p4 = p4 + self.sppm(p4)
        d4 = F.relu(self.top(p4))
        d3 = F.relu(self.fuse3(F.upsample_nearest2d(d4, 2) + self.lat3(p3)))
        d2 = F.relu(self.fuse2(F.upsample_nearest2d(d3, 2) + self.lat2(p2)))
        # bilinear here, not nearest: interpolated logits put the argmax
        # boundary at sub-cell precision, which block-constant logits cannot
        return F.upsample_bilinear2d(self.logits(d2), 8)


class GroundingModel(nd.Module):
    """End-to-end multi-task model: boxes (REC) and a 2-class mask (RES)."""

    FUSED_STAGES = (2, 3, 4)

    def __init__(self, cfg: ModelConfig, vocab_size: int, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.image_encoder = SensorEncoder(3, rng, cfg.base_channels)
        self.radar_encoder = SensorEncoder(3, rng, cfg.base_channels) if cfg.use_radar else None
        channels = cfg.stage_channels
        self.text_encoder = ToyTextEncoder(
            vocab_size, channels, rng, dim=cfg.text_dim, heads=cfg.text_heads,
            max_len=cfg.max_tokens, trainable=cfg.text_trainable)
        self.fusion_stages = []
        for slot, stage in enumerate(self.FUSED_STAGES):
            side = cfg.stage_spatial(stage)
            shape = AttentionShape(
                d=channels[slot], heads=cfg.stage_heads[slot], height=side, width=side,
                tokens=self.text_encoder.out_len, agent=cfg.agent_length)
            self.fusion_stages.append(FusionStage(channels[slot], shape, cfg, rng))
        self.pan = Pan(channels, cfg, rng)
        self.rec_head = RecHead(channels + [channels[-1]], cfg.reg_max, rng)
        self.res_head = ResHead(channels, cfg, rng)

    def forward(self, image, rvp=None, tokens=None, parts=None):
        image = nd.as_tensor(image)
        img_feats = self.image_encoder(image)
        radar_feats = None
        if self.cfg.use_radar:
            if rvp is None:
                raise nd.ShapeError("model configured with use_radar=True but no RVP input")
            radar_feats = self.radar_encoder(nd.as_tensor(rvp))
        text_feats, mask = self.text_encoder.encode(tokens)
        fused = []
        for slot, stage in enumerate(self.FUSED_STAGES):
            f_t = self.text_encoder.project(text_feats, slot)
            stage_parts = {} if parts is not None else None
            fused.append(self.fusion_stages[slot](
                img_feats[stage - 1],
                radar_feats[stage - 1] if radar_feats is not None else None,
                f_t, pad_mask=mask, parts=stage_parts))
            if parts is not None:
                parts[f"stage{stage}"] = stage_parts
        pyramid = self.pan(fused)
        if parts is not None:
            parts["pyramid"] = pyramid
        return self.rec_head(pyramid), self.res_head(pyramid)


def expected_side_distances(box_logits, reg_max: int):
    """Differentiable DFL decode: expectation over bins, in bin units.

    box_logits: (..., 4*reg_max, H, W) -> (..., 4, H, W)
    """
    shape = box_logits.shape
    lead = shape[:-3]
    h, w = shape[-2], shape[-1]
    x = nd.reshape(box_logits, lead + (4, reg_max, h, w))
    probs = F.softmax(x, axis=-3)
    bins = np.arange(reg_max, dtype=np.float64).reshape((1,) * len(lead) + (1, reg_max, 1, 1))
    return nd.sum_(probs * bins, axis=-3)


def greedy_nms(dets: list[Detection], iou_thr: float) -> list[Detection]:
    """Keep highest-confidence boxes, dropping overlaps with IoU > thr."""
    rest = sorted(dets, key=lambda d: -d.conf)
    kept: list[Detection] = []
    while rest:
        best = rest.pop(0)
        kept.append(best)
        rest = [d for d in rest if box_iou(best.corners(), d.corners()) <= iou_thr]
    return kept


def decode_detections(rec_maps: list, cfg: ModelConfig, strides=(8, 16, 32, 64),
                      conf_threshold=None, apply_nms: bool = True) -> list[Detection]:
    """Anchor-free decode of one sample's head outputs into detections."""
    from scipy.special import expit, softmax as np_softmax

    conf_thr = cfg.conf_threshold if conf_threshold is None else conf_threshold
    dets: list[Detection] = []
    for level, stride in zip(rec_maps, strides):
        data = level.data if isinstance(level, Tensor) else np.asarray(level)
        if data.ndim != 3:
            raise nd.ShapeError(f"decode expects per-sample maps, got {data.shape}")
        conf = expit(data[0])
        h, w = conf.shape
        probs = np_softmax(data[1:].reshape(4, cfg.reg_max, h, w), axis=1)
        sides = (probs * np.arange(cfg.reg_max).reshape(1, -1, 1, 1)).sum(axis=1) * stride
        ys, xs = np.nonzero(conf >= conf_thr)
        for i, j in zip(ys, xs):
            cx0, cy0 = (j + 0.5) * stride, (i + 0.5) * stride
            left, top, right, bottom = sides[:, i, j]
            x1 = np.clip(cx0 - left, 0, cfg.input_size)
            y1 = np.clip(cy0 - top, 0, cfg.input_size)
            x2 = np.clip(cx0 + right, 0, cfg.input_size)
            y2 = np.clip(cy0 + bottom, 0, cfg.input_size)
            wbox, hbox = max(x2 - x1, 1e-6), max(y2 - y1, 1e-6)
            dets.append(Detection((x1 + x2) / 2, (y1 + y2) / 2, wbox, hbox, float(conf[i, j])))
    return greedy_nms(dets, cfg.nms_iou) if apply_nms else dets
