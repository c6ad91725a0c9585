"""Gradient-check battery shared by the CLI and the acceptance suite.

Every entry runs in 64-bit with central differences and reports the max
relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
"""

from __future__ import annotations

import numpy as np

from . import nd
from .arw import AdaptiveRadarWeighting
from .attention import AttentionShape, build_attention
from .config import ModelConfig
from .losses import (
    UncertaintyWeights,
    ciou_loss,
    dfl_loss,
    dice_loss,
    focal_loss,
    joint_loss,
    rec_loss,
    res_loss,
)
from .model import RecHead, ResHead
from .nd import functional as F
from .nd.tensor import Tensor


def _numcore_checks(rng: np.random.Generator):
    x4 = Tensor(rng.standard_normal((2, 3, 5, 5)))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    b = Tensor(rng.standard_normal(4))
    yield "numcore/conv2d", nd.grad_check(
        lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1), [x4, w, b])
    xl = Tensor(rng.standard_normal((3, 6)))
    wl = Tensor(rng.standard_normal((4, 6)))
    bl = Tensor(rng.standard_normal(4))
    yield "numcore/linear", nd.grad_check(lambda x, w, b: F.linear(x, w, b), [xl, wl, bl])
    yield "numcore/softmax", nd.grad_check(lambda x: F.softmax(x, axis=-1), [xl])
    yield "numcore/gelu", nd.grad_check(F.gelu, [xl])
    yield "numcore/adaptive_pool", nd.grad_check(
        lambda x: F.adaptive_avg_pool2d(x, (2, 2)), [Tensor(rng.standard_normal((2, 5, 4)))])
    g = Tensor(rng.standard_normal(3))
    be = Tensor(rng.standard_normal(3))
    xb = Tensor(rng.standard_normal((2, 3, 4, 4)))
    yield "numcore/batch_norm", nd.grad_check(
        lambda x, g, b: F.batch_norm(x, g, b, np.zeros(3), np.ones(3), True), [xb, g, be])


def _arw_checks(rng: np.random.Generator):
    arw = AdaptiveRadarWeighting(3, rng)
    x = Tensor(rng.standard_normal((3, 4, 4)))
    rep = nd.grad_check_module(arw, [x], forward=lambda t: arw(t).output)
    yield "arw/module", rep.max_rel_err


def _attention_checks(rng: np.random.Generator):
    shape = AttentionShape(4, 2, 2, 2, 3, 1)
    for kind in ("mhsca", "mhca", "mhlca"):
        attn = build_attention(kind, shape, rng)
        f_s = Tensor(rng.standard_normal((4, 2, 2)))
        f_t = Tensor(rng.standard_normal((3, 4)))
        rep = nd.grad_check_module(attn, [f_s, f_t])
        yield f"attention/{kind}", rep.max_rel_err


def _head_checks(rng: np.random.Generator):
    rec = RecHead([4], reg_max=2, rng=rng)
    feat = Tensor(rng.standard_normal((4, 3, 3)))
    rep = nd.grad_check_module(rec, [feat], forward=lambda f: rec.forward([f])[0])
    yield "heads/rec", rep.max_rel_err
    cfg = ModelConfig(input_size=64, base_channels=4, agent_length=1,
                      stage_heads=(2, 2, 2))
    res = ResHead([4, 8, 16], cfg, rng)
    pyr = [Tensor(rng.standard_normal((c, s, s))) for c, s in ((4, 8), (8, 4), (16, 2))]
    rep = nd.grad_check_module(res, pyr, forward=lambda a, b, c: res.forward([a, b, c]))
    yield "heads/res", rep.max_rel_err


def _loss_checks(rng: np.random.Generator):
    gt = np.array([8.0, 9.0, 5.0, 4.0]) + rng.uniform(-1, 1, 4)
    pred = Tensor(gt + rng.uniform(-2, 2, 4))
    yield "losses/ciou", nd.grad_check(lambda p: ciou_loss(p, gt), [pred])
    logits = Tensor(rng.standard_normal((4, 8)))
    t = rng.uniform(0.2, 6.8, 4)
    yield "losses/dfl", nd.grad_check(lambda x: dfl_loss(x, t), [logits])
    mask_logits = Tensor(rng.standard_normal((2, 5, 5)))
    g = (rng.uniform(size=(5, 5)) > 0.5).astype(float)
    yield "losses/dice", nd.grad_check(lambda x: dice_loss(x, g), [mask_logits])
    yield "losses/focal", nd.grad_check(lambda x: focal_loss(x, g), [mask_logits])

    def joint_fn(s1, s2):
        u = UncertaintyWeights()
        u.s1, u.s2 = s1, s2
        return joint_loss(1.3, 0.7, u)

    u0 = UncertaintyWeights()
    u0.s1.data[0] = rng.uniform(-0.5, 0.5)
    u0.s2.data[0] = rng.uniform(-0.5, 0.5)
    yield "losses/joint", nd.grad_check(joint_fn, [u0.s1, u0.s2])
    cfg = ModelConfig(input_size=32, base_channels=8, reg_max=4, agent_length=1)
    maps = Tensor(rng.standard_normal((1 + 16, 4, 4)))
    gt_boxes = np.array([[16.0, 16.0, 12.0, 10.0]])
    yield "losses/rec_composite", nd.grad_check(
        lambda m: rec_loss([m], gt_boxes, cfg, strides=(8,), conf_target="one"), [maps])
    yield "losses/res_composite", nd.grad_check(lambda x: res_loss(x, g), [mask_logits])


GROUPS = {
    "numcore": _numcore_checks,
    "arw": _arw_checks,
    "attention": _attention_checks,
    "heads": _head_checks,
    "losses": _loss_checks,
}


def run_gradcheck_suite(selector: str = "all", seeds: int = 3):
    """Worst error per check name across `seeds` random draws."""
    groups = GROUPS if selector == "all" else {selector: GROUPS[selector]}
    worst: dict[str, float] = {}
    with nd.precision("float64"):
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            for fn in groups.values():
                for name, err in fn(rng):
                    worst[name] = max(worst.get(name, 0.0), err)
    return sorted(worst.items())
