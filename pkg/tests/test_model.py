"""Fusion pipeline: shape law, seams, decode, NMS oracle, invariances."""

import numpy as np
import pytest

import slimfuse.nd as nd
from slimfuse.config import ModelConfig
from slimfuse.encoders import TokenSeq
from slimfuse.model import (
    Detection,
    FusionStage,
    GroundingModel,
    Pan,
    RecHead,
    ResHead,
    box_iou,
    decode_detections,
    greedy_nms,
)
from slimfuse.attention import AttentionShape
from slimfuse.nd.tensor import Tensor


def tiny_cfg(**kw):
    base = dict(input_size=64, base_channels=8, reg_max=8, agent_length=1,
                text_dim=16, text_heads=2, max_tokens=6, stage_heads=(2, 2, 2))
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, **kw):
    cfg = tiny_cfg(**kw)
    return GroundingModel(cfg, vocab_size=20, rng=np.random.default_rng(seed)), cfg


def tiny_inputs(cfg, seed=1):
    rng = np.random.default_rng(seed)
    img = Tensor(rng.standard_normal((3, cfg.input_size, cfg.input_size)) * 0.3)
    rvp = Tensor(np.abs(rng.standard_normal((3, cfg.input_size, cfg.input_size))) * 0.2)
    tokens = TokenSeq.from_ids([4, 5, 6], max_len=cfg.max_tokens)
    return img, rvp, tokens


class TestPipelineShapes:
    @pytest.mark.parametrize("size", [64, 128])
    def test_full_shape_law(self, size):
        model, cfg = tiny_model(input_size=size)
        model.eval()
        img, rvp, tokens = tiny_inputs(cfg)
        rec, res = model(img, rvp, tokens)
        assert len(rec) == 4
        for i, level in zip((2, 3, 4, 5), rec):
            side = size // 2 ** (i + 1)
            assert level.shape == (1 + 4 * cfg.reg_max, side, side)
        assert res.shape == (2, size, size)

    def test_pyramid_strides(self):
        model, cfg = tiny_model()
        model.eval()
        img, rvp, tokens = tiny_inputs(cfg)
        parts = {}
        model(img, rvp, tokens, parts=parts)
        pyr = parts["pyramid"]
        for level, stride in zip(pyr, (8, 16, 32, 64)):
            assert level.shape[-1] == cfg.input_size // stride

    def test_res_softmax_normalized(self):
        model, cfg = tiny_model()
        model.eval()
        img, rvp, tokens = tiny_inputs(cfg)
        _, res = model(img, rvp, tokens)
        p = np.exp(res.data - res.data.max(0, keepdims=True))
        p /= p.sum(0, keepdims=True)
        np.testing.assert_allclose(p.sum(0), 1.0, atol=1e-12)


class TestFusionStage:
    def test_zero_radar_no_arw_passes_image_through(self):
        rng = np.random.default_rng(0)
        shape = AttentionShape(8, 2, 4, 4, 5, 1)
        cfg = tiny_cfg(use_arw=False)
        stage = FusionStage(8, shape, cfg, rng)
        f_i = Tensor(rng.standard_normal((8, 4, 4)))
        f_r = Tensor(np.zeros((8, 4, 4)))
        f_t = Tensor(rng.standard_normal((5, 8)))
        parts = {}
        stage(f_i, f_r, f_t, parts=parts)
        np.testing.assert_array_equal(parts["pre_attention"].data, f_i.data)

    def test_kind_swap_changes_only_attention(self):
        shape = AttentionShape(8, 2, 4, 4, 5, 1)
        pre = {}
        for kind in ("mhsca", "mhca", "mhlca"):
            rng = np.random.default_rng(42)
            stage = FusionStage(8, shape, tiny_cfg(fusion=kind), rng)
            gen = np.random.default_rng(7)
            f_i = Tensor(gen.standard_normal((8, 4, 4)))
            f_r = Tensor(gen.standard_normal((8, 4, 4)))
            f_t = Tensor(gen.standard_normal((5, 8)))
            parts = {}
            stage(f_i, f_r, f_t, parts=parts)
            pre[kind] = parts["pre_attention"].data
        np.testing.assert_array_equal(pre["mhsca"], pre["mhca"])
        np.testing.assert_array_equal(pre["mhsca"], pre["mhlca"])

    def test_matches_hand_composed_chain(self):
        rng = np.random.default_rng(3)
        shape = AttentionShape(8, 2, 4, 4, 5, 1)
        stage = FusionStage(8, shape, tiny_cfg(), rng)
        gen = np.random.default_rng(8)
        f_i = Tensor(gen.standard_normal((8, 4, 4)))
        f_r = Tensor(gen.standard_normal((8, 4, 4)))
        f_t = Tensor(gen.standard_normal((5, 8)))
        got = stage(f_i, f_r, f_t).data
        merged = f_i + stage.arw(f_r).output
        expect = stage.attn(merged, f_t).data
        np.testing.assert_allclose(got, expect, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        shape = AttentionShape(8, 2, 4, 4, 5, 1)
        stage = FusionStage(8, shape, tiny_cfg(), rng)
        with pytest.raises(nd.ShapeError, match="differ"):
            stage(Tensor(np.zeros((8, 4, 4))), Tensor(np.zeros((8, 2, 2))),
                  Tensor(np.zeros((5, 8))))


class TestPan:
    def make(self, seed=0, **kw):
        rng = np.random.default_rng(seed)
        return Pan([8, 16, 32], tiny_cfg(**kw), rng), rng

    def fused(self, seed=1):
        rng = np.random.default_rng(seed)
        return [Tensor(rng.standard_normal((8, 8, 8))),
                Tensor(rng.standard_normal((16, 4, 4))),
                Tensor(rng.standard_normal((32, 2, 2)))]

    def test_level_shapes(self):
        pan, _ = self.make()
        pyr = pan(self.fused())
        assert [p.shape for p in pyr] == [(8, 8, 8), (16, 4, 4), (32, 2, 2), (32, 1, 1)]

    def test_constant_input_stays_constant_per_channel_interior(self):
        pan, _ = self.make()
        fused = [Tensor(np.full((8, 16, 16), 0.7)), Tensor(np.full((16, 8, 8), -0.2)),
                 Tensor(np.full((32, 4, 4), 1.1))]
        pyr = pan(fused)
        p2 = pyr[0].data
        # zero padding perturbs rings near the border; the 3x3 merge convs
        # after two upsample hops leave a constant interior beyond 3 px
        interior = p2[:, 3:-3, 3:-3]
        spread = np.abs(interior - interior[:, :1, :1]).max()
        assert spread <= 1e-10

    def test_skip_bottom_up_seam(self):
        pan, _ = self.make()
        fused = self.fused()
        full = pan(fused)
        skipped = pan(fused, skip_bottom_up=True)
        np.testing.assert_array_equal(full[0].data, skipped[0].data)  # P2 untouched
        assert not np.array_equal(full[1].data, skipped[1].data)
        assert not np.array_equal(full[2].data, skipped[2].data)

    def test_rejects_bad_spatial_chain(self):
        pan, _ = self.make()
        bad = [Tensor(np.zeros((8, 8, 8))), Tensor(np.zeros((16, 3, 3))),
               Tensor(np.zeros((32, 2, 2)))]
        with pytest.raises(nd.ShapeError, match="halve"):
            pan(bad)


class TestHeads:
    def test_rec_channel_contract_at_regmax16(self):
        rng = np.random.default_rng(0)
        head = RecHead([8, 16, 32, 32], reg_max=16, rng=rng)
        pyr = [Tensor(np.zeros((c, s, s))) for c, s in ((8, 8), (16, 4), (32, 2), (32, 1))]
        outs = head.forward(type("P", (), {"__iter__": lambda self: iter(pyr)})())
        assert len(outs) == 4
        for out, s in zip(outs, (8, 4, 2, 1)):
            assert out.shape == (1 + 4 * 16, s, s)

    def test_zero_weight_head_emits_bias(self):
        rng = np.random.default_rng(1)
        head = RecHead([8], reg_max=4, rng=rng)
        for conv in (head.conf_stem[0], head.conf_out[0], head.box_stem[0], head.box_out[0]):
            conv.weight.data[:] = 0.0
        head.box_out[0].bias.data[:] = 1.5
        pyr = [Tensor(np.random.default_rng(2).standard_normal((8, 4, 4)))]
        out = head.forward(pyr)[0]
        np.testing.assert_allclose(out.data[0], head.CONF_PRIOR_BIAS, atol=1e-12)
        np.testing.assert_allclose(out.data[1:], 1.5, atol=1e-12)

    def test_res_head_uniform_at_zero_weights(self):
        rng = np.random.default_rng(3)
        head = ResHead([8, 16, 32], tiny_cfg(), rng)
        for _, p in head.named_parameters():
            p.data[:] = 0.0
        pyr = [Tensor(np.random.default_rng(4).standard_normal((c, s, s)))
               for c, s in ((8, 8), (16, 4), (32, 2))]
        out = head.forward(pyr)
        assert out.shape == (2, 64, 64)
        p = np.exp(out.data) / np.exp(out.data).sum(0, keepdims=True)
        np.testing.assert_allclose(p, 0.5, atol=1e-12)

    def test_grad_check_both_heads(self):
        rng = np.random.default_rng(5)
        rec = RecHead([4], reg_max=2, rng=rng)
        feat = Tensor(np.random.default_rng(6).standard_normal((4, 3, 3)))
        rep = nd.grad_check_module(rec, [feat], forward=lambda f: rec.forward([f])[0])
        assert rep.max_rel_err <= 1e-4

        res = ResHead([4, 8, 16], tiny_cfg(), rng)
        pyr = [Tensor(np.random.default_rng(7).standard_normal((c, s, s)))
               for c, s in ((4, 8), (8, 4), (16, 2))]
        rep = nd.grad_check_module(
            res, pyr, forward=lambda a, b, c: res.forward([a, b, c]))
        assert rep.max_rel_err <= 1e-4


class TestDecode:
    def test_one_hot_bin_gives_exact_side(self):
        cfg = tiny_cfg(reg_max=16, conf_threshold=0.4)
        data = np.full((1 + 64, 8, 8), -40.0)
        data[0, 4, 4] = 5.0  # one confident location at center (36, 36)
        logits = np.full((4, 16), -40.0)
        logits[:, 3] = 40.0  # point mass at bin 3
        data[1:, 4, 4] = logits.reshape(-1)
        dets = decode_detections([Tensor(data)], cfg, strides=(8,), apply_nms=False)
        assert len(dets) == 1
        d = dets[0]
        # side distance 3 * 8 = 24 px each way, no clamping mid-image
        np.testing.assert_allclose((d.w, d.h), (48.0, 48.0), atol=1e-9)
        np.testing.assert_allclose((d.cx, d.cy), (36.0, 36.0), atol=1e-9)

    def test_uniform_bins_give_half_span(self):
        cfg = tiny_cfg(reg_max=16, conf_threshold=0.4, input_size=640)
        data = np.full((1 + 64, 80, 80), 0.0)
        data[0] = -40.0
        data[0, 20, 20] = 5.0  # center (164, 164): 60 px sides stay in frame
        dets = decode_detections([Tensor(data)], cfg, strides=(8,), apply_nms=False)
        assert len(dets) == 1
        # uniform over 16 bins: expectation 7.5 bins -> 7.5 * 8 = 60 px sides
        np.testing.assert_allclose((dets[0].w, dets[0].h), (120.0, 120.0), atol=1e-9)
        np.testing.assert_allclose((dets[0].cx, dets[0].cy), (164.0, 164.0), atol=1e-9)

    def test_below_threshold_suppressed(self):
        cfg = tiny_cfg(conf_threshold=0.9)
        data = np.zeros((1 + 32, 2, 2))
        assert decode_detections([Tensor(data)], cfg, strides=(8,)) == []

    def test_boxes_clamped_to_image(self):
        cfg = tiny_cfg(reg_max=8, conf_threshold=0.1)
        data = np.zeros((1 + 32, 2, 2))
        data[0] = 5.0
        data[1:] = 0.0
        for d in decode_detections([Tensor(data)], cfg, strides=(8,), apply_nms=False):
            x1, y1, x2, y2 = d.corners()
            assert x1 >= 0 and y1 >= 0 and x2 <= 64 and y2 <= 64
            assert d.w > 0 and d.h > 0


def nms_brute_oracle(dets, thr):
    """O(n^2) reference: a det survives iff no higher-priority survivor
    overlaps it with IoU > thr (priority = confidence, ties by insertion)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].conf, i))
    kept = []
    for i in order:
        if all(box_iou(dets[i].corners(), dets[j].corners()) <= thr for j in kept):
            kept.append(i)
    return sorted((dets[i].cx, dets[i].cy, dets[i].w, dets[i].h, dets[i].conf) for i in kept)


class TestNms:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        dets = [Detection(rng.uniform(0, 50), rng.uniform(0, 50),
                          rng.uniform(5, 25), rng.uniform(5, 25), float(rng.uniform()))
                for _ in range(30)]
        for thr in (0.3, 0.5, 0.65):
            got = sorted((d.cx, d.cy, d.w, d.h, d.conf) for d in greedy_nms(dets, thr))
            assert got == nms_brute_oracle(dets, thr)


class TestEndToEndInvariances:
    def test_deterministic_and_batch_consistent(self):
        model, cfg = tiny_model()
        model.eval()
        img, rvp, tokens = tiny_inputs(cfg)
        rec1, res1 = model(img, rvp, tokens)
        rec2, res2 = model(img, rvp, tokens)
        assert np.array_equal(res1.data, res2.data)
        batch_img = Tensor(np.stack([img.data, img.data * 0.5]))
        batch_rvp = Tensor(np.stack([rvp.data, rvp.data]))
        rec_b, res_b = model(batch_img, batch_rvp, [tokens, tokens])
        np.testing.assert_allclose(res_b.data[0], res1.data, atol=1e-6)
        np.testing.assert_allclose(rec_b[0].data[0], rec1[0].data, atol=1e-6)

    def test_text_pad_invariance_through_pipeline(self):
        model, cfg = tiny_model()
        model.eval()
        img, rvp, _ = tiny_inputs(cfg)
        short = TokenSeq.from_ids([4, 5], max_len=cfg.max_tokens)
        long = TokenSeq.from_ids([4, 5], max_len=cfg.max_tokens)
        long.ids[3] = 9  # garbage beyond the pad mask
        rec_a, res_a = model(img, rvp, short)
        rec_b, res_b = model(img, rvp, long)
        np.testing.assert_allclose(res_a.data, res_b.data, atol=1e-9)
        np.testing.assert_allclose(rec_a[0].data, rec_b[0].data, atol=1e-9)

    def test_vision_only_ignores_radar_exactly(self):
        model, cfg = tiny_model(use_radar=False)
        model.eval()
        img, rvp, tokens = tiny_inputs(cfg)
        rec1, res1 = model(img, None, tokens)
        rec2, res2 = model(img, Tensor(np.ones((3, 64, 64))), tokens)
        assert np.array_equal(res1.data, res2.data)
        for a, b in zip(rec1, rec2):
            assert np.array_equal(a.data, b.data)
        assert model.radar_encoder is None

    def test_radar_zero_with_arw_off_matches_radar_free_features(self):
        model, cfg = tiny_model(use_arw=False)
        model.eval()
        img, rvp, tokens = tiny_inputs(cfg)
        parts = {}
        model(img, Tensor(np.zeros_like(rvp.data)), tokens, parts=parts)
        # radar path of zeros contributes exactly zero post-encoder (zero conv
        # stacks with zero bias); merged stage features equal the image ones
        img_feats = model.image_encoder(img)
        for stage in (2, 3, 4):
            np.testing.assert_allclose(
                parts[f"stage{stage}"]["pre_attention"].data,
                img_feats[stage - 1].data, atol=1e-12)
