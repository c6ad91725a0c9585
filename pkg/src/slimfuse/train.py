"""Training loop: SGD with momentum, cosine schedule, uncertainty-weighted
multi-task loss, CSV step logging, epoch-boundary checkpoints, NaN abort
with the last good checkpoint retained. Deterministic given (config, seed):
batch order is a pure function of (seed, epoch) and the schedule of the
global step, so a resumed run continues bit-compatibly."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from . import nd
from .config import ModelConfig, RunConfig
from .encoders import TokenSeq
from .losses import UncertaintyWeights, joint_loss, rec_loss, res_loss
from .metrics import EvalResult, evaluate
from .model import GroundingModel, decode_detections
from .nd import serialize
from .nd.tensor import Tensor
from .synth import SynthConfig, rvp_input, tokens_for


class NumericError(RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint is kept."""


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


class Sgdm:
    def __init__(self, params, momentum: float, weight_decay: float,
                 clip_grad_norm: float = 0.0):
        self.params = [p for p in params if getattr(p, "trainable", True)]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_grad_norm = clip_grad_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        if self.clip_grad_norm > 0:
            sq = sum(float((p.grad * p.grad).sum()) for p in self.params
                     if p.grad is not None)
            norm = np.sqrt(sq)
            if norm > self.clip_grad_norm:
                scale = self.clip_grad_norm / norm
                for p in self.params:
                    if p.grad is not None:
                        p.grad = p.grad * scale
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def prepare_inputs(record, model_cfg: ModelConfig, synth_cfg: SynthConfig):
    image = record.image.astype(nd.default_dtype())
    rvp = None
    if model_cfg.use_radar:
        rvp = rvp_input(record, synth_cfg, model_cfg.radar_channels).astype(nd.default_dtype())
    tokens = tokens_for(record, model_cfg.max_tokens)
    return image, rvp, tokens


class Trainer:
    def __init__(self, model: GroundingModel, records, run_cfg: RunConfig,
                 synth_cfg: SynthConfig, out_dir=None):
        self.model = model
        self.records = records
        self.cfg = run_cfg
        self.synth_cfg = synth_cfg
        self.uncertainty = UncertaintyWeights()
        params = list(model.parameters()) + list(self.uncertainty.parameters())
        self.opt = Sgdm(params, run_cfg.momentum, run_cfg.weight_decay,
                        run_cfg.clip_grad_norm)
        self.step_count = 0
        self.epoch = 0
        self.out_dir = Path(out_dir) if out_dir else None
        self._cache: dict = {}
        self._log_rows: list = []
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- data -----------------------------------------------------------

    def _inputs(self, idx: int):
        if idx not in self._cache:
            self._cache[idx] = prepare_inputs(self.records[idx], self.cfg.model,
                                              self.synth_cfg)
        return self._cache[idx]

    def _epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, epoch])
        return rng.permutation(len(self.records))

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.records) // self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    # -- one optimization step -------------------------------------------

    def train_step(self, indices) -> dict:
        cfg = self.cfg
        images, rvps, tokens = [], [], []
        for i in indices:
            img, rvp, tok = self._inputs(i)
            images.append(img)
            rvps.append(rvp)
            tokens.append(tok)
        image_b = Tensor(np.stack(images))
        rvp_b = Tensor(np.stack(rvps)) if cfg.model.use_radar else None

        if cfg.freeze_bn_after and self.step_count >= cfg.freeze_bn_after:
            self._freeze_bn()

        self.model.train()
        try:
            rec_maps, res_logits = self.model(image_b, rvp_b, tokens)
            l_rec = nd.as_tensor(0.0)
            l_res = nd.as_tensor(0.0)
            for bi, idx in enumerate(indices):
                rec = self.records[idx]
                sample_maps = [level[bi] for level in rec_maps]
                l_rec = l_rec + rec_loss(sample_maps, rec.boxes, cfg.model)
                l_res = l_res + res_loss(res_logits[bi], rec.mask)
        except ValueError as exc:
            if "non-finite" in str(exc):
                raise NumericError(f"non-finite activations at step {self.step_count}") from exc
            raise
        l_rec = l_rec * (1.0 / len(indices))
        l_res = l_res * (1.0 / len(indices))
        loss = joint_loss(l_rec, l_res, self.uncertainty)

        if not np.isfinite(loss.item()):
            raise NumericError(f"non-finite loss at step {self.step_count}")

        lr = self._lr()
        self.opt.zero_grad()
        loss.backward()
        if self.step_count < cfg.uncertainty_freeze_steps:
            self.uncertainty.s1.grad = None
            self.uncertainty.s2.grad = None
        self.opt.step(lr)
        self.step_count += 1
        s1, s2 = self.uncertainty.sigmas
        row = {"step": self.step_count, "l_rec": l_rec.item(), "l_res": l_res.item(),
               "sigma1": s1, "sigma2": s2, "lr": lr}
        self._log_rows.append(row)
        return row

    def _freeze_bn(self):
        from .nd.module import BatchNorm2d

        stack = [self.model]
        while stack:
            mod = stack.pop()
            if isinstance(mod, BatchNorm2d):
                mod.frozen = True
            stack.extend(child for _, child in mod._children())

    def _lr(self) -> float:
        if self.cfg.schedule == "cosine":
            return cosine_lr(self.cfg.lr, self.step_count, self.total_steps)
        return self.cfg.lr

    # -- epochs and runs ----------------------------------------------------

    def run_epoch(self) -> None:
        order = self._epoch_order(self.epoch)
        bs = self.cfg.batch_size
        for start in range(0, len(order) - bs + 1, bs):
            self.train_step(order[start : start + bs])
        self.epoch += 1

    def fit(self, max_steps: int | None = None) -> None:
        try:
            while self.epoch < self.cfg.epochs:
                if max_steps is not None and self.step_count >= max_steps:
                    break
                order = self._epoch_order(self.epoch)
                bs = self.cfg.batch_size
                completed = True
                for start in range(0, len(order) - bs + 1, bs):
                    if max_steps is not None and self.step_count >= max_steps:
                        completed = False
                        break
                    self.train_step(order[start : start + bs])
                if not completed:
                    break
                self.epoch += 1
                if self.out_dir:
                    self.save_checkpoint(self.out_dir / "checkpoint.bin")
        except NumericError:
            self.flush_log()
            raise
        if self.out_dir:
            self.save_checkpoint(self.out_dir / "checkpoint.bin")
        self.flush_log()

    # -- logging / checkpoints -----------------------------------------------

    def flush_log(self) -> None:
        if not self.out_dir or not self._log_rows:
            return
        path = self.out_dir / "training_log.csv"
        exists = path.exists()
        with open(path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "l_rec", "l_res",
                                                   "sigma1", "sigma2", "lr"])
            if not exists:
                writer.writeheader()
            writer.writerows(self._log_rows)
        self._log_rows = []

    def save_checkpoint(self, path) -> None:
        named = list(self.model.named_state())
        named += [(f"uncertainty.{n}", p) for n, p in self.uncertainty.named_parameters()]
        named += [(f"opt.velocity.{i}", v) for i, v in enumerate(self.opt.velocity)]
        serialize.save_state(path, named, extra_manifest={
            "step": self.step_count, "epoch": self.epoch,
            "dtype": str(nd.default_dtype().__name__),
        })

    def load_checkpoint(self, path) -> None:
        arrays, extra = serialize.load_state(path)
        load_model_state(self.model, arrays)
        for name, p in self.uncertainty.named_parameters():
            p.data[:] = arrays[f"uncertainty.{name}"]
        for i, v in enumerate(self.opt.velocity):
            v[:] = arrays[f"opt.velocity.{i}"]
        self.step_count = int(extra["step"])
        self.epoch = int(extra["epoch"])


def save_model(model: GroundingModel, path, extra: dict | None = None) -> None:
    serialize.save_state(path, list(model.named_state()), extra_manifest=extra or {})


def load_model_state(model: GroundingModel, arrays: dict) -> None:
    for name, tensor in model.named_state():
        if name not in arrays:
            raise serialize.FormatError(f"checkpoint missing tensor {name}")
        target = tensor.data if isinstance(tensor, Tensor) else tensor
        if tuple(target.shape) != tuple(arrays[name].shape):
            raise serialize.FormatError(
                f"shape mismatch for tensor {name}: "
                f"model {tuple(target.shape)}, checkpoint {tuple(arrays[name].shape)}")
        target[:] = arrays[name]


def load_model(model: GroundingModel, path) -> dict:
    arrays, extra = serialize.load_state(path)
    load_model_state(model, arrays)
    return extra


def predict_sample(model: GroundingModel, record, model_cfg: ModelConfig,
                   synth_cfg: SynthConfig):
    """Detections after NMS plus the argmax foreground mask."""
    image, rvp, tokens = prepare_inputs(record, model_cfg, synth_cfg)
    model.eval()
    with nd.no_grad():
        rec_maps, res_logits = model(Tensor(image), None if rvp is None else Tensor(rvp),
                                     tokens)
    dets = decode_detections(rec_maps, model_cfg)
    fg = res_logits.data[0] > res_logits.data[1]
    return dets, fg


def evaluate_model(model: GroundingModel, records, model_cfg: ModelConfig,
                   synth_cfg: SynthConfig, batch_size: int = 8,
                   conf_threshold: float | None = None):
    """EvalResult over records, batching the forward passes.

    AP/AR are threshold-free rank metrics, so decoding uses a low confidence
    floor by default (0.05) rather than the operating threshold.
    """
    conf_threshold = 0.05 if conf_threshold is None else conf_threshold
    model.eval()
    scene_dets, scene_gts, mask_pairs = [], [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images, rvps, tokens = [], [], []
        for rec in chunk:
            img, rvp, tok = prepare_inputs(rec, model_cfg, synth_cfg)
            images.append(img)
            rvps.append(rvp)
            tokens.append(tok)
        with nd.no_grad():
            rec_maps, res_logits = model(
                Tensor(np.stack(images)),
                None if rvps[0] is None else Tensor(np.stack(rvps)), tokens)
        for bi, rec in enumerate(chunk):
            sample_maps = [level.data[bi] for level in rec_maps]
            dets = decode_detections(sample_maps, model_cfg, conf_threshold=conf_threshold)
            scene_dets.append(dets)
            scene_gts.append([tuple(b) for b in rec.boxes])
            fg = res_logits.data[bi, 0] > res_logits.data[bi, 1]
            mask_pairs.append((fg, rec.mask > 0.5))
    return evaluate(scene_dets, scene_gts, mask_pairs), scene_dets
