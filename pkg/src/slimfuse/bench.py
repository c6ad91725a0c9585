"""Synthetic end-to-end benchmark: fusion vs vision-only vs no-ARW arms.

One benchmark seed = one generated dataset plus one training seed, shared
across arms so the comparison isolates the configuration change. Metrics
are reported on the held-out test split, both overall and on the subset of
prompts carrying distance/motion predicates (answerable only with radar).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nd
from .config import ModelConfig, RunConfig
from .model import GroundingModel
from .synth import SynthConfig, build_vocabulary, generate_scene
from .train import Trainer, evaluate_model


def benchmark_synth_config(image_size: int = 160, clutter_rate: float = 0.5) -> SynthConfig:
    return SynthConfig(
        image_size=image_size, target_count=(1, 3), clutter_rate=clutter_rate,
        radar_dependent_fraction=0.6, size_fractions=(0.22, 0.32, 0.42))


def benchmark_model_config(image_size: int = 160, **overrides) -> ModelConfig:
    base = dict(input_size=image_size, base_channels=8, reg_max=8, agent_length=16,
                max_tokens=12, text_dim=32, stage_heads=(4, 4, 8))
    base.update(overrides)
    return ModelConfig(**base)


ARMS = {
    "fusion": dict(use_radar=True, use_arw=True),
    "vision": dict(use_radar=False),
    "no_arw": dict(use_radar=True, use_arw=False),
}


@dataclass
class ArmResult:
    arm: str
    seed: int
    ap50_all: float
    ap50_radar_dep: float
    miou: float
    train_seconds: float
    steps: int


@dataclass
class BenchmarkResult:
    runs: list = field(default_factory=list)

    def by(self, arm: str, seed: int) -> ArmResult:
        return next(r for r in self.runs if r.arm == arm and r.seed == seed)

    def gaps(self, metric: str = "ap50_radar_dep", a: str = "fusion", b: str = "vision"):
        seeds = sorted({r.seed for r in self.runs})
        return {s: getattr(self.by(a, s), metric) - getattr(self.by(b, s), metric)
                for s in seeds}

    def to_dict(self) -> dict:
        return {"runs": [vars(r) for r in self.runs]}


def _make_splits(n_samples: int, seed: int, synth_cfg: SynthConfig):
    records = [generate_scene(seed * 1_000_000 + i, synth_cfg) for i in range(n_samples)]
    n_train = int(round(synth_cfg.splits[0] * n_samples))
    n_val = int(round(synth_cfg.splits[1] * n_samples))
    return records[:n_train], records[n_train + n_val :]


def run_arm(arm: str, seed: int, train_records, test_records,
            synth_cfg: SynthConfig, steps: int, lr: float = 2e-2,
            batch_size: int = 8) -> ArmResult:
    vocab = build_vocabulary()
    with nd.precision("float32"):
        mcfg = benchmark_model_config(synth_cfg.image_size, **ARMS[arm])
        epochs = max(1, -(-steps * batch_size // max(1, len(train_records))))
        rcfg = RunConfig(model=mcfg, lr=lr, epochs=epochs + 1, batch_size=batch_size,
                         seed=seed, uncertainty_freeze_steps=max(1, (steps * 2) // 3))
        model = GroundingModel(mcfg, len(vocab), np.random.default_rng(seed))
        trainer = Trainer(model, train_records, rcfg, synth_cfg)
        t0 = time.perf_counter()
        trainer.fit(max_steps=steps)
        train_seconds = time.perf_counter() - t0
        result_all, scene_dets = evaluate_model(model, test_records, mcfg, synth_cfg)
        dep_idx = [i for i, r in enumerate(test_records) if r.prompt.radar_dependent]
        from .metrics import evaluate

        dep = evaluate([scene_dets[i] for i in dep_idx],
                       [[tuple(b) for b in test_records[i].boxes] for i in dep_idx],
                       [])
    return ArmResult(arm=arm, seed=seed, ap50_all=result_all.ap50,
                     ap50_radar_dep=dep.ap50, miou=result_all.miou,
                     train_seconds=train_seconds, steps=trainer.step_count)


def run_benchmark(arms=("fusion", "vision", "no_arw"), seeds=(0, 1, 2),
                  n_samples: int = 2000, steps: int = 600,
                  synth_cfg: SynthConfig | None = None,
                  out_path=None, verbose: bool = True) -> BenchmarkResult:
    synth_cfg = synth_cfg or benchmark_synth_config()
    result = BenchmarkResult()
    for seed in seeds:
        train_records, test_records = _make_splits(n_samples, seed, synth_cfg)
        for arm in arms:
            run = run_arm(arm, seed, train_records, test_records, synth_cfg, steps)
            result.runs.append(run)
            if verbose:
                print(f"[bench] seed={seed} arm={arm:7s} steps={run.steps} "
                      f"AP50(all)={run.ap50_all:.3f} AP50(radar)={run.ap50_radar_dep:.3f} "
                      f"mIoU={run.miou:.3f} ({run.train_seconds:.0f}s)", flush=True)
    if out_path:
        Path(out_path).write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    return result
