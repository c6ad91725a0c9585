"""Probe: pure single-threshold radar referral at small scale (throwaway)."""
import sys
import time
import numpy as np
import slimfuse.nd as nd
from slimfuse.config import ModelConfig, RunConfig
from slimfuse.model import GroundingModel
from slimfuse.synth import SynthConfig, generate_scene, build_vocabulary
from slimfuse.train import Trainer, evaluate_model

base = int(sys.argv[1]) if len(sys.argv) > 1 else 8
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 600

t0 = time.time()
synth_cfg = SynthConfig(image_size=128, target_count=(2, 3), clutter_rate=0.0,
                        radar_dependent_fraction=1.0, noise=0.0, dilation=3,
                        size_fractions=(0.25, 0.32, 0.4),
                        categories=("buoy", "boat"),
                        range_thresholds=(20.0,), radar_kinds=("range_lt",))
train_recs = [generate_scene(s, synth_cfg) for s in range(600)]
test_recs = [generate_scene(90_000 + s, synth_cfg) for s in range(120)]
vocab = build_vocabulary()
with nd.precision("float32"):
    mcfg = ModelConfig(input_size=128, base_channels=base, reg_max=8, agent_length=16,
                       max_tokens=12, text_dim=32, stage_heads=(4, 4, 8))
    rcfg = RunConfig(model=mcfg, lr=2.5e-2, epochs=30, batch_size=8, seed=0,
                     uncertainty_freeze_steps=10_000)
    model = GroundingModel(mcfg, len(vocab), np.random.default_rng(0))
    tr = Trainer(model, train_recs, rcfg, synth_cfg)
    t1 = time.time()
    while tr.step_count < steps:
        tr.fit(max_steps=tr.step_count + 200)
        res, _ = evaluate_model(model, test_recs, mcfg, synth_cfg)
        print(f"base{base} @{tr.step_count}: AP50={res.ap50:.3f} ({time.time()-t1:.0f}s)",
              flush=True)
print(f"total {time.time()-t0:.0f}s")
