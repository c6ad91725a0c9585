"""Diagnostic: when does radar exploitation kick in? (throwaway)"""
import time
import numpy as np
import slimfuse.nd as nd
from slimfuse.config import ModelConfig, RunConfig
from slimfuse.model import GroundingModel
from slimfuse.synth import SynthConfig, generate_scene, build_vocabulary
from slimfuse.train import Trainer, evaluate_model
from slimfuse.metrics import evaluate

t0 = time.time()
synth_cfg = SynthConfig(image_size=160, target_count=(2, 4), clutter_rate=0.5,
                        radar_dependent_fraction=0.7, noise=0.01, dilation=3,
                        size_fractions=(0.22, 0.32, 0.42),
                        categories=("buoy", "ship", "boat", "kayak"),
                        range_thresholds=(20.0,), nearest_k_max=2)
train_recs = [generate_scene(s, synth_cfg) for s in range(1200)]
test_recs = [generate_scene(70_000 + s, synth_cfg) for s in range(160)]
dep_idx = [i for i, r in enumerate(test_recs) if r.prompt.radar_dependent]
print(f"gen {time.time()-t0:.0f}s; radar-dep {len(dep_idx)}/{len(test_recs)}", flush=True)
vocab = build_vocabulary()

def eval_arm(model, mcfg):
    res_all, scene_dets = evaluate_model(model, test_recs, mcfg, synth_cfg)
    dep = evaluate([scene_dets[i] for i in dep_idx],
                   [[tuple(b) for b in test_recs[i].boxes] for i in dep_idx], [])
    return dep.ap50, res_all.ap50

for name, kw in (("fusion", dict(use_radar=True)), ("vision", dict(use_radar=False))):
    with nd.precision("float32"):
        mcfg = ModelConfig(input_size=160, base_channels=8, reg_max=8, agent_length=16,
                           max_tokens=12, text_dim=32, stage_heads=(4, 4, 8), **kw)
        rcfg = RunConfig(model=mcfg, lr=2.5e-2, epochs=16, batch_size=8, seed=0,
                         uncertainty_freeze_steps=600)
        model = GroundingModel(mcfg, len(vocab), np.random.default_rng(0))
        tr = Trainer(model, train_recs, rcfg, synth_cfg)
        t1 = time.time()
        for chunk in (500, 500, 500, 500):
            tr.fit(max_steps=tr.step_count + chunk)
            dep_ap, all_ap = eval_arm(model, mcfg)
            print(f"{name} @{tr.step_count}: dep={dep_ap:.3f} all={all_ap:.3f} "
                  f"({time.time()-t1:.0f}s)", flush=True)
print(f"total {time.time()-t0:.0f}s")
