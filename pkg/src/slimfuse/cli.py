"""Operator CLI: gen / train / eval / predict / audit / gradcheck.

Exit codes: 0 success, 2 configuration error, 3 numeric failure. The env
var PHMF_THREADS caps worker counts for data generation. Every subcommand
that writes results also writes a manifest capturing the resolved config
and seed, and report paths render figures next to the delimited output.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import nd, report
from .attention import AttentionShape
from .config import ConfigError, RunConfig, dump_run_config, load_run_config
from .costs import audit as audit_attention
from .costs import fit_complexity_law, stage_shapes
from .encoders import Vocabulary
from .model import GroundingModel
from .nd.serialize import FormatError
from .synth import SynthConfig, generate_dataset, read_dataset, split_indices
from .train import (
    NumericError,
    Trainer,
    evaluate_model,
    load_model,
    predict_sample,
)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("PHMF_THREADS", "1")))
    except ValueError:
        return 1


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path) -> RunConfig:
    try:
        return load_run_config(path)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))


def _dataset(path):
    try:
        return read_dataset(path)
    except (FileNotFoundError, FormatError) as exc:
        _fail(EXIT_CONFIG, f"dataset at {path}: {exc}")


def _build_model(cfg: RunConfig, dataset_dir) -> GroundingModel:
    vocab = Vocabulary.load(Path(dataset_dir) / "vocab.txt")
    return GroundingModel(cfg.model, len(vocab), np.random.default_rng(cfg.seed))


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig, extra=None) -> None:
    manifest = {"command": command, "seed": cfg.seed, "config": cfg.to_dict()}
    if extra:
        manifest.update(extra)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


@click.group()
def main():
    """Text-guided vision+radar grounding toolkit."""


@main.command("gen")
@click.option("--out", required=True, type=click.Path())
@click.option("--count", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--image-size", default=160, show_default=True)
@click.option("--clutter-rate", default=0.3, show_default=True)
@click.option("--radar-fraction", default=0.5, show_default=True,
              help="fraction of prompts carrying distance/motion predicates")
def cmd_gen(out, count, seed, image_size, clutter_rate, radar_fraction):
    """Generate a synthetic grounding dataset."""
    if count <= 0 or image_size % 32:
        _fail(EXIT_CONFIG, "count must be positive and image size a multiple of 32")
    cfg = SynthConfig(image_size=image_size, clutter_rate=clutter_rate,
                      radar_dependent_fraction=radar_fraction)
    generate_dataset(out, count, seed, cfg, workers=_workers())
    click.echo(f"wrote {count} samples to {out}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the config seed")
@click.option("--out", type=click.Path(), default=None, help="override the output dir")
@click.option("--data", type=click.Path(), default=None, help="override the dataset dir")
@click.option("--resume", is_flag=True, help="continue from the out dir checkpoint")
@click.option("--max-steps", type=int, default=None,
              help="stop after this many optimizer steps (schedule unchanged)")
def cmd_train(config_path, seed, out, data, resume, max_steps):
    """Train on the train split; writes checkpoint, CSV log and curves."""
    cfg = _load_config(config_path)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out_dir = out
    if data is not None:
        cfg.dataset = data
    if not cfg.dataset:
        _fail(EXIT_CONFIG, "no dataset configured (train.dataset or --data)")
    records, manifest = _dataset(cfg.dataset)
    synth_cfg = SynthConfig.from_dict(manifest["config"])
    train_records = [records[i] for i in split_indices(manifest, "train")]

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with nd.precision("float32"):
        model = _build_model(cfg, cfg.dataset)
        trainer = Trainer(model, train_records, cfg, synth_cfg, out_dir=out_dir)
        if resume and (out_dir / "checkpoint.bin").exists():
            trainer.load_checkpoint(out_dir / "checkpoint.bin")
            click.echo(f"resumed at epoch {trainer.epoch}, step {trainer.step_count}")
        _write_manifest(out_dir, "train", cfg, {"dataset_manifest": manifest["seed"]})
        dump_run_config(cfg, out_dir / "config_used.json")
        try:
            trainer.fit(max_steps=max_steps)
        except NumericError as exc:
            _fail(EXIT_NUMERIC, f"{exc}; last good checkpoint retained")
    report.save_training_curves(out_dir / "training_log.csv", out_dir / "training_curves.png")
    click.echo(f"trained {trainer.step_count} steps; checkpoint at {out_dir/'checkpoint.bin'}")


@main.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--data", type=click.Path(), default=None)
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]),
              show_default=True)
@click.option("--out", type=click.Path(), default=None)
def cmd_eval(config_path, checkpoint, data, split, out):
    """Evaluate a checkpoint on one dataset split."""
    cfg = _load_config(config_path)
    if data is not None:
        cfg.dataset = data
    records, manifest = _dataset(cfg.dataset)
    synth_cfg = SynthConfig.from_dict(manifest["config"])
    subset = [records[i] for i in split_indices(manifest, split)]
    if not subset:
        _fail(EXIT_CONFIG, f"split {split!r} is empty")
    with nd.precision("float32"):
        model = _build_model(cfg, cfg.dataset)
        try:
            load_model(model, checkpoint)
        except (FormatError, FileNotFoundError) as exc:
            _fail(EXIT_CONFIG, str(exc))
        result, _ = evaluate_model(model, subset, cfg.model, synth_cfg)
    out_dir = Path(out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"eval_{split}.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    report.write_eval_table(result, out_dir / f"eval_{split}.tsv")
    report.save_eval_figure(result, out_dir / f"eval_{split}.png")
    _write_manifest(out_dir, "eval", cfg, {"split": split, "checkpoint": str(checkpoint)})
    click.echo(f"AP50={result.ap50:.4f} AP50-95={result.ap50_95:.4f} "
               f"AR50-95={result.ar50_95:.4f} mIoU={result.miou:.4f}")


@main.command("predict")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--data", type=click.Path(), default=None)
@click.option("--index", default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def cmd_predict(config_path, checkpoint, data, index, out):
    """Run one sample; writes boxes JSON, mask PGM and an overlay figure."""
    cfg = _load_config(config_path)
    if data is not None:
        cfg.dataset = data
    records, manifest = _dataset(cfg.dataset)
    if not 0 <= index < len(records):
        _fail(EXIT_CONFIG, f"sample index {index} out of range 0..{len(records) - 1}")
    synth_cfg = SynthConfig.from_dict(manifest["config"])
    with nd.precision("float32"):
        model = _build_model(cfg, cfg.dataset)
        try:
            load_model(model, checkpoint)
        except (FormatError, FileNotFoundError) as exc:
            _fail(EXIT_CONFIG, str(exc))
        dets, fg = predict_sample(model, records[index], cfg.model, synth_cfg)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    boxes = [{"cx": d.cx, "cy": d.cy, "w": d.w, "h": d.h, "conf": d.conf} for d in dets]
    (out_dir / f"boxes_{index:06d}.json").write_text(json.dumps(boxes, indent=2) + "\n")
    report.write_pgm(fg, out_dir / f"mask_{index:06d}.pgm")
    report.save_prediction_overlay(records[index].image, dets, fg,
                                   out_dir / f"overlay_{index:06d}.png")
    _write_manifest(out_dir, "predict", cfg, {"index": index})
    click.echo(f"{len(dets)} detections -> {out_dir}")


@main.command("audit")
@click.option("--kind", "kinds", multiple=True,
              type=click.Choice(["mhsca", "mhca", "mhlca"]),
              help="attention kinds to audit (default: all three)")
@click.option("--agent-len", "agent_lens", multiple=True, type=int,
              help="agent lengths to sweep (default: 49 144 256)")
@click.option("--input-size", default=640, show_default=True)
@click.option("--tokens", default=50, show_default=True)
@click.option("--out", type=click.Path(), default="audit_out", show_default=True)
def cmd_audit(kinds, agent_lens, input_size, tokens, out):
    """Parameter/FLOP audit across the three fusion stages."""
    kinds = list(kinds) or ["mhca", "mhlca", "mhsca"]
    agent_lens = list(agent_lens) or [49, 144, 256]
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    payload = []
    try:
        for agent in agent_lens:
            shapes = stage_shapes(input_size=input_size, tokens=tokens, agent=agent)
            for stage, shape in shapes.items():
                for kind in kinds:
                    if kind != "mhsca" and agent != agent_lens[0]:
                        continue  # baselines have no agent; report them once
                    rep = audit_attention(kind, shape)
                    rows.append((stage, f"{kind}(n={agent})" if kind == "mhsca" else kind,
                                 rep))
                    payload.append(rep.to_dict())
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    report.write_cost_table(rows, out_dir / "audit.tsv")
    (out_dir / "audit.json").write_text(json.dumps(payload, indent=2) + "\n")
    report.save_cost_figure(rows, out_dir / "audit.png")
    coef, resid = fit_complexity_law("mhsca")
    (out_dir / "complexity_fit.json").write_text(json.dumps(
        {"coefficients": coef, "max_relative_residual": resid}, indent=2) + "\n")
    with open(out_dir / "audit.tsv") as f:
        click.echo(f.read().rstrip())
    click.echo(f"complexity fit residual: {resid:.2e}")


@main.command("gradcheck")
@click.option("--module", "selector", default="all", show_default=True,
              type=click.Choice(["all", "numcore", "arw", "attention", "heads", "losses"]))
@click.option("--seeds", default=3, show_default=True)
@click.option("--tolerance", default=1e-4, show_default=True)
def cmd_gradcheck(selector, seeds, tolerance):
    """Finite-difference verification of every differentiable component."""
    from .gradsuite import run_gradcheck_suite

    results = run_gradcheck_suite(selector, seeds)
    worst = 0.0
    for name, err in results:
        status = "ok" if err <= tolerance else "FAIL"
        click.echo(f"{name:32s} {err:9.2e}  {status}")
        worst = max(worst, err)
    if worst > tolerance:
        _fail(EXIT_NUMERIC, f"gradient check exceeded {tolerance:g} (worst {worst:.2e})")
    click.echo(f"all checks within {tolerance:g}")


if __name__ == "__main__":
    main()
