"""Central-difference gradient verification.

Runs in 64-bit precision. The checked function maps a list of Tensors to one
Tensor of any shape; outputs are reduced through a fixed random projection so
a single scalar drives both the analytic and the numeric pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

_REL_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: list = field(default_factory=list)
    kinks: int = 0  # non-differentiable points detected and excluded, not failed

    def __float__(self):
        return self.max_rel_err


def _scalarize(fn, tensors, proj):
    out = fn(*tensors)
    return (out * proj).sum()


def grad_check_detail(fn, inputs, eps: float = 1e-5, seed: int = 0) -> GradCheckReport:
    tensors = []
    for x in inputs:
        if isinstance(x, Tensor):
            t = Tensor(x.data.astype(np.float64), requires_grad=True, dtype=np.float64)
        else:
            t = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, dtype=np.float64)
        tensors.append(t)

    probe = fn(*tensors)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(probe.shape)
    # keep the scalarized output small so central-difference cancellation
    # noise stays below the relative-error floor on exactly-zero gradients
    mag = float(np.abs(proj * probe.data).sum())
    if mag > 1e-9:
        proj *= 1e-3 / mag

    loss = (probe * proj).sum()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    report = GradCheckReport(0.0)
    for k, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(_scalarize(fn, tensors, proj).data)
            flat[i] = orig - eps
            lo = float(_scalarize(fn, tensors, proj).data)
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * eps)
        a = analytic[k].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), _REL_FLOOR)
        rel = np.abs(a - num) / denom
        for worst in np.nonzero(rel > 1e-3)[0]:
            # one-sided derivatives disagree at a genuine kink
            orig = flat[worst]
            mid = float(_scalarize(fn, tensors, proj).data)
            flat[worst] = orig + eps
            hi = float(_scalarize(fn, tensors, proj).data)
            flat[worst] = orig - eps
            lo = float(_scalarize(fn, tensors, proj).data)
            flat[worst] = orig
            fwd = (hi - mid) / eps
            bwd = (mid - lo) / eps
            if abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd), _REL_FLOOR):
                rel[worst] = 0.0
                report.kinks += 1
        report.per_input.append(float(rel.max()))
    report.max_rel_err = max(report.per_input) if report.per_input else 0.0
    return report


def grad_check(fn, inputs, eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error |analytic - numeric| / max(|a|, |n|, 1e-8)."""
    return grad_check_detail(fn, inputs, eps=eps, seed=seed).max_rel_err


def _set_by_path(module, dotted: str, value):
    parts = dotted.split(".")
    target = module
    for part in parts[:-1]:
        target = target[int(part)] if part.isdigit() else getattr(target, part)
    last = parts[-1]
    if last.isdigit():
        target[int(last)] = value
    else:
        setattr(target, last, value)


def grad_check_module(module, inputs, forward=None, eps: float = 1e-5,
                      seed: int = 0) -> GradCheckReport:
    """Check gradients w.r.t. the given inputs plus every module parameter."""
    named = list(module.named_parameters())
    names = [n for n, _ in named]
    originals = [p for _, p in named]
    fwd = forward if forward is not None else (lambda *args: module(*args))
    n_in = len(inputs)

    def fn(*args):
        for name, p in zip(names, args[n_in:]):
            _set_by_path(module, name, p)
        return fwd(*args[:n_in])

    try:
        return grad_check_detail(fn, list(inputs) + originals, eps=eps, seed=seed)
    finally:
        for name, p in zip(names, originals):
            _set_by_path(module, name, p)
