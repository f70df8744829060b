"""Desk-scale experiment presets: plain vs residual depth sweeps and ablations."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .data import SynthSpec, synth_dataset
from .model import ModelConfig
from .train import evaluate, train

# 4-class synthetic data, 32 blocks of 512 points
DESK_DATA = dict(num_blocks=32, points_per_block=512, num_classes=4, seed=0)
DESK_TEST_BLOCKS = 8
# small fusion/head and a faster learning rate: a few hundred Adam steps total
DESK_MODEL = dict(width=16, k=8, d_max=16, fusion_width=64, head_widths=(64, 32), dropout=0.3)
DESK_TRAIN = dict(epochs=60, batch_size=4, lr=0.01, decay_steps=160, decay_factor=0.5)


def desk_datasets(num_blocks=None, seed=0):
    spec = dict(DESK_DATA, seed=seed)
    if num_blocks is not None:
        spec["num_blocks"] = num_blocks
    train_set = synth_dataset(SynthSpec(**spec), "train")
    spec["num_blocks"] = DESK_TEST_BLOCKS
    return train_set, synth_dataset(SynthSpec(**spec), "test")


def desk_config(backbone, depth, dilation=None, stochastic=None, **overrides):
    """Reference-style settings: residual gets dilation + stochastic dilation, plain gets neither."""
    dilation = backbone != "plain" if dilation is None else dilation
    stochastic = dilation if stochastic is None else stochastic
    vals = dict(DESK_MODEL, backbone=backbone, depth=depth, dilation=dilation,
                epsilon=0.2 if stochastic else 0.0, num_classes=DESK_DATA["num_classes"])
    vals.update(overrides)
    return ModelConfig(**vals)


def run_one(cfg, train_set, test_set=None, seed=0, **train_kw):
    kw = dict(DESK_TRAIN)
    kw.update(train_kw)
    res = train(cfg, train_set, seed=seed, **kw)
    out = {"losses": res.losses, "train_oa": [r.train_oa for r in res.log], "model": res.model}
    out["train_eval"], _ = evaluate(res.model, train_set)
    if test_set is not None:
        out["test_eval"], _ = evaluate(res.model, test_set)
    return out


def _run_job(job):
    cfg, train_set, test_set, seed, kw = job
    out = run_one(cfg, train_set, test_set, seed, **kw)
    out.pop("model")
    return out


def run_jobs(jobs, workers=None):
    """Run ``(cfg, train, test, seed, train_kw)`` jobs; results come back in job order."""
    if workers is None:
        workers = int(os.environ.get("DGCN_THREADS", "1") or 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def moving_average(values, window=5):
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")


def is_non_increasing(values, tol=0.0):
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.diff(v) <= tol))
