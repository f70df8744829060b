"""Mini-batch training loop, evaluation and model checkpoints."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import format_model_config, parse_model_config
from .errors import ContractError, NumericError
from .metrics import ConfusionMatrix
from .model import Model, model_forward

LOG_COLUMNS = ("epoch", "step", "lr", "loss", "train_oa")


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    train_oa: float

    def row(self):
        return [self.epoch, self.step, repr(self.lr), repr(self.loss), repr(self.train_oa)]


@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)

    @property
    def losses(self):
        return [r.loss for r in self.log]

    @property
    def final_loss(self):
        return self.log[-1].loss


def _check_dataset(cfg, dataset):
    if len(dataset) == 0:
        raise ContractError("training needs a non-empty dataset")
    if dataset.num_classes != cfg.num_classes:
        raise ContractError(f"dataset has {dataset.num_classes} classes, model expects {cfg.num_classes}")
    if dataset.blocks[0].aux_dim != cfg.aux_dim:
        raise ContractError(f"dataset has {dataset.blocks[0].aux_dim} aux channels, model expects {cfg.aux_dim}")


def activation_report(trace):
    """Per-layer RMS of the backbone activations, for NaN post-mortems."""
    parts = []
    for i, h in enumerate(trace.layers):
        with np.errstate(all="ignore"):
            rms = float(np.sqrt(np.mean(h.data ** 2)))
        parts.append(f"layer{i + 1}={rms:.4g}")
    if trace.fused is not None:
        with np.errstate(all="ignore"):
            parts.append(f"fused={float(np.sqrt(np.mean(trace.fused.data ** 2))):.4g}")
    return " ".join(parts)


def write_log(log, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for rec in log:
            w.writerow(rec.row())


def read_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), int(r["step"]), float(r["lr"]), float(r["loss"]), float(r["train_oa"]))
            for r in rows]


def train(cfg, dataset, epochs, batch_size=4, seed=0, lr=1e-3, decay_steps=300_000,
          decay_factor=0.5, log_path=None, checkpoint_path=None, checkpoint_each_epoch=False,
          on_epoch=None):
    """Train a fresh model; returns a TrainResult with the per-epoch log.

    Each block is its own graph; a mini-batch is stacked into one disjoint
    graph so batch-norm statistics pool all of its blocks. The loss is the
    mean over the batch's points (equal-size blocks, so also the mean of the
    per-block losses), followed by one Adam step.
    """
    if epochs < 0:
        raise ContractError("epochs must be >= 0")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    _check_dataset(cfg, dataset)
    init_seq, run_seq = np.random.SeedSequence(seed).spawn(2)
    model = Model(cfg, seed=init_seq)
    rng = np.random.default_rng(run_seq)
    params = model.parameters()
    opt = ad.Adam(params, lr=lr, decay_interval=decay_steps, decay_factor=decay_factor)
    result = TrainResult(model)
    nblocks = len(dataset)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(nblocks)
        loss_sum, correct, seen = 0.0, 0, 0
        for start in range(0, nblocks, batch_size):
            batch = order[start:start + batch_size]
            opt.zero_grad()
            blocks = [dataset.blocks[i] for i in batch]
            labels = np.concatenate([b.labels for b in blocks])
            logits, trace = model_forward(blocks, model, training=True, rng=rng, return_trace=True)
            loss = ad.softmax_cross_entropy(logits, labels)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {opt.state.step_count}: " + activation_report(trace)
                )
            ad.backward(loss)
            loss_sum += value * len(blocks)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += labels.size
            used_lr = opt.state.lr
            opt.step()
        rec = EpochRecord(epoch, opt.state.step_count, used_lr, loss_sum / nblocks, correct / seen)
        result.log.append(rec)
        if log_path:
            write_log(result.log, log_path)
        if checkpoint_path and checkpoint_each_epoch:
            save_model(model, checkpoint_path)
        if on_epoch is not None:
            on_epoch(rec)
    if log_path and not result.log:
        write_log(result.log, log_path)
    if checkpoint_path:
        save_model(model, checkpoint_path)
    return result


def predict(model, cloud):
    """Eval-mode class predictions for one block."""
    return model_forward(cloud, model, training=False).data.argmax(axis=1)


def evaluate(model, dataset, workers=1):
    """Confusion matrix and metrics over every block, eval mode.

    ``model`` may be a Model or a checkpoint path. Blocks may be processed by
    several threads; counts are merged in block order.
    """
    if isinstance(model, (str, os.PathLike)):
        model = load_model(model)
    if dataset.num_classes != model.cfg.num_classes:
        raise ContractError(f"dataset has {dataset.num_classes} classes, model predicts {model.cfg.num_classes}")
    cm = ConfusionMatrix(dataset.num_classes)
    if workers > 1 and len(dataset) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(lambda b: predict(model, b), dataset.blocks))
    else:
        preds = [predict(model, b) for b in dataset.blocks]
    for block, pred in zip(dataset.blocks, preds):
        cm.update(pred, block.labels)
    return cm.metrics(), cm


def config_path_for(checkpoint_path):
    return str(checkpoint_path) + ".config"


def save_model(model, path):
    """Checkpoint arrays to ``path`` and the model config to ``path + '.config'``."""
    ad.save_checkpoint(model.state_arrays(), path)
    with open(config_path_for(path), "w") as fh:
        fh.write(format_model_config(model.cfg))


def load_model(path):
    cfg_path = config_path_for(path)
    if not os.path.exists(cfg_path):
        raise ContractError(f"no model config next to checkpoint (expected {cfg_path})")
    with open(cfg_path) as fh:
        cfg = parse_model_config(fh.read(), cfg_path)
    model = Model(cfg, seed=0)
    model.load_arrays(ad.load_checkpoint(path))
    return model
