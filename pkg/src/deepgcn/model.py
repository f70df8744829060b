"""Backbone / fusion / prediction assembly for point-cloud segmentation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .graph import DilationSpec, NeighborList, build_input_graph, stochastic_dilated_knn
from .layers import AGGREGATORS, GCNLayer, Unit, residual_wrap
from .errors import ConfigError, ContractError, InsufficientPointsError

BACKBONES = ("plain", "residual", "dense")


@dataclass
class ModelConfig:
    backbone: str = "residual"
    aggregator: str = "edgeconv"
    depth: int = 28
    width: int = 64
    k: int = 16
    d_max: int = 16
    epsilon: float = 0.2
    dynamic: bool = True
    dilation: bool = True
    num_classes: int = 13
    dropout: float = 0.3
    aux_dim: int = 0
    fusion_width: int = 1024
    head_widths: tuple = (512, 256)
    mlp_depth: int = 1

    def __post_init__(self):
        self.head_widths = tuple(int(w) for w in self.head_widths)
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        for name in ("depth", "width", "k", "d_max", "num_classes", "fusion_width", "mlp_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.aux_dim < 0:
            raise ConfigError("aux_dim must be >= 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if len(self.head_widths) != 2 or min(self.head_widths) < 1:
            raise ConfigError("head_widths needs two positive widths")

    @property
    def input_dim(self):
        return 3 + self.aux_dim

    def replace(self, **changes):
        vals = asdict(self)
        vals.update(changes)
        return ModelConfig(**vals)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def layer_widths(self):
        """Channel count of each backbone layer's output representation."""
        if self.backbone == "dense":
            return [self.input_dim + self.width * (l + 1) for l in range(self.depth)]
        return [self.width] * self.depth


def dilation_schedule(layer_index, d_max):
    """Linearly growing dilation rate, capped at ``d_max``."""
    if layer_index < 0 or d_max < 1:
        raise ContractError("layer_index must be >= 0 and d_max >= 1")
    return min(layer_index + 1, d_max)


@dataclass
class ForwardTrace:
    layers: list
    fusion_inputs: list
    neighbors: list = field(default_factory=list)
    fused: object = None
    logits: object = None
    num_blocks: int = 1

    def __len__(self):
        return len(self.layers)


class Model:
    """Parameters for the three blocks, built deterministically from a seed."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d0, dw = cfg.input_dim, cfg.width
        self.layers = []
        for l in range(cfg.depth):
            if cfg.backbone == "dense":
                d_in = d0 + dw * l
            else:
                d_in = d0 if l == 0 else dw
            self.layers.append(GCNLayer(cfg.aggregator, d_in, dw, rng, cfg.mlp_depth))
        local = dw * cfg.depth
        self.fusion = Unit(local, cfg.fusion_width, rng)
        h1, h2 = cfg.head_widths
        self.head = [
            Unit(local + cfg.fusion_width, h1, rng),
            Unit(h1, h2, rng),
            Unit(h2, cfg.num_classes, rng, bn=False, activation="none"),
        ]

    def named_parameters(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"backbone{i}"))
        out.update(self.fusion.named_parameters("fusion"))
        for i, u in enumerate(self.head):
            out.update(u.named_parameters(f"head{i}"))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def batch_norms(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.batch_norms(f"backbone{i}"))
        out["fusion.bn"] = self.fusion.bn
        for i, u in enumerate(self.head):
            if u.bn is not None:
                out[f"head{i}.bn"] = u.bn
        return out

    def state_arrays(self):
        """Every array needed to reproduce the model: parameters and BN running stats."""
        out = {name: p.data.copy() for name, p in self.named_parameters().items()}
        for name, bn in self.batch_norms().items():
            out[f"{name}.running_mean"] = bn.running_mean.copy()
            out[f"{name}.running_var"] = bn.running_var.copy()
        return out

    def load_arrays(self, arrays):
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ContractError(f"checkpoint does not match config: missing={missing[:3]} extra={extra[:3]}")
        for name, arr in arrays.items():
            if np.shape(arr) != expected[name].shape:
                raise ContractError(f"{name}: shape {np.shape(arr)} != {expected[name].shape}")
        for name, p in self.named_parameters().items():
            p.data[...] = arrays[name]
        for name, bn in self.batch_norms().items():
            bn.running_mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(arrays[f"{name}.running_var"], dtype=np.float64)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _as_blocks(cloud):
    blocks = list(cloud) if isinstance(cloud, (list, tuple)) else [cloud]
    if not blocks:
        raise ContractError("forward needs at least one cloud")
    sizes = {b.num_points for b in blocks}
    if len(sizes) != 1:
        raise ContractError(f"blocks in one batch must share a point count, got {sorted(sizes)}")
    return blocks


def _batched(graph_fn, feats, n, nblocks):
    """Run ``graph_fn`` on each block's rows and offset the indices into the stacked array."""
    parts = [graph_fn(feats[b * n:(b + 1) * n]) for b in range(nblocks)]
    if nblocks == 1:
        return parts[0]
    idx = np.concatenate([p.indices + b * n for b, p in enumerate(parts)])
    sampled = None
    if all(p.sampled is not None for p in parts):
        sampled = np.concatenate([p.sampled for p in parts])
    return NeighborList(idx, sampled=sampled)


def _layer_graph(cfg, l, h, training, rng, n, nblocks):
    d = dilation_schedule(l, cfg.d_max) if cfg.dilation else 1
    spec = DilationSpec(d=d, epsilon=cfg.epsilon, training=training)
    return _batched(lambda x: stochastic_dilated_knn(x, cfg.k, spec, rng), h.data, n, nblocks)


def backbone_forward(cloud, model, training=False, rng=None):
    """Backbone over one cloud or a list of equal-size clouds.

    A list is stacked into one disjoint graph: neighbors never cross blocks,
    while batch-norm statistics in training mode pool every block's rows.
    """
    cfg = model.cfg
    blocks = _as_blocks(cloud)
    n = blocks[0].num_points
    for c in blocks:
        if c.aux_dim != cfg.aux_dim:
            raise ContractError(f"cloud has {c.aux_dim} aux channels, config expects {cfg.aux_dim}")
    if n < cfg.k + 1:
        raise InsufficientPointsError(f"k={cfg.k} needs at least {cfg.k + 1} points, cloud has {n}")
    if rng is None:
        rng = np.random.default_rng(0)
    h = ad.Tensor(np.concatenate([c.features() for c in blocks]))
    first = DilationSpec(d=1, epsilon=cfg.epsilon, training=training)
    coords = np.concatenate([c.coords for c in blocks])
    nbrs = _batched(lambda x: build_input_graph(x, cfg.k, first, rng), coords, n, len(blocks))
    trace = ForwardTrace(layers=[], fusion_inputs=[], neighbors=[], num_blocks=len(blocks))
    for l, layer in enumerate(model.layers):
        if l > 0 and cfg.dynamic:
            nbrs = _layer_graph(cfg, l, h, training, rng, n, len(blocks))
        trace.neighbors.append(nbrs)
        if cfg.backbone == "dense":
            new = layer(h, nbrs, training)
            h = ad.concat_features(h, new)
            trace.fusion_inputs.append(new)
        elif cfg.backbone == "residual" and l > 0:
            h = residual_wrap(layer, h, nbrs, training)
            trace.fusion_inputs.append(h)
        else:
            h = layer(h, nbrs, training)
            trace.fusion_inputs.append(h)
        trace.layers.append(h)
    return trace


def fusion_forward(trace, model, training=False):
    """Concat per-layer features, 1x1 conv, global max, re-attach the global vector.

    The global max runs over each block of the trace separately.
    """
    if not trace.fusion_inputs:
        raise ContractError("fusion needs a non-empty trace")
    local = ad.concat(trace.fusion_inputs, axis=1)
    if local.shape[1] != model.fusion.d_in:
        raise ContractError(f"fusion expects {model.fusion.d_in} channels, trace has {local.shape[1]}")
    b = trace.num_blocks
    rows, f = local.shape[0], model.fusion.d_out
    if rows % b:
        raise ContractError(f"{rows} rows do not split into {b} blocks")
    n = rows // b
    glob, _ = ad.max_reduce(ad.reshape(model.fusion(local, training), (b, n, f)), axis=1)
    glob = ad.reshape(ad.broadcast_to(ad.reshape(glob, (b, 1, f)), (b, n, f)), (rows, f))
    return ad.concat([local, glob], axis=1)


def prediction_forward(fused, model, training=False, rng=None):
    """Three per-vertex perceptrons with dropout after the second."""
    if rng is None:
        rng = np.random.default_rng(0)
    u1, u2, u3 = model.head
    x = u2(u1(fused, training), training)
    x = ad.dropout(x, model.cfg.dropout, training, rng)
    return u3(x, training)


def model_forward(cloud, model, training=False, rng=None, return_trace=False):
    if rng is None:
        rng = np.random.default_rng(0)
    trace = backbone_forward(cloud, model, training, rng)
    trace.fused = fusion_forward(trace, model, training)
    trace.logits = prediction_forward(trace.fused, model, training, rng)
    return (trace.logits, trace) if return_trace else trace.logits
