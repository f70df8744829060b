"""Graph convolution operators and the residual / dense wrappers around them."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm, Tensor
from .errors import ContractError, ResidualShapeError

AGGREGATORS = ("edgeconv", "mrgcn", "graphsage", "graphsage-normalized", "gin")


class Unit:
    """Weights of one ``act(BN(x @ w + b))`` perceptron."""

    def __init__(self, d_in, d_out, rng, bn=True, activation="relu"):
        scale = np.sqrt(2.0 / d_in)
        self.w = Tensor(rng.standard_normal((d_in, d_out)) * scale, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)
        self.bn = BatchNorm(d_out) if bn else None
        self.activation = activation

    @property
    def d_in(self):
        return self.w.shape[0]

    @property
    def d_out(self):
        return self.w.shape[1]

    def __call__(self, x, training=True):
        return ad.mlp_unit(x, self.w, self.b, self.bn, self.activation, training)

    def named_parameters(self, prefix):
        out = {f"{prefix}.w": self.w, f"{prefix}.b": self.b}
        if self.bn is not None:
            out[f"{prefix}.bn.gamma"] = self.bn.gamma
            out[f"{prefix}.bn.beta"] = self.bn.beta
        return out

    def zero_output(self):
        """Force the unit to emit zeros: zero affine, identity BN affine, no activation."""
        self.w.data[...] = 0.0
        self.b.data[...] = 0.0
        if self.bn is not None:
            self.bn.beta.data[...] = 0.0
        self.activation = "none"


def _mlp(units, x, training):
    for u in units:
        x = u(x, training)
    return x


class GCNLayer:
    """One graph convolution F(h, N) of a given aggregator kind.

    ``mlp_depth`` stacks extra perceptrons in the per-edge (EdgeConv) or
    post-aggregation MLPs; the default of 1 gives a single unit.
    """

    def __init__(self, kind, d_in, d_out, rng, mlp_depth=1):
        if kind not in AGGREGATORS:
            raise ContractError(f"unknown aggregator {kind!r}; expected one of {AGGREGATORS}")
        if mlp_depth < 1:
            raise ContractError("mlp_depth must be >= 1")
        self.kind = kind
        self.d_in = d_in
        self.d_out = d_out
        self.eps = None
        self.inner = []
        if kind in ("edgeconv", "mrgcn"):
            first = 2 * d_in
        elif kind.startswith("graphsage"):
            self.inner = [Unit(d_in, d_out, rng)]
            first = d_in + d_out
        else:
            self.eps = Tensor(np.zeros(1), requires_grad=True)
            first = d_in
        self.units = [Unit(first, d_out, rng)] + [Unit(d_out, d_out, rng) for _ in range(mlp_depth - 1)]

    def __call__(self, h, nbrs, training=True):
        h = ad.as_tensor(h)
        idx = nbrs.indices if hasattr(nbrs, "indices") else np.asarray(nbrs)
        if h.data.ndim != 2 or h.shape[1] != self.d_in:
            raise ContractError(f"{self.kind}: expected (N, {self.d_in}) features, got {h.shape}")
        if idx.ndim != 2 or idx.shape[0] != h.shape[0]:
            raise ContractError(f"{self.kind}: neighbor list {idx.shape} does not match {h.shape[0]} vertices")
        return getattr(self, "_" + self.kind.replace("-normalized", "").replace("-", "_"))(h, idx, training)

    def _edgeconv(self, h, idx, training):
        n, k = idx.shape
        first = self.units[0]
        out = ad.edge_affine(h, idx, first.w, first.b)
        if len(self.units) == 1 and first.bn is not None:
            return ad.norm_act_max(out, k, first.bn, first.activation, training)
        out = ad.norm_act(out, first.bn, first.activation, training)
        out = _mlp(self.units[1:], out, training)
        out, _ = ad.max_reduce(ad.reshape(out, (n, k, self.d_out)), axis=1)
        return out

    def _mrgcn(self, h, idx, training):
        n, _ = idx.shape
        rel = ad.sub(ad.gather_rows(h, idx), ad.reshape(h, (n, 1, self.d_in)))
        m, _ = ad.max_reduce_neighbors(rel)
        return _mlp(self.units, ad.concat_features(h, m), training)

    def _graphsage(self, h, idx, training):
        n, k = idx.shape
        # the inner MLP sees each vertex's raw features once; neighbors reuse those rows
        pooled = ad.gather_rows(_mlp(self.inner, h, training), idx)
        a, _ = ad.max_reduce_neighbors(pooled)
        y = _mlp(self.units, ad.concat_features(h, a), training)
        if self.kind == "graphsage-normalized":
            y = ad.l2_normalize_rows(y)
        return y

    def _gin(self, h, idx, training):
        agg = ad.sum_reduce(ad.gather_rows(h, idx), axis=1)
        pre = ad.add(ad.mul(h, ad.add(self.eps, 1.0)), agg)
        return _mlp(self.units, pre, training)

    def gin_pre_mlp(self, h, nbrs):
        """(1 + eps) * h_v + sum of neighbor features, before the MLP."""
        idx = nbrs.indices if hasattr(nbrs, "indices") else np.asarray(nbrs)
        h = np.asarray(h.data if isinstance(h, Tensor) else h)
        return (1.0 + self.eps.data[0]) * h + h[idx].sum(axis=1)

    def named_parameters(self, prefix):
        out = {}
        for i, u in enumerate(self.inner):
            out.update(u.named_parameters(f"{prefix}.inner{i}"))
        for i, u in enumerate(self.units):
            out.update(u.named_parameters(f"{prefix}.mlp{i}"))
        if self.eps is not None:
            out[f"{prefix}.eps"] = self.eps
        return out

    def batch_norms(self, prefix):
        out = {}
        for i, u in enumerate(self.inner):
            if u.bn is not None:
                out[f"{prefix}.inner{i}.bn"] = u.bn
        for i, u in enumerate(self.units):
            if u.bn is not None:
                out[f"{prefix}.mlp{i}.bn"] = u.bn
        return out

    def zero_residual(self):
        """Make F identically zero (used to probe identity shortcuts)."""
        self.units[-1].zero_output()


def residual_wrap(layer, h, nbrs, training=True):
    """``F(h) + h`` vertex-wise; requires F to preserve the channel count."""
    h = ad.as_tensor(h)
    if layer.d_out != h.shape[1] or layer.d_in != h.shape[1]:
        raise ResidualShapeError(
            f"residual connection needs equal widths, layer maps {layer.d_in} -> {layer.d_out} "
            f"on {h.shape[1]}-channel input"
        )
    return ad.add(layer(h, nbrs, training), h)


def dense_wrap(layer, h, nbrs, training=True):
    """``concat(h, F(h))``: grows the width by the layer's output channels."""
    h = ad.as_tensor(h)
    return ad.concat_features(h, layer(h, nbrs, training))


def _forward_as(kind, h, nbrs, layer, training):
    if layer.kind != kind:
        raise ContractError(f"layer is {layer.kind!r}, not {kind!r}")
    return layer(h, nbrs, training)


def edgeconv_forward(h, nbrs, layer, training=True):
    return _forward_as("edgeconv", h, nbrs, layer, training)


def mrgcn_forward(h, nbrs, layer, training=True):
    return _forward_as("mrgcn", h, nbrs, layer, training)


def graphsage_forward(h, nbrs, layer, normalize=False, training=True):
    return _forward_as("graphsage-normalized" if normalize else "graphsage", h, nbrs, layer, training)


def gin_forward(h, nbrs, layer, training=True):
    return _forward_as("gin", h, nbrs, layer, training)
