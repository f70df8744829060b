"""Reverse-mode differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor`. When at least one input
requires a gradient the output records its parents and a vector-Jacobian
closure; :func:`backward` walks the recorded graph once in reverse
topological order and accumulates ``.grad`` on leaf tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    EmptyInputError,
    EmptyNeighborhoodError,
    InvalidHyperparameterError,
)

DTYPE = np.float64


class Tensor:
    """Dense array with an optional gradient slot and a tape node."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _scatter_rows(flat_index, values, n):
    """Sum rows of ``values`` (M, ...) into an (n, ...) array at ``flat_index``."""
    tail = values.shape[1:]
    width = int(np.prod(tail)) if tail else 1
    v = values.reshape(len(flat_index), width)
    keys = (flat_index[:, None] * width + np.arange(width)).reshape(-1)
    out = np.bincount(keys, weights=v.reshape(-1), minlength=n * width)
    return out.reshape((n,) + tail)


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def affine(x, w, b=None):
    """``x @ w + b`` for ``x`` of shape (M, Din)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractError(f"affine: input {x.shape} does not match weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ContractError(f"affine: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out += b.data
        parents = (x, w, b)
    else:
        parents = (x, w)

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _result(out, parents, bw, "affine")


def edge_affine(h, index, w, b=None):
    """Per-edge ``concat(h_v, h_u - h_v) @ w + b`` for every (v, u) in ``index``.

    Uses ``h_v @ (w_c - w_r) + h_u @ w_r`` so the (N*k, 2D) edge matrix is never
    built. Output rows are ordered vertex-major: row ``v*k + j`` is edge
    (v, index[v, j]).
    """
    h, w = as_tensor(h), as_tensor(w)
    index = np.asarray(index)
    n, dim = h.shape
    if w.shape[0] != 2 * dim:
        raise ContractError(f"edge_affine: weight {w.shape} needs {2 * dim} input rows")
    if index.ndim != 2 or index.shape[0] != n:
        raise ContractError(f"edge_affine: index {index.shape} vs {n} vertices")
    k = index.shape[1]
    w_c, w_r = w.data[:dim], w.data[dim:]
    w_diff = w_c - w_r
    center = h.data @ w_diff
    if b is not None:
        b = as_tensor(b)
        center += b.data
    nb = h.data @ w_r
    out = (center[:, None, :] + nb[index]).reshape(n * k, -1)
    flat = index.reshape(-1)

    def bw(g):
        g = g.reshape(n, k, -1)
        g_center = g.sum(axis=1)
        g_nb = _scatter_rows(flat, g.reshape(n * k, -1), n)
        gh = g_center @ w_diff.T + g_nb @ w_r.T
        hc = h.data.T @ g_center
        gw = np.concatenate([hc, h.data.T @ g_nb - hc], axis=0)
        if b is None:
            return gh, gw
        return gh, gw, g_center.sum(axis=0)

    parents = (h, w) if b is None else (h, w, b)
    return _result(out, parents, bw, "edge_affine")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0  # subgradient 0 at exactly 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), bw, "reshape")


def broadcast_to(x, shape):
    x = as_tensor(x)
    old = x.shape

    def bw(g):
        return (_unbroadcast(g, old),)

    return _result(np.broadcast_to(x.data, shape).copy(), (x,), bw, "broadcast")


def concat(tensors, axis=-1):
    """Concatenate along ``axis``; the gradient is split back per input."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of nothing")
    ref = tensors[0].data
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.data.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ContractError(f"concat: shapes {ref.shape} and {t.shape} disagree off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def concat_features(a, b):
    """Row-wise concatenation of two (N, D) feature matrices, ``a`` first."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ContractError(f"concat_features: row counts differ ({a.shape} vs {b.shape})")
    return concat([a, b], axis=1)


def gather_rows(h, index):
    """``h[index]`` for an integer index array of any shape."""
    h = as_tensor(h)
    index = np.asarray(index)
    n = h.shape[0]

    def bw(g):
        return (_scatter_rows(index.reshape(-1), g.reshape(-1, *h.shape[1:]), n),)

    if index.size and (index.min() < 0 or index.max() >= n):
        raise ContractError("gather_rows: index out of range")
    return _result(h.data[index], (h,), bw, "gather")


def sum_reduce(x, axis=None):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def max_reduce(x, axis):
    """Max over ``axis``. Gradient flows to the first (lowest-index) maximiser."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise EmptyNeighborhoodError(f"max over empty axis {axis}")
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    res = _result(out, (x,), bw, "max")
    return res, arg


def max_reduce_neighbors(features):
    """Channelwise max over the neighbor axis of an (N, k, D) tensor.

    Returns the (N, D) maxima and the winning slot per vertex/channel.
    """
    features = as_tensor(features)
    if features.data.ndim != 3:
        raise ContractError(f"expected (N, k, D) features, got {features.shape}")
    if features.shape[1] == 0:
        raise EmptyNeighborhoodError("vertex neighborhood has k == 0")
    return max_reduce(features, axis=1)


def l2_normalize_rows(x, tol=1e-12):
    """Scale each row to unit L2 norm; rows with norm < ``tol`` pass unchanged."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    keep = norm < tol
    safe = np.where(keep, 1.0, norm)
    y = x.data / safe

    def bw(g):
        # d(x/|x|) = (g - y * <g, y>) / |x|
        proj = (g * y).sum(axis=1, keepdims=True)
        gx = (g - y * proj) / safe
        return (np.where(keep, g, gx),)

    return _result(y, (x,), bw, "l2norm")


# ---------------------------------------------------------------------------
# batch norm, dropout, loss


class BatchNorm:
    """Per-feature batch normalisation state (learnable affine + running stats)."""

    def __init__(self, num_features, momentum=0.9, eps=1e-5):
        if not 0.0 < momentum < 1.0:
            raise InvalidHyperparameterError(f"momentum must lie in (0, 1), got {momentum}")
        if eps < 0:
            raise InvalidHyperparameterError(f"eps must be non-negative, got {eps}")
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    @property
    def num_features(self):
        return self.gamma.shape[0]

    def __call__(self, x, training=None):
        return batch_norm(x, self, self.training if training is None else training)


def batch_norm(x, bn, training=True):
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != bn.num_features:
        raise ContractError(f"batch_norm: input {x.shape} vs {bn.num_features} features")
    m = x.shape[0]
    if m == 0:
        raise EmptyInputError("batch_norm on zero rows")
    gamma, beta = bn.gamma, bn.beta
    if training:
        mean = x.data.mean(axis=0)
        centered = x.data - mean
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        xhat = centered * inv_std
        unbiased = var * (m / (m - 1)) if m > 1 else var
        bn.running_mean = bn.momentum * bn.running_mean + (1.0 - bn.momentum) * mean
        bn.running_var = bn.momentum * bn.running_var + (1.0 - bn.momentum) * unbiased
    else:
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
        xhat = (x.data - bn.running_mean) * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if training:
            dx = inv_std / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), bw, "batchnorm")


def mlp_unit(x, w, b, bn=None, activation="relu", training=True):
    """``act(BN(x @ w + b))``: the per-vertex perceptron used everywhere."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ContractError(f"mlp_unit expects (N, Din), got {x.shape}")
    if x.shape[0] == 0:
        raise EmptyInputError("mlp_unit on zero rows")
    return norm_act(affine(x, w, b), bn, activation, training)


def norm_act(y, bn=None, activation="relu", training=True):
    """The ``act(BN(.))`` tail of a perceptron."""
    if bn is not None:
        y = batch_norm(y, bn, training)
    if activation == "relu":
        y = relu(y)
    elif activation not in (None, "none"):
        raise ContractError(f"unknown activation {activation!r}")
    return y


def norm_act_max(x, k, bn, activation="relu", training=True):
    """``max over k of act(BN(x))`` for edge rows ``x`` of shape (N*k, D).

    BN is a per-channel affine map with slope ``gamma / std`` and ReLU is
    monotone, so the winner of each (vertex, channel) is found on ``x``
    directly (largest x for a positive slope, smallest for a negative one) and
    only the N winners are normalised. The result equals the unfused chain.
    """
    x = as_tensor(x)
    m, dim = x.shape
    if k < 1 or m % k:
        raise EmptyNeighborhoodError(f"cannot split {m} edge rows into groups of k={k}")
    if bn is None:
        raise ContractError("norm_act_max needs a BatchNorm")
    n = m // k
    xd = x.data
    if training:
        mean = xd.mean(axis=0)
        centered = xd - mean
        var = np.einsum("ij,ij->j", centered, centered) / m
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        bn.running_mean = bn.momentum * bn.running_mean + (1.0 - bn.momentum) * mean
        bn.running_var = bn.momentum * bn.running_var + (1.0 - bn.momentum) * unbiased
    else:
        mean = bn.running_mean
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
    gamma = bn.gamma.data
    slope = gamma * inv_std
    x3 = xd.reshape(n, k, dim)
    arg = np.argmax(x3 * np.where(slope < 0, -1.0, np.where(slope > 0, 1.0, 0.0)), axis=1)
    sel = np.take_along_axis(x3, arg[:, None, :], axis=1)[:, 0, :]
    xhat_sel = (sel - mean) * inv_std
    y = xhat_sel * gamma + bn.beta.data
    if activation == "relu":
        mask = y > 0
        y = np.where(mask, y, 0.0)
    elif activation in (None, "none"):
        mask = None
    else:
        raise ContractError(f"unknown activation {activation!r}")

    def bw(g):
        if mask is not None:
            g = g * mask
        dgamma = (g * xhat_sel).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma
        if training:
            s1 = dxhat.sum(axis=0)
            s2 = (dxhat * xhat_sel).sum(axis=0)
            # dense part of the batch-stat gradient: -(inv/m) * (s1 + xhat * s2)
            c = -(inv_std / m) * s2 * inv_std
            a = -(inv_std / m) * s1 - c * mean
            dx = (xd * c + a).reshape(n, k, dim)
        else:
            dx = np.zeros((n, k, dim))
        picked = np.take_along_axis(dx, arg[:, None, :], axis=1)
        np.put_along_axis(dx, arg[:, None, :], picked + (dxhat * inv_std)[:, None, :], axis=1)
        return dx.reshape(m, dim), dgamma, dbeta

    return _result(y, (x, bn.gamma, bn.beta), bw, "norm_act_max")


def dropout(x, rate, training, rng):
    if not 0.0 <= rate < 1.0:
        raise InvalidHyperparameterError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    scale = 1.0 / (1.0 - rate)
    keep = (rng.random(x.shape) >= rate) * scale

    def bw(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), bw, "dropout")


def softmax_cross_entropy(logits, labels):
    """Mean over rows of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise EmptyInputError("cross entropy over zero rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss), (logits,), bw, "xent")


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_interval: int = 300_000
    decay_factor: float = 0.5
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def lr_at(self, step):
        return self.base_lr * self.decay_factor ** (step // self.decay_interval)

    @property
    def lr(self):
        return self.lr_at(self.step_count)


class Adam:
    """Adam with bias correction and a stepwise exponential lr decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 decay_interval=300_000, decay_factor=0.5):
        if decay_interval < 1:
            raise InvalidHyperparameterError("decay_interval must be >= 1")
        if not 0.0 < decay_factor <= 1.0:
            raise InvalidHyperparameterError("decay_factor must lie in (0, 1]")
        self.params = list(params)
        self.state = AdamState(
            base_lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
            decay_interval=decay_interval, decay_factor=decay_factor,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state)


def adam_step(params, grads, state):
    """One in-place Adam update of ``params``; missing grads count as zero."""
    if len(grads) != len(params):
        raise ContractError(f"{len(grads)} gradients for {len(params)} parameters")
    lr = state.lr
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ContractError(f"gradient {g.shape} does not match parameter {p.shape}")
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step_count = t


# ---------------------------------------------------------------------------
# checkpoint text format


CHECKPOINT_MAGIC = "DGKPT"


def save_checkpoint(named_arrays, path):
    """Write ``{name: array}`` as ``DGKPT v1`` text, 17 significant digits."""
    lines = [f"{CHECKPOINT_MAGIC} v1 {len(named_arrays)}"]
    for name, arr in named_arrays.items():
        if any(c.isspace() for c in name):
            raise ContractError(f"parameter name {name!r} contains whitespace")
        arr = np.asarray(arr, dtype=DTYPE)
        dims = " ".join(str(d) for d in arr.shape)
        vals = " ".join(format(v, ".17g") for v in arr.reshape(-1))
        lines.append(f"{name}\tdims {dims}\tvalues {vals}".rstrip())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    from .errors import PointFileError

    with open(path) as fh:
        text = fh.read().splitlines()
    if not text:
        raise PointFileError("empty checkpoint", path)
    head = text[0].split()
    if len(head) != 3 or head[0] != CHECKPOINT_MAGIC or head[1] != "v1":
        raise PointFileError(f"bad checkpoint header {text[0]!r}", path, 1)
    count = int(head[2])
    out = {}
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[1].startswith("dims") or not parts[2].startswith("values"):
            raise PointFileError("expected name<TAB>dims ...<TAB>values ...", path, lineno)
        try:
            dims = tuple(int(d) for d in parts[1].split()[1:])
            vals = np.array([float(v) for v in parts[2].split()[1:]], dtype=DTYPE)
        except ValueError as exc:
            raise PointFileError(str(exc), path, lineno) from None
        if vals.size != math.prod(dims):
            raise PointFileError(f"{vals.size} values for dims {dims}", path, lineno)
        out[parts[0]] = vals.reshape(dims)
    if len(out) != count:
        raise PointFileError(f"header declares {count} records, found {len(out)}", path)
    return out
