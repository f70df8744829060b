"""Self-checks against independent oracles.

* gradients: central finite differences for every differentiable op and layer
* knn: neighbor searches against a per-vertex exhaustive sort
* layers: aggregator forwards against naive per-vertex loops
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm, Tensor
from .graph import DilationSpec, dilated_knn, knn
from .layers import AGGREGATORS, GCNLayer

FD_STEP = 1e-6
GRAD_TOL = 1e-4
LAYER_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    cases: int = 0
    offenders: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self):
        return not self.offenders and self.max_error <= self.tolerance

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, max error {self.max_error:.3e} (tol {self.tolerance:g}) in {self.seconds:.2f}s"


# ---------------------------------------------------------------------------
# finite differences


def numeric_grad(f, arrays, h=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arrays`` (edited in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_error(analytic, numeric):
    """Normwise ``|a - n|_inf / max(|a|_inf, |n|_inf)`` over all gradients of one case."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-30)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def grad_check(build, leaves, seed=0):
    """Compare backprop and finite differences of ``sum(build() * R)``."""
    probe = np.random.default_rng([seed, 7919])
    out = build()
    weights = probe.standard_normal(out.shape)

    def scalar():
        return float(np.sum(build().data * weights))

    for t in leaves:
        t.grad = None
    ad.backward(ad.sum_reduce(ad.mul(build(), weights)))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]
    numeric = numeric_grad(scalar, [t.data for t in leaves])
    return relative_error(analytic, numeric)


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _neighbors(rng, n, k):
    return np.stack([rng.choice(np.delete(np.arange(n), v), size=k, replace=False) for v in range(n)])


def _bn(rng, d):
    bn = BatchNorm(d)
    bn.gamma.data[...] = rng.uniform(0.5, 1.5, d) * rng.choice([-1.0, 1.0], d)
    bn.beta.data[...] = rng.standard_normal(d) * 0.1
    bn.running_mean = rng.standard_normal(d) * 0.1
    bn.running_var = rng.uniform(0.5, 2.0, d)
    return bn


def op_cases(rng):
    """(name, build, leaves) for each differentiable primitive."""
    n, d, d2, k = 6, 4, 3, 3
    cases = []
    a, b = _leaf(rng, n, d), _leaf(rng, n, d)
    row = _leaf(rng, 1, d)
    cases.append(("add", lambda: ad.add(a, row), [a, row]))
    cases.append(("sub", lambda: ad.sub(a, b), [a, b]))
    cases.append(("mul", lambda: ad.mul(a, b), [a, b]))
    w, bias = _leaf(rng, d, d2), _leaf(rng, d2)
    cases.append(("matmul", lambda: ad.matmul(a, w), [a, w]))
    cases.append(("affine", lambda: ad.affine(a, w, bias), [a, w, bias]))
    idx = _neighbors(rng, n, k)
    we = _leaf(rng, 2 * d, d2)
    cases.append(("edge_affine", lambda: ad.edge_affine(a, idx, we, bias), [a, we, bias]))
    cases.append(("relu", lambda: ad.relu(a), [a]))
    cases.append(("reshape", lambda: ad.reshape(a, (d, n)), [a]))
    cases.append(("broadcast_to", lambda: ad.broadcast_to(row, (n, d)), [row]))
    c = _leaf(rng, n, d2)
    cases.append(("concat", lambda: ad.concat([a, c, b], axis=1), [a, c, b]))
    cases.append(("concat_features", lambda: ad.concat_features(a, c), [a, c]))
    cases.append(("gather_rows", lambda: ad.gather_rows(a, idx), [a]))
    cases.append(("sum_reduce", lambda: ad.sum_reduce(a, axis=0), [a]))
    cases.append(("max_reduce", lambda: ad.max_reduce(a, axis=0)[0], [a]))
    e3 = _leaf(rng, n, k, d)
    cases.append(("max_reduce_neighbors", lambda: ad.max_reduce_neighbors(e3)[0], [e3]))
    cases.append(("l2_normalize_rows", lambda: ad.l2_normalize_rows(a), [a]))
    bn = _bn(rng, d)
    cases.append(("batch_norm[train]", lambda: ad.batch_norm(a, bn, True), [a, bn.gamma, bn.beta]))
    cases.append(("batch_norm[eval]", lambda: ad.batch_norm(a, bn, False), [a, bn.gamma, bn.beta]))
    bn2 = _bn(rng, d2)
    cases.append(("mlp_unit", lambda: ad.mlp_unit(a, w, bias, bn2, "relu", True),
                  [a, w, bias, bn2.gamma, bn2.beta]))
    edges = _leaf(rng, n * k, d2)
    for mode in (True, False):
        tag = "train" if mode else "eval"
        cases.append((f"norm_act_max[{tag}]", lambda m=mode: ad.norm_act_max(edges, k, bn2, "relu", m),
                      [edges, bn2.gamma, bn2.beta]))
    drop_seed = int(rng.integers(1 << 30))
    cases.append(("dropout", lambda: ad.dropout(a, 0.3, True, np.random.default_rng(drop_seed)), [a]))
    labels = rng.integers(0, d, n)
    cases.append(("softmax_cross_entropy", lambda: ad.softmax_cross_entropy(a, labels), [a]))
    return cases


def layer_cases(rng, training=True):
    n, k = 10, 3
    cases = []
    for kind in AGGREGATORS:
        for depth in (1, 2):
            d_in, d_out = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            layer = GCNLayer(kind, d_in, d_out, rng, mlp_depth=depth)
            _randomize(layer, rng)
            h = _leaf(rng, n, d_in)
            idx = _neighbors(rng, n, k)
            leaves = [h] + list(layer.named_parameters("x").values())
            cases.append((f"{kind}[mlp_depth={depth}]", lambda l=layer, hh=h, i=idx: l(hh, i, training), leaves))
    return cases


def _randomize(layer, rng):
    """Non-trivial BN affine / running stats and GIN eps so every path carries signal."""
    for name, p in layer.named_parameters("x").items():
        if name.endswith(".eps"):
            p.data[...] = rng.uniform(-0.3, 0.3, p.shape)
    for bn in layer.batch_norms("x").values():
        fresh = _bn(rng, bn.num_features)
        bn.gamma.data[...] = fresh.gamma.data
        bn.beta.data[...] = fresh.beta.data
        bn.running_mean = fresh.running_mean
        bn.running_var = fresh.running_var


def check_gradients(seed=0, instances=3):
    t0 = time.perf_counter()
    res = CheckResult("gradients", 0.0, GRAD_TOL)
    for s in range(instances):
        rng = np.random.default_rng([seed, s])
        cases = op_cases(rng) + layer_cases(rng, True) + [
            (name.replace("]", ",eval]"), build, leaves) for name, build, leaves in layer_cases(rng, False)
        ]
        for name, build, leaves in cases:
            err = grad_check(build, leaves, seed=s)
            res.cases += 1
            res.max_error = max(res.max_error, err)
            if not err <= GRAD_TOL:
                res.offenders.append(f"{name}#{s}: rel error {err:.3e}")
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# exhaustive k-NN oracle


def brute_force_order(x, v):
    """All other vertices sorted by (squared distance, index), via a per-vertex sort."""
    n, dim = x.shape
    acc = np.zeros(n)
    for c in range(dim):
        t = x[:, c] - x[v, c]
        acc += t * t
    others = [j for j in range(n) if j != v]
    return sorted(others, key=lambda j: (acc[j], j))


def random_cloud(rng, n_range=(33, 200), dim_range=(1, 8)):
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    dim = int(rng.integers(dim_range[0], dim_range[1] + 1))
    if rng.random() < 0.3:
        # coarse integer grid: plenty of exact distance ties
        return rng.integers(0, 4, (n, dim)).astype(np.float64)
    return rng.standard_normal((n, dim))


def check_knn(seed=0, clouds=100, ks=(2, 4, 8), ds=(1, 2, 4)):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    res = CheckResult("knn", 0.0, 0.0)
    for c in range(clouds):
        x = random_cloud(rng)
        n = x.shape[0]
        orders = np.array([brute_force_order(x, v) for v in range(n)])
        for k in ks:
            plain = knn(x, k).indices
            if not np.array_equal(plain, orders[:, :k]):
                res.offenders.append(f"cloud {c}: knn k={k} differs from exhaustive sort")
            for d in ds:
                got = dilated_knn(x, k, DilationSpec(d=d)).indices
                want = orders[:, [r * d for r in range(k)]]
                res.cases += 1
                if not np.array_equal(got, want):
                    res.offenders.append(f"cloud {c}: dilated k={k} d={d} mismatch")
                if d == 1 and not np.array_equal(got, plain):
                    res.offenders.append(f"cloud {c}: d=1 dilated differs from knn (k={k})")
    res.max_error = float(len(res.offenders))
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# loop oracles for the aggregators


def _oracle_unit(unit, rows, training):
    """Apply one perceptron to a list of row vectors using explicit loops."""
    w, b = unit.w.data, unit.b.data
    pre = []
    for r in rows:
        out = np.empty(w.shape[1])
        for j in range(w.shape[1]):
            s = 0.0
            for i in range(w.shape[0]):
                s += r[i] * w[i, j]
            out[j] = s + b[j]
        pre.append(out)
    if unit.bn is not None:
        bn = unit.bn
        m = len(pre)
        if training:
            mean = sum(pre) / m
            var = sum((p - mean) ** 2 for p in pre) / m
        else:
            mean, var = bn.running_mean, bn.running_var
        pre = [(p - mean) / np.sqrt(var + bn.eps) * bn.gamma.data + bn.beta.data for p in pre]
    if unit.activation == "relu":
        pre = [np.maximum(p, 0.0) for p in pre]
    return pre


def _oracle_mlp(units, rows, training):
    for u in units:
        rows = _oracle_unit(u, rows, training)
    return rows


def layer_oracle(layer, h, idx, training):
    """Naive per-vertex evaluation of ``layer`` on features ``h`` and neighbor table ``idx``."""
    n, k = idx.shape
    kind = layer.kind
    if kind == "edgeconv":
        msgs = [np.concatenate([h[v], h[u] - h[v]]) for v in range(n) for u in idx[v]]
        msgs = _oracle_mlp(layer.units, msgs, training)
        out = []
        for v in range(n):
            best = msgs[v * k].copy()
            for j in range(1, k):
                best = np.maximum(best, msgs[v * k + j])
            out.append(best)
        return np.array(out)
    if kind == "mrgcn":
        rows = []
        for v in range(n):
            m = h[idx[v][0]] - h[v]
            for u in idx[v][1:]:
                m = np.maximum(m, h[u] - h[v])
            rows.append(np.concatenate([h[v], m]))
        return np.array(_oracle_mlp(layer.units, rows, training))
    if kind.startswith("graphsage"):
        inner = _oracle_mlp(layer.inner, [h[v] for v in range(n)], training)
        rows = []
        for v in range(n):
            a = inner[idx[v][0]]
            for u in idx[v][1:]:
                a = np.maximum(a, inner[u])
            rows.append(np.concatenate([h[v], a]))
        out = _oracle_mlp(layer.units, rows, training)
        if kind == "graphsage-normalized":
            normed = []
            for y in out:
                norm = np.sqrt(sum(t * t for t in y))
                normed.append(y / norm if norm >= 1e-12 else y)
            out = normed
        return np.array(out)
    if kind == "gin":
        eps = layer.eps.data[0]
        rows = []
        for v in range(n):
            s = np.zeros(h.shape[1])
            for u in idx[v]:
                s = s + h[u]
            rows.append((1.0 + eps) * h[v] + s)
        return np.array(_oracle_mlp(layer.units, rows, training))
    raise ValueError(kind)


def check_layers(seed=0, instances=20):
    t0 = time.perf_counter()
    res = CheckResult("layers", 0.0, LAYER_TOL)
    for s in range(instances):
        rng = np.random.default_rng([seed, s])
        n = int(rng.integers(6, 17))
        k = int(rng.integers(1, min(6, n - 1) + 1))
        for kind in AGGREGATORS:
            for depth in (1, 2):
                for training in (True, False):
                    d_in, d_out = int(rng.integers(1, 9)), int(rng.integers(1, 9))
                    layer = GCNLayer(kind, d_in, d_out, rng, mlp_depth=depth)
                    _randomize(layer, rng)
                    h = rng.standard_normal((n, d_in))
                    idx = _neighbors(rng, n, k)
                    got = layer(Tensor(h), idx, training).data
                    want = layer_oracle(layer, h, idx, training)
                    err = float(np.abs(got - want).max())
                    res.cases += 1
                    res.max_error = max(res.max_error, err)
                    if not err <= LAYER_TOL:
                        mode = "train" if training else "eval"
                        res.offenders.append(f"{kind}[mlp_depth={depth},{mode}]#{s}: abs error {err:.3e}")
    res.seconds = time.perf_counter() - t0
    return res


CHECKS = {"gradients": check_gradients, "knn": check_knn, "layers": check_layers}


def run_check(name, seed=0):
    if name not in CHECKS:
        raise KeyError(f"unknown check {name!r}; choose from {sorted(CHECKS)}")
    return CHECKS[name](seed=seed)
