"""Dynamic edge construction: exact, dilated and stochastic dilated k-NN.

All searches are brute force over the full squared-distance matrix. A vertex
is never its own neighbor, and equal distances are ordered by ascending
vertex index so every result is deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .autodiff import Tensor
from .errors import ContractError, InsufficientPointsError, InvalidHyperparameterError


@dataclass
class PointCloud:
    coords: np.ndarray
    aux: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ContractError(f"coords must be (N, 3), got {self.coords.shape}")
        n = self.coords.shape[0]
        if n < 1:
            raise ContractError("a point cloud needs at least one point")
        aux = np.asarray(self.aux if self.aux is not None else np.zeros((n, 0)), dtype=np.float64)
        if aux.ndim == 1 and aux.size == 0:
            aux = aux.reshape(n, 0)
        if aux.ndim != 2 or aux.shape[0] != n:
            raise ContractError(f"aux must be (N, C) with N={n}, got {aux.shape}")
        self.aux = aux
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (n,):
            raise ContractError(f"labels must have length {n}, got {self.labels.shape}")
        if not np.isfinite(self.coords).all():
            raise ContractError("coords contain non-finite values")
        if self.labels.size and self.labels.min() < 0:
            raise ContractError("labels must be non-negative")

    @property
    def num_points(self):
        return self.coords.shape[0]

    @property
    def aux_dim(self):
        return self.aux.shape[1]

    def features(self):
        """Input vertex features: coordinates followed by auxiliary channels."""
        return np.concatenate([self.coords, self.aux], axis=1)

    def permuted(self, perm):
        perm = np.asarray(perm)
        return PointCloud(self.coords[perm], self.aux[perm], self.labels[perm])


@dataclass
class NeighborList:
    """``indices[v]`` are the k neighbors of vertex v (directed edges v -> u)."""

    indices: np.ndarray
    sampled: np.ndarray | None = None

    @property
    def k(self):
        return self.indices.shape[1]

    @property
    def num_vertices(self):
        return self.indices.shape[0]

    def validate(self, n=None):
        idx = self.indices
        n = idx.shape[0] if n is None else n
        if idx.ndim != 2 or idx.shape[0] != n or idx.shape[1] < 1:
            raise ContractError(f"neighbor indices must be ({n}, k>=1), got {idx.shape}")
        if idx.min() < 0 or idx.max() >= n:
            raise ContractError("neighbor index out of range")
        if (idx == np.arange(n)[:, None]).any():
            raise ContractError("neighbor list contains a self-loop")
        return self


@dataclass(frozen=True)
class DilationSpec:
    d: int = 1
    epsilon: float = 0.0
    training: bool = False

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise InvalidHyperparameterError(f"dilation rate must be a positive integer, got {self.d}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise InvalidHyperparameterError(f"epsilon must lie in [0, 1], got {self.epsilon}")


def _as_array(features):
    x = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"features must be (N, D), got {x.shape}")
    if x.shape[0] < 1:
        raise ContractError("features need at least one row")
    if not np.isfinite(x).all():
        raise ContractError("features contain non-finite values")
    return x


@numba.njit(cache=True)
def _sq_dist_kernel(xt, out):
    # xt is (D, N); the inner loop runs over j so it vectorises, while each
    # entry still accumulates its channels in ascending order
    dim, n = xt.shape
    for i in range(n):
        row = out[i]
        for j in range(n):
            row[j] = 0.0
        for c in range(dim):
            xc = xt[c]
            xi = xc[i]
            for j in range(n):
                t = xc[j] - xi
                row[j] += t * t
    return out


def pairwise_sq_dist(features):
    """(N, N) matrix of squared L2 distances.

    Each entry accumulates ``(x_i[c] - x_j[c])**2`` in ascending channel order,
    so it equals a scalar per-pair loop bit for bit (no Gram-matrix shortcut).
    """
    x = _as_array(features)
    n = x.shape[0]
    return _sq_dist_kernel(np.ascontiguousarray(x.T), np.empty((n, n)))


def _check_k(n, k):
    if int(k) != k or k < 1:
        raise InvalidHyperparameterError(f"k must be a positive integer, got {k}")
    if k > n - 1:
        raise InsufficientPointsError(f"k={k} neighbors requested but the cloud has only {n} points")


def sorted_candidates(features, m):
    """First ``m`` nearest other vertices per row, by (distance, index)."""
    x = _as_array(features)
    n = x.shape[0]
    _check_k(n, m)
    dist = pairwise_sq_dist(x)
    np.fill_diagonal(dist, np.inf)
    if m == n - 1:
        return np.argsort(dist, axis=1, kind="stable")[:, :m]
    # m smallest per row, then order them by (distance, index): sorting the
    # indices first makes the stable distance sort break ties by index
    part = np.sort(np.argpartition(dist, m - 1, axis=1)[:, :m], axis=1)
    pd = np.take_along_axis(dist, part, axis=1)
    order = np.argsort(pd, axis=1)
    # the unstable sort is only wrong where equal distances meet
    sd = np.take_along_axis(pd, order, axis=1)
    tied = (sd[:, 1:] == sd[:, :-1]).any(axis=1)
    if tied.any():
        order[tied] = np.argsort(pd[tied], axis=1, kind="stable")
    cand = np.take_along_axis(part, order, axis=1)
    # rows where an equal-distance tie straddles the cut need the full stable sort
    cut = pd.max(axis=1)
    straddle = (dist <= cut[:, None]).sum(axis=1) > m
    if straddle.any():
        rows = np.flatnonzero(straddle)
        cand[rows] = np.argsort(dist[rows], axis=1, kind="stable")[:, :m]
    return cand


def knn(features, k):
    """Exact k nearest neighbors (self excluded), ascending distance."""
    return NeighborList(sorted_candidates(features, k))


def effective_dilation(n, k, d):
    """Shrink ``d`` so that k*d candidates exist among the other n-1 points."""
    if k * d <= n - 1:
        return d
    return max(1, (n - 1) // k)


def dilated_knn(features, k, spec=DilationSpec()):
    """Every d-th of the k*d nearest neighbors: ranks 0, d, ..., (k-1)d."""
    x = _as_array(features)
    n = x.shape[0]
    _check_k(n, k)
    d = effective_dilation(n, k, spec.d)
    cand = sorted_candidates(x, k * d)
    return NeighborList(np.ascontiguousarray(cand[:, ::d][:, :k]))


def stochastic_dilated_knn(features, k, spec, rng):
    """Dilated k-NN where, in training, each vertex independently takes a
    uniform k-subset of its k*d candidates with probability ``spec.epsilon``.

    ``sampled`` on the result marks the vertices that took the random branch.
    """
    x = _as_array(features)
    n = x.shape[0]
    _check_k(n, k)
    d = effective_dilation(n, k, spec.d)
    cand = sorted_candidates(x, k * d)
    chosen = np.ascontiguousarray(cand[:, ::d][:, :k])
    sampled = np.zeros(n, dtype=bool)
    if spec.training and spec.epsilon > 0.0:
        sampled = rng.random(n) < spec.epsilon
        rows = np.flatnonzero(sampled)
        if rows.size:
            # k smallest of kd uniform keys: a uniform k-subset without replacement
            keys = rng.random((rows.size, k * d))
            ranks = np.sort(np.argpartition(keys, k - 1, axis=1)[:, :k], axis=1)
            chosen[rows] = np.take_along_axis(cand[rows], ranks, axis=1)
    return NeighborList(chosen, sampled=sampled)


def build_input_graph(cloud, k, spec=DilationSpec(), rng=None):
    """Dilated k-NN over the cloud's 3-D coordinates only (a PointCloud or an (N, 3) array)."""
    coords = cloud.coords if isinstance(cloud, PointCloud) else cloud
    if rng is None or not spec.training or spec.epsilon == 0.0:
        return dilated_knn(coords, k, spec)
    return stochastic_dilated_knn(coords, k, spec, rng)
