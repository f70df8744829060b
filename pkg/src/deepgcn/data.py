"""Synthetic labeled blocks and the plain-text point / manifest formats."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, PointFileError
from .graph import PointCloud

POINT_MAGIC = "PCSEG"
MANIFEST_MAGIC = "PCDS"

# Each primitive is sampled in a local frame centred on the origin; the
# orientation is what makes classes separable from local geometry.
PRIMITIVES = ("floor", "wall", "column", "blob", "wall_yz", "beam_x", "beam_y", "haze")
_HALF = 0.13
_THIN = 0.012


def _sample_primitive(kind, n, rng):
    u = lambda: rng.uniform(-_HALF, _HALF, n)  # noqa: E731
    t = lambda: rng.uniform(-_THIN, _THIN, n)  # noqa: E731
    z0 = np.zeros(n)
    if kind == "floor":
        pts = (u(), u(), z0)
    elif kind == "wall":
        pts = (u(), z0, u())
    elif kind == "wall_yz":
        pts = (z0, u(), u())
    elif kind == "column":
        pts = (t(), t(), u())
    elif kind == "beam_x":
        pts = (u(), t(), t())
    elif kind == "beam_y":
        pts = (t(), u(), t())
    elif kind == "blob":
        return rng.normal(0.0, 0.025, (n, 3))
    elif kind == "haze":
        return rng.normal(0.0, 0.06, (n, 3))
    else:
        raise ContractError(f"unknown primitive {kind!r}")
    return np.stack(pts, axis=1)


@dataclass
class SynthSpec:
    num_blocks: int = 8
    points_per_block: int = 512
    num_classes: int = 4
    shape_mix: tuple | None = None
    noise_sigma: float = 0.004
    seed: int = 0
    primitives: tuple | None = None
    instances: int = 2

    def __post_init__(self):
        if self.num_blocks < 1 or self.points_per_block < 1 or self.num_classes < 1:
            raise ContractError("num_blocks, points_per_block and num_classes must be positive")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be non-negative")
        if self.shape_mix is None:
            self.shape_mix = tuple([1.0 / self.num_classes] * self.num_classes)
        self.shape_mix = tuple(float(p) for p in self.shape_mix)
        if len(self.shape_mix) != self.num_classes:
            raise ContractError(f"shape_mix has {len(self.shape_mix)} entries for {self.num_classes} classes")
        if min(self.shape_mix) < 0 or abs(sum(self.shape_mix) - 1.0) > 1e-9:
            raise ContractError("shape_mix proportions must be non-negative and sum to 1")
        if self.primitives is None:
            if self.num_classes > len(PRIMITIVES):
                raise ContractError(
                    f"only {len(PRIMITIVES)} built-in primitives; pass primitives= for {self.num_classes} classes"
                )
            self.primitives = PRIMITIVES[: self.num_classes]
        self.primitives = tuple(self.primitives)
        if len(self.primitives) != self.num_classes:
            raise ContractError("need exactly one primitive per class")
        for p in self.primitives:
            if p not in PRIMITIVES:
                raise ContractError(f"unknown primitive {p!r}; choose from {PRIMITIVES}")
        if self.instances < 1:
            raise ContractError("instances must be >= 1")
        if self.num_classes * self.instances > 27:
            raise ContractError("at most 27 structures fit in one block")

    def class_counts(self):
        """Points per class in one block (largest-remainder rounding)."""
        raw = np.array(self.shape_mix) * self.points_per_block
        counts = np.floor(raw).astype(int)
        short = self.points_per_block - counts.sum()
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
        return counts


@dataclass
class Dataset:
    blocks: list
    num_classes: int
    split: str = "train"
    paths: list = field(default_factory=list)

    def __post_init__(self):
        if not self.blocks:
            raise ContractError("a dataset needs at least one block")
        sizes = {b.num_points for b in self.blocks}
        if len(sizes) != 1:
            raise ContractError(f"blocks must share one point count, got {sorted(sizes)}")
        for b in self.blocks:
            if b.labels.max() >= self.num_classes:
                raise ContractError(f"label {b.labels.max()} >= num_classes {self.num_classes}")

    def __len__(self):
        return len(self.blocks)

    @property
    def points_per_block(self):
        return self.blocks[0].num_points


def synth_block(spec, rng):
    counts = spec.class_counts()
    m = spec.instances
    # m structures per class, each in its own cell of a 3x3x3 grid
    cells = rng.choice(27, size=spec.num_classes * m, replace=False)
    coords, labels = [], []
    jobs = []
    for cls, total in enumerate(counts):
        share = np.full(m, total // m) + (np.arange(m) < total % m)
        jobs.extend((cls, int(c)) for c in share)
    for cell, (cls, cnt) in zip(cells, jobs):
        if cnt == 0:
            continue
        centre = (np.array(np.unravel_index(cell, (3, 3, 3))) + 0.5) / 3.0
        centre = centre + rng.uniform(-0.01, 0.01, 3)
        pts = _sample_primitive(spec.primitives[cls], cnt, rng) + centre
        if spec.noise_sigma > 0:
            pts = pts + rng.normal(0.0, spec.noise_sigma, pts.shape)
        coords.append(pts)
        labels.append(np.full(cnt, cls))
    coords = np.concatenate(coords)
    labels = np.concatenate(labels)
    perm = rng.permutation(len(labels))
    return PointCloud(coords[perm], None, labels[perm])


def synth_dataset(spec, split="train"):
    """Deterministic synthetic dataset; the split tag selects an independent stream."""
    stream = {"train": 0, "test": 1}.get(split)
    if stream is None:
        raise ContractError(f"split must be 'train' or 'test', got {split!r}")
    rng = np.random.default_rng([spec.seed, stream])
    blocks = [synth_block(spec, rng) for _ in range(spec.num_blocks)]
    return Dataset(blocks, spec.num_classes, split)


# ---------------------------------------------------------------------------
# file formats


def save_point_file(cloud, path, num_classes):
    n, c = cloud.num_points, cloud.aux_dim
    if cloud.labels.size and cloud.labels.max() >= num_classes:
        raise ContractError(f"label {cloud.labels.max()} >= declared class count {num_classes}")
    rows = np.concatenate([cloud.coords, cloud.aux], axis=1)
    with open(path, "w") as fh:
        fh.write(f"{POINT_MAGIC} v1 {n} {c} {num_classes}\n")
        for vals, lab in zip(rows, cloud.labels):
            fh.write(" ".join(format(v, ".17g") for v in vals) + f" {int(lab)}\n")


def load_point_file(path):
    """Parse a ``PCSEG v1 N C L`` block. Returns (cloud, num_classes)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise PointFileError("empty file", path, 1)
    head = lines[0].split()
    if len(head) != 5 or head[0] != POINT_MAGIC or head[1] != "v1":
        raise PointFileError(f"expected header '{POINT_MAGIC} v1 N C L', got {lines[0]!r}", path, 1)
    try:
        n, c, num_classes = (int(v) for v in head[2:])
    except ValueError:
        raise PointFileError("header counts must be integers", path, 1) from None
    if n < 1 or c < 0 or num_classes < 1:
        raise PointFileError("header needs N >= 1, C >= 0, L >= 1", path, 1)
    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != n:
        raise PointFileError(f"header declares {n} points, found {len(body)} rows", path, len(body) + 2)
    feats = np.empty((n, 3 + c))
    labels = np.empty(n, dtype=np.int64)
    for i, line in enumerate(body):
        lineno = i + 2
        parts = line.split()
        if len(parts) != 4 + c:
            raise PointFileError(f"expected {4 + c} fields (x y z, {c} features, label), got {len(parts)}", path, lineno)
        try:
            feats[i] = [float(v) for v in parts[:-1]]
            labels[i] = int(parts[-1])
        except ValueError as exc:
            raise PointFileError(str(exc), path, lineno) from None
        if not np.isfinite(feats[i]).all():
            raise PointFileError("non-finite value", path, lineno)
        if not 0 <= labels[i] < num_classes:
            raise PointFileError(f"label {labels[i]} outside [0, {num_classes})", path, lineno)
    return PointCloud(feats[:, :3], feats[:, 3:], labels), num_classes


def save_dataset(dataset, out_dir, stem=None):
    """Write one block file per cloud plus a manifest; returns the manifest path."""
    stem = stem or dataset.split
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, block in enumerate(dataset.blocks):
        name = f"{stem}_block_{i:04d}.pts"
        save_point_file(block, os.path.join(out_dir, name), dataset.num_classes)
        names.append(name)
    manifest = os.path.join(out_dir, f"{stem}.pcds")
    with open(manifest, "w") as fh:
        fh.write(f"{MANIFEST_MAGIC} v1 {dataset.num_classes} {dataset.split}\n")
        fh.write("\n".join(names) + "\n")
    return manifest


def load_dataset(manifest):
    """Read a manifest; block paths are relative to the manifest's directory."""
    with open(manifest) as fh:
        lines = [ln.strip() for ln in fh.read().splitlines()]
    if not lines:
        raise PointFileError("empty manifest", manifest, 1)
    head = lines[0].split()
    if len(head) != 4 or head[0] != MANIFEST_MAGIC or head[1] != "v1":
        raise PointFileError(f"expected header '{MANIFEST_MAGIC} v1 num-classes split'", manifest, 1)
    try:
        num_classes = int(head[2])
    except ValueError:
        raise PointFileError("num-classes must be an integer", manifest, 1) from None
    split = head[3]
    base = os.path.dirname(os.path.abspath(manifest))
    blocks, paths = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line or line.startswith("#"):
            continue
        path = line if os.path.isabs(line) else os.path.join(base, line)
        cloud, declared = load_point_file(path)
        if declared != num_classes:
            raise PointFileError(f"block declares {declared} classes, manifest {num_classes}", manifest, lineno)
        blocks.append(cloud)
        paths.append(path)
    if not blocks:
        raise PointFileError("manifest lists no blocks", manifest)
    try:
        return Dataset(blocks, num_classes, split, paths)
    except ContractError as exc:
        raise PointFileError(str(exc), manifest) from None
