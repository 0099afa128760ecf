"""Synthetic biased datasets, group bookkeeping and batch samplers.

Every generator follows the same bias rule: the target ``y`` is uniform, and
the bias label is ``y mod B`` with probability ``rho``, otherwise uniform over
the remaining ``B - 1`` bias values. Validation and test splits are
group-balanced (equal count in every (y, b) cell).
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CoverageError, DataError, DataFormatError

KINDS = ("blobs", "colored_glyphs", "idx_color")
BUNDLE_MAGIC = b"MDNB1"


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    n_classes: int = 2
    n_bias: int = 2
    rho: float = 0.99
    n_train: int = 2000
    n_test: int = 1000
    n_val: int | None = None
    noise: float = 1.0
    seed: int = 0
    dim: int = 8
    bias_strength: float = 1.0
    idx_images: str | None = None
    idx_labels: str | None = None

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        C, B = self.n_classes, self.n_bias
        if C < 2 or B < 2:
            raise ConfigError("need at least 2 target and 2 bias classes")
        if not (1.0 / B < self.rho <= 1.0):
            raise ConfigError(f"rho={self.rho} outside (1/B, 1] = ({1.0 / B:.4g}, 1]")
        n_val = self.n_test if self.n_val is None else self.n_val
        for name, n in (("n_train", self.n_train), ("n_test", self.n_test), ("n_val", n_val)):
            if n < C * B:
                raise ConfigError(f"{name}={n} smaller than the {C * B} groups")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.kind == "idx_color" and not (self.idx_images and self.idx_labels):
            raise ConfigError("idx_color needs idx_images and idx_labels paths")
        return self


@dataclass
class LabeledBatch:
    X: np.ndarray
    y: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.b = np.asarray(self.b, dtype=np.int64)
        n = self.X.shape[0]
        if self.y.shape != (n,) or self.b.shape != (n,):
            raise DataError(f"label vectors must have length {n}")

    def __len__(self):
        return self.X.shape[0]

    def take(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.X[idx], self.y[idx], self.b[idx])


@dataclass
class GroupTable:
    counts: np.ndarray
    aligned: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        # ties all count as aligned
        self.aligned = self.counts == self.counts.max(axis=1, keepdims=True)

    @property
    def conflicting(self) -> np.ndarray:
        return ~self.aligned

    @property
    def shape(self):
        return self.counts.shape


@dataclass
class DataBundle:
    train: LabeledBatch
    val: LabeledBatch
    test: LabeledBatch
    n_classes: int
    n_bias: int
    groups: GroupTable = field(init=False)

    def __post_init__(self):
        self.groups = build_group_table(self.train, self.n_classes, self.n_bias)
        self._cells = _cell_index(self.train, self.n_classes, self.n_bias)

    def cell_indices(self, y: int, b: int) -> np.ndarray:
        return self._cells[y][b]

    def realized_rho(self) -> float:
        t = self.train
        return float(np.mean(t.b == t.y % self.n_bias))


def _cell_index(batch, C, B):
    order = np.argsort(batch.y * B + batch.b, kind="stable")
    cells = [[None] * B for _ in range(C)]
    keys = (batch.y * B + batch.b)[order]
    for y in range(C):
        for b in range(B):
            k = y * B + b
            lo, hi = np.searchsorted(keys, [k, k + 1])
            cells[y][b] = order[lo:hi]
    return cells


def build_group_table(train: LabeledBatch, n_classes: int, n_bias: int) -> GroupTable:
    if len(train) == 0:
        raise DataError("empty training split")
    counts = np.zeros((n_classes, n_bias), dtype=np.int64)
    np.add.at(counts, (train.y, train.b), 1)
    missing = np.flatnonzero(counts.sum(axis=1) == 0)
    if missing.size:
        raise CoverageError(f"classes {missing.tolist()} absent from the training split")
    return GroupTable(counts)


# ---------------------------------------------------------------- labels

def draw_biased_labels(rng, n, C, B, rho):
    y = rng.integers(0, C, size=n)
    aligned_b = y % B
    keep = rng.random(n) < rho
    # uniform over the B-1 other bias values
    other = (aligned_b + rng.integers(1, B, size=n)) % B
    b = np.where(keep, aligned_b, other)
    return y, b


def balanced_labels(n, C, B):
    per = n // (C * B)
    if per < 1:
        raise ConfigError(f"split of size {n} cannot hold {C * B} balanced groups")
    y = np.repeat(np.arange(C), B * per)
    b = np.tile(np.repeat(np.arange(B), per), C)
    return y, b


def _split_labels(cfg, rng):
    C, B = cfg.n_classes, cfg.n_bias
    n_val = cfg.n_test if cfg.n_val is None else cfg.n_val
    return {
        "train": draw_biased_labels(rng, cfg.n_train, C, B, cfg.rho),
        "val": balanced_labels(n_val, C, B),
        "test": balanced_labels(cfg.n_test, C, B),
    }


# ---------------------------------------------------------------- blobs

def gen_biased_blobs(cfg: DatasetConfig) -> DataBundle:
    """Two concatenated Gaussian blocks: one keyed on the target, one on the bias.

    The bias block is a cleaner signal (its noise is divided by
    ``bias_strength``), so it acts as the shortcut.
    """
    cfg.validate()
    if cfg.kind != "blobs":
        raise ConfigError(f"gen_biased_blobs called with kind={cfg.kind!r}")
    C, B, dim = cfg.n_classes, cfg.n_bias, cfg.dim
    center_rng = np.random.default_rng([cfg.seed, 0])
    t_centers = center_rng.normal(size=(C, dim))
    b_centers = center_rng.normal(size=(B, dim))
    rng = np.random.default_rng([cfg.seed, 1])
    splits = {}
    for name, (y, b) in _split_labels(cfg, rng).items():
        X = np.hstack([
            t_centers[y] + cfg.noise * rng.normal(size=(len(y), dim)),
            b_centers[b] + cfg.noise / cfg.bias_strength * rng.normal(size=(len(y), dim)),
        ])
        splits[name] = LabeledBatch(X, y, b)
    return DataBundle(splits["train"], splits["val"], splits["test"], C, B)


# ---------------------------------------------------------------- glyphs

GLYPH_SIZE = 8


def glyph_stencils(n_classes: int, size: int = GLYPH_SIZE) -> np.ndarray:
    """Fixed binary stencils, one per class; independent of any dataset seed.

    Each stencil is a union of random strokes (rows, columns, diagonals)
    drawn from a fixed stream, regenerated until all stencils are distinct.
    """
    rng = np.random.default_rng(20240817)
    stencils = []
    while len(stencils) < n_classes:
        s = np.zeros((size, size), dtype=bool)
        for _ in range(3):
            kind = rng.integers(0, 4)
            i = rng.integers(1, size - 1)
            lo, hi = sorted(rng.choice(np.arange(size), size=2, replace=False))
            hi = max(hi, lo + 3)
            if kind == 0:
                s[i, lo:hi] = True
            elif kind == 1:
                s[lo:hi, i] = True
            elif kind == 2:
                r = np.arange(lo, min(hi, size))
                s[r, r] = True
            else:
                r = np.arange(lo, min(hi, size))
                s[r, size - 1 - r] = True
        if s.sum() >= 6 and not any((s == t).all() for t in stencils):
            stencils.append(s)
    return np.array(stencils)


def palette(n_bias: int) -> np.ndarray:
    """Evenly spaced hues as RGB in [0, 1]; fixed per bias class."""
    hues = np.arange(n_bias) / n_bias
    k = (np.array([5.0, 3.0, 1.0])[None, :] + hues[:, None] * 6) % 6
    return 1 - np.clip(np.minimum(k, 4 - k), 0, 1)


def render_colored(shapes: np.ndarray, b: np.ndarray, colors: np.ndarray,
                   noise: float, rng, fg: float = 1.0) -> np.ndarray:
    """Foreground intensity on a bias-colored background, flattened to RGB vectors.

    ``shapes`` holds per-sample intensities in [0, 1] of shape (n, h, w).
    """
    ink = shapes[..., None] * fg
    bg = colors[b][:, None, None, :]
    img = ink + (1 - shapes[..., None]) * bg
    img = img + noise * rng.normal(size=img.shape)
    return img.reshape(len(b), -1)


def gen_colored_glyphs(cfg: DatasetConfig) -> DataBundle:
    cfg.validate()
    if cfg.kind != "colored_glyphs":
        raise ConfigError(f"gen_colored_glyphs called with kind={cfg.kind!r}")
    C, B = cfg.n_classes, cfg.n_bias
    stencils = glyph_stencils(C).astype(np.float64)
    colors = palette(B) * cfg.bias_strength
    rng = np.random.default_rng([cfg.seed, 1])
    splits = {}
    for name, (y, b) in _split_labels(cfg, rng).items():
        splits[name] = LabeledBatch(render_colored(stencils[y], b, colors, cfg.noise, rng), y, b)
    return DataBundle(splits["train"], splits["val"], splits["test"], C, B)


# ---------------------------------------------------------------- IDX

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _open_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file (big-endian header, unsigned-byte payload)."""
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if expect_magic is not None and magic != expect_magic:
        raise DataFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    if magic >> 8 != 0x08:
        raise DataFormatError(f"{path}: unsupported IDX type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    size = int(np.prod(dims))
    if len(raw) < head + size:
        raise DataFormatError(
            f"{path}: payload truncated at offset {len(raw)}, expected {head + size} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        fh.write(array.tobytes())


def load_idx_with_color(cfg: DatasetConfig) -> DataBundle:
    """Grey digit images tinted with a bias-colored background.

    Splits are drawn without replacement from the IDX pool, restricted to the
    first ``n_classes`` digit labels.
    """
    cfg.validate()
    images = read_idx(cfg.idx_images, IDX_IMAGES_MAGIC)
    labels = read_idx(cfg.idx_labels, IDX_LABELS_MAGIC)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise DataFormatError("IDX image/label files disagree in shape")
    C, B = cfg.n_classes, cfg.n_bias
    keep = np.flatnonzero(labels < C)
    images = images[keep].astype(np.float64) / 255.0
    labels = labels[keep].astype(np.int64)
    colors = palette(B) * cfg.bias_strength
    rng = np.random.default_rng([cfg.seed, 1])
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(C)]
    used = [0] * C
    splits = {}
    for name, (y, b) in _split_labels(cfg, rng).items():
        idx = np.empty(len(y), dtype=np.int64)
        for c in range(C):
            pos = np.flatnonzero(y == c)
            if used[c] + pos.size > pools[c].size:
                raise DataError(f"not enough images of class {c} for the requested split sizes")
            idx[pos] = pools[c][used[c]:used[c] + pos.size]
            used[c] += pos.size
        X = render_colored(images[idx], b, colors, cfg.noise, rng)
        splits[name] = LabeledBatch(X, y, b)
    return DataBundle(splits["train"], splits["val"], splits["test"], C, B)


GENERATORS = {
    "blobs": gen_biased_blobs,
    "colored_glyphs": gen_colored_glyphs,
    "idx_color": load_idx_with_color,
}


def make_bundle(cfg: DatasetConfig) -> DataBundle:
    cfg.validate()
    return GENERATORS[cfg.kind](cfg)


# ---------------------------------------------------------------- samplers

def sample_train_batch(bundle: DataBundle, n: int, rng) -> LabeledBatch:
    return bundle.train.take(rng.integers(0, len(bundle.train), size=n))


def nonempty_cells(bundle: DataBundle):
    C, B = bundle.n_classes, bundle.n_bias
    return [(y, b) for y in range(C) for b in range(B) if bundle.cell_indices(y, b).size]


def sample_balanced_batch(bundle: DataBundle, n: int, rng) -> LabeledBatch:
    """Each draw picks a non-empty (y, b) cell uniformly, then a member uniformly."""
    cells = nonempty_cells(bundle)
    pick = rng.integers(0, len(cells), size=n)
    within = rng.random(n)
    idx = np.empty(n, dtype=np.int64)
    for k, (y, b) in enumerate(cells):
        sel = pick == k
        members = bundle.cell_indices(y, b)
        idx[sel] = members[(within[sel] * members.size).astype(np.int64)]
    return bundle.train.take(idx)


def check_meta_coverage(bundle: DataBundle):
    """Raise unless every class with conflicting cells has a non-empty one."""
    g = bundle.groups
    for y in range(bundle.n_classes):
        if g.aligned[y].all():
            continue
        if not (g.counts[y] * g.conflicting[y]).any():
            raise CoverageError(
                f"class {y} has no bias-conflicting training samples; "
                "a balanced meta batch cannot be formed")


def sample_meta_batch(bundle: DataBundle, per_group: int, rng) -> LabeledBatch:
    """Exactly ``per_group`` draws (with replacement) from every non-empty train cell."""
    if per_group < 1:
        raise ConfigError("per_group must be >= 1")
    parts = []
    for y, b in nonempty_cells(bundle):
        members = bundle.cell_indices(y, b)
        parts.append(members[rng.integers(0, members.size, size=per_group)])
    return bundle.train.take(np.concatenate(parts))


# ---------------------------------------------------------------- persistence

_SPLITS = ("train", "val", "test")


def save_bundle(bundle: DataBundle, path):
    """Write the little-endian "MDNB1" format.

    Layout: magic, uint32 C, uint32 B, then per split (train, val, test):
    uint32 n, uint32 d, float64 X[n*d], int32 y[n], int32 b[n].
    """
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<II", bundle.n_classes, bundle.n_bias))
        for name in _SPLITS:
            s = getattr(bundle, name)
            fh.write(struct.pack("<II", *s.X.shape))
            fh.write(s.X.astype("<f8").tobytes())
            fh.write(s.y.astype("<i4").tobytes())
            fh.write(s.b.astype("<i4").tobytes())


def load_bundle(path) -> DataBundle:
    raw = _open_bytes(path)
    if raw[:5] != BUNDLE_MAGIC:
        raise DataFormatError(f"{path}: not an MDNB1 bundle")
    off = 5

    def take(nbytes):
        nonlocal off
        if off + nbytes > len(raw):
            raise DataFormatError(f"{path}: truncated at offset {off}")
        chunk = raw[off:off + nbytes]
        off += nbytes
        return chunk

    C, B = struct.unpack("<II", take(8))
    splits = {}
    for name in _SPLITS:
        n, d = struct.unpack("<II", take(8))
        X = np.frombuffer(take(8 * n * d), dtype="<f8").reshape(n, d)
        y = np.frombuffer(take(4 * n), dtype="<i4")
        b = np.frombuffer(take(4 * n), dtype="<i4")
        if n and (y.min() < 0 or y.max() >= C or b.min() < 0 or b.max() >= B):
            raise DataFormatError(f"{path}: {name} labels out of range")
        splits[name] = LabeledBatch(X.astype(np.float64), y, b)
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return DataBundle(splits["train"], splits["val"], splits["test"], C, B)


def summarize(bundle: DataBundle, rho: float | None = None) -> str:
    g = bundle.groups
    lines = [f"classes={bundle.n_classes} bias_classes={bundle.n_bias} "
             f"train={len(bundle.train)} val={len(bundle.val)} test={len(bundle.test)} "
             f"dim={bundle.train.X.shape[1]}"]
    lines.append("train group counts (rows = target, cols = bias, * = aligned):")
    for y in range(bundle.n_classes):
        cells = [f"{c}{'*' if a else ''}" for c, a in zip(g.counts[y], g.aligned[y])]
        lines.append("  y=%d: %s" % (y, " ".join(f"{c:>8}" for c in cells)))
    r = bundle.realized_rho()
    line = f"realized P(b = y mod B) = {r:.5f}"
    if rho is not None:
        n = len(bundle.train)
        sigma = np.sqrt(rho * (1 - rho) / n)
        line += f" (target {rho}, binomial sigma {sigma:.5f})"
    lines.append(line)
    return "\n".join(lines)
