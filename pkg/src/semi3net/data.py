"""Synthetic image/sketch/edgemap triples, their on-disk layout, and pair sampling.

Category ``k`` is a polygon with ``k + 3`` vertices and a category-specific
fill colour, radius, aspect ratio and orientation. Images are filled polygons on a noisy
background; sketches are dark jittered outlines on white; edgemaps are the
gradient magnitude of the image.
"""

from __future__ import annotations

import colorsys
import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MANIFEST = "manifest.csv"
MANIFEST_HEADER = ("id", "category", "split", "image", "sketch", "edgemap")

# Subtracted from every pixel at the network input, so the [0, 1] data
# reaches the first convolution roughly zero-centred.
INPUT_OFFSET = 0.5

_SUPERSAMPLE = 4
_STROKE = 0.75  # outline half-width in pixels


@dataclass(frozen=True)
class SyntheticSpec:
    num_categories: int = 8
    per_category: int = 30
    image_size: int = 16
    noise_level: float = 0.05
    jitter_level: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.num_categories < 2 or self.per_category < 2:
            raise ValueError("need at least 2 categories and 2 samples per category")
        if self.image_size < 4:
            raise ValueError("image_size must be at least 4")

    def test_count(self) -> int:
        return max(1, math.ceil(self.per_category / 6))


@dataclass
class Sample:
    id: int
    category: int
    split: str
    image: np.ndarray
    sketch: np.ndarray
    edgemap: np.ndarray


class Dataset:
    """Immutable collection of samples with stacked array views."""

    def __init__(self, samples: list[Sample], num_categories: int | None = None):
        if not samples:
            raise ValueError("empty dataset")
        self.samples = list(samples)
        self.ids = np.array([s.id for s in samples])
        self.categories = np.array([s.category for s in samples])
        self.splits = np.array([s.split for s in samples])
        self.images = np.stack([s.image for s in samples])
        self.sketches = np.stack([s.sketch for s in samples])
        self.edgemaps = np.stack([s.edgemap for s in samples])
        self.num_categories = int(num_categories if num_categories is not None else self.categories.max() + 1)
        for arr in (self.images, self.sketches, self.edgemaps):
            arr.setflags(write=False)
        self._index = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.samples)

    def index_of(self, sample_id: int) -> int:
        return self._index[int(sample_id)]

    def split_indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]


def network_input(arr: np.ndarray) -> np.ndarray:
    """Stored pixels -> values fed to a branch."""
    return np.asarray(arr, dtype=np.float64) - INPUT_OFFSET


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Style:
    fill: np.ndarray
    radius: float  # fraction of the image side
    aspect: float
    angle: float


def _category_style(k: int, n_cat: int) -> _Style:
    span = max(1, n_cat - 1)
    return _Style(
        fill=np.array(colorsys.hsv_to_rgb(k / n_cat, 0.85, 0.95)),
        radius=0.24 + 0.14 * k / span,
        # permuted so neighbouring vertex counts get different silhouettes
        aspect=1.0 + 0.6 * ((3 * k) % n_cat) / span,
        angle=np.pi * k / n_cat,
    )


def _polygon(n: int, cx: float, cy: float, r: float, aspect: float, angle: float) -> np.ndarray:
    t = angle + 2 * np.pi * np.arange(n) / n
    u, v = r * np.sqrt(aspect) * np.cos(t), r / np.sqrt(aspect) * np.sin(t)
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([cx + c * u - s * v, cy + s * u + c * v], axis=1)


def _grid(size: int, ss: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size * ss) + 0.5) / ss
    return np.meshgrid(c, c, indexing="xy")


def _inside(poly: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for a, b, c, d in zip(x0, y0, x1, y1):
        crosses = (b > py) != (d > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a + (py - b) * (c - a) / (d - b)
        inside ^= crosses & (px < xint)
    return inside


def _segment_distance(poly: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    best = np.full(px.shape, np.inf)
    nxt = np.roll(poly, -1, axis=0)
    for (ax, ay), (bx, by) in zip(poly, nxt):
        dx, dy = bx - ax, by - ay
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / max(dx * dx + dy * dy, 1e-12), 0.0, 1.0)
        best = np.minimum(best, np.hypot(px - ax - t * dx, py - ay - t * dy))
    return best


def _downsample(a: np.ndarray, ss: int) -> np.ndarray:
    h, w = a.shape[0] // ss, a.shape[1] // ss
    return a.reshape(h, ss, w, ss).mean(axis=(1, 3))


def render_image(poly: np.ndarray, fill: np.ndarray, size: int, noise: float,
                 rng: np.random.Generator) -> np.ndarray:
    px, py = _grid(size, _SUPERSAMPLE)
    cover = _downsample(_inside(poly, px, py).astype(float), _SUPERSAMPLE)
    background = 0.1 + 0.2 * rng.random(3)
    img = background[:, None, None] * (1 - cover) + fill[:, None, None] * cover
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def render_sketch(poly: np.ndarray, size: int) -> np.ndarray:
    px, py = _grid(size, _SUPERSAMPLE)
    dist = _segment_distance(poly, px, py)
    ink = _downsample((dist <= _STROKE).astype(float), _SUPERSAMPLE)
    gray = 1.0 - ink
    return np.repeat(gray[None], 3, axis=0)


def extract_edgemap(image: np.ndarray) -> np.ndarray:
    """Gradient-magnitude edges: channel mean, 3x3 Sobel pair, max-normalised, 3 channels.

    Borders use edge replication so a constant image has no response.
    """
    image = np.asarray(image, dtype=np.float64)
    gray = image.mean(axis=0)
    p = np.pad(gray, 1, mode="edge")
    h, w = gray.shape
    win = lambda di, dj: p[1 + di:1 + di + h, 1 + dj:1 + dj + w]  # noqa: E731
    gx = (win(-1, 1) + 2 * win(0, 1) + win(1, 1)) - (win(-1, -1) + 2 * win(0, -1) + win(1, -1))
    gy = (win(1, -1) + 2 * win(1, 0) + win(1, 1)) - (win(-1, -1) + 2 * win(-1, 0) + win(-1, 1))
    mag = np.hypot(gx, gy)
    top = mag.max()
    edge = mag / top if top > 0 else np.zeros_like(mag)
    return np.repeat(edge[None], 3, axis=0)


def synthesize(spec: SyntheticSpec) -> Dataset:
    """Build the dataset in memory, deterministically from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    n_test = spec.test_count()
    samples = []
    sid = 0
    for k in range(spec.num_categories):
        style = _category_style(k, spec.num_categories)
        n_vert = k + 3
        for j in range(spec.per_category):
            cx, cy = size / 2 + rng.uniform(-1, 1, size=2) * 0.06 * size
            r = style.radius * size * rng.uniform(0.96, 1.04)
            angle = style.angle + rng.uniform(-0.1, 0.1)
            poly = _polygon(n_vert, cx, cy, r, style.aspect, angle)
            image = render_image(poly, style.fill, size, spec.noise_level, rng)
            drawn = poly + rng.normal(0.0, spec.jitter_level * r, size=poly.shape)
            sketch = render_sketch(drawn, size)
            split = "test" if j >= spec.per_category - n_test else "train"
            samples.append(Sample(sid, k, split, image, sketch, extract_edgemap(image)))
            sid += 1
    return Dataset(samples, spec.num_categories)


# ---------------------------------------------------------------------------
# Disk layout
# ---------------------------------------------------------------------------


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    parts = []
    for plane in arr:
        h, w = plane.shape
        parts.append(struct.pack("<II", h, w))
        parts.append(np.ascontiguousarray(plane, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    planes, pos = [], 0
    while pos < len(buf):
        if pos + 8 > len(buf):
            raise ValueError(f"{path}: truncated plane header")
        h, w = struct.unpack_from("<II", buf, pos)
        pos += 8
        n = 8 * h * w
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated plane data")
        planes.append(np.frombuffer(buf, dtype="<f8", count=h * w, offset=pos).reshape(h, w))
        pos += n
    return np.stack(planes).astype(np.float64)


def generate_dataset(spec: SyntheticSpec, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sub in ("images", "sketches", "edgemaps"):
        (out / sub).mkdir(exist_ok=True)
    ds = synthesize(spec)
    with open(out / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for s in ds.samples:
            rel = {"image": f"images/{s.id:06d}.bin",
                   "sketch": f"sketches/{s.id:06d}.bin",
                   "edgemap": f"edgemaps/{s.id:06d}.bin"}
            write_tensor(out / rel["image"], s.image)
            write_tensor(out / rel["sketch"], s.sketch)
            write_tensor(out / rel["edgemap"], s.edgemap)
            w.writerow([s.id, s.category, s.split, rel["image"], rel["sketch"], rel["edgemap"]])
    return out


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    with open(root / MANIFEST, newline="") as fh:
        rows = csv.reader(fh)
        header = tuple(next(rows))
        if header != MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header {header}")
        samples = [Sample(int(r[0]), int(r[1]), r[2], read_tensor(root / r[3]),
                          read_tensor(root / r[4]), read_tensor(root / r[5])) for r in rows]
    return Dataset(samples)


# ---------------------------------------------------------------------------
# Pair sampling
# ---------------------------------------------------------------------------


@dataclass
class PairBatch:
    sketches: np.ndarray
    images: np.ndarray
    edgemaps: np.ndarray
    l_sim: np.ndarray
    sketch_categories: np.ndarray
    image_categories: np.ndarray
    sketch_index: np.ndarray
    image_index: np.ndarray

    def __len__(self) -> int:
        return len(self.l_sim)


def sample_pairs(dataset: Dataset, batch_size: int, seed) -> PairBatch:
    """Draw a batch with exactly half positive and half negative sketch pairs.

    Positives pair a training sketch with a random training image of the same
    category; negatives with one from another category. Image and edgemap
    always come from the same sample.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be even and positive, got {batch_size}")
    train = dataset.split_indices("train")
    if train.size == 0:
        raise ValueError("dataset has no training samples")
    cats = dataset.categories[train]
    by_cat = {int(c): train[cats == c] for c in np.unique(cats)}
    if len(by_cat) < 2:
        raise ValueError("need training samples from at least two categories")
    rng = np.random.default_rng(seed)
    sk = rng.choice(train, size=batch_size, replace=batch_size > train.size)
    l_sim = np.zeros(batch_size)
    l_sim[rng.permutation(batch_size)[: batch_size // 2]] = 1.0
    partner = np.empty(batch_size, dtype=np.int64)
    for i, (s, pos) in enumerate(zip(sk, l_sim)):
        c = int(dataset.categories[s])
        if pos:
            pool = by_cat[c]
        else:
            pool = train[dataset.categories[train] != c]
        partner[i] = pool[rng.integers(pool.size)]
    return PairBatch(
        sketches=dataset.sketches[sk],
        images=dataset.images[partner],
        edgemaps=dataset.edgemaps[partner],
        l_sim=l_sim,
        sketch_categories=dataset.categories[sk],
        image_categories=dataset.categories[partner],
        sketch_index=sk,
        image_index=partner,
    )
