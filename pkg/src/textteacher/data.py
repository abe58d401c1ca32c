"""Synthetic captioned shapes, label noise, class-stratified subsets, persistence."""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import Rng, derive_seed, lane_normals, lane_streams, lane_uniforms

logger = logging.getLogger(__name__)

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.20, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "magenta": (0.85, 0.20, 0.85),
    "cyan": (0.15, 0.85, 0.90),
}
SHAPES = ("triangle", "square", "disk", "cross", "ring", "diamond")
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")

MANIFEST = "manifest.json"
IMAGE_FILE = "images.f32"
_CHUNK = 512


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 6000
    image_size: int = 32
    n_colors: int = 4
    n_shapes: int = 3
    pixel_noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_colors <= len(COLORS) or not 1 <= self.n_shapes <= len(SHAPES):
            raise ValueError(f"at most {len(COLORS)} colors and {len(SHAPES)} shapes available")
        if self.n_samples < self.n_classes:
            raise ValueError("n_samples must be at least the number of classes")
        if self.pixel_noise_std < 0:
            raise ValueError("pixel_noise_std must be non-negative")
        if self.image_size < 12:
            raise ValueError("image_size must be at least 12")

    @property
    def n_classes(self):
        return self.n_colors * self.n_shapes

    def class_names(self):
        colors = list(COLORS)[: self.n_colors]
        shapes = SHAPES[: self.n_shapes]
        return [f"{c} {s}" for c in colors for s in shapes]


@dataclass
class Dataset:
    ids: list
    images: np.ndarray  # (n, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    captions: list
    classes: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    @property
    def n_classes(self):
        return len(self.classes)

    def take(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            [self.ids[i] for i in index],
            self.images[index],
            self.labels[index].copy(),
            [self.captions[i] for i in index],
            list(self.classes),
        )

    def with_labels(self, labels):
        return Dataset(self.ids, self.images, np.asarray(labels, dtype=np.int64), self.captions, self.classes)


def _mask(shape, dx, dy, r):
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= 0.6 * (dy + r))
    if shape == "cross":
        arm = r / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(shape)


def _render_chunk(labels, states, spec, colors, shapes):
    """Render one chunk; each sample owns one PRNG lane so chunking is invisible."""
    H = spec.image_size
    n = len(labels)
    u = lane_uniforms(states, 7)
    radius = H * (0.14 + 0.12 * u[:, 0])
    cx = radius + u[:, 1] * (H - 2 * radius)
    cy = radius + u[:, 2] * (H - 2 * radius)
    background = 0.25 + 0.35 * u[:, 3]
    jitter = (u[:, 4:7] - 0.5) * 0.2
    noise = lane_normals(states, H * H * 3).reshape(n, H, H, 3)

    grid = np.arange(H, dtype=np.float64) + 0.5
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    out = np.empty((n, H, H, 3), dtype=np.float64)
    positions = []
    n_shapes = len(shapes)
    for i in range(n):
        color = np.clip(np.asarray(colors[labels[i] // n_shapes][1]) + jitter[i], 0.0, 1.0)
        shape = shapes[labels[i] % n_shapes]
        m = _mask(shape, xx - cx[i], yy - cy[i], radius[i])
        img = np.empty((H, H, 3))
        img[:] = background[i]
        img[m] = color
        out[i] = img
        row = ROWS[min(int(cy[i] * 3 // H), 2)]
        col = COLS[min(int(cx[i] * 3 // H), 2)]
        positions.append(f"{row} {col}")
    out += spec.pixel_noise_std * noise
    np.clip(out, 0.0, 1.0, out=out)
    return out.astype(np.float32), positions


def generate_shapes(spec):
    """Render ``spec.n_samples`` captioned shape images.

    Labels are stratified (class ``i mod C`` before a seeded shuffle), so every
    class count is within one of ``n/C``. Caption: ``"<color> <shape> at <row> <col>"``.
    """
    C = spec.n_classes
    colors = list(COLORS.items())[: spec.n_colors]
    shapes = SHAPES[: spec.n_shapes]
    order = Rng(derive_seed(spec.seed, 0xDA7A)).permutation(spec.n_samples)
    labels = (np.arange(spec.n_samples) % C)[order].astype(np.int64)
    states = lane_streams(derive_seed(spec.seed, 0x5A3E), spec.n_samples)

    images = np.empty((spec.n_samples, spec.image_size, spec.image_size, 3), dtype=np.float32)
    captions = []
    for start in range(0, spec.n_samples, _CHUNK):
        sl = slice(start, start + _CHUNK)
        imgs, pos = _render_chunk(labels[sl], states[sl], spec, colors, shapes)
        images[sl] = imgs
        for lab, p in zip(labels[sl], pos):
            captions.append(f"{colors[lab // len(shapes)][0]} {shapes[lab % len(shapes)]} at {p}")
    ids = [f"s{spec.seed}-{i:06d}" for i in range(spec.n_samples)]
    return Dataset(ids, images, labels, captions, spec.class_names())


def inject_label_noise(labels, rho, n_classes, seed):
    """Replace each label with probability ``rho`` by a uniform *incorrect* class."""
    if n_classes < 2:
        raise ValueError("label noise needs at least 2 classes")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if rho > 0.5:
        logger.warning("label noise rho=%.2f exceeds the studied range [0, 0.5]", rho)
    labels = np.asarray(labels, dtype=np.int64)
    rng = Rng(derive_seed(seed, 0x0015E))
    flip = rng.uniform((labels.size,)) < rho
    shift = 1 + rng.integers(n_classes - 1, (labels.size,))
    return np.where(flip, (labels + shift) % n_classes, labels)


def stratified_indices(labels, fraction, seed):
    labels = np.asarray(labels)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return np.arange(labels.size)
    rng = Rng(derive_seed(seed, 0x5B5E7))
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = int(round(fraction * idx.size))
        if k == 0:
            raise ValueError(f"fraction {fraction} leaves class {c} empty")
        keep.append(idx[rng.permutation(idx.size)[:k]])
    return np.sort(np.concatenate(keep))


def subset(dataset, fraction, seed):
    """Class-stratified sample without replacement."""
    if fraction == 1.0:
        return dataset
    return dataset.take(stratified_indices(dataset.labels, fraction, seed))


def train_eval_split(dataset, eval_fraction, seed):
    """Disjoint stratified split; returns ``(train, eval)``."""
    ev = stratified_indices(dataset.labels, eval_fraction, derive_seed(seed, 0xE7A1))
    mask = np.ones(len(dataset), dtype=bool)
    mask[ev] = False
    return dataset.take(np.flatnonzero(mask)), dataset.take(ev)


def save_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    n = len(dataset)
    H = dataset.images.shape[1] if n else 0
    manifest = {
        "version": 1,
        "classes": list(dataset.classes),
        "samples": [
            {"id": i, "label": int(y), "caption": c}
            for i, y, c in zip(dataset.ids, dataset.labels, dataset.captions)
        ],
        "image_file": IMAGE_FILE,
        "image_size": int(H),
        "channels": 3,
    }
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1)
    np.ascontiguousarray(dataset.images, dtype="<f4").tofile(os.path.join(directory, IMAGE_FILE))


def load_dataset(directory):
    with open(os.path.join(directory, MANIFEST)) as fh:
        m = json.load(fh)
    if m.get("version") != 1:
        raise ValueError(f"unsupported dataset manifest version {m.get('version')}")
    n, H, ch = len(m["samples"]), m["image_size"], m["channels"]
    raw = np.fromfile(os.path.join(directory, m["image_file"]), dtype="<f4")
    if raw.size != n * H * H * ch:
        raise ValueError(f"image file holds {raw.size} floats, manifest implies {n * H * H * ch}")
    images = raw.reshape(n, H, H, ch).astype(np.float32)
    s = m["samples"]
    return Dataset(
        [x["id"] for x in s],
        images,
        np.array([x["label"] for x in s], dtype=np.int64),
        [x["caption"] for x in s],
        m["classes"],
    )


def spec_to_dict(spec):
    return asdict(spec)
