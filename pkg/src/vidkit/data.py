"""Synthetic sprite datasets, stratified splits, and the VIDD on-disk format.

Sprites are 8x8 geometric glyphs (one per class) placed with positional
jitter and pixel noise on a zero background; foreground masks are kept so
diagnostics can compare background vs sprite regions. Images are stored as
float32, normalized and computed in float64.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

VIDD_MAGIC = b"VIDD"
VIDD_VERSION = 1
GLYPH_SIZE = 8


class FormatError(ValueError):
    pass


@dataclass
class DatasetSpec:
    name: str
    num_classes: int
    image_shape: tuple  # (C, H, W)
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) uint8
    generator_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != tuple(self.image_shape):
            raise ValueError(f"images shape {self.images.shape} != (N, {self.image_shape})")
        if len(self.labels) != len(self.images):
            raise ValueError("images/labels length mismatch")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.images)

    def subset(self, indices, name=None):
        return DatasetSpec(
            name or self.name,
            self.num_classes,
            self.image_shape,
            self.images[indices],
            self.labels[indices],
            dict(self.generator_params),
        )


def _glyph_templates():
    """16 distinct binary 8x8 glyphs."""
    g = GLYPH_SIZE
    t = []
    yy, xx = np.mgrid[0:g, 0:g]

    def add(mask):
        t.append(mask.astype(np.float32))

    add((yy == g // 2) | (yy == g // 2 - 1))                      # horizontal bar
    add((xx == g // 2) | (xx == g // 2 - 1))                      # vertical bar
    add((yy == g // 2) | (xx == g // 2))                          # cross
    add(np.abs(yy - xx) <= 1)                                     # diagonal
    add(np.abs(yy + xx - (g - 1)) <= 1)                           # anti-diagonal
    add((yy % (g - 1) == 0) | (xx % (g - 1) == 0))                # box outline
    add((yy >= 2) & (yy < g - 2) & (xx >= 2) & (xx < g - 2))      # filled box
    add((np.abs(yy - xx) <= 1) | (np.abs(yy + xx - (g - 1)) <= 1))  # X
    add((yy == 0) | (xx == g // 2))                               # T
    add((xx == 0) | (yy == g - 1))                                # L
    r2 = (yy - (g - 1) / 2) ** 2 + (xx - (g - 1) / 2) ** 2
    add((r2 >= 4) & (r2 <= 10))                                   # ring
    add(((yy // 2 + xx // 2) % 2 == 0))                           # checker
    add((yy == 1) | (yy == g - 2))                                # two horizontal bars
    add((xx == 1) | (xx == g - 2))                                # two vertical bars
    add(yy >= xx)                                                 # lower triangle
    add((yy % 3 == 1) & (xx % 3 == 1))                            # dot grid
    return t


def generate_sprites(num_classes, per_class, image_size, seed, noise_sigma=0.1):
    """Class-balanced sprite dataset plus per-image foreground masks."""
    if image_size < 12:
        raise ValueError(f"image_size must be >= 12, got {image_size}")
    templates = _glyph_templates()
    if num_classes > len(templates):
        raise ValueError(f"at most {len(templates)} classes available, asked for {num_classes}")
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    images = np.zeros((n, 1, image_size, image_size), dtype=np.float32)
    labels = np.zeros(n, dtype=np.uint8)
    masks = np.zeros((n, image_size, image_size), dtype=bool)
    span = image_size - GLYPH_SIZE
    i = 0
    for cls in range(num_classes):
        for _ in range(per_class):
            dy = int(rng.integers(0, span + 1))
            dx = int(rng.integers(0, span + 1))
            img = np.zeros((image_size, image_size), dtype=np.float32)
            img[dy : dy + GLYPH_SIZE, dx : dx + GLYPH_SIZE] = templates[cls]
            mask = np.zeros((image_size, image_size), dtype=bool)
            mask[dy : dy + GLYPH_SIZE, dx : dx + GLYPH_SIZE] = templates[cls] > 0
            if noise_sigma > 0:
                img = img + rng.normal(0.0, noise_sigma, size=img.shape).astype(np.float32)
            images[i, 0] = img
            labels[i] = cls
            masks[i] = mask
            i += 1
    params = {
        "generator": "sprites",
        "num_classes": num_classes,
        "per_class": per_class,
        "image_size": image_size,
        "seed": seed,
        "noise_sigma": noise_sigma,
    }
    spec = DatasetSpec("sprites", num_classes, (1, image_size, image_size), images, labels, params)
    return spec, masks


# ---------------------------------------------------------------------------
# VIDD binary format


def save_vidd(spec, path):
    path = str(path)
    c, h, w = spec.image_shape
    with open(path, "wb") as f:
        f.write(VIDD_MAGIC)
        f.write(struct.pack("<H", VIDD_VERSION))
        f.write(struct.pack("<5I", len(spec), spec.num_classes, c, h, w))
        f.write(np.ascontiguousarray(spec.images, dtype="<f4").tobytes())
        f.write(spec.labels.astype(np.uint8).tobytes())
    if spec.generator_params:
        with open(path + ".json", "w") as f:
            json.dump(spec.generator_params, f, indent=2, sort_keys=True)


def load_vidd(path):
    path = str(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != VIDD_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {VIDD_MAGIC!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VIDD_VERSION:
        raise FormatError(f"unsupported VIDD version {version}")
    n, num_classes, c, h, w = struct.unpack_from("<5I", raw, 6)
    off = 6 + 20
    img_bytes = n * c * h * w * 4
    if len(raw) < off + img_bytes + n:
        raise FormatError(
            f"truncated payload: need {off + img_bytes + n} bytes, file has {len(raw)} "
            f"(truncation at offset {len(raw)})"
        )
    images = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=off).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off + img_bytes)
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"label {labels.max()} out of range for {num_classes} classes")
    params = {}
    try:
        with open(path + ".json") as f:
            params = json.load(f)
    except FileNotFoundError:
        pass
    name = params.get("generator", "vidd")
    return DatasetSpec(name, num_classes, (c, h, w), images.copy(), labels.copy(), params)


# ---------------------------------------------------------------------------
# splits and normalization


def per_class_indices(labels, num_classes):
    return [np.flatnonzero(labels == c) for c in range(num_classes)]


def split_train_val(spec, fraction=0.2, seed=0):
    """Stratified disjoint split; at least one validation example per class."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for idx in per_class_indices(spec.labels, spec.num_classes):
        if len(idx) < 5:
            raise ValueError(f"class with {len(idx)} examples is too small to split")
        perm = rng.permutation(idx)
        n_val = max(1, int(np.floor(fraction * len(idx))))
        val_idx.append(perm[:n_val])
        train_idx.append(perm[n_val:])
    train = spec.subset(np.sort(np.concatenate(train_idx)), spec.name + "-train")
    val = spec.subset(np.sort(np.concatenate(val_idx)), spec.name + "-val")
    return train, val


def compute_norm_stats(spec):
    """Per-channel mean/std over the training split, in float64."""
    x = spec.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def normalize_images(images, stats):
    mean, std = stats
    x = images.astype(np.float64)
    return (x - mean[None, :, None, None]) / std[None, :, None, None]


def iter_batches(images, labels, batch_size, rng=None):
    """Yield (image_batch, label_batch); shuffled when an rng is given."""
    n = len(images)
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        sel = order[start : start + batch_size]
        yield images[sel], labels[sel]
