"""Procedural source data, shift-mimicking transforms, corruptions and target streams.

Images are float64 arrays of shape (3, H, W) with values in [0, 1].

Colour conventions
------------------
grayscale(R, G, B) = 0.299 R + 0.587 G + 0.114 B  (ITU-R 601 luma).

Hue rotation goes through HSV with the standard hexcone conversion:
V = max(R,G,B), S = (V - min)/V (0 when V = 0), H in [0, 1) computed from
which channel is the maximum; the rotated hue wraps around modulo 1.

Colour jitter applies brightness -> contrast -> saturation -> hue, always in
that order. Each blend is f*x + (1-f)*ref so that f = 1 is an exact identity:
brightness ref = 0, contrast ref = mean grayscale value of the image,
saturation ref = per-pixel grayscale.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy import ndimage

SHAPES = ("disk", "square", "triangle", "cross", "ring")
# |foreground value - background level| range
FG_CONTRAST = (0.35, 0.6)
CORRUPTIONS = ("gaussian_noise", "gaussian_blur", "brightness", "contrast", "saturation_shift", "pixelate")

# per-kind magnitude as a function of severity s in 1..5
SEVERITY_TABLE = {
    "gaussian_noise": lambda s: 0.04 * s,       # noise std
    "gaussian_blur": lambda s: 0.4 * s,         # kernel std in pixels
    "brightness": lambda s: 0.08 * s,           # additive shift
    "contrast": lambda s: 1.0 - 0.15 * s,       # contrast factor
    "saturation_shift": lambda s: 1.0 - 0.18 * s,  # saturation factor
    "pixelate": lambda s: 1.0 - 0.15 * s,       # fraction of resolution kept
}


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, H, W)
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# ---------------------------------------------------------------------------
# colour helpers
# ---------------------------------------------------------------------------


def grayscale(img):
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def rgb_to_hsv(img):
    r, g, b = img
    v = img.max(axis=0)
    mn = img.min(axis=0)
    delta = v - mn
    s = np.where(v > 0, delta / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(v == r, (g - b) / safe,
                 np.where(v == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def hsv_to_rgb(hsv):
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _blur(img, sigma, truncate_radius=None):
    if truncate_radius is None:
        return ndimage.gaussian_filter(img, sigma=(0, sigma, sigma), mode="reflect")
    # fixed (2r+1)-tap kernel, reflect padding (3x3 when r = 1)
    k = np.exp(-0.5 * (np.arange(-truncate_radius, truncate_radius + 1) / sigma) ** 2)
    k /= k.sum()
    out = ndimage.correlate1d(img, k, axis=1, mode="mirror")
    return ndimage.correlate1d(out, k, axis=2, mode="mirror")


# ---------------------------------------------------------------------------
# source data
# ---------------------------------------------------------------------------


def _shape_mask(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if kind == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r) & (np.abs(dx) <= 0.6 * (dy + r))
    if kind == "cross":
        t = 0.35 * r
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(kind)


def hue_family(label, num_classes):
    """Classes 0..4 share family 0, classes 5..9 family 1; each family spans a half circle."""
    n_families = (num_classes + len(SHAPES) - 1) // len(SHAPES)
    return label // len(SHAPES), n_families


def render_example(label, num_classes, image_size, rng):
    """One image of class `label`: shape SHAPES[label % 5] drawn in a hue from its family."""
    size = image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    r = size * rng.uniform(0.26, 0.36)
    margin = r + 0.5
    cy = rng.uniform(margin, size - 1 - margin) if size - 1 - 2 * margin > 0 else (size - 1) / 2
    cx = rng.uniform(margin, size - 1 - margin) if size - 1 - 2 * margin > 0 else (size - 1) / 2
    mask = _shape_mask(SHAPES[label % len(SHAPES)], yy, xx, cy, cx, r)

    family, n_families = hue_family(label, num_classes)
    width = 1.0 / max(n_families, 2)
    hue = (family / n_families + rng.uniform(0.0, width)) % 1.0
    bg_level = rng.uniform(0.2, 0.5)
    value = bg_level + rng.choice([-1.0, 1.0]) * rng.uniform(FG_CONTRAST[0], FG_CONTRAST[1])
    value = float(np.clip(value, 0.0, 1.0))
    fg = hsv_to_rgb(np.array([hue, rng.uniform(0.4, 0.8), value]).reshape(3, 1, 1))
    img = np.full((3, size, size), bg_level) + rng.normal(0.0, 0.02, size=(3, size, size))
    img = np.where(mask[None], fg, img)
    return np.clip(img, 0.0, 1.0)


def generate_source_dataset(seed, n_per_class, num_classes=5, image_size=16) -> Dataset:
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if image_size < 8:
        raise ValueError(f"image_size {image_size} too small to render shapes (need >= 8)")
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = np.empty((len(labels), 3, image_size, image_size))
    for i, y in enumerate(labels):
        rng = np.random.default_rng([seed, i])
        images[i] = render_example(int(y), num_classes, image_size, rng)
    return Dataset(images, labels.astype(np.int64), num_classes)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


@dataclass
class ColorJitter:
    brightness: tuple = (0.2, 1.8)
    contrast: tuple = (0.2, 1.8)
    saturation: tuple = (0.2, 1.8)
    hue: tuple = (-0.2, 0.2)

    def __call__(self, img, rng):
        b = rng.uniform(*self.brightness)
        c = rng.uniform(*self.contrast)
        s = rng.uniform(*self.saturation)
        h = rng.uniform(*self.hue)
        img = np.clip(b * img, 0, 1)
        m = grayscale(img).mean()
        img = np.clip(c * img + (1 - c) * m, 0, 1)
        img = np.clip(s * img + (1 - s) * grayscale(img)[None], 0, 1)
        if h != 0.0:
            hsv = rgb_to_hsv(img)
            hsv[0] = (hsv[0] + h) % 1.0
            img = hsv_to_rgb(hsv)
        return img


@dataclass
class Grayscale:
    def __call__(self, img, rng):
        return np.repeat(grayscale(img)[None], 3, axis=0)


@dataclass
class Invert:
    def __call__(self, img, rng):
        return 1.0 - img


@dataclass
class GaussianBlur:
    sigma: tuple = (1.0, 2.0)
    radius: int = 1

    def __call__(self, img, rng):
        return _blur(img, rng.uniform(*self.sigma), truncate_radius=self.radius)


@dataclass
class HorizontalFlip:
    def __call__(self, img, rng):
        return img[:, :, ::-1].copy()


@dataclass
class RandomCrop:
    """Zero-pad by `pad` then crop back to the original size at a random offset."""

    pad: int = 2

    def __call__(self, img, rng):
        _, h, w = img.shape
        padded = np.pad(img, ((0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        i, j = rng.integers(0, 2 * self.pad + 1, size=2)
        return padded[:, i:i + h, j:j + w].copy()


@dataclass
class Apply:
    """Apply `stage` with probability p."""

    stage: object
    p: float = 1.0

    def __call__(self, img, rng):
        if rng.uniform() < self.p:
            return self.stage(img, rng)
        return img


@dataclass
class Choice:
    """With probability p apply one of `stages`, chosen uniformly."""

    stages: tuple
    p: float = 0.5

    def __call__(self, img, rng):
        if rng.uniform() < self.p:
            return self.stages[rng.integers(len(self.stages))](img, rng)
        return img


@dataclass
class TransformSpec:
    stages: list = field(default_factory=list)

    def __call__(self, img, rng):
        return apply_transform(img, self, rng)


def default_transform() -> TransformSpec:
    """Colour jitter, then grayscale-or-invert (p=0.5), then 3x3 blur (p=0.5)."""
    return TransformSpec([
        Apply(ColorJitter(), 1.0),
        Choice((Grayscale(), Invert()), 0.5),
        Apply(GaussianBlur(), 0.5),
    ])


def crop_flip_transform() -> TransformSpec:
    """default_transform plus random crop and horizontal flip."""
    spec = default_transform()
    spec.stages += [Apply(RandomCrop(), 1.0), Apply(HorizontalFlip(), 0.5)]
    return spec


def identity_transform() -> TransformSpec:
    return TransformSpec([])


def apply_transform(img, spec: TransformSpec, rng):
    out = img
    for stage in spec.stages:
        out = stage(out, rng)
    return np.clip(out, 0.0, 1.0)


def transform_batch(images, spec: TransformSpec, rng):
    return np.stack([apply_transform(x, spec, rng) for x in images])


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def magnitude(self):
        return SEVERITY_TABLE[self.kind](self.severity)


def _pixelate(img, keep):
    _, h, w = img.shape
    mh, mw = max(1, round(h * keep)), max(1, round(w * keep))
    bi = (np.arange(h) * mh) // h
    bj = (np.arange(w) * mw) // w
    down = np.zeros((img.shape[0], mh, mw))
    counts = np.zeros((mh, mw))
    np.add.at(counts, (bi[:, None], bj[None, :]), 1.0)
    for c in range(img.shape[0]):
        np.add.at(down[c], (bi[:, None], bj[None, :]), img[c])
    down /= counts
    return down[:, bi][:, :, bj]


def corrupt(img, spec: CorruptionSpec, rng):
    kind, mag = spec.kind, spec.magnitude
    if kind == "gaussian_noise":
        out = img + rng.normal(0.0, 1.0, size=img.shape) * mag
    elif kind == "gaussian_blur":
        out = _blur(img, mag)
    elif kind == "brightness":
        out = img + mag
    elif kind == "contrast":
        m = img.mean(axis=(1, 2), keepdims=True)
        out = mag * img + (1 - mag) * m
    elif kind == "saturation_shift":
        out = mag * img + (1 - mag) * grayscale(img)[None]
    elif kind == "pixelate":
        out = _pixelate(img, mag)
    else:  # pragma: no cover - guarded by CorruptionSpec
        raise ValueError(kind)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# target stream
# ---------------------------------------------------------------------------


class StreamExhausted(RuntimeError):
    pass


class LabelOracle:
    """Holds the hidden target labels; handed only to the metrics recorder."""

    def __init__(self, labels):
        self._labels = np.asarray(labels, dtype=np.int64)

    def __call__(self, keys):
        return self._labels[np.asarray(keys)]

    def __len__(self):
        return len(self._labels)


@dataclass
class StreamBatch:
    index: int
    images: np.ndarray
    keys: np.ndarray  # dataset indices; opaque to adaptation code


class TargetStream:
    """Seeded, batched, single-pass sequence of corrupted examples."""

    def __init__(self, images, labels, batch_size, seed, corruption=None, epoch=0):
        if len(images) == 0:
            raise ValueError("target dataset is empty")
        if batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics)")
        self._images = images
        self.oracle = labels if isinstance(labels, LabelOracle) else LabelOracle(labels)
        self.batch_size = batch_size
        self.seed = seed
        self.corruption = corruption
        self.epoch = epoch
        rng = np.random.default_rng([seed, 7919, epoch])
        order = rng.permutation(len(images))
        n_full = len(order) // batch_size
        batches = [order[i * batch_size:(i + 1) * batch_size] for i in range(n_full)]
        tail = order[n_full * batch_size:]
        if len(tail) >= 2:
            batches.append(tail)
        self._batches = batches
        self._consumed = False

    def __len__(self):
        return len(self._batches)

    @property
    def n_examples(self):
        return int(sum(len(b) for b in self._batches))

    def __iter__(self) -> Iterator[StreamBatch]:
        if self._consumed:
            raise StreamExhausted("target stream can only be iterated once")
        self._consumed = True
        for i, keys in enumerate(self._batches):
            yield StreamBatch(i, self._images[keys], keys.copy())

    def reshuffled(self, epoch) -> "TargetStream":
        """Fresh pass over the same corrupted data (offline-epoch mode only)."""
        return TargetStream(self._images, self.oracle, self.batch_size, self.seed, self.corruption, epoch)


def make_target_stream(dataset: Dataset, corruption: CorruptionSpec, seed, batch_size) -> TargetStream:
    if len(dataset) == 0:
        raise ValueError("target dataset is empty")
    corrupted = np.empty_like(dataset.images)
    for i, img in enumerate(dataset.images):
        corrupted[i] = corrupt(img, corruption, np.random.default_rng([seed, 104729, i]))
    return TargetStream(corrupted, dataset.labels, batch_size, seed, corruption)
