"""Image ingestion, dataset layout, splitting/batching, and synthetic data.

On-disk datasets follow ``<root>/<source|target>/<diseased|healthy>/*.png``
(jpg/jpeg accepted). Images are decoded, grayscale-replicated to three
channels, bilinearly resized (center-aligned sampling) and scaled to
[0, 1]. The synthetic generator writes a two-domain tree in the same
layout: the class signal is a bright elliptical blob drawn by the same
geometry rule in both domains, while the target domain shifts intensity
statistics only (inversion, brightness offset, extra noise).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor

DOMAINS = ("source", "target")
LABELS = ("diseased", "healthy")  # one-hot index order
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class DatasetError(ValueError):
    """A dataset tree, manifest, or image file violates the layout contract."""


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered (path, label) listing for one domain."""

    domain: str
    entries: tuple[tuple[Path, str], ...]

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise DatasetError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if not self.entries:
            raise DatasetError(f"manifest for {self.domain!r} has no entries")
        for _, label in self.entries:
            if label not in LABELS:
                raise DatasetError(f"unknown label {label!r}")

    @property
    def counts(self):
        out = {label: 0 for label in LABELS}
        for _, label in self.entries:
            out[label] += 1
        return out

    def __len__(self):
        return len(self.entries)


@dataclass
class Batch:
    """One step's worth of images (+ one-hot labels when supervised)."""

    images: Tensor
    labels: Tensor | None
    domain: str

    def __post_init__(self):
        lo, hi = float(self.images.data.min()), float(self.images.data.max())
        if lo < 0.0 or hi > 1.0:
            raise DatasetError(f"pixel values outside [0, 1]: min {lo}, max {hi}")

    def __len__(self):
        return self.images.shape[0]


def bilinear_resize(img, out_h, out_w):
    """Center-aligned bilinear resample of an [H,W,C] float array."""
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    top = (1 - fx) * img[y0[:, None], x0[None, :]] + fx * img[y0[:, None], x1[None, :]]
    bot = (1 - fx) * img[y1[:, None], x0[None, :]] + fx * img[y1[:, None], x1[None, :]]
    return (1 - fy) * top + fy * bot


def load_image(path, side=224):
    """Decode PNG/JPEG -> float [side, side, 3] in [0, 1].

    Grayscale images are replicated across channels before resizing, so
    the three output channels stay identical.
    """
    path = Path(path)
    if path.suffix.lower() not in IMAGE_EXTENSIONS:
        raise DatasetError(f"unsupported format: {path}")
    try:
        with Image.open(path) as im:
            if im.mode == "L":
                raw = np.asarray(im, dtype=np.float64)[:, :, None].repeat(3, axis=2)
            else:
                raw = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc
    return bilinear_resize(raw, side, side) / 255.0


def scan_dataset(root):
    """Manifest per domain from the fixed tree layout, sorted by path."""
    root = Path(root)
    manifests = {}
    for domain in DOMAINS:
        entries = []
        for label in LABELS:
            directory = root / domain / label
            if not directory.is_dir():
                raise DatasetError(f"missing class directory: {directory}")
            files = sorted(
                p for p in directory.iterdir()
                if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
            if not files:
                raise DatasetError(f"no images in {directory}")
            entries.extend((p, label) for p in files)
        entries.sort(key=lambda e: str(e[0]))
        manifests[domain] = DatasetManifest(domain=domain, entries=tuple(entries))
    return manifests


def split(manifest, train_fraction, seed):
    """Stratified (train, test) split; per-label shuffle is keyed by seed."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    train_entries, test_entries = [], []
    for label_idx, label in enumerate(LABELS):
        group = [e for e in manifest.entries if e[1] == label]
        if len(group) < 2:
            raise DatasetError(f"label {label!r} has {len(group)} entries, cannot stratify")
        rng = np.random.default_rng(np.random.SeedSequence((seed, label_idx)))
        order = rng.permutation(len(group))
        n_train = int(math.floor(train_fraction * len(group)))
        if n_train == 0 or n_train == len(group):
            raise DatasetError(
                f"train_fraction {train_fraction} leaves an empty split for label {label!r}")
        for pos in order[:n_train]:
            train_entries.append(group[pos])
        for pos in order[n_train:]:
            test_entries.append(group[pos])
    key = lambda e: str(e[0])
    return (
        DatasetManifest(manifest.domain, tuple(sorted(train_entries, key=key))),
        DatasetManifest(manifest.domain, tuple(sorted(test_entries, key=key))),
    )


def batches(manifest, batch_size, seed, epoch, with_labels, side=224,
            dtype=np.float64, cache=None):
    """Stream of Batch objects in an order keyed by (seed, epoch).

    The final partial batch is emitted. ``cache`` (a dict) memoizes decoded
    images across epochs; decode errors propagate with the failing path.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((seed, epoch)))
    order = rng.permutation(len(manifest.entries))
    eye = np.eye(len(LABELS), dtype=dtype)
    label_index = {label: i for i, label in enumerate(LABELS)}

    def decode(path):
        if cache is None:
            return load_image(path, side=side)
        key = (str(path), side)
        if key not in cache:
            cache[key] = load_image(path, side=side)
        return cache[key]

    for start in range(0, len(order), batch_size):
        chunk = [manifest.entries[i] for i in order[start:start + batch_size]]
        images = np.stack([decode(path) for path, _ in chunk]).astype(dtype)
        labels = None
        if with_labels:
            labels = Tensor(eye[[label_index[label] for _, label in chunk]])
        yield Batch(images=Tensor(images), labels=labels, domain=manifest.domain)


def eval_batches(manifest, batch_size, side=224, dtype=np.float64, cache=None):
    """Label-carrying stream in manifest order (no shuffling)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    eye = np.eye(len(LABELS), dtype=dtype)
    label_index = {label: i for i, label in enumerate(LABELS)}

    def decode(path):
        if cache is None:
            return load_image(path, side=side)
        key = (str(path), side)
        if key not in cache:
            cache[key] = load_image(path, side=side)
        return cache[key]

    for start in range(0, len(manifest.entries), batch_size):
        chunk = manifest.entries[start:start + batch_size]
        images = np.stack([decode(path) for path, _ in chunk]).astype(dtype)
        labels = Tensor(eye[[label_index[label] for _, label in chunk]])
        yield Batch(images=Tensor(images), labels=labels, domain=manifest.domain)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the two-domain synthetic benchmark.

    The diseased class adds a bright elliptical blob at a seeded position;
    healthy images carry background texture only. The target domain keeps
    the identical geometry rule and shifts intensity statistics: optional
    inversion, an additive brightness offset, and a higher noise level.
    """

    samples_per_class: int = 200
    image_side: int = 64
    seed: int = 0
    texture_amplitude: float = 0.12
    blob_intensity: float = 0.45
    blob_radius_range: tuple[float, float] = (0.12, 0.2)  # fraction of the side
    noise_source: float = 0.02
    noise_target: float = 0.06
    brightness_offset: float = 0.1
    invert_target: bool = True

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.image_side < 8:
            raise ValueError("image_side must be >= 8")
        lo, hi = self.blob_radius_range
        if not 0.0 < lo <= hi < 0.5:
            raise ValueError("blob_radius_range must satisfy 0 < lo <= hi < 0.5")


def _render_image(spec, domain, label, index):
    """One grayscale image in [0, 1]; all randomness keyed per image."""
    side = spec.image_side
    dom_id, lab_id = DOMAINS.index(domain), LABELS.index(label)
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, dom_id, lab_id, index)))

    yy, xx = np.mgrid[0:side, 0:side] / side
    img = np.full((side, side), 0.35)
    for _ in range(3):  # smooth low-frequency background texture
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        img += (spec.texture_amplitude / 3.0) * np.sin(
            2.0 * math.pi * (fx * xx + fy * yy) + phase)

    if label == "diseased":
        cx, cy = rng.uniform(0.25, 0.75, size=2)
        rx, ry = rng.uniform(*spec.blob_radius_range, size=2)
        angle = rng.uniform(0.0, math.pi)
        dx, dy = xx - cx, yy - cy
        u = dx * math.cos(angle) + dy * math.sin(angle)
        v = -dx * math.sin(angle) + dy * math.cos(angle)
        rho = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
        img += spec.blob_intensity * np.clip(1.2 * (1.0 - rho), 0.0, 1.0)

    if domain == "target":
        if spec.invert_target:
            img = 1.0 - img
        img = img + spec.brightness_offset
        noise = spec.noise_target
    else:
        noise = spec.noise_source
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec, out_dir):
    """Write the synthetic tree as 8-bit grayscale PNGs; returns manifests."""
    out_dir = Path(out_dir)
    width = len(str(spec.samples_per_class - 1))
    for domain in DOMAINS:
        for label in LABELS:
            directory = out_dir / domain / label
            try:
                directory.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise DatasetError(f"cannot create {directory}: {exc}") from exc
            for index in range(spec.samples_per_class):
                img = _render_image(spec, domain, label, index)
                data = np.round(img * 255.0).astype(np.uint8)
                Image.fromarray(data, mode="L").save(
                    directory / f"{label}_{index:0{width}d}.png")
    return scan_dataset(out_dir)


class ManifestDatasets:
    """fit()-ready batch streams backed by manifests on disk.

    ``source_eval`` defaults to the source train split (training metrics
    are measured there); ``target_eval`` is the held-out target split.
    Decoded images are memoized in-process by default.
    """

    def __init__(self, source_train, target_train, target_eval, source_eval=None,
                 side=224, dtype=np.float64, cache=True):
        self.source_train = source_train
        self.target_train = target_train
        self.target_eval = target_eval
        self.source_eval = source_eval if source_eval is not None else source_train
        self.side = side
        self.dtype = np.dtype(dtype)
        self._cache = {} if cache else None

    def source_train_batches(self, batch_size, seed, epoch):
        return batches(self.source_train, batch_size, seed, epoch, with_labels=True,
                       side=self.side, dtype=self.dtype, cache=self._cache)

    def target_train_batches(self, batch_size, seed, epoch):
        return _Reiterable(lambda: batches(
            self.target_train, batch_size, seed, epoch, with_labels=False,
            side=self.side, dtype=self.dtype, cache=self._cache))

    def source_eval_batches(self, batch_size):
        return eval_batches(self.source_eval, batch_size, side=self.side,
                            dtype=self.dtype, cache=self._cache)

    def target_eval_batches(self, batch_size):
        return eval_batches(self.target_eval, batch_size, side=self.side,
                            dtype=self.dtype, cache=self._cache)


class _Reiterable:
    """Restartable view over a generator factory (lets the trainer cycle it)."""

    def __init__(self, factory):
        self._factory = factory

    def __iter__(self):
        return self._factory()
