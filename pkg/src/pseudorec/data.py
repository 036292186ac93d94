"""Dataset ingestion, synthetic task generation, and image preprocessing.

Pixel data lives in [0, 255] until the moment it enters a model; training
images pass through :func:`augment_train_image` (random crop, optional flip,
brightness, contrast, standardization) and everything else through
:func:`preprocess_eval_image` (center crop, standardization).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import (
    BadMagic,
    LabelOutOfRange,
    ManifestInvalid,
    SizeMismatch,
    TruncatedFile,
)

SYNTHETIC_NOISE_STD = 16.0  # pixel noise on the [0,255] scale
_PROTO_MIN_DIST = 4.0 * SYNTHETIC_NOISE_STD  # enforced gap between prototypes
_DELTA_NORM = 4.0 * SYNTHETIC_NOISE_STD  # class deviation from the task base
_BASE_CONTRAST = 0.1  # how far task bases swing from mid-gray


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a tuple of values (order-sensitive)."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


# -- task datasets -----------------------------------------------------------


@dataclass
class TaskDataset:
    """Labeled image set with disjoint train/valid/test index partitions."""

    task_index: int
    classes: int
    images: np.ndarray            # [n,c,h,w] float32 in [0,255]
    labels: np.ndarray            # [n] int64 in [0, classes)
    train_idx: np.ndarray
    valid_idx: np.ndarray
    test_idx: np.ndarray
    flip_lr: bool = False
    name: str = ""
    prototypes: Optional[np.ndarray] = None   # [classes,c,h,w] for synthetic tasks

    def __post_init__(self):
        n = len(self.images)
        if len(self.labels) != n:
            raise SizeMismatch(f"{n} images but {len(self.labels)} labels")
        parts = np.concatenate([self.train_idx, self.valid_idx, self.test_idx])
        if len(parts) != n or len(np.unique(parts)) != n:
            raise SizeMismatch("train/valid/test partitions must be disjoint and covering")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise LabelOutOfRange(
                f"labels must lie in [0,{self.classes}), found {self.labels.max()}")

    @property
    def n_items(self) -> int:
        return len(self.images)

    def subset(self, idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.images[idx], self.labels[idx]


def global_units(task: TaskDataset, labels: np.ndarray) -> np.ndarray:
    """Map within-task labels onto the joint output layout."""
    return task.task_index * task.classes + labels


def one_hot(labels: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(labels), width), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


# -- IDX container -----------------------------------------------------------

_IDX_LABEL_MAGIC = 0x00000801
_IDX_IMAGE_MAGIC = 0x00000803


def load_idx(path) -> np.ndarray:
    """Decode an IDX file: images to uint8 [n,1,h,w], labels to uint8 [n]."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: too short for a magic number")
    magic = int.from_bytes(raw[:4], "big")
    if magic == _IDX_LABEL_MAGIC:
        ndim = 1
    elif magic == _IDX_IMAGE_MAGIC:
        ndim = 3
    else:
        raise BadMagic(f"{path}: magic 0x{magic:08x} is neither labels nor images")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: truncated dimension header")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise TruncatedFile(f"{path}: payload holds {len(raw) - header} of {count} bytes")
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header, count=count)
    if ndim == 1:
        if payload.size and payload.max() > 9:
            raise LabelOutOfRange(f"{path}: label {payload.max()} outside 0..9")
        return payload.copy()
    n, h, w = dims
    return payload.reshape(n, 1, h, w).copy()


# -- raw-task manifests ------------------------------------------------------

_REQUIRED_MANIFEST_KEYS = {"name", "shape", "count", "images_file", "labels_file", "split"}


def _parse_manifest(path: Path) -> dict:
    entries = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ManifestInvalid(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    missing = _REQUIRED_MANIFEST_KEYS - entries.keys()
    if missing:
        raise ManifestInvalid(f"{path}: missing keys {sorted(missing)}")
    return entries


def load_raw_task(manifest_path, task_index: int = 0) -> TaskDataset:
    """Load a task from a manifest naming flat u8 pixel and label files.

    Items are partitioned in file order: the first ``train`` items, then
    ``valid``, then ``test``.
    """
    path = Path(manifest_path)
    if not path.is_file():
        raise ManifestInvalid(f"manifest not found: {path}")
    entries = _parse_manifest(path)
    try:
        c, h, w = (int(v) for v in entries["shape"].split(","))
        count = int(entries["count"])
        split = tuple(int(v) for v in entries["split"].split(","))
        if len(split) != 3:
            raise ValueError("split needs three counts")
    except ValueError as exc:
        raise ManifestInvalid(f"{path}: {exc}") from None
    if sum(split) != count:
        raise SizeMismatch(f"{path}: split {split} sums to {sum(split)}, count is {count}")

    images_file = path.parent / entries["images_file"]
    labels_file = path.parent / entries["labels_file"]
    for f in (images_file, labels_file):
        if not f.is_file():
            raise ManifestInvalid(f"{path}: referenced file missing: {f.name}")
    pixels = np.fromfile(images_file, dtype=np.uint8)
    if pixels.size != count * c * h * w:
        raise SizeMismatch(f"{images_file.name}: {pixels.size} bytes, "
                           f"expected {count * c * h * w}")
    labels = np.fromfile(labels_file, dtype=np.uint8)
    if labels.size != count:
        raise SizeMismatch(f"{labels_file.name}: {labels.size} labels, expected {count}")

    classes = int(entries.get("classes", int(labels.max()) + 1 if labels.size else 1))
    offsets = np.cumsum((0,) + split)
    return TaskDataset(
        task_index=task_index,
        classes=classes,
        images=pixels.reshape(count, c, h, w).astype(np.float32),
        labels=labels.astype(np.int64),
        train_idx=np.arange(offsets[0], offsets[1]),
        valid_idx=np.arange(offsets[1], offsets[2]),
        test_idx=np.arange(offsets[2], offsets[3]),
        flip_lr=entries.get("flip_lr", "false").lower() in ("true", "1", "yes"),
        name=entries["name"],
    )


# -- synthetic tasks ---------------------------------------------------------


def _render_blobs(rng: np.random.Generator, hw: int) -> np.ndarray:
    """One candidate prototype: oriented gaussian bars/blobs on a mid-gray."""
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    yy -= (hw - 1) / 2.0
    xx -= (hw - 1) / 2.0
    canvas = np.full((hw, hw), 128.0)
    for b in range(2):
        theta = rng.uniform(0.0, np.pi)
        cy, cx = rng.uniform(-hw / 4.0, hw / 4.0, size=2)
        sig_long = rng.uniform(hw / 3.0, hw / 2.0)
        sig_short = rng.uniform(hw / 10.0, hw / 5.0)
        amp = rng.uniform(70.0, 110.0)
        if b > 0 and rng.integers(2):
            amp = -amp
        xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        canvas += amp * np.exp(-(xr**2 / (2 * sig_long**2) + yr**2 / (2 * sig_short**2)))
    return np.clip(canvas, 10.0, 245.0)


def _render_delta(rng: np.random.Generator, hw: int) -> np.ndarray:
    """A smooth signed field scaled to a fixed L2 norm: one class's deviation
    from its task base.  Fixing the norm pins how far classes sit from each
    other relative to the pixel noise, which sets the task's error floor."""
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    yy -= (hw - 1) / 2.0
    xx -= (hw - 1) / 2.0
    canvas = np.zeros((hw, hw))
    for _ in range(2):
        theta = rng.uniform(0.0, np.pi)
        cy, cx = rng.uniform(-hw / 3.0, hw / 3.0, size=2)
        sig_long = rng.uniform(hw / 6.0, hw / 3.0)
        sig_short = rng.uniform(hw / 12.0, hw / 6.0)
        amp = rng.uniform(0.5, 1.0) * (1.0 if rng.integers(2) else -1.0)
        xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        canvas += amp * np.exp(-(xr**2 / (2 * sig_long**2) + yr**2 / (2 * sig_short**2)))
    norm = np.linalg.norm(canvas)
    if norm < 1e-9:
        return canvas  # degenerate cancellation; the caller retries
    return canvas * (_DELTA_NORM / norm)


@lru_cache(maxsize=None)
def _task_base(task_index: int, hw: int) -> np.ndarray:
    """The shared pattern all of one task's classes are variations of.

    Contrast is kept low so consecutive tasks stay in one input domain
    (new-class splits of a single dataset, not disjoint datasets).  Distant
    bases let a model park old-task responses in regions new training never
    visits, where they survive indefinitely; a dominant shared component
    also swamps the input covariance and slows every gradient method down
    without making the classes harder to tell apart."""
    rng = np.random.default_rng(derive_seed("task-base", task_index))
    return 128.0 + _BASE_CONTRAST * (_render_blobs(rng, hw) - 128.0)


@lru_cache(maxsize=None)
def _prototype(task_index: int, class_idx: int, hw: int) -> np.ndarray:
    """Deterministic prototype for (task, class): the task base plus a class
    deviation, kept at least _PROTO_MIN_DIST from every prototype defined
    before it (earlier tasks, earlier classes)."""
    earlier = [
        _prototype(t, c, hw)
        for t in range(task_index + 1)
        for c in range(class_idx if t == task_index else _MAX_CLASSES)
    ]
    base = _task_base(task_index, hw)
    for attempt in range(64):
        rng = np.random.default_rng(derive_seed("prototype", task_index, class_idx, attempt))
        cand = np.clip(base + _render_delta(rng, hw), 10.0, 245.0)
        if all(np.linalg.norm(cand - p) > _PROTO_MIN_DIST for p in earlier):
            return cand
    raise RuntimeError("could not place a sufficiently distinct prototype")


_MAX_CLASSES = 10  # prototype table width; tasks may use any classes <= this


def make_synthetic_task(task_index: int, classes: int, n_per_class: int, seed: int,
                        split=(0.6, 0.2, 0.2), hw: int = 16) -> TaskDataset:
    """Class-conditional 16x16 grayscale task: a shared per-task base pattern,
    per-class deviations from it, and gaussian pixel noise.  Prototype identity
    depends only on the task index and class, so different seeds resample noise
    over the same patterns and different tasks never share patterns."""
    if classes < 2:
        raise ValueError("a task needs at least 2 classes")
    if classes > _MAX_CLASSES:
        raise ValueError(f"at most {_MAX_CLASSES} classes per task")
    rng = np.random.default_rng(derive_seed("synthetic", task_index, seed))
    n_train = round(n_per_class * split[0])
    n_valid = round(n_per_class * split[1])
    n_test = n_per_class - n_train - n_valid

    protos = np.stack([_prototype(task_index, c, hw) for c in range(classes)])
    images, labels = [], []
    for c in range(classes):
        noise = rng.normal(0.0, SYNTHETIC_NOISE_STD, size=(n_per_class, hw, hw))
        images.append(np.clip(np.rint(protos[c] + noise), 0.0, 255.0))
        labels.append(np.full(n_per_class, c, dtype=np.int64))
    images = np.concatenate(images).astype(np.float32)[:, None, :, :]
    labels = np.concatenate(labels)

    def part(offset, length):
        # per-class contiguous blocks; take the same slice from each block
        return np.concatenate(
            [np.arange(k * n_per_class + offset, k * n_per_class + offset + length)
             for k in range(classes)])

    return TaskDataset(
        task_index=task_index,
        classes=classes,
        images=images,
        labels=labels,
        train_idx=part(0, n_train),
        valid_idx=part(n_train, n_valid),
        test_idx=part(n_train + n_valid, n_test),
        flip_lr=False,
        name=f"synthetic-{task_index}",
        prototypes=protos[:, None, :, :].astype(np.float32),
    )


# -- preprocessing -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    crop_to: int
    flip_lr: bool = False
    brightness_delta: float = 63.0
    contrast_range: Tuple[float, float] = (0.2, 1.8)
    pad_to: int = 0     # edge-pad the source up to this extent before cropping

    def __post_init__(self):
        lo, hi = self.contrast_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad contrast range {self.contrast_range}")
        if self.brightness_delta < 0:
            raise ValueError("brightness_delta must be non-negative")


@dataclass(frozen=True)
class AugmentDraw:
    """The random choices for one image, in a fixed draw order."""

    crop_y: int
    crop_x: int
    flip: bool
    brightness: float
    contrast: float


def augment_params(cfg: AugmentConfig, source_hw: int, seed: int) -> AugmentDraw:
    rng = np.random.default_rng(seed)
    extent = max(cfg.pad_to, source_hw)
    margin = extent - cfg.crop_to
    if margin < 0:
        raise ValueError(f"cannot crop {extent} down to {cfg.crop_to}")
    crop_y = int(rng.integers(margin + 1))
    crop_x = int(rng.integers(margin + 1))
    flip = bool(rng.integers(2)) if cfg.flip_lr else False
    lo, hi = cfg.contrast_range
    return AugmentDraw(
        crop_y=crop_y,
        crop_x=crop_x,
        flip=flip,
        brightness=float(rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)),
        contrast=float(rng.uniform(lo, hi)),
    )


def apply_augment(img: np.ndarray, cfg: AugmentConfig, draw: AugmentDraw) -> np.ndarray:
    x = np.asarray(img, dtype=np.float32)
    hw = x.shape[-1]
    if cfg.pad_to > hw:
        p = cfg.pad_to - hw
        x = np.pad(x, ((0, 0), (p // 2, p - p // 2), (p // 2, p - p // 2)), mode="edge")
    x = x[:, draw.crop_y : draw.crop_y + cfg.crop_to, draw.crop_x : draw.crop_x + cfg.crop_to]
    if draw.flip:
        x = x[:, :, ::-1]
    x = x + np.float32(draw.brightness)
    if draw.contrast != 1.0:
        m = np.float32(x.mean())
        x = (x - m) * np.float32(draw.contrast) + m
    return standardize(x)


def augment_train_image(img: np.ndarray, cfg: AugmentConfig, seed: int) -> np.ndarray:
    """Random crop, optional flip, brightness, contrast, standardization."""
    return apply_augment(img, cfg, augment_params(cfg, img.shape[-1], seed))


def augment_batch(images: np.ndarray, item_indices: np.ndarray, cfg: AugmentConfig,
                  global_seed: int, epoch: int) -> np.ndarray:
    """Augment a batch with the per-item seed contract: each item's draw is
    hash(global_seed, epoch, item_index), independent of batch composition."""
    out = np.empty(
        (len(item_indices), images.shape[1], cfg.crop_to, cfg.crop_to), dtype=np.float32)
    for row, item in enumerate(item_indices):
        seed = derive_seed(global_seed, epoch, int(item))
        out[row] = augment_train_image(images[item], cfg, seed)
    return out


def preprocess_eval_image(img: np.ndarray, crop_to: Optional[int] = None) -> np.ndarray:
    """Center crop (when requested) followed by standardization."""
    x = np.asarray(img, dtype=np.float32)
    if crop_to is not None and x.shape[-1] != crop_to:
        off_y = (x.shape[-2] - crop_to) // 2
        off_x = (x.shape[-1] - crop_to) // 2
        x = x[..., off_y : off_y + crop_to, off_x : off_x + crop_to]
    return standardize(x)


def preprocess_eval_batch(images: np.ndarray, crop_to: Optional[int] = None) -> np.ndarray:
    """Vectorized center crop + per-image standardization for [n,c,h,w]."""
    x = np.asarray(images, dtype=np.float32)
    if crop_to is not None and x.shape[-1] != crop_to:
        off_y = (x.shape[-2] - crop_to) // 2
        off_x = (x.shape[-1] - crop_to) // 2
        x = x[..., off_y : off_y + crop_to, off_x : off_x + crop_to]
    flat = x.reshape(len(x), -1).astype(np.float64)
    mean = flat.mean(axis=1, keepdims=True)
    std = np.maximum(flat.std(axis=1, keepdims=True), 1.0 / np.sqrt(flat.shape[1]))
    out = (flat - mean) / std
    return out.astype(np.float32).reshape(x.shape)


def standardize(img: np.ndarray) -> np.ndarray:
    """(img - mean) / max(std, 1/sqrt(pixels)), over all elements."""
    x = np.asarray(img, dtype=np.float32).astype(np.float64)
    mean = x.mean()
    std = x.std()
    floor = 1.0 / np.sqrt(x.size)
    return ((x - mean) / max(std, floor)).astype(np.float32)
