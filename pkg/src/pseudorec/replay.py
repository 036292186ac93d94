"""Replay-set construction: generated pseudo-items, noise baselines, raw
rehearsal mixes for the generator, and the fixed-budget rote buffer."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor
from .checkpoint import load_checkpoint
from .data import TaskDataset, derive_seed, one_hot, preprocess_eval_batch
from .errors import CheckpointInvalid
from .layers import ModelSpec, Network
from .training import TrainSource


class FrozenClassifier:
    """A read-only copy of a classifier used to label replay items.

    Copies the network state up front, so continued training of the source
    model cannot drift the labels.
    """

    def __init__(self, net: Network):
        self._net = net

    @classmethod
    def from_network(cls, net: Network) -> "FrozenClassifier":
        clone = net.spec.build(seed=0, dtype=net.dtype)
        clone.load_state_arrays(net.state_arrays())
        return cls(clone)

    @classmethod
    def from_checkpoint(cls, path, spec: ModelSpec) -> "FrozenClassifier":
        ckpt = load_checkpoint(path)
        net = spec.build(seed=0)
        try:
            net.load_state_arrays(ckpt.tensors)
        except KeyError as e:
            raise CheckpointInvalid(f"{path}: missing tensor {e.args[0]}") from None
        return cls(net)

    @property
    def output_units(self) -> int:
        return self._net.spec.output_shape[0]

    def predict_probs(self, images_std: np.ndarray, batch_size: int = 512) -> np.ndarray:
        out = []
        for lo in range(0, len(images_std), batch_size):
            x = Tensor(images_std[lo : lo + batch_size])
            out.append(self._net.forward(x, train=False).data)
        return np.concatenate(out)


def generate_pseudo_images(gen: Network, count: int, seed: int,
                           batch_size: int = 256) -> np.ndarray:
    """Sample the generator and map tanh output to raw byte range [0, 255]."""
    rng = np.random.default_rng(derive_seed(seed, "generate"))
    zdim = gen.spec.input_shape[0]
    out = []
    remaining = count
    while remaining > 0:
        b = min(batch_size, remaining)
        z = rng.standard_normal((b, zdim)).astype(np.float32)
        imgs = gen.forward(Tensor(z), train=False).data
        out.append((imgs + 1.0) * 127.5)
        remaining -= b
    return np.concatenate(out)


def label_pseudo_images(clf: FrozenClassifier, images_raw: np.ndarray,
                        crop_to: int) -> Tuple[np.ndarray, np.ndarray]:
    """Soft targets (full output rows) and hard argmax labels for raw images."""
    std = preprocess_eval_batch(images_raw, crop_to)
    soft = clf.predict_probs(std)
    return soft, soft.argmax(axis=1)


def build_pseudo_source(gen: Network, clf: FrozenClassifier, n_train: int,
                        n_valid: int, crop_to: int, seed: int,
                        name: str = "pseudo") -> TrainSource:
    """Generated items with the frozen model's soft responses as targets.

    Items arrive standardized (generated replay gets no per-epoch
    distortion), split into train and validation blocks.
    """
    raw = generate_pseudo_images(gen, n_train + n_valid, seed)
    std = preprocess_eval_batch(raw, crop_to)
    soft, _ = label_pseudo_images(clf, raw, crop_to)
    return TrainSource(
        name=name,
        images=std[:n_train],
        targets=soft[:n_train].astype(np.float32),
        augment=False,
        valid_images=std[n_train:],
        valid_targets=soft[n_train:].astype(np.float32),
    )


def build_noise_source(clf: FrozenClassifier, n_train: int, n_valid: int,
                       image_shape: Tuple[int, int, int], crop_to: int,
                       seed: int, name: str = "noise") -> TrainSource:
    """Uniform byte noise labeled by the frozen model; the degenerate stand-in
    for a generator, used to isolate what structured samples contribute."""
    rng = np.random.default_rng(derive_seed(seed, "noise"))
    raw = rng.integers(0, 256, size=(n_train + n_valid, *image_shape)).astype(np.float32)
    std = preprocess_eval_batch(raw, crop_to)
    soft = clf.predict_probs(std)
    return TrainSource(
        name=name,
        images=std[:n_train],
        targets=soft[:n_train].astype(np.float32),
        augment=False,
        valid_images=std[n_train:],
        valid_targets=soft[n_train:].astype(np.float32),
    )


def build_gan_training_set(gen: Optional[Network], real_images_raw: np.ndarray,
                           total: int, task_index: int, seed: int) -> np.ndarray:
    """Images in [-1, 1] for the generator's next fit.

    First task: the real images alone (resampled to the requested size).
    Later: half real from the current task, half drawn fresh from the
    generator itself, so one generator keeps covering everything it ever
    learned without storing old data.
    """
    rng = np.random.default_rng(derive_seed(seed, "gan-mix", task_index))

    def sample_real(n):
        idx = rng.choice(len(real_images_raw), size=n, replace=len(real_images_raw) < n)
        return real_images_raw[idx].astype(np.float32) / 127.5 - 1.0

    if task_index == 0 or gen is None:
        return sample_real(total)
    half = total // 2
    fakes_raw = generate_pseudo_images(gen, total - half, derive_seed(seed, "gan-mix-fake", task_index))
    fakes = fakes_raw.astype(np.float32) / 127.5 - 1.0
    mix = np.concatenate([sample_real(half), fakes])
    return mix[rng.permutation(len(mix))]


def build_rote_source(past_tasks: Sequence[TaskDataset], budget: int,
                      classes_per_task: int, total_units: int, seed: int,
                      augment_cfg, crop_to: int,
                      train_fraction: float = 0.75) -> Tuple[TrainSource, int]:
    """Fixed-budget raw-image buffer spread evenly over past tasks.

    Each task's share comes from the head of one fixed per-task permutation,
    so shares shrink to nested subsets as more tasks arrive and the footprint
    never grows.  Within each share the leading fraction trains with
    per-epoch distortions, the rest validates.  Returns the source plus the
    stored-image count.
    """
    if not past_tasks:
        raise ValueError("rote buffer needs at least one completed task")
    t = len(past_tasks)
    base, rem = divmod(budget, t)
    tr_i, tr_t, va_i, va_t = [], [], [], []
    for k, task in enumerate(past_tasks):
        share = min(base + (1 if k < rem else 0), len(task.train_idx))
        order = np.random.default_rng(derive_seed(seed, "rote", task.task_index)).permutation(
            len(task.train_idx))
        take = task.train_idx[order[:share]]
        images = task.images[take]
        targets = one_hot(task.labels[take] + task.task_index * classes_per_task,
                          total_units)
        n_train = round(len(take) * train_fraction)
        tr_i.append(images[:n_train])
        tr_t.append(targets[:n_train])
        va_i.append(images[n_train:])
        va_t.append(targets[n_train:])
    stored = sum(len(a) for a in tr_i) + sum(len(a) for a in va_i)
    source = TrainSource(
        name="rote",
        images=np.concatenate(tr_i),
        targets=np.concatenate(tr_t).astype(np.float32),
        augment=True,
        augment_cfg=augment_cfg,
        valid_images=preprocess_eval_batch(np.concatenate(va_i), crop_to),
        valid_targets=np.concatenate(va_t).astype(np.float32),
    )
    return source, stored
