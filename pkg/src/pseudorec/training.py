"""Optimization loop: Adam, replay-aware batch mixing, early stopping, GAN training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, backward, mean, softplus
from .data import AugmentConfig, augment_batch, derive_seed, preprocess_eval_batch
from .errors import OddBatch, ShapeMismatch
from .layers import Network
from .losses import cross_entropy
from .profiles import Profile

NamedParams = List[Tuple[str, Tensor]]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class Adam:
    """Adam with bias correction. Moment buffers follow each parameter's dtype."""

    params: NamedParams
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params:
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def step(self) -> None:
        adam_step(self.params, self)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def adam_step(params: NamedParams, state: Adam) -> None:
    """Apply one update in place. A missing gradient counts as zero, so the
    step counter and moment decay still advance for every parameter."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# Batch composition


def mix_minibatch(n_new: int, n_replay_sources: int, batch_size: int,
                  task_index: int) -> Tuple[int, List[int]]:
    """Split one minibatch between the current task and replay sources.

    Returns (new_count, [per-source replay counts]).  On the first task, or
    when nothing is replayed, the whole batch comes from the current task.
    With replay present the batch must split evenly in half; the replay half
    is spread across sources as evenly as possible.
    """
    if task_index == 0 or n_replay_sources == 0:
        return batch_size, [0] * n_replay_sources
    if batch_size % 2 != 0:
        raise OddBatch(f"batch size {batch_size} cannot split between new and replay halves")
    half = batch_size // 2
    base, rem = divmod(half, n_replay_sources)
    counts = [base + (1 if i < rem else 0) for i in range(n_replay_sources)]
    return half, counts


class SourceCycler:
    """Endless without-replacement index stream; reshuffles after each pass."""

    def __init__(self, n: int, seed: int):
        if n < 1:
            raise ValueError("cannot cycle over an empty source")
        self.n = n
        self._rng = np.random.default_rng(seed)
        self._order = self._rng.permutation(n)
        self._pos = 0

    def take(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        filled = 0
        while filled < count:
            avail = self.n - self._pos
            grab = min(avail, count - filled)
            out[filled : filled + grab] = self._order[self._pos : self._pos + grab]
            self._pos += grab
            filled += grab
            if self._pos == self.n:
                self._order = self._rng.permutation(self.n)
                self._pos = 0
        return out


# ---------------------------------------------------------------------------
# Training sources and the per-epoch loop


@dataclass
class TrainSource:
    """One stream of (image, target) pairs feeding the objective.

    Raw uint8-range images get per-epoch augmentation; pre-standardized
    images (generated replay) pass through untouched.
    """

    name: str
    images: np.ndarray            # [n,c,h,w]; raw [0,255] floats/uint8 or standardized
    targets: np.ndarray           # [n,K] float32 rows
    augment: bool = True
    augment_cfg: Optional[AugmentConfig] = None
    valid_images: Optional[np.ndarray] = None   # standardized, eval-ready
    valid_targets: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.images) != len(self.targets):
            raise ShapeMismatch(f"{self.name}: {len(self.images)} images vs {len(self.targets)} target rows")
        if self.augment and self.augment_cfg is None:
            raise ValueError(f"{self.name}: augmentation requested without a config")

    def __len__(self):
        return len(self.images)

    def batch(self, idx: np.ndarray, epoch: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.augment:
            x = augment_batch(self.images, idx, self.augment_cfg, seed, epoch)
        else:
            x = self.images[idx]
        return x, self.targets[idx]


LossBuilder = Callable[[Dict[str, Tuple[np.ndarray, np.ndarray]]], Tensor]


def train_epoch(model: Network, sources: Sequence[TrainSource], loss_builder: LossBuilder,
                optimizer: Adam, batch_size: int, task_index: int, epoch: int,
                run_seed: int, replay_cyclers: Dict[str, SourceCycler]) -> Dict[str, float]:
    """One pass over the current task (sources[0]); replay sources cycle.

    Step count is ceil(n_new / per-step new quota), so every new-task item is
    visited exactly once per epoch while replay streams advance independently.
    """
    new = sources[0]
    replay = list(sources[1:])
    new_quota, replay_counts = mix_minibatch(len(new), len(replay), batch_size, task_index)

    order = np.random.default_rng(derive_seed(run_seed, "order", new.name, epoch)).permutation(len(new))
    steps = math.ceil(len(new) / new_quota)
    loss_sum = 0.0
    for step in range(steps):
        new_idx = order[step * new_quota : (step + 1) * new_quota]
        batches = {new.name: new.batch(new_idx, epoch, derive_seed(run_seed, "aug", new.name))}
        if replay_counts and new_idx.size:
            # keep the halves balanced when the final new-side slice runs short
            scale = new_idx.size / new_quota
            for src, quota in zip(replay, replay_counts):
                count = max(1, round(quota * scale)) if quota else 0
                if count:
                    idx = replay_cyclers[src.name].take(count)
                    batches[src.name] = src.batch(idx, epoch, derive_seed(run_seed, "aug", src.name))
        loss = loss_builder(batches)
        model.zero_grad()
        backward(loss)
        optimizer.step()
        loss_sum += float(loss.data)
    return {"train_loss": loss_sum / steps, "steps": steps}


def validation_loss(model: Network, sources: Sequence[TrainSource],
                    extra: Callable[[], float] = None, batch_size: int = 512) -> float:
    """Sum of per-source validation cross-entropies (eval mode), plus any
    extra penalty term (e.g. a quadratic anchor) evaluated once."""
    total = 0.0
    for src in sources:
        if src.valid_images is None:
            continue
        n = len(src.valid_images)
        nll = 0.0
        for lo in range(0, n, batch_size):
            x = src.valid_images[lo : lo + batch_size]
            t = src.valid_targets[lo : lo + batch_size]
            probs = model.forward(Tensor(x), train=False)
            nll += float(cross_entropy(probs, Tensor(t)).data) * len(x)
        total += nll / n
    if extra is not None:
        total += extra()
    return total


# ---------------------------------------------------------------------------
# Early stopping


@dataclass
class FitResult:
    best_epoch: int
    best_valid_loss: float
    epochs_run: int
    history: List[Dict[str, float]]


def early_stop_loop(model: Network, run_epoch: Callable[[int], Dict[str, float]],
                    valid_fn: Callable[[], float], patience: int, max_epochs: int,
                    on_epoch: Callable[[int, Dict[str, float]], None] = None) -> FitResult:
    """Train until validation loss stops improving (strict) for `patience`
    epochs or the cap is hit, then restore the best weights into `model`."""
    best_loss = math.inf
    best_state = {k: v.copy() for k, v in model.state_arrays().items()}
    best_epoch = 0
    since_best = 0
    history = []
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        stats = run_epoch(epoch)
        vloss = valid_fn()
        stats = dict(stats, valid_loss=vloss, epoch=epoch)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(epoch, stats)
        if vloss < best_loss:
            best_loss = vloss
            best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    model.load_state_arrays(best_state)
    return FitResult(best_epoch=best_epoch, best_valid_loss=best_loss,
                     epochs_run=epoch, history=history)


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_accuracy(model: Network, images: np.ndarray, labels: np.ndarray,
                      task_index: int, classes_per_task: int, crop_to: int,
                      head: str = "joint", batch_size: int = 512) -> float:
    """Top-1 accuracy on raw test images.

    joint: the model predicts over every task's output units and must pick
    the unit belonging to this task and class.  shared: only this task's
    block of units competes (task identity given).
    """
    if head not in ("joint", "shared"):
        raise ValueError(f"unknown head mode: {head}")
    hits = 0
    lo_unit = task_index * classes_per_task
    for lo in range(0, len(images), batch_size):
        x = preprocess_eval_batch(images[lo : lo + batch_size], crop_to)
        probs = model.forward(Tensor(x), train=False).data
        want = labels[lo : lo + batch_size]
        if head == "joint":
            pred = probs.argmax(axis=1)
            hits += int((pred == lo_unit + want).sum())
        else:
            block = probs[:, lo_unit : lo_unit + classes_per_task]
            hits += int((block.argmax(axis=1) == want).sum())
    return hits / len(images)


# ---------------------------------------------------------------------------
# GAN training


def train_gan(gen: Network, disc: Network, images: np.ndarray, profile: Profile,
              seed: int, epochs: Optional[int] = None,
              sample_hook: Callable[[int, np.ndarray], None] = None,
              grid_every: int = 5) -> List[Dict[str, float]]:
    """Alternating discriminator/generator updates on images scaled to [-1,1].

    Fresh Adam state per call; partial trailing batches are dropped.  Returns
    per-epoch stats; `sample_hook(epoch, fakes01)` fires every `grid_every`
    epochs and at the end with a fixed probe batch mapped back to [0,255].
    """
    epochs = profile.gan_epochs if epochs is None else epochs
    b = profile.gan_batch_size
    if len(images) < b:
        raise ValueError(f"need at least {b} images to form one batch, got {len(images)}")
    opt_d = Adam(disc.parameters(), lr=profile.gan_lr, beta1=profile.gan_beta1)
    opt_g = Adam(gen.parameters(), lr=profile.gan_lr, beta1=profile.gan_beta1)
    rng = np.random.default_rng(derive_seed(seed, "gan"))
    zdim = profile.latent_dim
    probe_z = rng.standard_normal((64, zdim)).astype(np.float32)

    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(images))
        d_losses, g_losses, d_accs = [], [], []
        for lo in range(0, len(images) - b + 1, b):
            real = images[order[lo : lo + b]].astype(np.float32, copy=False)

            # discriminator step on real batch + detached fakes
            z = rng.standard_normal((b, zdim)).astype(np.float32)
            fake_detached = gen.forward(Tensor(z), train=True).data
            real_logit = disc.forward(Tensor(real), train=True)
            fake_logit = disc.forward(Tensor(fake_detached), train=True)
            d_loss = mean(softplus(-real_logit)) + mean(softplus(fake_logit))
            disc.zero_grad()
            gen.zero_grad()
            backward(d_loss)
            opt_d.step()
            d_accs.append(0.5 * (float((real_logit.data > 0).mean())
                                 + float((fake_logit.data < 0).mean())))
            d_losses.append(float(d_loss.data))

            # generator step on fresh noise through the updated discriminator
            z = rng.standard_normal((b, zdim)).astype(np.float32)
            fake = gen.forward(Tensor(z), train=True)
            g_loss = mean(softplus(-disc.forward(fake, train=True)))
            gen.zero_grad()
            disc.zero_grad()
            backward(g_loss)
            opt_g.step()
            g_losses.append(float(g_loss.data))

        stats = {"epoch": epoch, "d_loss": float(np.mean(d_losses)),
                 "g_loss": float(np.mean(g_losses)), "d_acc": float(np.mean(d_accs))}
        history.append(stats)
        if sample_hook is not None and (epoch % grid_every == 0 or epoch == epochs):
            fakes = gen.forward(Tensor(probe_z), train=False).data
            sample_hook(epoch, (fakes + 1.0) * 127.5)
    return history
