"""Training objectives: cross-entropy and its rehearsal variants, adversarial
losses, and the quadratic importance penalty with its diagonal Fisher."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch

PROB_FLOOR = 1e-12  # clamp inside log; bias on the loss value is < 1e-10

ModelFn = Callable[[Tensor], Tensor]


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean over rows of -sum_k targets * log(probs), with a floor inside log.

    Targets may be one-hot or soft rows; both must be [n, K].
    """
    targets = _as_tensor(targets, dtype=probs.dtype)
    if probs.shape != targets.shape or len(probs.shape) != 2:
        raise ShapeMismatch(f"probs {probs.shape} and targets {targets.shape} "
                            "must both be [n, K]")
    n = probs.shape[0]
    log_p = ad.log(ad.max_const(probs, PROB_FLOOR))
    return (targets * log_p).sum() * (-1.0 / n)


def rehearsal_loss(model: ModelFn, batches: Sequence[Tuple]) -> Tensor:
    """Sum of per-task cross-entropies: one (x, y) batch per task learnt so far."""
    if not batches:
        raise ValueError("rehearsal needs at least one task batch")
    total = None
    for x, y in batches:
        term = cross_entropy(model(_as_tensor(x)), y)
        total = term if total is None else total + term
    return total


def pseudo_rehearsal_loss(model: ModelFn, new_batch: Tuple,
                          pseudo_batches: Sequence[Tuple]) -> Tensor:
    """Cross-entropy on the new task plus cross-entropy on each pseudo batch.

    With no pseudo batches this is exactly plain cross-entropy training.
    """
    x, y = new_batch
    total = cross_entropy(model(_as_tensor(x)), y)
    for px, py in pseudo_batches:
        total = total + cross_entropy(model(_as_tensor(px)), py)
    return total


def gan_losses(d_real_logits: Tensor, d_fake_logits: Tensor) -> Tuple[Tensor, Tensor]:
    """Discriminator and (non-saturating) generator losses from raw logits.

    d_loss = BCE(sigmoid(real), 1) + BCE(sigmoid(fake), 0);
    g_loss = BCE(sigmoid(fake), 1).  Computed with softplus so extreme logits
    stay finite.
    """
    d_loss = ad.softplus(-d_real_logits).mean() + ad.softplus(d_fake_logits).mean()
    g_loss = ad.softplus(-d_fake_logits).mean()
    return d_loss, g_loss


# -- elastic penalty ---------------------------------------------------------


@dataclass
class FisherState:
    """Importance weights and anchor values for one completed task."""

    fisher: Dict[str, np.ndarray]
    anchor: Dict[str, np.ndarray]
    lam: float

    def __post_init__(self):
        for name, f in self.fisher.items():
            if np.any(f < 0):
                raise ValueError(f"fisher values must be non-negative ({name})")
            if f.shape != self.anchor[name].shape:
                raise ShapeMismatch(f"fisher/anchor shapes differ for {name}")


def fisher_diagonal(model, images_std: np.ndarray, n_samples: int, seed: int) -> Dict[str, np.ndarray]:
    """Empirical diagonal Fisher of a model snapshot.

    For each sampled image, backpropagates log p(argmax label | x) in eval
    mode and averages the squared per-sample parameter gradients.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    m = len(images_std)
    idx = rng.choice(m, size=n_samples, replace=n_samples > m)
    params = model.parameters()
    acc = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in params}

    for i in idx:
        model.zero_grad()
        probs = model.forward(Tensor(images_std[int(i)][None]), train=False)
        label = int(np.argmax(probs.data[0]))
        pick = np.zeros(probs.shape, dtype=np.float32)
        pick[0, label] = 1.0
        log_p = (ad.log(ad.max_const(probs, PROB_FLOOR)) * Tensor(pick)).sum()
        log_p.backward()
        for name, p in params:
            if p.grad is not None:
                acc[name] += p.grad.astype(np.float64) ** 2
    model.zero_grad()
    return {name: (a / n_samples).astype(np.float32) for name, a in acc.items()}


def ewc_penalty(model, fisher_states: List[FisherState]) -> Tensor:
    """sum over anchored tasks of (lambda/2) * sum_j F_j (theta_j - theta*_j)^2."""
    params = model.parameters() if hasattr(model, "parameters") else list(model)
    total = None
    for state in fisher_states:
        task_term = None
        for name, p in params:
            f = state.fisher[name]
            a = state.anchor[name]
            if f.shape != p.data.shape:
                raise ShapeMismatch(f"fisher for {name} has shape {f.shape}, "
                                    f"parameter is {p.data.shape}")
            diff = p - Tensor(a, dtype=p.dtype)
            term = (Tensor(f, dtype=p.dtype) * diff * diff).sum()
            task_term = term if task_term is None else task_term + term
        task_term = task_term * (state.lam / 2.0)
        total = task_term if total is None else total + task_term
    if total is None:
        return Tensor(0.0)
    return total
