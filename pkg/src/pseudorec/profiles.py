"""Configuration profiles: the full-scale setting and a desk-scale mini setting.

A :class:`Profile` bundles every constant a run needs — image geometry, model
widths, optimizer settings, replay sizes — so conditions differ only in their
objective, never in hidden defaults.  Individual fields can be overridden per
run through :func:`with_overrides`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass(frozen=True)
class Profile:
    name: str

    # image geometry
    image_channels: int
    source_hw: int          # stored image extent
    crop_hw: int            # classifier input extent after cropping
    pad_to: int             # pad source to this extent before random crop (0 = none)
    gan_hw: int             # generator output extent

    # task structure
    classes_per_task: int
    num_tasks: int

    # synthetic task sizes (per class); real datasets come from manifests
    train_per_class: int
    valid_per_class: int
    test_per_class: int

    # classifier architecture
    conv_filters: tuple
    conv_kernel: int
    pool_window: int
    pool_stride: int
    dense_units: tuple

    # GAN architecture
    latent_dim: int
    gen_project_channels: int
    gen_project_hw: int
    gen_channels: tuple     # intermediate deconv widths; final layer emits image channels
    disc_channels: tuple
    gan_kernel: int
    mbd_kernels: int        # minibatch-discrimination B
    mbd_dims: int           # minibatch-discrimination C
    leak_slope: float

    # classifier optimization
    batch_size: int
    lr_first_task: float
    lr_later_tasks: float
    adam_beta1: float
    adam_beta2: float
    adam_eps: float
    patience: int
    max_epochs: int

    # GAN optimization
    gan_batch_size: int
    gan_lr: float
    gan_beta1: float
    gan_epochs: int
    gan_rehearsal_size: int

    # replay buffers
    pseudo_train_size: int
    pseudo_valid_size: int

    # elastic penalty
    ewc_lambda: float
    ewc_c10_lambda: float
    fisher_samples: int

    # rote memorization buffer (train:valid split is 3:1)
    rote_buffer_size: int

    # augmentation ranges
    brightness_delta: float
    contrast_lo: float
    contrast_hi: float

    @property
    def joint_output_units(self) -> int:
        return self.classes_per_task * self.num_tasks


PAPER = Profile(
    name="paper",
    image_channels=3,
    source_hw=32,
    crop_hw=24,
    pad_to=0,
    gan_hw=32,
    classes_per_task=10,
    num_tasks=3,
    train_per_class=3750,
    valid_per_class=1250,
    test_per_class=1000,
    conv_filters=(128, 128, 256, 256),
    conv_kernel=3,
    pool_window=3,
    pool_stride=2,
    dense_units=(512, 384),
    latent_dim=100,
    gen_project_channels=512,
    gen_project_hw=4,
    gen_channels=(256, 128),
    disc_channels=(64, 128, 256),
    gan_kernel=5,
    mbd_kernels=32,
    mbd_dims=8,
    leak_slope=0.2,
    batch_size=512,
    lr_first_task=1e-3,
    lr_later_tasks=1e-4,
    adam_beta1=0.9,
    adam_beta2=0.999,
    adam_eps=1e-8,
    patience=10,
    max_epochs=500,
    gan_batch_size=128,
    gan_lr=2e-4,
    gan_beta1=0.5,
    gan_epochs=50,
    gan_rehearsal_size=50_000,
    pseudo_train_size=37_500,
    pseudo_valid_size=12_500,
    ewc_lambda=270.0,
    ewc_c10_lambda=267.0,
    fisher_samples=2000,
    rote_buffer_size=1500,
    brightness_delta=63.0,
    contrast_lo=0.2,
    contrast_hi=1.8,
)

# Desk-scale twin: same topology and protocol, widths cut ~8x, 16x16 synthetic
# tasks.  rote_buffer_size keeps the generator-parameter parity rule: the mini
# generator holds 136,929 floats, and 536 grayscale 16x16 images is the nearest
# image count of equivalent byte size divisible by 4 (for the 3:1 split).
MINI = Profile(
    name="mini",
    image_channels=1,
    source_hw=16,
    crop_hw=16,
    pad_to=20,
    gan_hw=16,
    classes_per_task=5,
    num_tasks=3,
    train_per_class=300,
    valid_per_class=100,
    test_per_class=100,
    conv_filters=(16, 16, 32, 32),
    conv_kernel=3,
    pool_window=3,
    pool_stride=2,
    dense_units=(64, 48),
    latent_dim=100,
    gen_project_channels=64,
    gen_project_hw=4,
    gen_channels=(32,),
    disc_channels=(16, 32),
    gan_kernel=4,
    mbd_kernels=8,
    mbd_dims=4,
    leak_slope=0.2,
    batch_size=128,
    lr_first_task=1e-3,
    lr_later_tasks=1e-4,
    adam_beta1=0.9,
    adam_beta2=0.999,
    adam_eps=1e-8,
    patience=10,
    max_epochs=100,
    gan_batch_size=128,
    gan_lr=2e-4,
    gan_beta1=0.5,
    gan_epochs=15,
    gan_rehearsal_size=4000,
    pseudo_train_size=3000,
    pseudo_valid_size=1000,
    ewc_lambda=270.0,
    ewc_c10_lambda=267.0,
    fisher_samples=500,
    rote_buffer_size=536,
    brightness_delta=63.0,
    contrast_lo=0.2,
    contrast_hi=1.8,
)

PROFILES = {"paper": PAPER, "mini": MINI}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def with_overrides(profile: Profile, **overrides) -> Profile:
    """Copy of ``profile`` with the given fields replaced."""
    return dataclasses.replace(profile, **overrides)
