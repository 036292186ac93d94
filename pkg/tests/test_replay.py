import numpy as np
import pytest
from scipy import stats

from pseudorec.autodiff import Tensor
from pseudorec.checkpoint import ModelCheckpoint, save_checkpoint
from pseudorec.data import AugmentConfig, make_synthetic_task, preprocess_eval_batch
from pseudorec.errors import CheckpointInvalid
from pseudorec.layers import build_classifier, build_generator
from pseudorec.profiles import get_profile
from pseudorec.replay import (
    FrozenClassifier,
    build_gan_training_set,
    build_noise_source,
    build_pseudo_source,
    build_rote_source,
    generate_pseudo_images,
    label_pseudo_images,
)

MINI = get_profile("mini")


@pytest.fixture(scope="module")
def frozen_clf():
    net = build_classifier(MINI).build(seed=3)
    return FrozenClassifier.from_network(net)


@pytest.fixture(scope="module")
def small_gen():
    return build_generator(MINI).build(seed=4)


# ---------------------------------------------------------------------------
# FrozenClassifier


def test_frozen_copy_ignores_later_training_of_the_source(frozen_clf):
    net = build_classifier(MINI).build(seed=8)
    clf = FrozenClassifier.from_network(net)
    x = np.random.default_rng(0).standard_normal((4, 1, 16, 16)).astype(np.float32)
    before = clf.predict_probs(x)
    for _, p in net.parameters():
        p.data += 1.0
    np.testing.assert_array_equal(before, clf.predict_probs(x))


def test_predict_probs_rows_sum_to_one(frozen_clf):
    x = np.random.default_rng(1).standard_normal((10, 1, 16, 16)).astype(np.float32)
    probs = frozen_clf.predict_probs(x)
    assert probs.shape == (10, MINI.joint_output_units)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)


def test_from_checkpoint_round_trips(tmp_path, frozen_clf):
    net = build_classifier(MINI).build(seed=3)
    path = tmp_path / "clf.prcl"
    save_checkpoint(ModelCheckpoint(tensors=net.state_arrays()), path)
    restored = FrozenClassifier.from_checkpoint(path, build_classifier(MINI))
    x = np.random.default_rng(2).standard_normal((5, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(frozen_clf.predict_probs(x),
                                  restored.predict_probs(x))


def test_from_checkpoint_missing_tensor_rejected(tmp_path):
    net = build_classifier(MINI).build(seed=3)
    tensors = net.state_arrays()
    tensors.pop(sorted(tensors)[0])
    path = tmp_path / "partial.prcl"
    save_checkpoint(ModelCheckpoint(tensors=tensors), path)
    with pytest.raises(CheckpointInvalid):
        FrozenClassifier.from_checkpoint(path, build_classifier(MINI))


# ---------------------------------------------------------------------------
# Generation and labeling


def test_generated_images_cover_requested_count_and_range(small_gen):
    raw = generate_pseudo_images(small_gen, 70, seed=5, batch_size=32)
    assert raw.shape == (70, 1, 16, 16)
    assert float(raw.min()) >= 0.0 and float(raw.max()) <= 255.0


def test_generation_is_deterministic_and_batch_invariant(small_gen):
    a = generate_pseudo_images(small_gen, 50, seed=5, batch_size=50)
    b = generate_pseudo_images(small_gen, 50, seed=5, batch_size=13)
    np.testing.assert_array_equal(a, b)
    c = generate_pseudo_images(small_gen, 50, seed=6)
    assert not np.array_equal(a, c)


def test_labeling_returns_soft_rows_and_matching_argmax(frozen_clf, small_gen):
    raw = generate_pseudo_images(small_gen, 12, seed=1)
    soft, hard = label_pseudo_images(frozen_clf, raw, crop_to=MINI.crop_hw)
    assert soft.shape == (12, MINI.joint_output_units)
    np.testing.assert_allclose(soft.sum(axis=1), 1.0, atol=1e-5)
    np.testing.assert_array_equal(hard, soft.argmax(axis=1))


def test_soft_targets_equal_frozen_model_responses(frozen_clf, small_gen):
    raw = generate_pseudo_images(small_gen, 8, seed=2)
    soft, _ = label_pseudo_images(frozen_clf, raw, crop_to=MINI.crop_hw)
    std = preprocess_eval_batch(raw, MINI.crop_hw)
    np.testing.assert_array_equal(soft, frozen_clf.predict_probs(std))


# ---------------------------------------------------------------------------
# Pseudo and noise sources


def test_pseudo_source_sizes_match_mini_profile(frozen_clf, small_gen):
    src = build_pseudo_source(small_gen, frozen_clf, MINI.pseudo_train_size,
                              MINI.pseudo_valid_size, MINI.crop_hw, seed=0)
    assert len(src.images) == 3000
    assert len(src.valid_images) == 1000
    assert len(src.images) == 3 * len(src.valid_images)
    assert src.augment is False
    assert src.images.shape[-1] == MINI.crop_hw


def test_pseudo_source_is_deterministic(frozen_clf, small_gen):
    a = build_pseudo_source(small_gen, frozen_clf, 40, 10, MINI.crop_hw, seed=3)
    b = build_pseudo_source(small_gen, frozen_clf, 40, 10, MINI.crop_hw, seed=3)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.targets, b.targets)


def test_pseudo_targets_are_soft_not_one_hot(frozen_clf, small_gen):
    src = build_pseudo_source(small_gen, frozen_clf, 40, 10, MINI.crop_hw, seed=3)
    # an untrained model's responses are diffuse: no row should be degenerate
    assert float(src.targets.max()) < 0.999
    np.testing.assert_allclose(src.targets.sum(axis=1), 1.0, atol=1e-5)


def test_noise_source_bytes_are_uniform(frozen_clf):
    src = build_noise_source(frozen_clf, 200, 50, (1, 16, 16), MINI.crop_hw, seed=9)
    assert len(src.images) == 200 and len(src.valid_images) == 50
    # chi-square on the raw byte histogram of a fresh draw with the same seed
    rng = np.random.default_rng(__import__("pseudorec.data", fromlist=["derive_seed"]).derive_seed(9, "noise"))
    raw = rng.integers(0, 256, size=(250, 1, 16, 16))
    counts = np.bincount(raw.reshape(-1) // 16, minlength=16)
    _, p = stats.chisquare(counts)
    assert p > 1e-4


def test_noise_source_differs_from_generated(frozen_clf, small_gen):
    noise = build_noise_source(frozen_clf, 50, 10, (1, 16, 16), MINI.crop_hw, seed=1)
    pseudo = build_pseudo_source(small_gen, frozen_clf, 50, 10, MINI.crop_hw, seed=1)
    assert not np.array_equal(noise.images, pseudo.images)


# ---------------------------------------------------------------------------
# Generator training mixes


def raw_blobs(n, seed):
    return np.random.default_rng(seed).uniform(0, 255, (n, 1, 16, 16)).astype(np.float32)


def test_first_task_mix_is_all_real():
    real = raw_blobs(120, 0)
    mix = build_gan_training_set(None, real, total=200, task_index=0, seed=4)
    assert mix.shape == (200, 1, 16, 16)
    assert float(mix.min()) >= -1.0 and float(mix.max()) <= 1.0
    # every row maps back to some real image under the byte scaling
    real_scaled = real / 127.5 - 1.0
    flat = real_scaled.reshape(120, -1)
    for row in mix[:20].reshape(20, -1):
        assert (np.abs(flat - row).max(axis=1) < 1e-6).any()


def test_later_task_mix_is_half_generated(small_gen):
    real = raw_blobs(60, 1)
    mix = build_gan_training_set(small_gen, real, total=100, task_index=1, seed=4)
    assert mix.shape == (100, 1, 16, 16)
    real_scaled = (real / 127.5 - 1.0).reshape(60, -1)
    from_real = sum(
        bool((np.abs(real_scaled - row).max(axis=1) < 1e-6).any())
        for row in mix.reshape(100, -1))
    assert from_real == 50


def test_mix_is_deterministic(small_gen):
    real = raw_blobs(60, 1)
    a = build_gan_training_set(small_gen, real, 100, 2, seed=4)
    b = build_gan_training_set(small_gen, real, 100, 2, seed=4)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# Rote buffer


@pytest.fixture(scope="module")
def three_tasks():
    # 150 per class: 450 train items per task, enough for any share below
    return [make_synthetic_task(t, classes=5, n_per_class=150, seed=1)
            for t in range(3)]


def rote_cfg():
    return AugmentConfig(crop_to=16, flip_lr=False, brightness_delta=63.0,
                         contrast_range=(0.2, 1.8), pad_to=20)


def test_rote_buffer_respects_budget_and_split(three_tasks):
    src, stored = build_rote_source(three_tasks[:2], budget=536,
                                    classes_per_task=5, total_units=15,
                                    seed=7, augment_cfg=rote_cfg(), crop_to=16)
    assert stored == 536
    assert len(src.images) + len(src.valid_images) == 536
    # 3:1 train:valid
    ratio = len(src.images) / len(src.valid_images)
    assert ratio == pytest.approx(3.0, rel=0.02)
    assert src.augment is True


def test_rote_shares_are_even_across_tasks(three_tasks):
    src, _ = build_rote_source(three_tasks, budget=90, classes_per_task=5,
                               total_units=15, seed=7, augment_cfg=rote_cfg(),
                               crop_to=16)
    owners = src.targets.argmax(axis=1) // 5
    counts = np.bincount(owners, minlength=3)
    assert counts.max() - counts.min() <= 1


def test_rote_shares_shrink_to_nested_subsets(three_tasks):
    one, _ = build_rote_source(three_tasks[:1], budget=90, classes_per_task=5,
                               total_units=15, seed=7, augment_cfg=rote_cfg(),
                               crop_to=16)
    two, _ = build_rote_source(three_tasks[:2], budget=90, classes_per_task=5,
                               total_units=15, seed=7, augment_cfg=rote_cfg(),
                               crop_to=16)
    # task-0 images kept at budget 90/2 are a subset of those kept at 90/1
    big = {a.tobytes() for a in one.images} | {a.tobytes() for a in one.valid_images}
    kept0 = [a for a, t in zip(two.images, two.targets) if t.argmax() < 5]
    assert all(a.tobytes() in big for a in kept0)


def test_rote_targets_use_global_units(three_tasks):
    src, _ = build_rote_source(three_tasks, budget=60, classes_per_task=5,
                               total_units=15, seed=7, augment_cfg=rote_cfg(),
                               crop_to=16)
    units = src.targets.argmax(axis=1)
    assert units.min() >= 0 and units.max() < 15
    assert len(set(units // 5)) == 3


def test_rote_needs_at_least_one_task():
    with pytest.raises(ValueError):
        build_rote_source([], 100, 5, 15, 0, rote_cfg(), 16)
