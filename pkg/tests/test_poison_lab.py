import numpy as np
import pytest

from conftest import SMALL_CNN
from errors import ConfigError, DataError, ShapeMismatchError
from net_model import TrainConfig, build_network
from poison_lab import (AngularDeviationObjective, ImageDataset, ImageSample, PoisonSpec, SyntheticDatasetConfig,
                        TriggerSpec, analysis_layers, apply_blended_trigger, apply_patch_trigger, gen_synthetic_dataset,
                        make_poisoned_test_set, poison_train_set, stamp_trigger, train_adaptive)
from trainer import train


@pytest.fixture(scope='module')
def default_data():
    return gen_synthetic_dataset(SyntheticDatasetConfig())


def test_synthetic_dataset_shape_and_balance(default_data):
    train_set, test_set = default_data
    assert len(train_set) == 2000 and len(test_set) == 500
    assert train_set.image_shape == (3, 16, 16)
    assert train_set.class_counts().tolist() == [200] * 10
    assert test_set.class_counts().tolist() == [50] * 10
    assert train_set.images.min() >= 0 and train_set.images.max() <= 1


def test_synthetic_dataset_is_seeded():
    cfg = SyntheticDatasetConfig(num_classes=3, image_size=8, train_count=30, test_count=9, seed=5)
    a, _ = gen_synthetic_dataset(cfg)
    b, _ = gen_synthetic_dataset(cfg)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_noise_free_samples_of_a_class_are_identical():
    cfg = SyntheticDatasetConfig(num_classes=4, image_size=8, train_count=40, test_count=8, noise_level=0.0)
    train_set, _ = gen_synthetic_dataset(cfg)
    for c in range(4):
        images = train_set.images[train_set.class_indices(c)]
        assert np.all(images == images[0])
    assert not np.array_equal(train_set.images[train_set.class_indices(0)][0],
                              train_set.images[train_set.class_indices(1)][0])



def test_noisy_class_mean_matches_noise_free_motif():
    noisy, _ = gen_synthetic_dataset(SyntheticDatasetConfig(num_classes=4, train_count=800, test_count=8,
                                                            noise_level=0.1, seed=2))
    clean, _ = gen_synthetic_dataset(SyntheticDatasetConfig(num_classes=4, train_count=800, test_count=8,
                                                            noise_level=0.0, seed=2))
    for c in range(4):
        template = clean.images[clean.class_indices(c)][0]
        mean = noisy.images[noisy.class_indices(c)].mean(axis=0)
        np.testing.assert_allclose(mean, template, atol=0.1)


def test_tiny_images_rejected():
    with pytest.raises(DataError):
        gen_synthetic_dataset(SyntheticDatasetConfig(image_size=6))


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        SyntheticDatasetConfig(num_classes=1)


def test_patch_changes_exactly_patch_pixels():
    img = ImageSample(np.zeros((1, 8, 8)), 3)
    trigger = TriggerSpec.square_patch(1, size=2)
    out = apply_patch_trigger(img, trigger)
    changed = np.argwhere(out.pixels != img.pixels)
    assert len(changed) == 4
    assert {tuple(p[1:]) for p in changed} == {(6, 6), (6, 7), (7, 6), (7, 7)}
    assert out.label == 3


def test_patch_is_idempotent():
    img = ImageSample(np.random.default_rng(0).uniform(size=(3, 8, 8)), 0)
    trigger = TriggerSpec.square_patch(3, size=3, value=0.7, anchor=(1, 2))
    once = apply_patch_trigger(img, trigger)
    twice = apply_patch_trigger(once, trigger)
    np.testing.assert_array_equal(once.pixels, twice.pixels)


def test_patch_out_of_bounds_rejected():
    trigger = TriggerSpec.square_patch(1, size=3, anchor=(6, 6))
    with pytest.raises(DataError):
        stamp_trigger(np.zeros((1, 8, 8)), trigger)


def test_patch_channel_mismatch_rejected():
    with pytest.raises(ShapeMismatchError):
        stamp_trigger(np.zeros((3, 8, 8)), TriggerSpec.square_patch(1))


def test_blend_value():
    trigger = TriggerSpec('blended', pattern=np.full((1, 2, 2), 1.0), blend_ratio=0.1)
    out = apply_blended_trigger(ImageSample(np.full((1, 2, 2), 0.4), 0), trigger)
    np.testing.assert_allclose(out.pixels, 0.46, atol=1e-6)


def test_blend_with_identical_pattern_is_identity():
    x = np.random.default_rng(1).uniform(size=(2, 4, 4)).astype(np.float32)
    trigger = TriggerSpec('blended', pattern=x, blend_ratio=0.3)
    np.testing.assert_allclose(stamp_trigger(x, trigger), x, atol=1e-6)


def test_blend_perturbation_bounded_by_ratio():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(50, 3, 8, 8))
    trigger = TriggerSpec.noise_blend((3, 8, 8), ratio=0.1, seed=3)
    assert np.max(np.abs(stamp_trigger(x, trigger) - x)) <= 0.1 + 1e-6


def test_invalid_blend_ratio_rejected():
    with pytest.raises(ConfigError):
        TriggerSpec('blended', pattern=np.zeros((1, 2, 2)), blend_ratio=1.0)


def test_poison_rate_five_percent(default_data):
    train_set, _ = default_data
    spec = PoisonSpec(TriggerSpec.square_patch(3), target_class=0, poison_rate=0.05, seed=1)
    poisoned, indices = poison_train_set(train_set, spec)
    assert len(indices) == 100
    assert len(set(indices.tolist())) == 100
    assert np.all(poisoned.labels[indices] == 0)
    untouched = np.setdiff1d(np.arange(len(train_set)), indices)
    np.testing.assert_array_equal(poisoned.images[untouched], train_set.images[untouched])
    np.testing.assert_array_equal(poisoned.ground_truth, train_set.labels)


def test_poison_count_rounds_up_to_one():
    ds = ImageDataset(np.zeros((20, 1, 8, 8)), np.arange(20) % 2, 2)
    _, indices = poison_train_set(ds, PoisonSpec(TriggerSpec.square_patch(1), 1, 0.05))
    assert len(indices) == 1


def test_too_small_poison_rate_rejected():
    ds = ImageDataset(np.zeros((10, 1, 8, 8)), np.arange(10) % 2, 2)
    with pytest.raises(DataError):
        poison_train_set(ds, PoisonSpec(TriggerSpec.square_patch(1), 1, 0.05))


def test_poisoning_is_seeded(default_data):
    train_set, _ = default_data
    spec = PoisonSpec(TriggerSpec.square_patch(3), target_class=2, poison_rate=0.1, seed=9)
    _, a = poison_train_set(train_set, spec)
    _, b = poison_train_set(train_set, spec)
    np.testing.assert_array_equal(a, b)


def test_target_class_out_of_range(default_data):
    with pytest.raises(DataError):
        poison_train_set(default_data[0], PoisonSpec(TriggerSpec.square_patch(3), 10, 0.1))


def test_poisoned_test_set_excludes_target_class(default_data):
    _, test_set = default_data
    spec = PoisonSpec(TriggerSpec.square_patch(3), target_class=0, poison_rate=0.1)
    poisoned = make_poisoned_test_set(test_set, spec)
    assert len(poisoned) == 450
    assert np.all(poisoned.ground_truth != 0)
    assert poisoned.target_class == 0
    assert np.all(poisoned.images[:, :, 14:, 14:] == 1.0)


def test_analysis_layers():
    assert analysis_layers(6) == [3, 4, 5, 6]
    assert analysis_layers(4) == [2, 3, 4]


def test_train_adaptive_beta_zero_matches_plain_training(tiny_data):
    train_set, _ = tiny_data
    spec = PoisonSpec(TriggerSpec.square_patch(2), target_class=1, poison_rate=0.1, seed=2)
    poisoned, indices = poison_train_set(train_set, spec)
    net = build_network(SMALL_CNN, (2, 8, 8), 3, seed=0)
    config = TrainConfig(epochs=2, batch_size=16, lr_decay_epochs=[], seed=1)
    adaptive = train_adaptive(net, poisoned, indices, 1, 0.0, config)
    plain, _ = train(net, poisoned, config)
    assert adaptive.same_weights(plain)


def test_train_adaptive_changes_weights_for_positive_beta(tiny_data):
    train_set, _ = tiny_data
    spec = PoisonSpec(TriggerSpec.square_patch(2), target_class=1, poison_rate=0.1, seed=2)
    poisoned, indices = poison_train_set(train_set, spec)
    net = build_network(SMALL_CNN, (2, 8, 8), 3, seed=0)
    config = TrainConfig(epochs=2, batch_size=16, lr_decay_epochs=[], seed=1)
    adaptive = train_adaptive(net, poisoned, indices, 1, 0.5, config)
    plain, _ = train(net, poisoned, config)
    assert not adaptive.same_weights(plain)


def test_train_adaptive_rejects_bad_beta(tiny_data):
    train_set, _ = tiny_data
    net = build_network(SMALL_CNN, (2, 8, 8), 3, seed=0)
    with pytest.raises(ConfigError):
        train_adaptive(net, train_set, [0], 1, 1.5, TrainConfig(epochs=1))


def test_angular_deviation_counts_poisoned_rows_only():
    mask = np.array([True, False, True])
    objective = AngularDeviationObjective(np.zeros((3, 2), np.float32), np.array([1]), mask, [1], beta=0.5)
    objective.centroids = {1: np.array([1.0, 0.0])}
    taps = [np.array([[0.0, 2.0], [5.0, 0.0], [3.0, 0.0]], dtype=np.float32)]
    loss, grads = objective.extra_terms(np.arange(3), taps)
    # 第 0 行与质心正交、第 2 行同向，按投毒行数平均
    assert loss == pytest.approx(0.5)
    np.testing.assert_allclose(grads[1][0], [-0.25, 0.0], atol=1e-7)
    np.testing.assert_allclose(grads[1][1:], 0.0, atol=1e-7)
