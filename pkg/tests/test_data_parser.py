import json

import numpy as np
import pytest

from data_parser import DatasetFileParser, manifest_path, serialize_dataset, write_dataset
from errors import DataError
from poison_lab import ImageDataset, PoisonSpec, TriggerSpec, poison_train_set


def small_dataset():
    rng = np.random.default_rng(0)
    return ImageDataset(rng.uniform(size=(12, 2, 8, 8)), np.arange(12) % 3, 3)


def test_dataset_file_round_trip(tmp_path):
    ds = small_dataset()
    path = str(tmp_path / 'train.bin')
    write_dataset(ds, path)
    parser = DatasetFileParser()
    loaded = parser.load_file(path)
    np.testing.assert_array_equal(loaded.images, ds.images)
    np.testing.assert_array_equal(loaded.labels, ds.labels)
    assert loaded.num_classes == 3
    assert parser.get_poison_spec() is None


def test_manifest_restores_poison_information(tmp_path):
    ds = small_dataset()
    spec = PoisonSpec(TriggerSpec.square_patch(2), target_class=2, poison_rate=0.25, seed=1)
    poisoned, indices = poison_train_set(ds, spec)
    path = str(tmp_path / 'poisoned_train.bin')
    mpath = write_dataset(poisoned, path, poison_spec=spec)
    assert mpath == manifest_path(path)

    with open(mpath, encoding='utf-8') as f:
        manifest = json.load(f)
    assert manifest['poison_indices'] == indices.tolist()
    assert manifest['count'] == 12

    parser = DatasetFileParser()
    loaded = parser.load_file(path)
    np.testing.assert_array_equal(loaded.poison_indices, indices)
    np.testing.assert_array_equal(loaded.ground_truth, ds.labels)
    assert loaded.target_class == 2
    restored = parser.get_poison_spec()
    assert restored.poison_rate == 0.25
    np.testing.assert_array_equal(restored.trigger.patch_pixels, spec.trigger.patch_pixels)

    table = parser.class_table()
    assert table['poisoned'].sum() == 3
    assert table.loc[2, 'poisoned'] == 3
    assert parser.get_summary()['poisoned'] == 3


def test_serialization_is_byte_stable():
    assert serialize_dataset(small_dataset()) == serialize_dataset(small_dataset())


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / 'bad.bin'
    path.write_bytes(serialize_dataset(small_dataset())[:-4])
    with pytest.raises(DataError):
        DatasetFileParser().load_file(str(path))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / 'bad.bin'
    path.write_bytes(b'NOTADATA' + b'\x00' * 40)
    with pytest.raises(DataError):
        DatasetFileParser().load_file(str(path))


def test_missing_file_rejected(tmp_path):
    with pytest.raises(DataError):
        DatasetFileParser().load_file(str(tmp_path / 'missing.bin'))


def test_import_nhwc_uint8_arrays(tmp_path):
    images = np.full((4, 8, 8, 3), 255, dtype=np.uint8)
    path = str(tmp_path / 'external.npz')
    np.savez(path, x_train=images, y_train=np.array([0, 1, 1, 0]))
    ds = DatasetFileParser().import_arrays(path)
    assert ds.image_shape == (3, 8, 8)
    assert ds.num_classes == 2
    assert ds.images.max() == pytest.approx(1.0)


def test_summary_without_dataset():
    assert DatasetFileParser().get_summary()['count'] == 0
    with pytest.raises(DataError):
        DatasetFileParser().get_dataset()
