import gzip
import os
import pickle
import struct

import matplotlib.pyplot as plt
import numpy as np
import pytest
import torch

from pps_vae.data import (Dataset, batch_indices, batch_iter, load_dataset, normalize_name, resolve_name,
                          synth_shapes)
from pps_vae.errors import IngestionError, UsageError


def _write_idx(path, array):
    header = struct.pack('>BBBB', 0, 0, 0x08, array.ndim) + struct.pack(f'>{array.ndim}I', *array.shape)
    with gzip.open(path, 'wb') as idx_file:
        idx_file.write(header + array.astype(np.uint8).tobytes())


def test_synth_shapes_layout(small_shapes):
    assert small_shapes.images.shape == (64, 1, 8, 8)
    assert small_shapes.images.min() >= 0 and small_shapes.images.max() <= 1
    assert small_shapes.shape_masks.shape == (64, 8, 8)
    assert set(np.unique(small_shapes.labels)) == {0, 1, 2}
    assert small_shapes.num_classes == 3
    assert small_shapes.image_shape == (1, 8, 8)
    assert small_shapes.has_labels


def test_synth_shapes_is_deterministic():
    first = synth_shapes(20, 8, 8, 2, seed=3)
    second = synth_shapes(20, 8, 8, 2, seed=3)
    assert np.array_equal(first.images, second.images)
    assert np.array_equal(first.labels, second.labels)
    assert not np.array_equal(first.images, synth_shapes(20, 8, 8, 2, seed=4).images)


def test_synth_shapes_are_recognisable_by_fill_ratio():
    ds = synth_shapes(600, 32, 32, 3, seed=0)
    predictions = []
    for mask in ds.shape_masks:
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        fill = mask.sum() / ((rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1))
        predictions.append(0 if fill > 0.89 else 1 if fill > 0.66 else 2)
    assert np.mean(np.array(predictions) == ds.labels) > 0.6


def test_synth_shapes_rejects_bad_arguments():
    with pytest.raises(UsageError):
        synth_shapes(10, 4, 8, 3, seed=0)
    with pytest.raises(UsageError):
        synth_shapes(10, 8, 8, 6, seed=0)
    with pytest.raises(UsageError):
        synth_shapes(0, 8, 8, 3, seed=0)


def test_dataset_is_read_only(small_shapes):
    with pytest.raises(ValueError):
        small_shapes.images[0, 0, 0, 0] = 0.5
    subset = small_shapes.subset(np.arange(5))
    assert len(subset) == 5
    assert subset.shape_masks.shape == (5, 8, 8)
    assert small_shapes.tensor([0, 1]).dtype == torch.float32


def test_dataset_validates_pixel_range():
    with pytest.raises(IngestionError):
        Dataset(np.full((1, 1, 2, 2), 2.0, dtype=np.float32), None, 'train', 'bad')
    with pytest.raises(IngestionError):
        Dataset(np.zeros((1, 2, 2), dtype=np.float32), None, 'train', 'bad')


def test_name_resolution():
    assert normalize_name('Fashion-MNIST') == 'fashionmnist'
    assert resolve_name('Synth-Shapes', ['synth_shapes']) == 'synth_shapes'
    assert resolve_name('shapes', ['synth_shapes'], {'shapes': 'synth_shapes'}) == 'synth_shapes'
    with pytest.raises(UsageError):
        load_dataset('mnist')
    with pytest.raises(UsageError):
        load_dataset('shapes', split='validation')


def test_synthetic_splits_differ():
    train = load_dataset('shapes', split='train', n=10, size=8, seed=2)
    test = load_dataset('shapes', split='test', n=10, size=8, seed=2)
    assert train.split == 'train' and test.split == 'test'
    assert not np.array_equal(train.images, test.images)


def test_missing_files_name_the_path(tmp_path):
    with pytest.raises(IngestionError) as error:
        load_dataset('Fashion-MNIST', root=str(tmp_path))
    assert 'train-images-idx3-ubyte' in str(error.value)


def test_fashionmnist_ingestion(tmp_path):
    pixels = np.arange(3 * 28 * 28).reshape(3, 28, 28) % 256
    _write_idx(tmp_path / 't10k-images-idx3-ubyte.gz', pixels)
    _write_idx(tmp_path / 't10k-labels-idx1-ubyte.gz', np.array([0, 4, 9]))
    ds = load_dataset('fmnist', root=str(tmp_path), split='test')
    assert ds.images.shape == (3, 1, 28, 28)
    assert ds.images.max() == pytest.approx(1.0)
    assert list(ds.labels) == [0, 4, 9]
    assert ds.num_classes == 10


def test_corrupt_idx_file(tmp_path):
    with gzip.open(tmp_path / 't10k-images-idx3-ubyte.gz', 'wb') as idx_file:
        idx_file.write(b'\x01\x02\x03\x04')
    _write_idx(tmp_path / 't10k-labels-idx1-ubyte.gz', np.array([0]))
    with pytest.raises(IngestionError):
        load_dataset('fashionmnist', root=str(tmp_path), split='test')


def test_cifar_ingestion(tmp_path):
    folder = tmp_path / 'cifar-10-batches-py'
    os.makedirs(folder)
    data = np.zeros((2, 3072), dtype=np.uint8)
    data[1] = 255
    with open(folder / 'test_batch', 'wb') as batch_file:
        pickle.dump({b'data': data, b'labels': [1, 2]}, batch_file)
    ds = load_dataset('CIFAR-10', root=str(tmp_path), split='test')
    assert ds.images.shape == (2, 3, 32, 32)
    assert ds.images[1].min() == 1.0
    assert list(ds.labels) == [1, 2]


CELEBA_HEADER = 'Chubby Male Oval_Face'


def _write_celeba(root, attribute_rows=None, header=CELEBA_HEADER, partition_lines=None):
    folder = root / 'celeba'
    os.makedirs(folder / 'img_align_celeba')
    # 48 x 80 images: the centre 48 x 48 square is gray, the side bands outside the crop are white
    for name, gray in (('000001.png', 0.25), ('000002.png', 0.75), ('000003.png', 0.5)):
        image = np.ones((48, 80, 3))
        image[:, 16:64] = gray
        plt.imsave(str(folder / 'img_align_celeba' / name), image)
    if partition_lines is None:
        partition_lines = ['000001.png 0', '000002.png 0', '000003.png 2']
    (folder / 'list_eval_partition.txt').write_text('\n'.join(partition_lines) + '\n')
    if attribute_rows is None:
        attribute_rows = ['000001.png -1 1 -1', '000002.png 1 -1 1', '000003.png -1 -1 1']
    (folder / 'list_attr_celeba.txt').write_text('\n'.join([str(len(attribute_rows)), header] + attribute_rows) + '\n')
    return folder


def test_celeba_ingestion(tmp_path):
    _write_celeba(tmp_path)
    ds = load_dataset('CelebA', root=str(tmp_path), split='train')
    assert ds.images.shape == (2, 3, 64, 64)
    assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0
    assert np.allclose(ds.images[0], 0.25, atol=0.01)
    assert np.allclose(ds.images[1], 0.75, atol=0.01)
    assert list(ds.labels) == [1, 0]
    assert ds.num_classes == 2
    assert list(ds.attributes['Chubby']) == [0, 1]
    assert list(ds.attributes['Oval_Face']) == [0, 1]

    chubby = load_dataset('celeba', root=str(tmp_path), split='test', attribute='chubby')
    assert chubby.images.shape == (1, 3, 64, 64)
    assert list(chubby.labels) == [0]


def test_celeba_missing_attribute_column(tmp_path):
    folder = _write_celeba(tmp_path, header='Male Oval_Face',
                           attribute_rows=['000001.png 1 -1', '000002.png -1 1', '000003.png -1 1'])
    with pytest.raises(IngestionError) as error:
        load_dataset('celeba', root=str(tmp_path))
    assert str(folder / 'list_attr_celeba.txt') in str(error.value)
    assert 'Chubby' in str(error.value)


def test_celeba_image_without_attribute_row(tmp_path):
    folder = _write_celeba(tmp_path, attribute_rows=['000001.png -1 1 -1'])
    with pytest.raises(IngestionError) as error:
        load_dataset('celeba', root=str(tmp_path))
    assert str(folder / 'list_attr_celeba.txt') in str(error.value)
    assert '000002.png' in str(error.value)


def test_celeba_short_partition_line(tmp_path):
    folder = _write_celeba(tmp_path, partition_lines=['000001.png 0', '000002.png'])
    with pytest.raises(IngestionError) as error:
        load_dataset('celeba', root=str(tmp_path))
    assert str(folder / 'list_eval_partition.txt') in str(error.value)


def test_batch_indices():
    batches = batch_indices(10, 3, seed=0, shuffle=False)
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert np.array_equal(np.concatenate(batches), np.arange(10))
    first = np.concatenate(batch_indices(10, 3, seed=5))
    assert np.array_equal(first, np.concatenate(batch_indices(10, 3, seed=5)))
    assert np.array_equal(np.sort(first), np.arange(10))
    assert not np.array_equal(first, np.concatenate(batch_indices(10, 3, seed=6)))
    with pytest.raises(UsageError):
        batch_indices(4, 5, seed=0)


def test_batch_iter_visits_every_image_once(small_shapes):
    seen = np.concatenate([batch.indices for batch in batch_iter(small_shapes, 10, seed=1)])
    assert np.array_equal(np.sort(seen), np.arange(64))
    batch = next(iter(batch_iter(small_shapes, 10, seed=1)))
    assert batch.images.shape == (10, 1, 8, 8)
    assert torch.equal(batch.labels, torch.as_tensor(small_shapes.labels[batch.indices]))
