"""
Dataset ingestion, normalisation to [0, 1], a synthetic shapes dataset for desk-scale runs, and deterministic
batch iteration.

Real datasets are read from the standard public layouts under a user-supplied root; nothing is downloaded.
"""
import gzip
import logging
import os
import pickle
import re
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional

import matplotlib.image
import numpy as np
import torch
import torch.nn.functional as F

from .errors import IngestionError, UsageError

logger = logging.getLogger(__name__)

DATASET_NAMES = ['fashionmnist', 'cifar10', 'celeba', 'synth_shapes']
DATASET_ALIASES = {
    'fmnist': 'fashionmnist',
    'cifar': 'cifar10',
    'shapes': 'synth_shapes',
    'synth': 'synth_shapes',
}
SPLITS = ['train', 'test']
SHAPE_NAMES = ['rectangle', 'disk', 'cross', 'triangle', 'ring']
CELEBA_ATTRIBUTES = ['Chubby', 'Male', 'Oval_Face']
CELEBA_SIZE = 64


@dataclass
class Dataset:
    """
    An immutable image collection: images N x C x H x W in [0, 1], optional integer labels, and for synthetic data
    the binary coverage mask of every shape.
    """
    images: np.ndarray
    labels: Optional[np.ndarray]
    split: str
    name: str
    num_classes: int = 0
    shape_masks: Optional[np.ndarray] = None
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise IngestionError(f'Dataset "{self.name}" images must be N x C x H x W, got {self.images.shape}')
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise IngestionError(f'Dataset "{self.name}" has pixel values outside [0, 1]')
        if self.labels is not None and self.num_classes and len(self.labels) and \
                (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise IngestionError(f'Dataset "{self.name}" labels fall outside [0, {self.num_classes})')
        self.images.setflags(write=False)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def tensor(self, indices=None, dtype=torch.float32, device='cpu') -> torch.Tensor:
        images = self.images if indices is None else self.images[indices]
        return torch.as_tensor(np.array(images), dtype=dtype, device=device)

    def subset(self, indices):
        return Dataset(np.array(self.images[indices]), None if self.labels is None else self.labels[indices],
                       self.split, self.name, self.num_classes,
                       None if self.shape_masks is None else self.shape_masks[indices],
                       {k: v[indices] for k, v in self.attributes.items()})


def normalize_name(name: str) -> str:
    """
    Lower-cases a name and strips everything but letters and digits, so "Fashion-MNIST" and "fashion_mnist" agree.
    """
    return re.sub('[^a-z0-9]+', '', name.lower())


def resolve_name(name: str, choices: list, aliases: dict = None, kind: str = 'name') -> str:
    """
    Finds the choice matching name after normalisation.
    :param name: User supplied name
    :param choices: Canonical names
    :param aliases: Optional map of extra spellings to canonical names
    :param kind: What is being resolved, for the error message
    :return: The canonical name
    """
    key = normalize_name(name)
    candidates = {normalize_name(choice): choice for choice in choices}
    for alias, target in (aliases or {}).items():
        candidates.setdefault(normalize_name(alias), target)
    if key not in candidates:
        raise UsageError(f'Unknown {kind} "{name}"; choices are {", ".join(choices)}')
    return candidates[key]


def _find_file(root: str, candidates: list) -> str:
    for candidate in candidates:
        path = os.path.join(root, candidate)
        if os.path.isfile(path):
            return path
    raise IngestionError(f'Missing dataset file: none of {[os.path.join(root, c) for c in candidates]} exists')


def _read_idx(path: str) -> np.ndarray:
    opener = gzip.open if path.endswith('.gz') else open
    try:
        with opener(path, 'rb') as idx_file:
            raw = idx_file.read()
        if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
            raise IngestionError(f'Corrupt IDX file "{path}": bad magic')
        ndim = raw[3]
        dims = np.frombuffer(raw, dtype='>u4', count=ndim, offset=4).astype(int)
        data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
        if data.size != int(np.prod(dims)):
            raise IngestionError(f'Corrupt IDX file "{path}": expected {int(np.prod(dims))} values, got {data.size}')
        return data.reshape(dims)
    except (OSError, EOFError, ValueError) as error:
        raise IngestionError(f'Could not read IDX file "{path}": {error}') from error


def _load_fashionmnist(root: str, split: str) -> Dataset:
    prefix = 'train' if split == 'train' else 't10k'
    folders = ['', 'FashionMNIST/raw', 'fashionmnist', 'fashion-mnist']
    image_path = _find_file(root, [os.path.join(folder, f'{prefix}-images-idx3-ubyte{ext}')
                                   for folder in folders for ext in ['.gz', '']])
    label_path = _find_file(root, [os.path.join(folder, f'{prefix}-labels-idx1-ubyte{ext}')
                                   for folder in folders for ext in ['.gz', '']])
    images = _read_idx(image_path).astype(np.float32)[:, None] / 255.0
    labels = _read_idx(label_path).astype(np.int64)
    if len(labels) != len(images):
        raise IngestionError(f'"{label_path}" holds {len(labels)} labels for {len(images)} images')
    return Dataset(images, labels, split, 'fashionmnist', num_classes=10)


def _load_cifar10(root: str, split: str) -> Dataset:
    names = [f'data_batch_{i}' for i in range(1, 6)] if split == 'train' else ['test_batch']
    images, labels = [], []
    for batch_name in names:
        path = _find_file(root, [os.path.join('cifar-10-batches-py', batch_name), batch_name])
        try:
            with open(path, 'rb') as batch_file:
                batch = pickle.load(batch_file, encoding='bytes')
            images.append(np.asarray(batch[b'data'], dtype=np.uint8).reshape(-1, 3, 32, 32))
            labels.append(np.asarray(batch[b'labels'], dtype=np.int64))
        except (OSError, EOFError, KeyError, ValueError, pickle.UnpicklingError) as error:
            raise IngestionError(f'Could not read CIFAR-10 batch "{path}": {error}') from error
    return Dataset(np.concatenate(images).astype(np.float32) / 255.0, np.concatenate(labels), split, 'cifar10',
                   num_classes=10)


def _center_crop_resize(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = torch.as_tensor(np.ascontiguousarray(image[top:top + side, left:left + side]), dtype=torch.float32)
    crop = crop.permute(2, 0, 1).unsqueeze(0)
    return F.interpolate(crop, size=(size, size), mode='bilinear', antialias=True, align_corners=False)[0].numpy()


def _read_celeba_partition(partition_path: str, split: str) -> list:
    wanted = '0' if split == 'train' else '2'
    files = []
    with open(partition_path) as partition_file:
        for number, line in enumerate(partition_file, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise IngestionError(f'Malformed CelebA partition file "{partition_path}": line {number} has no '
                                     f'partition column')
            if parts[1] == wanted:
                files.append(parts[0])
    return files


def _read_celeba_attributes(attr_path: str, files: list) -> dict:
    with open(attr_path) as attr_file:
        lines = attr_file.read().splitlines()
    if len(lines) < 2:
        raise IngestionError(f'Malformed CelebA attribute file "{attr_path}": missing the attribute header')
    header = lines[1].split()
    rows = {parts[0]: parts[1:] for parts in (line.split() for line in lines[2:]) if parts}
    attributes = {}
    for attr_name in CELEBA_ATTRIBUTES:
        if attr_name not in header:
            raise IngestionError(f'CelebA attribute file "{attr_path}" has no "{attr_name}" column')
        column = header.index(attr_name)
        values = []
        for filename in files:
            row = rows.get(filename)
            if row is None or len(row) <= column:
                raise IngestionError(f'CelebA attribute file "{attr_path}" has no complete row for "{filename}"')
            try:
                values.append(int(row[column]) > 0)
            except ValueError as error:
                raise IngestionError(f'CelebA attribute file "{attr_path}": bad "{attr_name}" value for '
                                     f'"{filename}"') from error
        attributes[attr_name] = np.array(values, dtype=np.int64)
    return attributes


def _load_celeba(root: str, split: str, attribute: str = 'Male', limit: int = None) -> Dataset:
    base = os.path.join(root, 'celeba') if os.path.isdir(os.path.join(root, 'celeba')) else root
    partition_path = _find_file(base, ['list_eval_partition.txt'])
    attr_path = _find_file(base, ['list_attr_celeba.txt'])
    files = _read_celeba_partition(partition_path, split)
    if limit is not None:
        files = files[:limit]
    attributes = _read_celeba_attributes(attr_path, files)

    images = np.empty((len(files), 3, CELEBA_SIZE, CELEBA_SIZE), dtype=np.float32)
    for i, filename in enumerate(files):
        path = os.path.join(base, 'img_align_celeba', filename)
        try:
            raw = matplotlib.image.imread(path)
        except (OSError, ValueError, SyntaxError) as error:
            raise IngestionError(f'Could not decode CelebA image "{path}": {error}') from error
        raw = raw.astype(np.float32) / (255.0 if raw.dtype == np.uint8 else 1.0)
        if raw.ndim == 2:
            raw = np.repeat(raw[..., None], 3, axis=-1)
        images[i] = np.clip(_center_crop_resize(raw[..., :3], CELEBA_SIZE), 0.0, 1.0)
    attribute = resolve_name(attribute, CELEBA_ATTRIBUTES, kind='CelebA attribute')
    return Dataset(images, attributes[attribute], split, 'celeba', num_classes=2, attributes=attributes)


def load_dataset(name: str, root: str = '.', split: str = 'train', **kwargs) -> Dataset:
    """
    Loads a named dataset, scaled to [0, 1] and channel-first.
    :param name: fashionmnist, cifar10, celeba or synth_shapes (spelling is forgiving)
    :param root: Directory holding the dataset files
    :param split: 'train' or 'test'
    :param kwargs: celeba: attribute, limit; synth_shapes: n, size, num_classes, seed
    :return: The Dataset
    """
    name = resolve_name(name, DATASET_NAMES, DATASET_ALIASES, kind='dataset')
    if split not in SPLITS:
        raise UsageError(f'Unknown split "{split}"; choices are {SPLITS}')
    logger.info('Loading %s (%s) from "%s"', name, split, root)
    if name == 'fashionmnist':
        return _load_fashionmnist(root, split)
    if name == 'cifar10':
        return _load_cifar10(root, split)
    if name == 'celeba':
        return _load_celeba(root, split, **kwargs)
    seed = kwargs.get('seed', 0) + (0 if split == 'train' else 1)
    size = kwargs.get('size', 16)
    ds = synth_shapes(kwargs.get('n', 2000), size, size, kwargs.get('num_classes', 3), seed)
    ds.split = split
    return ds


def _shape_coverage(kind: int, u: np.ndarray, v: np.ndarray, aspect: np.ndarray) -> np.ndarray:
    if kind == 0:
        return (np.abs(u) <= 1) & (np.abs(v) <= aspect)
    if kind == 1:
        return u ** 2 + v ** 2 <= 1
    if kind == 2:
        arm = 1 / 3
        return ((np.abs(u) <= 1) & (np.abs(v) <= arm)) | ((np.abs(v) <= 1) & (np.abs(u) <= arm))
    if kind == 3:
        return (v >= -1) & (v <= 1) & (np.abs(u) <= (v + 1) / 2)
    radius = u ** 2 + v ** 2
    return (radius <= 1) & (radius >= 0.55 ** 2)


def synth_shapes(n: int, height: int, width: int, num_classes: int, seed: int, supersample: int = 4,
                 chunk: int = 256) -> Dataset:
    """
    Grayscale images of one randomly placed and sized shape each; the label is the shape class
    (rectangle, disk, cross, triangle, ring, in that order). Shapes are anti-aliased by supersampling.
    :param n: Number of images
    :param height: Image height, at least 8
    :param width: Image width, at least 8
    :param num_classes: Number of shape classes, 2 to 5
    :param seed: Seed for placement, size, intensity and label order
    :return: A labelled Dataset carrying the binary shape masks
    """
    if height < 8 or width < 8:
        raise UsageError(f'Synthetic shapes need H, W >= 8, got {height} x {width}')
    if not 2 <= num_classes <= len(SHAPE_NAMES):
        raise UsageError(f'Synthetic shapes support 2 to {len(SHAPE_NAMES)} classes, got {num_classes}')
    if n < 1:
        raise UsageError(f'Need at least one synthetic image, got {n}')

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    half = rng.uniform(0.22, 0.4, size=n) * min(height, width)
    cx = rng.uniform(half, width - half)
    cy = rng.uniform(half, height - half)
    aspect = rng.uniform(0.6, 1.0, size=n)
    intensity = rng.uniform(0.6, 1.0, size=n)

    s = supersample
    ys = (np.arange(height * s) + 0.5) / s
    xs = (np.arange(width * s) + 0.5) / s
    images = np.empty((n, 1, height, width), dtype=np.float32)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        sl = slice(start, stop)
        u = (xs[None, None, :] - cx[sl, None, None]) / half[sl, None, None]
        v = (ys[None, :, None] - cy[sl, None, None]) / half[sl, None, None]
        u, v = np.broadcast_arrays(u, v)
        fine = np.zeros(u.shape, dtype=np.float32)
        for kind in range(num_classes):
            rows = labels[sl] == kind
            if rows.any():
                fine[rows] = _shape_coverage(kind, u[rows], v[rows], aspect[sl][rows, None, None])
        coverage = fine.reshape(stop - start, height, s, width, s).mean(axis=(2, 4))
        images[sl, 0] = coverage * intensity[sl, None, None]
    shape_masks = images[:, 0] > 0.5 * intensity[:, None, None]
    logger.debug('Rendered %d synthetic %dx%d shapes over %d classes', n, height, width, num_classes)
    return Dataset(np.clip(images, 0.0, 1.0), labels, 'train', 'synth_shapes', num_classes=num_classes,
                   shape_masks=shape_masks)


class Batch(NamedTuple):
    indices: np.ndarray
    images: torch.Tensor
    labels: Optional[torch.Tensor]


def batch_indices(n: int, batch_size: int, seed: int, shuffle: bool = True) -> list:
    """
    Splits range(n) into consecutive batches, the last one possibly partial. The order is a pure function of seed.
    """
    if batch_size < 1:
        raise UsageError(f'batch_size must be at least 1, got {batch_size}')
    if batch_size > n:
        raise UsageError(f'batch_size {batch_size} exceeds the dataset size {n}')
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iter(ds: Dataset, batch_size: int, seed: int, shuffle: bool = True, dtype=torch.float32,
               device='cpu') -> Iterator[Batch]:
    """
    Yields every image of the dataset exactly once, in batches; use seed + epoch for a new order each epoch.
    """
    for indices in batch_indices(len(ds), batch_size, seed, shuffle):
        labels = None if ds.labels is None else torch.as_tensor(ds.labels[indices], device=device)
        yield Batch(indices, ds.tensor(indices, dtype=dtype, device=device), labels)
