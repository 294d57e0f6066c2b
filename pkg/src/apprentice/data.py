"""Dataset readers (MNIST idx, CIFAR-10 binary), normalization and batching."""

from __future__ import annotations

import gzip
import importlib.util
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3072
CIFAR_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataFormatError(ValueError):
    pass


@dataclass
class Sample:
    id: int
    image: np.ndarray  # [C, H, W] in [0, 1]
    label: int


class Dataset(Sequence):
    """Array-backed split; indexing yields :class:`Sample`."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, ids: np.ndarray | None = None,
                 num_classes: int = 10, name: str = ""):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        ids = np.arange(len(labels), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise ValueError("sample ids must be unique within a split")
        if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
        self.images, self.labels, self.ids = images, labels, ids
        self.num_classes = num_classes
        self.name = name

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.take(np.arange(len(self))[i])
        return Sample(int(self.ids[i]), self.images[i], int(self.labels[i]))

    def take(self, positions) -> Dataset:
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(self.images[positions], self.labels[positions], self.ids[positions],
                       self.num_classes, self.name)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]


# ---------------------------------------------------------------------------
# MNIST idx
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf: bytes, magic: int, rank: int, what: str) -> tuple[tuple[int, ...], np.ndarray]:
    header = 4 + 4 * rank
    if len(buf) < header:
        raise DataFormatError(f"{what}: truncated header at offset {len(buf)} (need {header} bytes)")
    found = struct.unpack_from(">I", buf, 0)[0]
    if found != magic:
        raise DataFormatError(f"{what}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{rank}I", buf, 4)
    need = int(np.prod(dims))
    have = len(buf) - header
    if have < need:
        raise DataFormatError(f"{what}: truncated payload at offset {len(buf)}; header promises {need} bytes, found {have}")
    if have > need:
        raise DataFormatError(f"{what}: {have - need} trailing bytes after offset {header + need}")
    return dims, np.frombuffer(buf, dtype=np.uint8, offset=header)


def read_mnist(images_file, labels_file) -> Dataset:
    """Parse an idx image/label pair; pixel byte ``b`` becomes ``b / 255``."""
    dims, pix = _parse_idx(_read_bytes(images_file), IDX_IMAGES_MAGIC, 3, str(images_file))
    (count,), labels = _parse_idx(_read_bytes(labels_file), IDX_LABELS_MAGIC, 1, str(labels_file))
    if dims[0] != count:
        raise DataFormatError(f"image file holds {dims[0]} images but label file holds {count} labels")
    images = (pix.reshape(dims[0], 1, dims[1], dims[2]).astype(np.float32) / np.float32(255))
    if count and labels.max() >= 10:
        raise DataFormatError(f"label byte {labels.max()} out of range for 10 classes")
    return Dataset(images, labels.astype(np.int64), name="mnist")


def write_idx_images(path, images_u8: np.ndarray) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images_u8.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------

def read_cifar10(batch_files: Sequence) -> Dataset:
    """Concatenate CIFAR-10 binary batches; ids are global positions across files."""
    images, labels = [], []
    for path in batch_files:
        buf = _read_bytes(path)
        if len(buf) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: length {len(buf)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.nonzero(rec[:, 0] >= CIFAR_CLASSES)[0]
        if len(bad):
            raise DataFormatError(f"{path}: label byte {rec[bad[0], 0]} at offset {bad[0] * CIFAR_RECORD}")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    if not images:
        raise DataFormatError("no CIFAR-10 batch files given")
    pix = np.concatenate(images).astype(np.float32) / np.float32(255)
    return Dataset(pix, np.concatenate(labels), name="cifar10")


# ---------------------------------------------------------------------------
# dataset discovery
# ---------------------------------------------------------------------------

def _find(directory: Path, name: str) -> Path:
    for cand in (directory / name, directory / (name + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{name} not found in {directory}")


def load_mnist_dir(directory) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    train = read_mnist(*(_find(d, f) for f in MNIST_FILES["train"]))
    test = read_mnist(*(_find(d, f) for f in MNIST_FILES["test"]))
    train.name, test.name = "mnist-train", "mnist-test"
    return train, test


def load_cifar10_dir(directory) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    train = read_cifar10([_find(d, f"data_batch_{i}.bin") for i in range(1, 6)])
    test = read_cifar10([_find(d, "test_batch.bin")])
    return train, test


def subset_per_class(ds: Dataset, k: int) -> Dataset:
    """First ``k`` samples of every class, in id order."""
    order = np.argsort(ds.ids, kind="stable")
    keep = []
    for c in range(ds.num_classes):
        pos = order[ds.labels[order] == c][:k]
        keep.append(pos)
    return ds.take(np.sort(np.concatenate(keep)))


def make_synthetic(n: int, num_classes: int = 10, shape=(1, 28, 28), seed: int = 0, noise: float = 0.3) -> Dataset:
    """Noisy class prototypes; a quick stand-in for CI-scale runs."""
    rng = np.random.default_rng(seed)
    protos = rng.random((num_classes,) + tuple(shape)).astype(np.float32)
    labels = np.arange(n) % num_classes
    x = protos[labels] + noise * rng.standard_normal((n,) + tuple(shape)).astype(np.float32)
    return Dataset(np.clip(x, 0, 1), labels, num_classes=num_classes, name="synthetic")


def mnist_subset_source() -> Path:
    """Location of the 5000-digit MNIST sample bundled with ``mlxtend``."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        raise FileNotFoundError("mlxtend is not installed; `pip install mlxtend` to get the MNIST subset")
    path = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def write_mnist_subset(directory, train_per_class: int = 400) -> Path:
    """Materialize the bundled MNIST sample as standard idx files.

    The first ``train_per_class`` digits of each class form the training
    split, the rest the test split.  Returns ``directory``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if all((d / f).exists() for pair in MNIST_FILES.values() for f in pair):
        return d
    table = np.loadtxt(mnist_subset_source(), delimiter=",", dtype=np.float64)
    pix = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.int64)
    train_pos, test_pos = [], []
    for c in range(10):
        pos = np.nonzero(labels == c)[0]
        train_pos.append(pos[:train_per_class])
        test_pos.append(pos[train_per_class:])
    for split, pos in (("train", np.sort(np.concatenate(train_pos))), ("test", np.sort(np.concatenate(test_pos)))):
        img_name, lab_name = MNIST_FILES[split]
        write_idx_images(d / img_name, pix[pos])
        write_idx_labels(d / lab_name, labels[pos])
    return d


def data_dir(configured: str | os.PathLike | None) -> Path:
    env = os.environ.get("APPRENTICE_DATA_DIR")
    return Path(env if env else (configured or "data"))


def load_dataset(dataset: str, directory=None, subset: int | None = None, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Return (train, test) for ``mnist``, ``mnist5k``, ``cifar10`` or ``synthetic``."""
    if dataset == "synthetic":
        # one draw so both splits share class prototypes
        pool = make_synthetic(300, seed=seed)
        train = pool.take(np.arange(200))
        test = pool.take(np.arange(200, 300))
        test.ids = np.arange(100, dtype=np.int64)
        return train, test
    d = data_dir(directory)
    if dataset == "mnist5k":
        train, test = load_mnist_dir(write_mnist_subset(d / "mnist5k"))
    elif dataset == "mnist":
        train, test = load_mnist_dir(d)
    elif dataset == "cifar10":
        train, test = load_cifar10_dir(d)
    else:
        raise ValueError(f"unknown dataset {dataset!r}")
    if subset:
        train = subset_per_class(train, subset)
    return train, test


# ---------------------------------------------------------------------------
# normalization and batching
# ---------------------------------------------------------------------------

class ChannelNormalizer(TransformerMixin, BaseEstimator):
    """Per-channel standardization with statistics fitted on the training split."""

    def __init__(self, eps: float = 1e-8):
        self.eps = eps

    def fit(self, X, y=None):
        X = np.asarray(X.images if isinstance(X, Dataset) else X, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError(f"expected [N, C, H, W] images, got shape {X.shape}")
        self.mean_ = X.mean(axis=(0, 2, 3)).astype(np.float32)
        self.std_ = X.std(axis=(0, 2, 3)).astype(np.float32)
        return self

    def transform(self, X):
        if not hasattr(self, "mean_"):
            raise NotFittedError("ChannelNormalizer must be fitted on the training split first")
        X = np.asarray(X, dtype=np.float32)
        c = len(self.mean_)
        return (X - self.mean_.reshape(1, c, 1, 1)) / (self.std_.reshape(1, c, 1, 1) + np.float32(self.eps))


@dataclass
class Batch:
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray


def _augment(x: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    n, c, h, w = x.shape
    pad = 4 if mode == "crop_flip" else 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5 if mode == "crop_flip" else np.zeros(n, dtype=bool)
    out = np.empty_like(x)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def augment_mode(ds: Dataset, augment) -> str | None:
    if not augment:
        return None
    if augment is True:
        return "crop_flip" if ds.image_shape[0] == 3 else "shift"
    if augment not in ("crop_flip", "shift"):
        raise ValueError(f"unknown augmentation {augment!r}")
    return augment


def batch_iterator(ds: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True, augment=False,
                   normalizer: ChannelNormalizer | None = None, epoch: int = 0) -> Iterator[Batch]:
    """Deterministic batches for one epoch.

    The permutation and augmentation draws come from a generator seeded by
    ``(seed, epoch)``, so equal arguments give bitwise-equal batches.
    ``augment=True`` means pad-4/crop/flip for 3-channel images and a
    +-2 pixel shift for 1-channel images.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(ds) == 0:
        raise ValueError("cannot iterate an empty dataset")
    mode = augment_mode(ds, augment)
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(ds)) if shuffle else np.argsort(ds.ids, kind="stable")
    for start in range(0, len(ds), batch_size):
        pos = order[start:start + batch_size]
        x = ds.images[pos]
        if mode is not None:
            x = _augment(x, mode, rng)
        if normalizer is not None:
            x = normalizer.transform(x)
        yield Batch(ds.ids[pos], np.ascontiguousarray(x, dtype=np.float32), ds.labels[pos])
