"""Dataset readers, preprocessing, batching and a synthetic generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mocaps.tensor import RngState

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
NORMALIZE_EPS = 1e-8

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.class_count)


def _read(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        import gzip
        return gzip.decompress(path.read_bytes())
    return path.read_bytes()


def parse_idx(buf: bytes, magic: int) -> np.ndarray:
    """Decode an IDX container of unsigned bytes (big-endian header)."""
    if len(buf) < 4:
        raise DataFormatError("IDX file truncated before its magic number")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise DataFormatError(f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError("IDX file truncated inside its dimension header")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header < count:
        raise DataFormatError(f"IDX payload truncated: need {count} bytes, have {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    images = parse_idx(_read(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read(labels_path), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"image/label count mismatch: {len(images)} images, {len(labels)} labels")
    return Dataset(images[:, None, :, :].copy(), labels.astype(np.int64), class_count)


def find_mnist(data_dir, split: str = "train") -> tuple[Path, Path]:
    data_dir = Path(data_dir)
    out = []
    for stem in MNIST_FILES[split]:
        for candidate in (data_dir / stem, data_dir / (stem + ".gz"),
                          data_dir / stem.replace("-idx", ".idx")):
            if candidate.exists():
                out.append(candidate)
                break
        else:
            raise FileNotFoundError(f"MNIST file {stem}[.gz] not found in {data_dir}")
    return out[0], out[1]


def load_cifar10_batch(path) -> Dataset:
    """One CIFAR-10 binary batch: 3073-byte records of label + 3x32x32 pixels."""
    buf = _read(path)
    if len(buf) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {len(buf)} is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return Dataset(raw[:, 1:].reshape(-1, 3, 32, 32).copy(), raw[:, 0].astype(np.int64), 10)


def load_cifar10(data_dir, split: str = "train") -> Dataset:
    data_dir = Path(data_dir)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = [load_cifar10_batch(data_dir / n) for n in names]
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), 10)


def svhn_mat_to_idx(mat_path, out_prefix) -> tuple[Path, Path]:
    """Convert an SVHN ``*_32x32.mat`` file to an IDX image/label pair.

    Images become ``[N, 3, 32, 32]`` (IDX rank 4); label 10 (digit zero) maps
    to 0.  Needs scipy.
    """
    from scipy.io import loadmat

    mat = loadmat(mat_path)
    images = np.ascontiguousarray(mat["X"].transpose(3, 2, 0, 1))
    labels = mat["y"].reshape(-1) % 10
    img_path, lab_path = Path(f"{out_prefix}-images-idx4-ubyte"), Path(f"{out_prefix}-labels-idx1-ubyte")
    img_path.write_bytes(encode_idx(images))
    lab_path.write_bytes(encode_idx(labels))
    return img_path, lab_path


def load_svhn_idx(images_path, labels_path) -> Dataset:
    images = parse_idx(_read(images_path), 0x00000804)
    labels = parse_idx(_read(labels_path), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"image/label count mismatch: {len(images)} images, {len(labels)} labels")
    return Dataset(images.copy(), labels.astype(np.int64), 10)


# -- preprocessing -----------------------------------------------------------

@dataclass(frozen=True)
class PreprocessSpec:
    pad: int = 2
    crop: int = 28
    augment: bool = True

    def __post_init__(self):
        if self.pad < 0 or self.crop < 1:
            raise ValueError("pad must be >= 0 and crop >= 1")


def pad_and_crop(images: np.ndarray, spec: PreprocessSpec, rng: RngState) -> np.ndarray:
    """Zero-pad every border and take one random ``crop x crop`` window per image."""
    n, c, h, w = images.shape
    if spec.crop > min(h, w) + 2 * spec.pad:
        raise ValueError(f"crop {spec.crop} larger than padded image {h + 2 * spec.pad}")
    padded = np.zeros((n, c, h + 2 * spec.pad, w + 2 * spec.pad), dtype=images.dtype)
    padded[:, :, spec.pad:spec.pad + h, spec.pad:spec.pad + w] = images
    span = h + 2 * spec.pad - spec.crop + 1
    offsets = rng.integers(span, 2 * n).reshape(n, 2)
    out = np.empty((n, c, spec.crop, spec.crop), dtype=images.dtype)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy:dy + spec.crop, dx:dx + spec.crop]
    return out


def normalize(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Per-image zero mean and unit variance; constant images map to zeros."""
    x = images.astype(np.float64)
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return ((x - mean) / np.maximum(std, NORMALIZE_EPS)).astype(dtype)


def preprocess(images: np.ndarray, spec: PreprocessSpec, rng: RngState | None, train: bool,
               dtype=np.float32, return_target: bool = False):
    """Training: pad, random crop, normalize.  Evaluation: normalize only.

    With ``return_target`` also returns the (cropped) pixels scaled to
    [0, 1], flattened, for the reconstruction loss.
    """
    if train and spec.augment:
        if rng is None:
            raise ValueError("training preprocessing needs an rng")
        if images.shape[-1] != spec.crop:
            raise ValueError(f"crop {spec.crop} must equal the image size {images.shape[-1]}")
        images = pad_and_crop(images, spec, rng)
    x = normalize(images, dtype)
    if not return_target:
        return x
    return x, (images.reshape(len(images), -1) / 255.0).astype(dtype)


def batches(dataset: Dataset, batch_size: int = 128, shuffle: bool = False, rng: RngState | None = None):
    """Yield ``(images, labels)`` covering every sample once; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    order = np.arange(len(dataset))
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an rng")
        order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


# -- synthetic data ----------------------------------------------------------

def synthetic(classes: int = 10, n: int = 1000, size: int = 28, rng: RngState | None = None,
              noise: float = 24.0) -> Dataset:
    """Oriented bars: class ``k`` draws a thick line at angle ``k * pi / classes``.

    Position jitter and additive noise vary per sample; labels cycle through
    the classes, so the histogram is uniform to within one.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = rng if rng is not None else RngState(0)
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = (size - 1) / 2
    jitter = (rng.uniform(2 * n).reshape(n, 2) - 0.5) * (size / 7)
    length = 0.35 * size
    images = np.empty((n, 1, size, size), dtype=np.uint8)
    noise_field = rng.normal(n * size * size).reshape(n, size, size) * noise
    for i, k in enumerate(labels):
        theta = np.pi * k / classes
        cy, cx = centre + jitter[i, 0], centre + jitter[i, 1]
        dy, dx = np.sin(theta), np.cos(theta)
        along = (xx - cx) * dx + (yy - cy) * dy
        across = -(xx - cx) * dy + (yy - cy) * dx
        bar = (np.abs(across) <= size / 14) & (np.abs(along) <= length)
        img = 30 + 200 * bar + noise_field[i]
        images[i, 0] = np.clip(img, 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), classes)


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of a nearest-class-mean classifier on normalized pixels."""
    xtr = normalize(train.images, np.float64).reshape(len(train), -1)
    xte = normalize(test.images, np.float64).reshape(len(test), -1)
    centroids = np.stack([xtr[train.labels == k].mean(axis=0) for k in range(train.class_count)])
    d = ((xte[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((d.argmin(axis=1) == test.labels).mean())
