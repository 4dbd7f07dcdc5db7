"""Dataset synthesis, binary ingestion format, and client partitioning."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import default_dtype

DATASET_MAGIC = b"FCGD"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed dataset file (bad magic, truncation, invalid labels)."""


class PartitionError(ValueError):
    """Requested partition cannot be satisfied."""


@dataclass
class Dataset:
    """Images in [0,1] with integer class labels."""

    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,)
    classes: int
    provenance: str = "synthetic"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be (N,C,H,W), got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.images) < 1:
            raise DatasetFormatError("labels/images length mismatch or empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise DatasetFormatError(
                f"labels must lie in [0, {self.classes}), found {self.labels.min()}..{self.labels.max()}")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise DatasetFormatError(f"pixel values outside [0,1]: range [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_SHAPE_KINDS = 6


def _class_mask(kind: int, xx: np.ndarray, yy: np.ndarray, scale: float) -> np.ndarray:
    """Geometric footprint for one class; coordinates are centered pixels."""
    r = np.sqrt(xx ** 2 + yy ** 2)
    if kind == 0:  # disk
        return (r < 10.0 * scale).astype(float)
    if kind == 1:  # ring
        return ((r > 5.0 * scale) & (r < 11.0 * scale)).astype(float)
    if kind == 2:  # square
        return ((np.abs(xx) < 9.0 * scale) & (np.abs(yy) < 9.0 * scale)).astype(float)
    if kind == 3:  # cross
        return ((np.abs(xx) < 3.5 * scale) | (np.abs(yy) < 3.5 * scale)).astype(float)
    if kind == 4:  # diagonal band
        return (np.abs(xx - yy) < 6.0 * scale).astype(float)
    # hollow diamond
    d = np.abs(xx) + np.abs(yy)
    return ((d > 4.0 * scale) & (d < 13.0 * scale)).astype(float)


def generate_synthetic_dataset(classes: int, samples_per_class: int,
                               image_shape: tuple[int, int, int] = (3, 32, 32),
                               difficulty: float = 0.5, seed: int = 0) -> Dataset:
    """Procedural class-conditional images: textured shapes + jitter + noise.

    Difficulty in [0,1] scales the additive noise and geometric jitter so a
    LeNet-size network learns the classes well above chance without
    saturating. Deterministic per seed.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if samples_per_class < 1:
        raise ValueError("need at least 1 sample per class")
    c, h, w = image_shape
    if h != 32 or w != 32 or c not in (1, 3):
        raise DatasetFormatError(f"unsupported image shape {image_shape}")
    difficulty = float(np.clip(difficulty, 0.0, 1.0))
    noise_sigma = 0.05 + 0.30 * difficulty
    jitter_px = 1.0 + 3.0 * difficulty

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 11])))
    n = classes * samples_per_class
    images = np.zeros((n, c, h, w), dtype=np.float64)
    labels = np.zeros(n, dtype=np.int64)
    base = np.arange(h, dtype=np.float64) - (h - 1) / 2.0
    gy, gx = np.meshgrid(base, base, indexing="ij")

    idx = 0
    for k in range(classes):
        kind = k % _SHAPE_KINDS
        # low spatial frequencies only: texture must survive two 2x2 average
        # pools or gradient-inversion scoring saturates on aliasing noise
        freq = 0.10 + 0.05 * ((k * 3) % 5)
        theta = (k * 0.61) % np.pi
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        for _ in range(samples_per_class):
            dx, dy = rng.uniform(-jitter_px, jitter_px, size=2)
            scale = rng.uniform(1.0 - 0.12 * difficulty, 1.0 + 0.12 * difficulty)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            mask = _class_mask(kind, gx - dx, gy - dy, scale)
            wave = 0.5 + 0.45 * np.sin(freq * (cos_t * (gx - dx) + sin_t * (gy - dy)) * 2.0 + phase)
            img = mask * wave + (1.0 - mask) * 0.15
            for ch in range(c):
                gain = rng.uniform(0.85, 1.0)
                channel = gain * img + rng.normal(0.0, noise_sigma, size=(h, w))
                images[idx, ch] = channel
            labels[idx] = k
            idx += 1
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images=images.astype(default_dtype()), labels=labels,
                   classes=classes, provenance="synthetic")


# ---------------------------------------------------------------------------
# binary file format
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> None:
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(struct.pack("<QQQQ", n, c, h, w))
        fh.write(struct.pack("<I", dataset.classes))
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<u2").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    offset = fh.tell()
    blob = fh.read(count)
    if len(blob) < count:
        raise DatasetFormatError(
            f"truncated dataset file: wanted {count} bytes for {what} at offset {offset}, got {len(blob)}")
    return blob


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        n, c, h, w = struct.unpack("<QQQQ", _read_exact(fh, 32, "dimensions"))
        (classes,) = struct.unpack("<I", _read_exact(fh, 4, "class count"))
        pixel_count = n * c * h * w
        pixels = np.frombuffer(_read_exact(fh, 4 * pixel_count, "pixel data"), dtype="<f4")
        labels = np.frombuffer(_read_exact(fh, 2 * n, "labels"), dtype="<u2").astype(np.int64)
        images = pixels.reshape(n, c, h, w).astype(default_dtype())
    bad = np.nonzero((labels < 0) | (labels >= classes))[0]
    if bad.size:
        raise DatasetFormatError(
            f"label out of range in record {bad[0]}: {labels[bad[0]]} >= {classes}")
    lo, hi = float(images.min()), float(images.max())
    if lo < 0.0 or hi > 1.0:
        span = max(hi - lo, 1e-12)
        images = (images - lo) / span
    return Dataset(images=images, labels=labels, classes=int(classes), provenance="ingested")


def import_image_directory(root) -> Dataset:
    """Build a Dataset from per-class subdirectories of image files.

    Subdirectory names sorted lexicographically define the class ids; images
    are resized to 32x32 and rescaled to [0,1].
    """
    from PIL import Image

    class_dirs = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if len(class_dirs) < 2:
        raise DatasetFormatError(f"need at least 2 class subdirectories under {root}")
    images, labels = [], []
    for cls_id, name in enumerate(class_dirs):
        folder = os.path.join(root, name)
        for fname in sorted(os.listdir(folder)):
            fpath = os.path.join(folder, fname)
            try:
                with Image.open(fpath) as img:
                    rgb = img.convert("RGB").resize((32, 32), Image.BILINEAR)
            except Exception as exc:
                raise DatasetFormatError(f"cannot read image file {fpath}: {exc}") from exc
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
            images.append(arr.transpose(2, 0, 1))
            labels.append(cls_id)
    if not images:
        raise DatasetFormatError(f"no image files found under {root}")
    return Dataset(images=np.stack(images).astype(default_dtype()),
                   labels=np.asarray(labels, dtype=np.int64),
                   classes=len(class_dirs), provenance="ingested")


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

@dataclass
class ClientSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class Partition:
    """Per-client disjoint train/val/test index lists."""

    clients: list[ClientSplit]
    scheme: str
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def train_sizes(self) -> np.ndarray:
        return np.array([len(c.train) for c in self.clients], dtype=np.int64)

    def weights(self) -> np.ndarray:
        sizes = self.train_sizes().astype(np.float64)
        return sizes / sizes.sum()


def _split_client_pool(pool: np.ndarray, train_fraction: float, val_fraction: float,
                       rng: np.random.Generator, max_train: int | None) -> ClientSplit:
    pool = rng.permutation(pool)
    m = len(pool)
    n_train = int(np.floor(m * train_fraction))
    n_val = int(np.floor(m * val_fraction))
    n_test = m - n_train - n_val
    if n_train < 1 or n_val < 1 or n_test < 1:
        raise PartitionError(
            f"client pool of {m} samples cannot honor fractions "
            f"(train={train_fraction}, val={val_fraction}); needs >= 1 sample per split")
    train = pool[:n_train]
    if max_train is not None and len(train) > max_train:
        train = train[:max_train]
    return ClientSplit(train=np.sort(train), val=np.sort(pool[n_train:n_train + n_val]),
                       test=np.sort(pool[n_train + n_val:]))


def _dirichlet_pools(labels: np.ndarray, n_clients: int, concentration: float,
                     rng: np.random.Generator) -> list[list[int]]:
    pools: list[list[int]] = [[] for _ in range(n_clients)]
    for cls in np.unique(labels):
        cls_idx = rng.permutation(np.nonzero(labels == cls)[0])
        proportions = rng.dirichlet([concentration] * n_clients)
        cuts = (np.cumsum(proportions) * len(cls_idx)).astype(int)[:-1]
        for cid, shard in enumerate(np.split(cls_idx, cuts)):
            pools[cid].extend(shard.tolist())
    return pools


def partition(dataset: Dataset, n_clients: int, scheme: str = "iid",
              train_fraction: float = 0.7, val_fraction: float = 0.15,
              concentration: float = 0.5, seed: int = 0,
              max_train_per_client: int | None = None) -> Partition:
    """Assign samples to clients and split each client's pool 3 ways.

    iid: equal-size random shards. label_skew: per-class Dirichlet
    allocation, lower concentration means stronger skew. by_label_groups:
    disjoint contiguous class groups per client.
    """
    if n_clients < 1:
        raise PartitionError("need at least one client")
    if not (0 < train_fraction < 1 and 0 <= val_fraction < 1
            and train_fraction + val_fraction < 1):
        raise PartitionError(f"bad split fractions ({train_fraction}, {val_fraction})")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 13])))
    labels = dataset.labels
    n = len(dataset)

    if scheme == "iid":
        perm = rng.permutation(n)
        base, rem = divmod(n, n_clients)
        pools, start = [], 0
        for cid in range(n_clients):
            size = base + (1 if cid < rem else 0)
            pools.append(perm[start:start + size].tolist())
            start += size
        descriptor = "iid"
    elif scheme == "label_skew":
        if concentration <= 0:
            raise PartitionError("concentration must be positive")
        pools = _dirichlet_pools(labels, n_clients, concentration, rng)
        descriptor = f"label_skew(concentration={concentration:g})"
    elif scheme == "by_label_groups":
        if n_clients > dataset.classes:
            raise PartitionError(
                f"by_label_groups needs clients <= classes ({n_clients} > {dataset.classes})")
        owner = (np.arange(dataset.classes) * n_clients) // dataset.classes
        pools = [np.nonzero(np.isin(labels, np.nonzero(owner == cid)[0]))[0].tolist()
                 for cid in range(n_clients)]
        descriptor = "by_label_groups"
    else:
        raise PartitionError(f"unknown partition scheme '{scheme}'")

    clients = []
    for cid, pool in enumerate(pools):
        if len(pool) < 3:
            raise PartitionError(
                f"client {cid} received {len(pool)} samples; partition infeasible")
        clients.append(_split_client_pool(np.asarray(pool, dtype=np.int64), train_fraction,
                                          val_fraction, rng, max_train_per_client))
    return Partition(clients=clients, scheme=descriptor, seed=seed)
