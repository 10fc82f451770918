"""Dataset ingestion: IDX and CSV readers, pooling, one-hot encoding.

Features are stored one sample per column, scaled into [0, 1]. The IDX
container is the big-endian MNIST-family format:

    images: i32 magic 0x00000803 | i32 count | i32 rows | i32 cols | u8 pixels
    labels: i32 magic 0x00000801 | i32 count | u8 labels
"""

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .linalg import check_one_hot

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed or truncated IDX file."""


class CsvFormatError(ValueError):
    """Malformed CSV table."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (features x samples) in [0, 1] with one-hot labels."""

    features: np.ndarray
    labels_onehot: np.ndarray
    class_names: tuple = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = check_one_hot(self.labels_onehot)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if feats.shape[1] != labels.shape[1]:
            raise ValueError(
                f"feature/label sample counts differ: {feats.shape[1]} vs "
                f"{labels.shape[1]}"
            )
        if feats.size and (feats.min() < 0.0 or feats.max() > 1.0):
            raise ValueError("features must lie in [0, 1]")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels_onehot", labels)

    @property
    def n_features(self):
        return self.features.shape[0]

    @property
    def n_classes(self):
        return self.labels_onehot.shape[0]

    @property
    def n_samples(self):
        return self.features.shape[1]


def _read_be_u32(fh, path, what):
    raw = fh.read(4)
    if len(raw) != 4:
        raise IdxFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path):
    """Read paired IDX image and label files.

    Returns the raw ``(count, rows, cols)`` uint8 image array and the
    uint8 label vector, after validating both magics and that the counts
    match.
    """
    with open(images_path, "rb") as fh:
        magic = _read_be_u32(fh, images_path, "magic")
        if magic != IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic 0x{magic:08x}, expected "
                f"0x{IMAGES_MAGIC:08x}"
            )
        count = _read_be_u32(fh, images_path, "image count")
        rows = _read_be_u32(fh, images_path, "row count")
        cols = _read_be_u32(fh, images_path, "column count")
        payload = fh.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise IdxFormatError(f"{images_path}: truncated pixel payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols).copy()

    with open(labels_path, "rb") as fh:
        magic = _read_be_u32(fh, labels_path, "magic")
        if magic != LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x}, expected "
                f"0x{LABELS_MAGIC:08x}"
            )
        label_count = _read_be_u32(fh, labels_path, "label count")
        payload = fh.read(label_count)
        if len(payload) != label_count:
            raise IdxFormatError(f"{labels_path}: truncated label payload")
        labels = np.frombuffer(payload, dtype=np.uint8).copy()

    if count != label_count:
        raise IdxFormatError(
            f"image/label count mismatch: {count} images vs {label_count} labels"
        )
    return images, labels


def save_idx(images, labels, images_path, labels_path):
    """Write uint8 images and labels in the IDX container format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"need (n, rows, cols) images and (n,) labels, got {images.shape} "
            f"and {labels.shape}"
        )
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def _avg_pool_2x2(images):
    n, rows, cols = images.shape
    if rows % 2 or cols % 2:
        raise ValueError(f"2x2 pooling needs even image dims, got {rows}x{cols}")
    return images.reshape(n, rows // 2, 2, cols // 2, 2).mean(axis=(2, 4))


def preprocess(images, labels, downsample=False, classes=None, max_samples=None):
    """Turn raw IDX arrays into a training-ready Dataset.

    Steps, in order: optional 2x2 average pooling (28x28 becomes the
    196-feature representation), pixel scaling by 1/255, optional class
    filtering with labels remapped onto 0..k-1 in ascending class order,
    optional truncation to the first ``max_samples`` samples, one-hot
    encoding. Features are flattened in row-major pixel order.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ValueError("preprocess expects (n, rows, cols) images and (n,) labels")

    if classes is not None:
        wanted = sorted(int(c) for c in classes)
        present = set(int(v) for v in np.unique(labels))
        missing = [c for c in wanted if c not in present]
        if missing:
            raise ValueError(f"requested classes absent from labels: {missing}")
        keep = np.isin(labels, wanted)
        images, labels = images[keep], labels[keep]
        remap = {c: i for i, c in enumerate(wanted)}
        labels = np.array([remap[int(v)] for v in labels])
        class_names = tuple(str(c) for c in wanted)
        n_classes = len(wanted)
    else:
        class_names = None
        n_classes = int(labels.max()) + 1 if labels.size else 0

    if max_samples is not None:
        images, labels = images[:max_samples], labels[:max_samples]

    if downsample:
        images = _avg_pool_2x2(images)
    features = images.reshape(images.shape[0], -1).T / 255.0

    onehot = np.zeros((n_classes, labels.shape[0]))
    onehot[labels.astype(int), np.arange(labels.shape[0])] = 1.0
    return Dataset(features=features, labels_onehot=onehot, class_names=class_names)


def load_csv(path, label_column):
    """Load a headered, comma-separated numeric table.

    Features are min-max scaled per column into [0, 1] (constant columns
    map to zero); labels are one-hot encoded against their distinct
    values sorted ascending.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file, expected a header row") from None
        if label_column not in header:
            raise CsvFormatError(f"{path}: no column named {label_column!r} in header")
        label_idx = header.index(label_column)
        feature_idx = [i for i in range(len(header)) if i != label_idx]
        rows = []
        raw_labels = []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CsvFormatError(
                    f"{path}: row {row_no} has {len(row)} cells, expected "
                    f"{len(header)}"
                )
            values = []
            for i in feature_idx:
                try:
                    values.append(float(row[i]))
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: row {row_no}, column {header[i]!r}: "
                        f"non-numeric cell {row[i]!r}"
                    ) from None
            rows.append(values)
            raw_labels.append(row[label_idx])
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")

    raw = np.asarray(rows, dtype=np.float64)
    lo = raw.min(axis=0)
    hi = raw.max(axis=0)
    span = hi - lo
    scaled = np.where(span > 0.0, (raw - lo) / np.where(span > 0.0, span, 1.0), 0.0)

    try:
        keyed = sorted(set(raw_labels), key=float)
    except ValueError:
        keyed = sorted(set(raw_labels))
    index = {name: i for i, name in enumerate(keyed)}
    onehot = np.zeros((len(keyed), len(raw_labels)))
    for col, name in enumerate(raw_labels):
        onehot[index[name], col] = 1.0
    return Dataset(
        features=scaled.T, labels_onehot=onehot, class_names=tuple(keyed)
    )


def random_dataset(n_features, n_samples, n_classes, seed):
    """Uniform features with balanced cycling labels; for timing runs."""
    rng = np.random.default_rng(seed)
    features = rng.random((n_features, n_samples))
    labels = np.arange(n_samples) % n_classes
    onehot = np.zeros((n_classes, n_samples))
    onehot[labels, np.arange(n_samples)] = 1.0
    return Dataset(features=features, labels_onehot=onehot)


def synthetic_digits(n_samples, seed, image_size=28, n_classes=10):
    """Digit-like benchmark images in MNIST shape.

    Each class is a fixed mixture of smooth bumps on the pixel grid;
    samples jitter the template by up to two pixels, scale its
    brightness, and add speckle noise before uint8 quantization. The
    generator is deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    templates = []
    for _ in range(n_classes):
        canvas = np.zeros((image_size, image_size))
        for _ in range(3):
            cy, cx = rng.uniform(6, image_size - 6, size=2)
            sy, sx = rng.uniform(1.5, 4.0, size=2)
            amp = rng.uniform(0.6, 1.0)
            canvas += amp * np.exp(
                -((yy - cy) ** 2 / (2 * sy**2) + (xx - cx) ** 2 / (2 * sx**2))
            )
        templates.append(canvas / canvas.max())

    images = np.zeros((n_samples, image_size, image_size), dtype=np.uint8)
    labels = (np.arange(n_samples) % n_classes).astype(np.uint8)
    for i in range(n_samples):
        base = templates[labels[i]]
        dy, dx = rng.integers(-2, 3, size=2)
        shifted = np.roll(np.roll(base, dy, axis=0), dx, axis=1)
        bright = rng.uniform(0.7, 1.0)
        noisy = bright * shifted + rng.normal(0.0, 0.08, shifted.shape)
        images[i] = np.clip(noisy, 0.0, 1.0) * 255.0
    perm = rng.permutation(n_samples)
    return images[perm], labels[perm]
