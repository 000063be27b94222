"""Datasets: synthetic generators, IDX ingestion, binarization, normalization."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class IdxError(ValueError):
    pass


class BadMagic(IdxError):
    pass


class TruncatedFile(IdxError):
    pass


class DimOverflow(IdxError):
    pass


@dataclass
class Dataset:
    """Items (one per row) with a split tag per row.

    ``feature_mean`` and ``feature_scale`` record the affine map applied by
    :func:`normalize`; the identity for raw data.
    """

    items: np.ndarray
    splits: np.ndarray
    feature_scale: float = 1.0
    feature_mean: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.float64)
        self.splits = np.asarray(self.splits, dtype="<U5")
        if self.items.ndim != 2 or len(self.splits) != len(self.items):
            raise ValueError("items must be 2-D with one split tag per row")
        if not set(np.unique(self.splits)) <= set(SPLITS):
            raise ValueError(f"split tags must be among {SPLITS}")
        if not np.all(np.isfinite(self.items)):
            raise ValueError("items contain non-finite values")
        if self.feature_mean is None:
            self.feature_mean = np.zeros(self.items.shape[1])
        if not self.feature_scale > 0:
            raise ValueError("feature_scale must be positive")

    @property
    def n_features(self) -> int:
        return self.items.shape[1]

    def split(self, name: str) -> np.ndarray:
        return self.items[self.splits == name]


def split_tags(n: int, fractions=(0.8, 0.1, 0.1)) -> np.ndarray:
    """Contiguous train/val/test tags; val and test get floor(n * fraction) rows."""
    n_val = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train = n - n_val - n_test
    return np.array(["train"] * n_train + ["val"] * n_val + ["test"] * n_test)


def gen_ppca(w, b, sigma2: float, n: int, rng: np.random.Generator) -> Dataset:
    """Ancestral samples x = W z + b + sqrt(sigma2) eps with z, eps standard normal."""
    if n < 1:
        raise ValueError("n must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    z = rng.standard_normal((n, w.shape[1]))
    eps = rng.standard_normal((n, w.shape[0]))
    x = z @ w.T + b + np.sqrt(sigma2) * eps
    return Dataset(x, split_tags(n), meta={"kind": "ppca", "sigma2": sigma2})


def gen_toy_curve(n: int, noise_sigma: float, rng: np.random.Generator) -> Dataset:
    """Points on the curve (t, sin(1.5 t)), t ~ U[-2, 2], plus isotropic noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    t = rng.uniform(-2.0, 2.0, size=n)
    x = np.stack([t, np.sin(1.5 * t)], axis=1)
    x = x + noise_sigma * rng.standard_normal((n, 2))
    return Dataset(x, split_tags(n), meta={"kind": "toy", "noise_sigma": noise_sigma})


IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
_MAX_ITEMS = 1 << 31


def read_idx(path) -> np.ndarray:
    """Raw uint8 IDX array: images (magic 0x00000803) or labels (0x00000801).

    The header is the big-endian u32 magic followed by one big-endian u32
    per dimension.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, no header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IMAGES_MAGIC, LABELS_MAGIC):
        raise BadMagic(f"{path}: magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for dim in dims:
        count *= dim
        if count > _MAX_ITEMS:
            raise DimOverflow(f"{path}: dims {dims} exceed {_MAX_ITEMS} elements")
    if len(raw) < header + count:
        raise TruncatedFile(f"{path}: expected {header + count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(path) -> np.ndarray:
    """Images scaled to [0, 1] by /255 (float64); labels as int64."""
    arr = read_idx(path)
    if arr.ndim == 1:
        return arr.astype(np.int64)
    return arr.astype(np.float64) / 255.0


def write_idx(path, arr: np.ndarray) -> None:
    """Write a uint8 image stack (3-D) or label vector (1-D) as IDX."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8 or arr.ndim not in (1, 3):
        raise ValueError("write_idx writes uint8 arrays with 1 or 3 dims")
    header = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
}


def find_mnist(directory) -> dict[str, Path] | None:
    """Paths of the MNIST-format image files in ``directory``, or None."""
    if directory is None:
        return None
    found = {}
    for split, names in MNIST_FILES.items():
        for name in names:
            p = Path(directory) / name
            if p.exists():
                found[split] = p
                break
    return found if len(found) == 2 else None


def load_mnist(directory, limit: int | None = None) -> Dataset:
    """Canonical split: last 10k training images become validation.

    With ``limit`` the train file contributes ``0.8 * limit`` train and
    ``0.1 * limit`` val images and the test file ``0.1 * limit`` images.
    """
    paths = find_mnist(directory)
    if paths is None:
        raise FileNotFoundError(f"no MNIST-format IDX files in {directory}")
    train = load_idx(paths["train"]).reshape(-1, 28 * 28)
    test = load_idx(paths["test"]).reshape(-1, 28 * 28)
    if limit is None:
        n_val = 10_000
        tr, va, te = train[:-n_val], train[-n_val:], test
    else:
        tags = split_tags(limit)
        n_tr, n_va = (tags == "train").sum(), (tags == "val").sum()
        tr, va, te = train[:n_tr], train[n_tr:n_tr + n_va], test[:(tags == "test").sum()]
    items = np.concatenate([tr, va, te])
    splits = np.array(["train"] * len(tr) + ["val"] * len(va) + ["test"] * len(te))
    return Dataset(items, splits, meta={"kind": "idx", "path": str(directory)})


def dynamic_binarize(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Each pixel set to 1 with probability equal to its intensity."""
    image = np.asarray(image, dtype=np.float64)
    if np.any(image < 0) or np.any(image > 1):
        raise ValueError("intensities must lie in [0, 1]")
    return (rng.random(image.shape) < image).astype(np.float64)


def normalize(dataset: Dataset) -> Dataset:
    """Subtract the train-split feature mean and divide by the train RMS.

    Afterwards the mean over train items of ||x||^2 / n_features is exactly 1,
    so a unit-variance Gaussian decoder starts with a per-dimension
    reconstruction term of about 1/2 + ln(2 pi)/2.  Constant data keeps
    scale 1 and sets ``meta["degenerate_scale"]``.
    """
    train = dataset.split("train")
    if len(train) == 0:
        raise ValueError("normalize needs a nonempty train split")
    mean = train.mean(axis=0)
    centered = train - mean
    scale = float(np.sqrt(np.mean(centered * centered)))
    meta = dict(dataset.meta)
    if not scale > 0:
        log.warning("train split is constant; normalization scale falls back to 1")
        scale = 1.0
        meta["degenerate_scale"] = True
    items = (dataset.items - mean) / scale
    return replace(dataset, items=items, feature_mean=mean, feature_scale=scale, meta=meta)


def apply_normalization(items: np.ndarray, mean: np.ndarray, scale: float) -> np.ndarray:
    return (np.asarray(items, dtype=np.float64) - mean) / scale


def denormalize(dataset: Dataset) -> Dataset:
    items = dataset.items * dataset.feature_scale + dataset.feature_mean
    return replace(dataset, items=items, feature_mean=np.zeros(dataset.n_features),
                   feature_scale=1.0)


def save_flat(dataset: Dataset, path) -> None:
    """Little-endian float64 row-major items plus a ``.meta`` key=value sidecar."""
    path = Path(path)
    path.write_bytes(dataset.items.astype("<f8").tobytes())
    counts = {s: int((dataset.splits == s).sum()) for s in SPLITS}
    lines = [f"n_items={len(dataset.items)}", f"n_features={dataset.n_features}"]
    lines += [f"n_{s}={counts[s]}" for s in SPLITS]
    lines += [f"{k}={v}" for k, v in sorted(dataset.meta.items())]
    path.with_name(path.name + ".meta").write_text("\n".join(lines) + "\n")


def read_meta(path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def load_flat(path) -> Dataset:
    path = Path(path)
    meta = read_meta(path.with_name(path.name + ".meta"))
    n, f = int(meta.pop("n_items")), int(meta.pop("n_features"))
    raw = path.read_bytes()
    if len(raw) != 8 * n * f:
        raise TruncatedFile(f"{path}: expected {8 * n * f} bytes, got {len(raw)}")
    items = np.frombuffer(raw, dtype="<f8").reshape(n, f).astype(np.float64)
    counts = [int(meta.pop(f"n_{s}")) for s in SPLITS]
    splits = np.repeat(np.array(SPLITS), counts)
    return Dataset(items, splits, meta=meta)
