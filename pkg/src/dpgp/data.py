"""Datasets: CSV tables, MNIST IDX files and two synthetic generators.

``gen_kung_like`` imitates a height-versus-age census: most people young, a
thin tail of elderly outliers, heights saturating with age.  ``gen_stripes``
draws 2-D points that crowd towards the bottom of a ``[0, 10]^2`` square and
labels them by diagonal stripes.
"""

from __future__ import annotations

import csv
import gzip
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MISSING = {"", "na", "nan", "null", "none", "?"}
IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_SIDE = 28
DOWNSAMPLED_SIDE = 15


@dataclass
class TabularDataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list = field(default_factory=list)
    output_name: str = "y"
    output_bound_d: Optional[float] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.shape[0] < 1:
            raise ValueError("dataset is empty")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y disagree in length")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset has non-finite entries")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.X.shape[1])]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "TabularDataset":
        return TabularDataset(self.X[idx], self.y[idx], list(self.feature_names),
                              self.output_name, self.output_bound_d)

    def select_features(self, names: Sequence[str]) -> "TabularDataset":
        cols = [self.feature_names.index(n) for n in names]
        return TabularDataset(self.X[:, cols], self.y, list(names), self.output_name,
                              self.output_bound_d)


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    digits: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if np.any(self.images < 0) or np.any(self.images > 255):
            raise ValueError("pixel values must lie in [0, 255]")


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"row {row}, column {column!r}: cannot parse {text!r} as a number") from None


def load_csv(path, output_column: str, feature_columns: Optional[Sequence[str]] = None,
             output_bound_d: Optional[float] = None) -> TabularDataset:
    """Read a headed CSV.  Rows with a missing value are dropped with a warning.

    Features default to every column except ``output_column``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        if output_column not in header:
            raise ValueError(f"{path}: no column {output_column!r} (have {header})")
        features = list(feature_columns) if feature_columns else [h for h in header if h != output_column]
        missing_cols = [c for c in features if c not in header]
        if missing_cols:
            raise ValueError(f"{path}: no column(s) {missing_cols}")
        cols = [header.index(c) for c in features]
        out_col = header.index(output_column)
        X, y, dropped = [], [], 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            cells = [row[c].strip() for c in cols + [out_col]]
            if any(c.lower() in MISSING for c in cells):
                dropped += 1
                continue
            vals = [_parse_float(c, lineno, h) for c, h in zip(cells, features + [output_column])]
            if not all(math.isfinite(v) for v in vals):
                dropped += 1
                continue
            X.append(vals[:-1])
            y.append(vals[-1])
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} row(s) with missing values", stacklevel=2)
    if not y:
        raise ValueError(f"{path}: no complete rows")
    return TabularDataset(np.array(X), np.array(y), features, output_column, output_bound_d)


def save_csv(ds: TabularDataset, path) -> None:
    """Write ``ds`` so that :func:`load_csv` reads back identical floats."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(ds.feature_names) + [ds.output_name])
        for xr, yv in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in xr] + [repr(float(yv))])


def bundled_path(name: str = "kung_like.csv") -> Path:
    return Path(__file__).resolve().parent / "data_files" / name


def load_kung_fixture() -> TabularDataset:
    """The shipped synthetic census table (columns age, weight, height)."""
    return load_csv(bundled_path(), "height", output_bound_d=100.0)


def labels_to_pm1(y) -> np.ndarray:
    """Map ``{0, 1}`` or ``{-1, +1}`` labels to ``{-1, +1}``."""
    y = np.asarray(y, dtype=float)
    vals = set(np.unique(y).tolist())
    if vals <= {-1.0, 1.0}:
        return y
    if vals <= {0.0, 1.0}:
        return 2.0 * y - 1.0
    raise ValueError(f"labels must be coded {{-1,+1}} or {{0,1}}, found {sorted(vals)}")


# ---------------------------------------------------------------- IDX / MNIST

def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array of its stated shape."""
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file (bad magic)")
    code, ndim = raw[2], raw[3]
    if code not in IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX element type 0x{code:02x}")
    if ndim < 1 or len(raw) < 4 + 4 * ndim:
        raise ValueError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype = np.dtype(IDX_DTYPES[code])
    count = int(np.prod(shape))
    body = raw[4 + 4 * ndim:]
    if len(body) != count * dtype.itemsize:
        raise ValueError(f"{path}: header promises {count} elements, file holds "
                         f"{len(body) // dtype.itemsize}")
    return np.frombuffer(body, dtype=dtype).reshape(shape)


def write_idx(path, arr: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (gzipped when ``path`` ends in ``.gz``)."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError("write_idx only writes uint8 arrays")
    header = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + arr.tobytes())


def _box_weights(n_in: int, n_out: int) -> np.ndarray:
    # A[i, j] = fraction of output cell i covered by input cell j
    edges = np.linspace(0.0, n_in, n_out + 1)
    A = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            A[i, j] = min(hi, j + 1) - max(lo, j)
    return A / A.sum(axis=1, keepdims=True)


def downsample(images: np.ndarray, side: int = DOWNSAMPLED_SIDE) -> np.ndarray:
    """Area-weighted box resampling of ``(N, H, W)`` images to ``side x side``."""
    images = np.asarray(images, dtype=float)
    if images.ndim == 2:
        images = images[None]
    Ah = _box_weights(images.shape[1], side)
    Aw = _box_weights(images.shape[2], side)
    out = np.einsum("ij,njk,lk->nil", Ah, images, Aw)
    # each output is a convex combination; clip rounding past the input range
    return np.clip(out, images.min(), images.max())


def load_mnist_binary(images_path, labels_path, n_train: int = 256, n_test: int = 100,
                      rng: Optional[np.random.Generator] = None):
    """Low (0-4) versus high (5-9) digits, downsampled to 15 x 15.

    Returns ``(train, test)`` :class:`ImageDataset` with labels -1 for low
    digits and +1 for high, drawn without replacement.
    """
    rng = rng if rng is not None else np.random.default_rng()
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: expected a 3-D image array, got {images.ndim}-D")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise ValueError("image and label files disagree in record count")
    total = n_train + n_test
    if total > images.shape[0]:
        raise ValueError(f"requested {total} records, files hold {images.shape[0]}")
    idx = rng.choice(images.shape[0], size=total, replace=False)
    small = downsample(images[idx]).reshape(total, -1)
    digits = labels[idx].astype(int)
    pm = np.where(digits >= 5, 1.0, -1.0)
    return (ImageDataset(small[:n_train], pm[:n_train], digits[:n_train]),
            ImageDataset(small[n_train:], pm[n_train:], digits[n_train:]))


# ------------------------------------------------------------------ synthetic

def stripe_label(X, period: float = 10.0, phase: float = 0.25) -> np.ndarray:
    """+1 / -1 by the sign of ``sin(2 pi ((x1 + x2) / period + phase))``."""
    X = np.asarray(X, dtype=float)
    s = np.sin(2 * np.pi * ((X[:, 0] + X[:, 1]) / period + phase))
    return np.where(s >= 0, 1.0, -1.0)


def gen_stripes(n: int = 200, noise_flip_prob: float = 0.1,
                rng: Optional[np.random.Generator] = None, period: float = 10.0) -> TabularDataset:
    """Noisy diagonal stripes on ``[0, 10]^2``.

    The vertical coordinate is ``10 * Beta(1, 2)``, so density falls linearly
    from the bottom edge to zero at the top.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if not 0 <= noise_flip_prob <= 1:
        raise ValueError("noise_flip_prob must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    x1 = rng.uniform(0, 10, n)
    x2 = 10 * rng.beta(1.0, 2.0, n)
    X = np.column_stack([x1, x2])
    y = stripe_label(X, period)
    flip = rng.random(n) < noise_flip_prob
    y[flip] = -y[flip]
    return TabularDataset(X, y, ["x1", "x2"], "label", 2.0)


def stripes_test_grid(period: float = 10.0) -> TabularDataset:
    """Noise-free labels on the integer grid ``{0.5, ..., 9.5}^2``."""
    g = np.arange(10) + 0.5
    X = np.array([(a, b) for b in g for a in g])
    return TabularDataset(X, stripe_label(X, period), ["x1", "x2"], "label", 2.0)


def gen_kung_like(n: int = 300, rng: Optional[np.random.Generator] = None,
                  dense_weight: float = 0.85) -> TabularDataset:
    """Synthetic (age, weight) -> height table.

    Ages: ``dense_weight`` of people uniform on 0-30, the rest uniform on
    60-90.  Height follows a saturating growth curve from 55 to about 145
    plus noise and is clipped to ``[50, 150]``, so ``d = 100`` bounds any
    single change.  Weight grows with age and height.
    """
    if n < 10:
        raise ValueError("n must be at least 10")
    rng = rng if rng is not None else np.random.default_rng()
    dense = rng.random(n) < dense_weight
    age = np.where(dense, rng.uniform(0, 30, n), rng.uniform(60, 90, n))
    growth = 1 - np.exp(-age / 7.0)
    height = 55 + 90 * growth - 0.15 * np.maximum(age - 60, 0) + rng.normal(0, 5, n)
    height = np.clip(height, 50, 150)
    weight = 3 + 40 * growth * (height / 145) ** 2 + rng.normal(0, 3, n)
    weight = np.maximum(weight, 2.0)
    X = np.column_stack([np.round(age, 2), np.round(weight, 2)])
    return TabularDataset(X, np.round(height, 2), ["age", "weight"], "height", 100.0)


def balanced_sample(strata, n: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Indices of ``n`` rows drawn as evenly as possible across strata.

    ``strata`` gives one hashable key per row (for instance a tuple of an
    input bucket and a label).  Each cell gets ``n // cells`` rows, sampled
    uniformly without replacement; leftovers go to the cells with spare rows.
    """
    rng = rng if rng is not None else np.random.default_rng()
    keys = [tuple(k) if isinstance(k, (list, np.ndarray)) else k for k in strata]
    cells = {}
    for i, k in enumerate(keys):
        cells.setdefault(k, []).append(i)
    if n > len(keys):
        raise ValueError(f"cannot draw {n} rows from {len(keys)}")
    order = sorted(cells, key=repr)
    members = {k: rng.permutation(cells[k]) for k in order}
    take = {k: 0 for k in order}
    remaining = n
    while remaining:
        open_cells = [k for k in order if take[k] < len(members[k])]
        share = max(remaining // len(open_cells), 1)
        for k in open_cells:
            extra = min(share, len(members[k]) - take[k], remaining)
            take[k] += extra
            remaining -= extra
            if not remaining:
                break
    return np.sort(np.concatenate([members[k][:take[k]] for k in order]).astype(int))
