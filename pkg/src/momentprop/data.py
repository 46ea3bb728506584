"""Dataset generation, ingestion, and splitting for all experiments.

Generators are bit-reproducible under a fixed seed, splits are disjoint and
exhaustive, and regression standardization uses train-split statistics only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

TRAIN, VAL, TEST = "train", "val", "test"
_TAGS = (TRAIN, VAL, TEST)


class DataError(Exception):
    """Raised for malformed or missing data files."""


@dataclass(frozen=True)
class Standardization:
    """Train-split statistics used to standardize features and targets."""

    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float | None = None
    target_std: float | None = None


@dataclass(frozen=True)
class Dataset:
    """Features, targets, and per-example split tags.

    features is (N, Q) for tabular data or (N, C, H, W) for images; targets
    are floats (regression) or class indices (classification, -1 marking
    examples with no valid label for the model at hand).
    """

    features: np.ndarray
    targets: np.ndarray
    split: np.ndarray
    task: str
    n_classes: int | None = None
    standardization: Standardization | None = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        s = np.asarray(self.split)
        if self.task == "classification":
            t = np.asarray(self.targets, dtype=np.int64)
        else:
            t = np.asarray(self.targets, dtype=np.float64)
        if len(f) != len(t) or len(f) != len(s):
            raise ValueError("features, targets, and split tags must align")
        if not np.all(np.isin(s, _TAGS)):
            raise ValueError(f"split tags must be one of {_TAGS}")
        if self.task == "classification" and self.n_classes is not None:
            valid = (t >= 0) & (t < self.n_classes)
            if not np.all(valid):
                raise ValueError("class indices out of range")
        # datasets are shareable; freeze the backing arrays
        for arr in (f, t, s):
            try:
                arr.setflags(write=False)
            except ValueError:
                pass  # view of a read-only base
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "split", s)

    def __len__(self) -> int:
        return len(self.features)

    def xy(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == tag
        return self.features[mask], self.targets[mask]

    def train_xy(self):
        return self.xy(TRAIN)

    def val_xy(self):
        return self.xy(VAL)

    def test_xy(self):
        return self.xy(TEST)

    def counts(self) -> dict[str, int]:
        return {tag: int((self.split == tag).sum()) for tag in _TAGS}


def _split_tags(n: int, fractions, rng: np.random.Generator | None) -> np.ndarray:
    f_train, f_val, f_test = fractions
    if min(fractions) < 0 or f_train + f_val + f_test > 1.0 + 1e-9:
        raise ValueError(f"bad split fractions {fractions}")
    n_train = int(n * f_train)
    n_val = int(n * f_val)
    tags = np.array([TRAIN] * n_train + [VAL] * n_val + [TEST] * (n - n_train - n_val))
    if rng is not None:
        tags = tags[rng.permutation(n)]
    return tags


# ---------------------------------------------------------------------------
# standardization


def standardize_regression(ds: Dataset) -> Dataset:
    """Standardize features and target to zero mean / unit variance using the
    train split only; the record allows inverting predictions later."""
    if ds.task != "regression":
        raise ValueError("standardization applies to regression datasets")
    x_train, y_train = ds.train_xy()
    fm = x_train.mean(axis=0)
    fs = x_train.std(axis=0)
    fs = np.where(fs == 0.0, 1.0, fs)  # constant columns pass through
    tm = float(y_train.mean())
    ts = float(y_train.std())
    if ts == 0.0:
        ts = 1.0
    record = Standardization(feature_mean=fm, feature_std=fs, target_mean=tm, target_std=ts)
    return replace(
        ds,
        features=(ds.features - fm) / fs,
        targets=(ds.targets - tm) / ts,
        standardization=record,
    )


def destandardize_mean_var(record: Standardization, mean, variance):
    """Map predictions from standardized target space back to original units."""
    if record.target_mean is None or record.target_std is None:
        raise ValueError("record carries no target statistics")
    s = record.target_std
    return record.target_mean + s * np.asarray(mean), (s * s) * np.asarray(variance)


# ---------------------------------------------------------------------------
# 1-D toy regression


def toy_target(x):
    """Smooth multi-modal 1-D target used by the toy benchmark."""
    x = np.asarray(x, dtype=np.float64)
    return 0.3 * x * np.sin(0.4 * x)


def gen_toy_regression(
    n: int,
    x_range: tuple[float, float] = (-3.0, 19.0),
    noise_sigma: float = 0.1,
    seed: int = 0,
    val_fraction: float = 0.2,
    test_points: int = 200,
    extrapolation: float = 0.15,
) -> Dataset:
    """Noisy samples of the toy curve on x_range plus an evenly spaced test
    grid that extends beyond the range by `extrapolation` of its span."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    rng = np.random.default_rng(seed)
    lo, hi = x_range
    x = rng.uniform(lo, hi, size=n)
    y = toy_target(x) + noise_sigma * rng.standard_normal(n)
    n_val = int(n * val_fraction)
    tags = np.array([TRAIN] * (n - n_val) + [VAL] * n_val)
    tags = tags[rng.permutation(n)]
    pad = extrapolation * (hi - lo)
    x_test = np.linspace(lo - pad, hi + pad, test_points)
    y_test = toy_target(x_test) + noise_sigma * rng.standard_normal(test_points)
    features = np.concatenate([x, x_test])[:, None]
    targets = np.concatenate([y, y_test])
    split = np.concatenate([tags, np.array([TEST] * test_points)])
    return Dataset(features=features, targets=targets, split=split, task="regression")


# ---------------------------------------------------------------------------
# CSV regression tables


def load_csv_regression(
    path,
    target_column: str,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    standardize: bool = True,
) -> Dataset:
    """Parse a numeric CSV with a header row, shuffle, split, and standardize
    on train statistics.  Missing values or non-numeric cells are data errors.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if target_column not in header:
            raise DataError(f"target column {target_column!r} not in header {header}")
        t_idx = header.index(target_column)
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}")
            parsed = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    raise DataError(f"{path}:{line_no}: missing value in column {name!r}")
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}:{line_no}: non-numeric value {cell!r} in column {name!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path} has a header but no data rows")
    table = np.asarray(rows, dtype=np.float64)
    targets = table[:, t_idx]
    features = np.delete(table, t_idx, axis=1)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(table))
    features, targets = features[perm], targets[perm]
    split = _split_tags(len(table), split_fractions, rng=None)
    ds = Dataset(features=features, targets=targets, split=split, task="regression")
    return standardize_regression(ds) if standardize else ds


def write_regression_csv(path, features, targets) -> None:
    """Write (N, Q) features and (N,) targets as x0..x{Q-1},y with a header."""
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(features.shape[1])] + ["y"])
        for row, y in zip(features, targets):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(y))])


def gen_tabular_regression(
    n: int,
    n_features: int = 6,
    noise_sigma: float = 0.3,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic smooth multivariate regression table (raw, unstandardized).

    Stand-in rows for benchmark-style CSV runs: y is a fixed nonlinear
    function of the features plus Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=(n, n_features))
    coef = np.random.default_rng(seed + 1).standard_normal((3, n_features))
    y = (
        np.sin(x @ coef[0])
        + 0.3 * np.square(x @ coef[1] / np.sqrt(n_features))
        + 0.5 * (x @ coef[2] / n_features)
        + noise_sigma * rng.standard_normal(n)
    )
    return x, y


# ---------------------------------------------------------------------------
# synthetic images (desk-scale image classification benchmark)


def _image_grid(size: int):
    u = np.linspace(0.0, 1.0, size)
    return np.meshgrid(u, u, indexing="ij")  # rows (u), cols (v)


def _template(class_index: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """Class-distinct parametric pattern with per-example jitter.

    Jitter ranges are wide enough that neighbouring classes overlap for some
    draws (bars vs. bands vs. gradients), leaving irreducible confusion that
    keeps predictive uncertainty meaningful while class means stay separated.
    """
    uu, vv = _image_grid(size)
    amp = rng.uniform(0.55, 1.25)
    k = class_index
    if k == 0:  # horizontal bar
        t, w = rng.uniform(0.15, 0.85), rng.uniform(0.06, 0.22)
        img = np.exp(-0.5 * ((uu - t) / w) ** 2)
    elif k == 1:  # vertical bar
        t, w = rng.uniform(0.15, 0.85), rng.uniform(0.06, 0.22)
        img = np.exp(-0.5 * ((vv - t) / w) ** 2)
    elif k == 2:  # descending diagonal band
        o, w = rng.uniform(-0.3, 0.3), rng.uniform(0.05, 0.16)
        img = np.exp(-0.5 * (((uu - vv) / np.sqrt(2) - o) / w) ** 2)
    elif k == 3:  # ascending diagonal band
        o, w = rng.uniform(-0.3, 0.3), rng.uniform(0.05, 0.16)
        img = np.exp(-0.5 * (((uu + vv - 1.0) / np.sqrt(2) - o) / w) ** 2)
    elif k == 4:  # blob
        cu, cv = rng.uniform(0.25, 0.75, size=2)
        s = rng.uniform(0.08, 0.22)
        img = np.exp(-0.5 * ((uu - cu) ** 2 + (vv - cv) ** 2) / s**2)
    elif k == 5:  # ring
        cu, cv = rng.uniform(0.35, 0.65, size=2)
        radius, w = rng.uniform(0.18, 0.42), rng.uniform(0.04, 0.12)
        dist = np.sqrt((uu - cu) ** 2 + (vv - cv) ** 2)
        img = np.exp(-0.5 * ((dist - radius) / w) ** 2)
    elif k == 6:  # horizontal gradient
        img = vv ** rng.uniform(0.4, 2.2)
    elif k == 7:  # vertical gradient
        img = uu ** rng.uniform(0.4, 2.2)
    elif k == 8:  # checkerboard
        period = rng.uniform(0.18, 0.42)
        p1, p2 = rng.uniform(0.0, 2 * np.pi, size=2)
        img = 0.5 + 0.5 * np.sin(2 * np.pi * uu / period + p1) * np.sin(
            2 * np.pi * vv / period + p2
        )
    elif k == 9:  # four corner blobs
        s = rng.uniform(0.07, 0.16)
        img = np.zeros_like(uu)
        for cu in (0.12, 0.88):
            for cv in (0.12, 0.88):
                img += np.exp(-0.5 * ((uu - cu) ** 2 + (vv - cv) ** 2) / s**2)
    else:
        raise ValueError("templates are defined for classes 0..9")
    return amp * img


def gen_synthetic_images(
    n_per_class: int,
    n_classes: int = 10,
    size: int = 16,
    noise_sigma: float = 0.18,
    seed: int = 0,
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> Dataset:
    """Procedurally generated class-distinct images plus pixel noise.

    Classes are oriented bars, diagonal bands, blobs, rings, gradients, a
    checkerboard, and corner blobs; separable by a small conv net while still
    overlapping enough to leave nontrivial predictive uncertainty.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1 (empty dataset)")
    if not (2 <= n_classes <= 10):
        raise ValueError("n_classes must be between 2 and 10")
    rng = np.random.default_rng(seed)
    images = np.empty((n_classes * n_per_class, 1, size, size))
    labels = np.empty(n_classes * n_per_class, dtype=np.int64)
    i = 0
    for k in range(n_classes):
        for _ in range(n_per_class):
            img = _template(k, rng, size)
            images[i, 0] = img + noise_sigma * rng.standard_normal((size, size))
            labels[i] = k
            i += 1
    perm = rng.permutation(len(labels))
    images, labels = images[perm], labels[perm]
    split = _split_tags(len(labels), split_fractions, rng=None)
    return Dataset(
        features=images, targets=labels, split=split,
        task="classification", n_classes=n_classes,
    )


@dataclass(frozen=True)
class OodSplit:
    """Disjoint in-distribution / held-out class sets over one label space."""

    ind_classes: tuple[int, ...]
    ood_classes: tuple[int, ...]

    def __post_init__(self):
        ind, ood = set(self.ind_classes), set(self.ood_classes)
        if not ind or not ood:
            raise ValueError("both class sets must be nonempty")
        if ind & ood:
            raise ValueError("class sets must be disjoint")
        object.__setattr__(self, "ind_classes", tuple(sorted(ind)))
        object.__setattr__(self, "ood_classes", tuple(sorted(ood)))


def ood_partition(data: Dataset, ind_classes) -> tuple[Dataset, Dataset]:
    """Split a classification dataset into in-distribution classes (relabeled
    0..len(ind)-1) and held-out classes (targets set to -1)."""
    if data.task != "classification" or data.n_classes is None:
        raise ValueError("need a labeled classification dataset")
    ind = sorted(set(int(c) for c in ind_classes))
    if not ind:
        raise ValueError("ind_classes must be nonempty")
    if any(c < 0 or c >= data.n_classes for c in ind):
        raise ValueError(f"ind_classes out of range 0..{data.n_classes - 1}")
    if len(ind) == data.n_classes:
        raise ValueError("ind_classes covers every class; nothing is held out")
    OodSplit(tuple(ind), tuple(c for c in range(data.n_classes) if c not in ind))
    relabel = {c: i for i, c in enumerate(ind)}
    mask = np.isin(data.targets, ind)
    ind_ds = Dataset(
        features=data.features[mask],
        targets=np.array([relabel[int(t)] for t in data.targets[mask]], dtype=np.int64),
        split=data.split[mask],
        task="classification",
        n_classes=len(ind),
        standardization=data.standardization,
    )
    ood_ds = Dataset(
        features=data.features[~mask],
        targets=np.full(int((~mask).sum()), -1, dtype=np.int64),
        split=data.split[~mask],
        task="classification",
        n_classes=None,
        standardization=data.standardization,
    )
    return ind_ds, ood_ds


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches (loader only; no downloading)

_CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 channel-major pixel bytes


def load_cifar10(path) -> Dataset:
    """Read standard CIFAR-10 binary batch files from a directory or a single
    file; pixels are scaled to [0, 1] as (N, 3, 32, 32)."""
    path = Path(path)
    if path.is_dir():
        train_files = sorted(path.glob("data_batch_*"))
        test_files = sorted(path.glob("test_batch*"))
        if not train_files and not test_files:
            raise DataError(f"no CIFAR-10 batch files found in {path}")
        files = [(f, TRAIN) for f in train_files] + [(f, TEST) for f in test_files]
    elif path.exists():
        files = [(path, TRAIN)]
    else:
        raise DataError(f"no such file or directory: {path}")
    images, labels, tags = [], [], []
    for file, tag in files:
        raw = np.frombuffer(file.read_bytes(), dtype=np.uint8)
        if raw.size == 0 or raw.size % _CIFAR_RECORD != 0:
            raise DataError(f"{file}: size {raw.size} is not a multiple of {_CIFAR_RECORD}")
        records = raw.reshape(-1, _CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
        tags.extend([tag] * len(records))
    return Dataset(
        features=np.concatenate(images),
        targets=np.concatenate(labels),
        split=np.array(tags),
        task="classification",
        n_classes=10,
    )
