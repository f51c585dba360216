"""Datasets: synthetic labeled vMF mixtures and CSV / binary file formats."""

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError
from .vmf import VmfParams, sample_vmf

DATASET_MAGIC = b"SMMD"
MIN_SEPARATION_COS = 0.5
MAX_MEAN_ATTEMPTS = 1000


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray = None
    name: str = "dataset"
    means: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ValueError("labels must match the sample count")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    g: int
    dim: int
    kappa_true: float
    n: int
    seed: int = 0
    proportions: tuple = None
    input_map: str = "identity"

    def __post_init__(self):
        if self.g < 1:
            raise ValueError("g must be >= 1")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if self.kappa_true < 0:
            raise ValueError("kappa_true must be non-negative")
        if self.input_map not in ("identity", "random_linear"):
            raise ValueError(f"unknown input_map {self.input_map!r}")
        props = self.resolved_proportions()
        if props.shape != (self.g,) or np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
            raise ValueError("proportions must be g non-negative numbers summing to 1")

    def resolved_proportions(self):
        if self.proportions is None:
            return np.full(self.g, 1.0 / self.g)
        return np.asarray(self.proportions, dtype=np.float64)


def _separated_means(g, dim, rng):
    means = []
    for _ in range(g):
        for _attempt in range(MAX_MEAN_ATTEMPTS):
            cand = rng.standard_normal(dim)
            cand /= np.linalg.norm(cand)
            if all(cand @ m <= MIN_SEPARATION_COS for m in means):
                means.append(cand)
                break
        else:
            raise ValueError(f"cannot place {g} means with pairwise cosine <= "
                             f"{MIN_SEPARATION_COS} in dimension {dim}")
    return np.array(means)


def random_linear_map(dim, rng):
    """Seeded well-conditioned square matrix applied to the raw directions."""
    while True:
        A = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        if np.linalg.cond(A) < 1e3:
            return A


def generate_synthetic(spec):
    """Labeled sample from a separated vMF mixture; bit-identical for a given spec object."""
    rng = np.random.default_rng(spec.seed)
    means = _separated_means(spec.g, spec.dim, rng)
    labels = rng.choice(spec.g, size=spec.n, p=spec.resolved_proportions())
    X = np.empty((spec.n, spec.dim))
    for k in range(spec.g):
        idx = np.flatnonzero(labels == k)
        X[idx] = sample_vmf(VmfParams(means[k], spec.kappa_true), idx.size, rng)
    if spec.input_map == "random_linear":
        X = X @ random_linear_map(spec.dim, rng).T
    name = f"synthetic-g{spec.g}-d{spec.dim}-k{spec.kappa_true:g}-n{spec.n}-s{spec.seed}"
    return Dataset(X, labels, name, means=means)


# -- file formats -------------------------------------------------------------

def _load_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: line 1: missing header") from None
        header = [h.strip() for h in header]
        if not header or any(h == "" for h in header):
            raise DataFormatError(f"{path}: line 1: malformed header {header!r}")
        has_labels = header[-1].lower() == "label"
        width = len(header)
        if has_labels and width < 2:
            raise DataFormatError(f"{path}: line 1: header has no feature columns")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataFormatError(f"{path}: line {lineno}: expected {width} fields, "
                                      f"found {len(row)}")
            try:
                if has_labels:
                    rows.append([float(x) for x in row[:-1]])
                    labels.append(int(row[-1]))
                else:
                    rows.append([float(x) for x in row])
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
    dim = width - 1 if has_labels else width
    X = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return Dataset(X, np.array(labels, dtype=np.int64) if has_labels else None, str(path))


def _load_binary(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: byte 0: bad magic {blob[:4]!r}, expected {DATASET_MAGIC!r}")
    if len(blob) < 13:
        raise DataFormatError(f"{path}: byte {len(blob)}: truncated header")
    n, d, has_labels = struct.unpack_from("<IIB", blob, 4)
    if has_labels not in (0, 1):
        raise DataFormatError(f"{path}: byte 12: has_labels flag must be 0 or 1")
    off = 13
    need = off + 4 * n * d + (4 * n if has_labels else 0)
    if len(blob) != need:
        raise DataFormatError(f"{path}: byte {min(len(blob), need)}: expected {need} bytes, "
                              f"file has {len(blob)}")
    X = np.frombuffer(blob, "<f4", n * d, off).reshape(n, d).astype(np.float64)
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, "<u4", n, off + 4 * n * d).astype(np.int64)
    return Dataset(X, labels, str(path))


def load_dataset(path, format=None):
    """Load ``csv`` or ``smm_binary``; the format defaults to the file extension."""
    format = format or ("csv" if str(path).endswith(".csv") else "smm_binary")
    if format == "csv":
        return _load_csv(path)
    if format == "smm_binary":
        return _load_binary(path)
    raise ValueError(f"unknown dataset format {format!r}")


def save_dataset(ds, path, format=None):
    format = format or ("csv" if str(path).endswith(".csv") else "smm_binary")
    if format == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = [f"x{i}" for i in range(ds.dim)]
            if ds.labels is not None:
                header.append("label")
            w.writerow(header)
            for i in range(ds.n):
                row = [repr(float(x)) for x in ds.features[i]]
                if ds.labels is not None:
                    row.append(str(int(ds.labels[i])))
                w.writerow(row)
    elif format == "smm_binary":
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(struct.pack("<IIB", ds.n, ds.dim, int(ds.labels is not None)))
            fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
            if ds.labels is not None:
                fh.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    else:
        raise ValueError(f"unknown dataset format {format!r}")


def train_test_split_indices(n, test_fraction=0.2, seed=0):
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return perm[n_test:], perm[:n_test]
