"""Synthetic mixtures, open-world splits and feature files.

Two on-disk formats carry a labelled dataset:

CSV
    line 1: ``<dim>,<num_classes>``; then one row per instance
    ``<label>,<v_0>,...,<v_{dim-1}>`` with values written as shortest
    round-trip decimal strings.  Every line, the last included, ends
    with ``\n``; a missing final newline is reported as truncation.

Binary (``.pdfd``), all little-endian::

    offset 0   4 bytes   magic b"PDFD"
    offset 4   u16       version (1)
    offset 6   u32       n (instances)
    offset 10  u32       dim
    offset 14  u32       num_classes
    offset 18  n * i32   labels
    then       n*dim f64 values, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

BINARY_MAGIC = b"PDFD"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sHIII")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise DataError(f"inconsistent dataset shapes x{self.x.shape} y{self.y.shape}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError(f"labels outside 0..{self.num_classes - 1}")

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return self.x.shape[0]


@dataclass
class MixtureSpec:
    means: np.ndarray  # (|Y|, input_dim)
    std: float
    samples_per_class: int
    seed: int

    def validate(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 1:
            raise ConfigError("mixture means must be a (classes, dim) array")
        if not self.std > 0:
            raise ConfigError("mixture std must be positive")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        if means.shape[0] > 1 and dist[np.triu_indices(means.shape[0], 1)].min() == 0:
            raise ConfigError("mixture means must be pairwise distinct")


def random_means(num_classes, dim, rng, radius=3.0, min_distance=4.0, max_tries=100000):
    """Random directions scaled to ``radius``, redrawn until every pair is at
    least ``min_distance`` apart."""
    if min_distance > 2 * radius:
        raise ConfigError(f"min_distance {min_distance} unreachable with radius {radius}")
    iu = np.triu_indices(num_classes, 1)
    for _ in range(max_tries):
        m = rng.standard_normal((num_classes, dim))
        m *= radius / np.linalg.norm(m, axis=1, keepdims=True)
        if num_classes < 2:
            return m
        d = np.sqrt(((m[:, None] - m[None]) ** 2).sum(axis=2))[iu]
        if d.min() >= min_distance:
            return m
    raise ConfigError("could not place mixture means; lower min_distance or raise radius")


def toy_spec(seed=0, num_classes=6, input_dim=16, std=1.0, samples_per_class=300, radius=3.0, min_distance=4.0):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D65616E]))
    means = random_means(num_classes, input_dim, rng, radius, min_distance)
    return MixtureSpec(means, std, samples_per_class, seed)


def generate_gaussian_mixture(spec: MixtureSpec) -> Dataset:
    spec.validate()
    means = np.asarray(spec.means, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x73616D70]))
    k, dim = means.shape
    xs, ys = [], []
    for c in range(k):
        xs.append(means[c] + spec.std * rng.standard_normal((spec.samples_per_class, dim)))
        ys.append(np.full(spec.samples_per_class, c))
    return Dataset(np.concatenate(xs), np.concatenate(ys), k)


@dataclass
class OwsslSplit:
    x_l: np.ndarray
    y_l: np.ndarray
    x_u: np.ndarray
    y_u_true: np.ndarray  # hidden from training; telemetry only
    x_test: np.ndarray
    y_test: np.ndarray
    seen: list
    novel: list
    num_classes: int
    ids_l: np.ndarray = field(repr=False, default=None)
    ids_u: np.ndarray = field(repr=False, default=None)
    ids_test: np.ndarray = field(repr=False, default=None)


def make_owssl_split(ds: Dataset, seen_fraction=0.5, labeled_fraction=0.5, test_fraction=0.2, seed=0) -> OwsslSplit:
    """The first ``ceil(seen_fraction * |Y|)`` class ids are seen.  Each class is
    split into a stratified test part and a training part; a
    ``labeled_fraction`` of every seen class's training part is labelled and
    the rest, together with all novel-class training data, is unlabelled."""
    for name, v in (("seen_fraction", seen_fraction), ("test_fraction", test_fraction)):
        if not (0.0 < v < 1.0):
            raise ConfigError(f"{name} must lie in (0, 1), got {v}")
    if not (0.0 < labeled_fraction <= 1.0):
        raise ConfigError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    k = ds.num_classes
    n_seen = int(np.ceil(seen_fraction * k - 1e-12))
    seen = list(range(n_seen))
    novel = list(range(n_seen, k))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x73706C74]))
    ids_l, ids_u, ids_t = [], [], []
    for c in range(k):
        members = np.flatnonzero(ds.y == c)
        members = members[rng.permutation(members.size)]
        n_test = int(np.floor(test_fraction * members.size + 1e-9))
        if n_test < 1:
            raise DataError(f"class {c} has too few instances for a test split")
        train = members[n_test:]
        if train.size < 2:
            raise DataError(f"class {c} has fewer than 2 non-test instances")
        ids_t.append(members[:n_test])
        if c in seen:
            n_lab = int(np.floor(labeled_fraction * train.size + 1e-9))
            if n_lab < 1:
                raise DataError(f"seen class {c} would have no labelled instances")
            ids_l.append(train[:n_lab])
            ids_u.append(train[n_lab:])
        else:
            ids_u.append(train)
    ids_l = np.sort(np.concatenate(ids_l))
    ids_u = np.sort(np.concatenate(ids_u))
    ids_t = np.sort(np.concatenate(ids_t))
    if np.intersect1d(ids_t, np.union1d(ids_l, ids_u)).size:
        raise DataError("test instances leaked into the training splits")
    return OwsslSplit(
        x_l=ds.x[ids_l], y_l=ds.y[ids_l],
        x_u=ds.x[ids_u], y_u_true=ds.y[ids_u],
        x_test=ds.x[ids_t], y_test=ds.y[ids_t],
        seen=seen, novel=novel, num_classes=k,
        ids_l=ids_l, ids_u=ids_u, ids_test=ids_t,
    )


# ---------------------------------------------------------------------------
# files


def save_features(ds: Dataset, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        _save_csv(ds, path)
    else:
        _save_binary(ds, path)


def load_features(path) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if raw[:4] == BINARY_MAGIC:
        return _load_binary(raw)
    return _load_csv(raw)


def _save_csv(ds, path):
    with open(path, "w", newline="") as fh:
        fh.write(f"{ds.dim},{ds.num_classes}\n")
        for label, row in zip(ds.y, ds.x):
            fh.write(",".join([str(int(label)), *(repr(float(v)) for v in row)]) + "\n")


def _load_csv(raw: bytes) -> Dataset:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("feature file is neither PDFD binary nor UTF-8 CSV", offset=exc.start) from None
    lines = text.splitlines(keepends=True)
    if not lines:
        raise FormatError("empty feature file", offset=0)
    try:
        dim, k = (int(v) for v in lines[0].strip().split(","))
    except ValueError:
        raise FormatError("CSV header must be '<dim>,<num_classes>'", offset=0) from None
    if not lines[-1].endswith("\n"):
        # rows are newline terminated, so a cut inside the last number is still caught
        raise FormatError("CSV feature file is truncated (last row lacks its newline)", offset=len(raw))
    offset = len(lines[0].encode())
    xs, ys = [], []
    for line in lines[1:]:
        fields = line.strip().split(",")
        if fields == [""]:
            offset += len(line.encode())
            continue
        if len(fields) != dim + 1:
            raise FormatError(f"row has {len(fields) - 1} values, header says {dim}", offset=offset)
        try:
            ys.append(int(fields[0]))
            xs.append([float(v) for v in fields[1:]])
        except ValueError:
            raise FormatError("non-numeric field in CSV row", offset=offset) from None
        offset += len(line.encode())
    x = np.array(xs, dtype=np.float64).reshape(len(xs), dim)
    try:
        return Dataset(x, np.array(ys, dtype=np.int64), k)
    except DataError as exc:
        raise FormatError(str(exc)) from None


def _save_binary(ds, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, len(ds), ds.dim, ds.num_classes))
        fh.write(np.ascontiguousarray(ds.y, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(ds.x, dtype="<f8").tobytes())


def _load_binary(raw: bytes) -> Dataset:
    if len(raw) < _HEADER.size:
        raise FormatError("truncated PDFD header", offset=len(raw))
    magic, version, n, dim, k = _HEADER.unpack_from(raw, 0)
    if version != BINARY_VERSION:
        raise FormatError(f"unsupported PDFD version {version}", offset=4)
    off_labels = _HEADER.size
    off_values = off_labels + 4 * n
    end = off_values + 8 * n * dim
    if len(raw) < off_values:
        raise FormatError(f"truncated label block: expected {4 * n} bytes", offset=len(raw))
    if len(raw) < end:
        raise FormatError(f"truncated payload: expected {end} bytes, file has {len(raw)}", offset=len(raw))
    if len(raw) > end:
        raise FormatError(f"{len(raw) - end} trailing bytes after payload", offset=end)
    y = np.frombuffer(raw, dtype="<i4", count=n, offset=off_labels).astype(np.int64)
    x = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=off_values).reshape(n, dim).astype(np.float64)
    try:
        return Dataset(x, y, k)
    except DataError as exc:
        raise FormatError(str(exc), offset=off_labels) from None
