"""Datasets, non-IID client partitioning and auxiliary-set sampling."""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedssd.errors import (
    BadMagicError,
    CountMismatchError,
    PartitionError,
    TruncatedFileError,
)

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Attempts before giving up on a Dirichlet draw that leaves a client empty.
DIRICHLET_MAX_ATTEMPTS = 20


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = "dataset"

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"features {x.shape} and labels {y.shape} are not aligned")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, indices, name: str | None = None) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.features[idx], self.labels[idx], self.n_classes, name or self.name
        )


@dataclass(frozen=True)
class PartitionPlan:
    """Per-client index lists into a parent dataset."""

    client_indices: tuple[np.ndarray, ...]
    strategy: str
    parameter: float
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def label_histograms(self, ds: LabeledDataset) -> np.ndarray:
        """``(N, K)`` matrix of per-client class counts."""
        return np.stack(
            [np.bincount(ds.labels[idx], minlength=ds.n_classes) for idx in self.client_indices]
        )

    def client_datasets(self, ds: LabeledDataset) -> list[LabeledDataset]:
        return [ds.subset(idx, f"{ds.name}/client{i}") for i, idx in enumerate(self.client_indices)]


def generate_synthetic(
    n_classes: int,
    dim: int,
    n_per_class: int,
    separation: float,
    seed: int,
    name: str = "synthetic",
) -> LabeledDataset:
    """Unit-variance Gaussian blobs, one per class.

    Class means sit at distance ``separation`` from the origin along random
    unit directions. Rows are ordered by class.
    """
    if n_classes < 2 or dim < 2 or n_per_class < 1:
        raise ValueError("need n_classes >= 2, dim >= 2 and n_per_class >= 1")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((n_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    features = np.concatenate(
        [means[k] + rng.standard_normal((n_per_class, dim)) for k in range(n_classes)]
    )
    labels = np.repeat(np.arange(n_classes), n_per_class)
    return LabeledDataset(features, labels, n_classes, name)


def _read_idx(path: Path, expected_magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: shorter than the 4-byte magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    payload = raw[header:]
    need = int(np.prod(dims))
    if len(payload) < need:
        raise TruncatedFileError(f"{path}: {len(payload)} payload bytes, expected {need}")
    return dims, payload[:need]


def load_idx(images_path, labels_path, n_classes: int | None = None) -> LabeledDataset:
    """Load an MNIST-style IDX image/label pair, scaling pixels to [0, 1]."""
    img_dims, img_bytes = _read_idx(images_path, IDX_IMAGES_MAGIC)
    lbl_dims, lbl_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if img_dims[0] != lbl_dims[0]:
        raise CountMismatchError(
            f"{images_path} holds {img_dims[0]} images but {labels_path} holds {lbl_dims[0]} labels"
        )
    n = img_dims[0]
    d = int(np.prod(img_dims[1:]))
    features = np.frombuffer(img_bytes, dtype=np.uint8).reshape(n, d) / 255.0
    labels = np.frombuffer(lbl_bytes, dtype=np.uint8).astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n else 1
    return LabeledDataset(features, labels, n_classes, Path(images_path).stem)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for uint8 arrays of shape ``(n, rows, cols)``."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(f">{images.ndim}I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def _split_counts(shares: np.ndarray, n: int) -> np.ndarray:
    counts = np.rint(shares * n).astype(np.int64)
    diff = n - int(counts.sum())
    if diff > 0:
        counts[int(np.argmax(shares))] += diff
    elif diff < 0:
        # the largest share usually absorbs it; spill over in share order if not
        for i in np.argsort(-shares, kind="stable"):
            take = min(-diff, int(counts[i]))
            counts[i] -= take
            diff += take
            if diff == 0:
                break
    return counts


def partition_dirichlet(
    ds: LabeledDataset, n_clients: int, delta: float, seed: int
) -> PartitionPlan:
    """Label-skewed split drawing class proportions from ``Dir(delta)``.

    For every class ``k`` in order: shuffle that class's indices with the
    seeded generator, draw ``p ~ Dir(delta * 1_N)``, and hand out contiguous
    blocks of ``round(p_i * n_k)`` samples, the rounding remainder going to
    the client with the largest share. If a client ends up with nothing the
    whole draw is repeated with the same generator, at most 20 times.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not delta > 0:
        raise ValueError("delta must be > 0")
    rng = np.random.default_rng(seed)
    alpha = np.full(n_clients, float(delta))
    for attempt in range(DIRICHLET_MAX_ATTEMPTS):
        buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for k in range(ds.n_classes):
            idx = rng.permutation(np.flatnonzero(ds.labels == k))
            shares = rng.dirichlet(alpha)
            bounds = np.concatenate([[0], np.cumsum(_split_counts(shares, idx.size))])
            for i in range(n_clients):
                buckets[i].append(idx[bounds[i] : bounds[i + 1]])
        clients = tuple(np.sort(np.concatenate(b)) for b in buckets)
        if all(c.size for c in clients):
            return PartitionPlan(clients, "dirichlet", float(delta), seed)
        log.debug("dirichlet draw %d left a client empty; redrawing", attempt)
    raise PartitionError(
        f"Dir({delta}) left some client empty in {DIRICHLET_MAX_ATTEMPTS} draws"
    )


def partition_quantity(
    ds: LabeledDataset, n_clients: int, labels_per_client: int, seed: int
) -> PartitionPlan:
    """Each client holds ``labels_per_client`` classes (the ``#K=k`` split).

    Classes are dealt to clients cyclically from a seeded class permutation,
    so every class is held by ``floor`` or ``ceil`` of ``N*k/K`` clients and
    each client's classes are distinct. A class's samples are shuffled and
    split evenly among its holders.
    """
    k, n_cls = labels_per_client, ds.n_classes
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not 1 <= k <= n_cls:
        raise PartitionError(f"labels_per_client={k} is infeasible with {n_cls} classes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_cls)
    holders: list[list[int]] = [[] for _ in range(n_cls)]
    for i in range(n_clients):
        for j in range(k):
            holders[order[(i * k + j) % n_cls]].append(i)
    orphans = [c for c in range(n_cls) if not holders[c]]
    if orphans:
        warnings.warn(
            f"N*k={n_clients * k} < K={n_cls}: classes {orphans} go to extra holders",
            stacklevel=2,
        )
        for pos, c in enumerate(orphans):
            holders[c].append(pos % n_clients)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(n_cls):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        for client, part in zip(holders[c], np.array_split(idx, len(holders[c]))):
            buckets[client].append(part)
    clients = tuple(
        np.sort(np.concatenate(b)) if b else np.empty(0, dtype=np.int64) for b in buckets
    )
    return PartitionPlan(clients, "quantity", float(k), seed)


def partition_iid(ds: LabeledDataset, n_clients: int, seed: int) -> PartitionPlan:
    rng = np.random.default_rng(seed)
    parts = np.array_split(rng.permutation(len(ds)), n_clients)
    return PartitionPlan(tuple(np.sort(p) for p in parts), "iid", 0.0, seed)


@dataclass(frozen=True)
class AuxiliarySplit:
    auxiliary: LabeledDataset
    taken: np.ndarray
    remaining: np.ndarray


def sample_auxiliary(ds: LabeledDataset, per_class: int, seed: int) -> AuxiliarySplit:
    """Draw a label-balanced subset without replacement.

    The subset is class-sorted, original order kept within a class. Also
    returns the taken and remaining parent indices so callers can keep the
    subset disjoint from client data.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    counts = ds.class_counts()
    short = np.flatnonzero(counts < per_class)
    if short.size:
        raise ValueError(
            f"classes {short.tolist()} have fewer than {per_class} samples"
        )
    rng = np.random.default_rng(seed)
    taken = np.concatenate(
        [
            np.sort(rng.choice(np.flatnonzero(ds.labels == k), per_class, replace=False))
            for k in range(ds.n_classes)
        ]
    )
    remaining = np.setdiff1d(np.arange(len(ds)), taken)
    return AuxiliarySplit(ds.subset(taken, f"{ds.name}/aux"), taken, remaining)


def label_skew_l1(plan: PartitionPlan, ds: LabeledDataset) -> float:
    """Mean L1 distance between each client's label distribution and uniform."""
    hist = plan.label_histograms(ds).astype(np.float64)
    totals = hist.sum(axis=1, keepdims=True)
    dist = hist[totals[:, 0] > 0] / totals[totals[:, 0] > 0]
    return float(np.abs(dist - 1.0 / ds.n_classes).sum(axis=1).mean())
