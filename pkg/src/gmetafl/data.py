"""Datasets, Dirichlet client partitioning and batch sampling."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Batch
from .rng import RngStream

CIFAR_IMAGE_BYTES = 32 * 32 * 3


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class MasterDataset:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        if self.inputs.shape[0] < 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError("dataset needs matching, non-empty inputs and labels")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise DataError("labels outside [0, classes)")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: Batch
    test: Batch
    class_pmf: np.ndarray
    train_index: np.ndarray
    test_index: np.ndarray


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int = 50
    samples_per_client: int = 1000
    train_fraction: float = 0.8
    dirichlet_alpha: float = 0.01
    seed: int = 0
    allow_replacement: bool = True

    def validate(self, master_size: int | None = None):
        if self.n_clients < 1 or self.samples_per_client < 2:
            raise DataError("need n_clients >= 1 and samples_per_client >= 2")
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.dirichlet_alpha <= 0:
            raise DataError(f"dirichlet_alpha must be > 0, got {self.dirichlet_alpha}")
        if master_size is not None and self.n_clients * self.samples_per_client > master_size:
            raise DataError(
                f"{self.n_clients} clients x {self.samples_per_client} samples exceeds "
                f"the {master_size} available rows"
            )


def generate_synthetic(n_features: int, classes: int, cluster_spread: float,
                       samples: int, seed: int) -> MasterDataset:
    """Gaussian clusters with seeded means, features clipped to [0, 1].

    Labels are balanced to within one sample per class.
    """
    if n_features < 1 or classes < 2:
        raise DataError(f"degenerate dimensions: n_features={n_features}, classes={classes}")
    if samples < classes:
        raise DataError(f"need at least one sample per class ({samples} < {classes})")
    if cluster_spread < 0:
        raise DataError("cluster_spread must be >= 0")
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.2, 0.8, size=(classes, n_features))
    labels = rng.permutation(np.arange(samples) % classes)
    x = means[labels] + cluster_spread * rng.standard_normal((samples, n_features))
    return MasterDataset(np.clip(x, 0.0, 1.0), labels.astype(np.int64), classes)


def _read_exact(path: Path, expected: int) -> bytes:
    if not path.is_file():
        raise DataError(f"missing CIFAR file {path} (expected {expected} bytes)")
    raw = path.read_bytes()
    if len(raw) != expected:
        raise DataError(f"CIFAR file {path} has {len(raw)} bytes, expected {expected}")
    return raw


def cifar_files(variant: str = "C10", test: bool = False) -> list[str]:
    """File names of the binary CIFAR release for ``variant`` (C10 or C100)."""
    variant = variant.upper().replace("CIFAR", "").replace("-", "")
    if variant in ("C10", "10"):
        return ["test_batch.bin"] if test else [f"data_batch_{i}.bin" for i in range(1, 6)]
    if variant in ("C100", "100"):
        return ["test.bin"] if test else ["train.bin"]
    raise DataError(f"unknown CIFAR variant {variant!r}")


def load_cifar(path, variant: str = "C10", test: bool = False) -> MasterDataset:
    """Read the published CIFAR binary batches.

    CIFAR-10 records are one label byte plus 3072 pixel bytes; CIFAR-100
    records carry a coarse and a fine label byte, and the fine label is used.
    ``path`` may be omitted in favour of the ``CIFAR_DATA_ROOT`` env var.
    """
    root = Path(path if path is not None else os.environ.get("CIFAR_DATA_ROOT", "."))
    files = cifar_files(variant, test)
    if files[0].startswith(("data_batch", "test_batch")):
        label_bytes, classes, label_pos, per_file = 1, 10, 0, 10000
    else:
        label_bytes, classes, label_pos = 2, 100, 1
        per_file = 10000 if test else 50000
    record = label_bytes + CIFAR_IMAGE_BYTES
    blocks = []
    for name in files:
        raw = _read_exact(root / name, per_file * record)
        blocks.append(np.frombuffer(raw, dtype=np.uint8).reshape(per_file, record))
    data = np.concatenate(blocks)
    labels = data[:, label_pos].astype(np.int64)
    inputs = data[:, label_bytes:].astype(np.float64) / 255.0
    return MasterDataset(inputs, labels, classes)


def partition_dirichlet(master: MasterDataset, cfg: PartitionConfig) -> list[ClientDataset]:
    """Assign each client a Dirichlet class PMF and draw its samples.

    Each client draws its rows per class without replacement, so its train
    and test splits are disjoint; different clients draw independently from
    the whole pool and may share rows. When a class has fewer rows than a
    client needs, the shortfall is drawn with replacement if
    ``allow_replacement`` is set (duplicates may then straddle the split),
    otherwise a :class:`DataError` names the exhausted class.
    """
    cfg.validate(len(master))
    rng = np.random.default_rng(cfg.seed)
    by_class = [np.flatnonzero(master.labels == c) for c in range(master.classes)]
    n_train = int(round(cfg.train_fraction * cfg.samples_per_client))
    if not 0 < n_train < cfg.samples_per_client:
        raise DataError("train_fraction leaves an empty train or test split")
    clients = []
    for cid in range(cfg.n_clients):
        pmf = rng.dirichlet(np.full(master.classes, cfg.dirichlet_alpha))
        if not np.all(np.isfinite(pmf)) or pmf.sum() <= 0:
            # tiny alpha can underflow every component; fall back to a one-hot draw
            pmf = np.zeros(master.classes)
            pmf[rng.integers(master.classes)] = 1.0
        pmf = pmf / pmf.sum()
        counts = rng.multinomial(cfg.samples_per_client, pmf)
        idx = []
        for c, k in enumerate(counts):
            if k == 0:
                continue
            pool = by_class[c]
            if pool.size >= k:
                idx.append(rng.choice(pool, size=k, replace=False))
            elif cfg.allow_replacement and pool.size > 0:
                idx.append(rng.permutation(pool))
                idx.append(rng.choice(pool, size=k - pool.size, replace=True))
            else:
                raise DataError(
                    f"class {c} exhausted: client {cid} needs {k} samples, "
                    f"master dataset has {pool.size}"
                )
        idx = rng.permutation(np.concatenate(idx))
        tr, te = idx[:n_train], idx[n_train:]
        clients.append(ClientDataset(
            client_id=cid,
            train=Batch(master.inputs[tr], master.labels[tr]),
            test=Batch(master.inputs[te], master.labels[te]),
            class_pmf=pmf,
            train_index=tr,
            test_index=te,
        ))
    return clients


def sample_batch(client: ClientDataset, size: int, stream: RngStream) -> Batch:
    """Uniform draw of ``size`` training rows, with replacement."""
    if size < 1:
        raise DataError(f"batch size must be >= 1, got {size}")
    n = len(client.train)
    if n == 0:
        raise DataError(f"client {client.client_id} has an empty train split")
    idx = stream.integers(n, size)
    return Batch(client.train.inputs[idx], client.train.labels[idx])


def make_client(client_id: int, inputs, labels, test_inputs=None, test_labels=None,
                classes: int | None = None) -> ClientDataset:
    """Wrap raw arrays as a client, mainly for tests and oracles."""
    train = Batch(inputs, labels)
    test = Batch(test_inputs, test_labels) if test_inputs is not None else train
    C = classes or int(train.labels.max()) + 1
    pmf = np.bincount(train.labels, minlength=C) / len(train)
    return ClientDataset(client_id, train, test, pmf,
                         np.arange(len(train)), np.arange(len(test)))


@dataclass(frozen=True)
class DatasetConfig:
    """Where client data comes from: a synthetic mixture or CIFAR files."""

    kind: str = "synthetic"
    path: str | None = None
    n_features: int = 20
    classes: int = 10
    cluster_spread: float = 0.15
    samples: int = 50000
    data_seed: int = 0
    partition: PartitionConfig = PartitionConfig()

    def master(self) -> MasterDataset:
        if self.kind == "synthetic":
            return generate_synthetic(self.n_features, self.classes, self.cluster_spread,
                                      self.samples, self.data_seed)
        if self.kind in ("cifar10", "cifar100"):
            return load_cifar(self.path, "C10" if self.kind == "cifar10" else "C100")
        raise DataError(f"unknown dataset kind {self.kind!r}")

    def build(self, n_clients: int | None = None):
        """Returns ``(clients, n_features, classes)``."""
        part = self.partition
        if n_clients is not None and n_clients != part.n_clients:
            raise DataError(f"partition has {part.n_clients} clients, federation expects {n_clients}")
        master = self.master()
        return partition_dirichlet(master, part), master.n_features, master.classes
