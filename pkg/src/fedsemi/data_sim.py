"""Synthetic data, non-IID client partitioning and feature-vector augmentation.

Unlabeled samples keep their true labels in a private slot of
:class:`ClientDataset`. The only sanctioned way to read them is
:func:`oracle_true_labels` (and the evaluation helpers built on it); training
and aggregation code never calls it.

JSON layout
-----------
Dataset::

    {"format": "fedsemi.dataset/1", "num_classes": C, "seed": s,
     "samples": [[x0, x1, ...], ...], "labels": [y, ...]}

Partition::

    {"format": "fedsemi.partition/1", "num_classes": C, "feature_dim": D,
     "clients": [
        {"client_id": k,
         "labeled": {"indices": [...], "samples": [[...]], "labels": [...]},
         "unlabeled": {"indices": [...], "samples": [[...]]},
         "_oracle": {"unlabeled_labels": [...]}},
        ...],
     "test": <Dataset object or null>}

Floats are written with Python's shortest round-trip repr, so a reload is
bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DataError, PartitionError

MAX_REDRAWS = 100
SIGMA_WEAK = 0.05
SIGMA_STRONG = 0.15
P_DROP = 0.1


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    seed: Optional[int] = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise DataError(f"bad dataset shapes X{X.shape} y{y.shape}")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError("labels outside [0, num_classes)")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """One client's data. ``N^L = len(y_labeled)``, ``N^U = len(X_unlabeled)``.

    Construct with :meth:`build`; the hidden labels of unlabeled samples live
    in ``_oracle_labels`` and must only be read via :func:`oracle_true_labels`.
    """

    client_id: int
    X_labeled: np.ndarray
    y_labeled: np.ndarray
    X_unlabeled: np.ndarray
    labeled_indices: np.ndarray
    unlabeled_indices: np.ndarray
    _oracle_labels: np.ndarray = field(repr=False)

    @classmethod
    def build(
        cls,
        client_id: int,
        X_labeled,
        y_labeled,
        X_unlabeled,
        hidden_labels=None,
        labeled_indices=None,
        unlabeled_indices=None,
        feature_dim: Optional[int] = None,
    ) -> "ClientDataset":
        def mat(a):
            a = np.asarray(a, dtype=np.float64)
            if a.size == 0:
                d = feature_dim if feature_dim is not None else (a.shape[1] if a.ndim == 2 else 0)
                a = a.reshape(0, d)
            return a

        XL, XU = mat(X_labeled), mat(X_unlabeled)
        if XL.shape[0] == 0 and XU.shape[0] > 0:
            XL = XL.reshape(0, XU.shape[1])
        if XU.shape[0] == 0 and XL.shape[0] > 0:
            XU = XU.reshape(0, XL.shape[1])
        yl = np.asarray(y_labeled, dtype=np.int64).reshape(-1)
        nu = XU.shape[0]
        hidden = np.full(nu, -1, dtype=np.int64) if hidden_labels is None else np.asarray(hidden_labels, dtype=np.int64)
        li = np.arange(len(yl)) if labeled_indices is None else np.asarray(labeled_indices, dtype=np.int64)
        ui = np.arange(nu) if unlabeled_indices is None else np.asarray(unlabeled_indices, dtype=np.int64)
        if yl.shape[0] != XL.shape[0] or hidden.shape[0] != nu or li.shape[0] != len(yl) or ui.shape[0] != nu:
            raise DataError(f"client {client_id}: inconsistent array lengths")
        arrays = []
        for a in (XL, yl, XU, li, ui, hidden):
            a = np.ascontiguousarray(a)
            a.flags.writeable = False
            arrays.append(a)
        return cls(int(client_id), *arrays)

    @property
    def n_labeled(self) -> int:
        return self.y_labeled.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.X_unlabeled.shape[0]

    @property
    def size(self) -> int:
        return self.n_labeled + self.n_unlabeled

    @property
    def feature_dim(self) -> int:
        return self.X_labeled.shape[1] if self.n_labeled else self.X_unlabeled.shape[1]


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset across ``num_clients`` clients.

    ``label_fraction`` maps client id to the fraction of its samples that keep
    their labels. Clients missing from the map get 1.0 if they are in
    ``labeled_client_ids`` and 0.0 otherwise.

    ``reserved_fraction`` optionally carves out, before the Dirichlet split, a
    uniformly sampled share of the whole dataset for particular clients (for
    example one labeled client holding 5% of the data). The Dirichlet split
    then covers the remaining samples and the remaining clients.
    """

    num_clients: int
    alpha: float
    labeled_client_ids: Tuple[int, ...] = ()
    seed: int = 0
    label_fraction: Optional[Mapping[int, float]] = None
    reserved_fraction: Optional[Mapping[int, float]] = None

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigurationError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be > 0")
        object.__setattr__(self, "labeled_client_ids", tuple(int(i) for i in self.labeled_client_ids))
        for k in self.labeled_client_ids:
            if not 0 <= k < self.num_clients:
                raise ConfigurationError(f"labeled client id {k} out of range")
        for name in ("label_fraction", "reserved_fraction"):
            m = getattr(self, name)
            if m is None:
                continue
            m = {int(k): float(v) for k, v in m.items()}
            for k, v in m.items():
                if not 0 <= k < self.num_clients:
                    raise ConfigurationError(f"{name}: client id {k} out of range")
                if not 0.0 <= v <= 1.0:
                    raise ConfigurationError(f"{name}[{k}] = {v} outside [0, 1]")
            object.__setattr__(self, name, m)
        if self.reserved_fraction and sum(self.reserved_fraction.values()) > 1.0:
            raise ConfigurationError("reserved fractions sum above 1")

    def fraction_labeled(self, client_id: int) -> float:
        if self.label_fraction and client_id in self.label_fraction:
            return self.label_fraction[client_id]
        return 1.0 if client_id in self.labeled_client_ids else 0.0


def gen_gaussian_mixture(
    num_classes: int,
    feature_dim: int,
    n_per_class: Sequence[int],
    spread: float,
    seed: int,
    sample_seed: Optional[int] = None,
) -> Dataset:
    """Isotropic Gaussian clusters around class means on the unit sphere.

    Means depend on ``seed`` only. Passing ``sample_seed`` draws a fresh sample
    from the same mixture, which is how a matching test set is produced.
    """
    n_per_class = [int(n) for n in n_per_class]
    if len(n_per_class) != num_classes or min(n_per_class, default=0) < 1:
        raise ConfigurationError("n_per_class needs one entry >= 1 per class")
    if spread <= 0:
        raise ConfigurationError("spread must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    if sample_seed is not None:
        rng = np.random.default_rng([seed, sample_seed])
    X = np.concatenate(
        [means[c] + spread * rng.standard_normal((n, feature_dim)) for c, n in enumerate(n_per_class)]
    )
    y = np.repeat(np.arange(num_classes), n_per_class)
    return Dataset(X, y, num_classes, seed)


def make_imbalanced_counts(num_classes: int, n_max: int, imbalance_factor: float) -> List[int]:
    """Exponential long-tail counts, ``n_max * IF ** (-c / (C - 1))``."""
    if imbalance_factor < 1:
        raise ConfigurationError("imbalance_factor must be >= 1")
    if n_max < imbalance_factor:
        raise ConfigurationError("n_max must be at least the imbalance factor")
    if num_classes == 1:
        return [int(n_max)]
    counts = [int(round(n_max * imbalance_factor ** (-c / (num_classes - 1)))) for c in range(num_classes)]
    if min(counts) < 1:
        raise ConfigurationError(f"a class count rounds to 0: {counts}")
    return counts


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    quotas = total * proportions
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _dirichlet_split(y, pool, n_clients, num_classes, alpha, seed):
    """Split ``pool`` (indices) across ``n_clients`` by per-class Dirichlet draws."""
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng([seed, 1, attempt])
        parts = [[] for _ in range(n_clients)]
        ok = True
        for c in range(num_classes):
            idx = pool[y[pool] == c]
            if len(idx) == 0:
                continue
            idx = rng.permutation(idx)
            p = rng.dirichlet(np.full(n_clients, alpha))
            if not np.all(np.isfinite(p)):
                ok = False
                break
            p = p / p.sum()
            counts = _largest_remainder(len(idx), p)
            for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                parts[k].append(chunk)
        if ok:
            parts = [np.sort(np.concatenate(p)) if p else np.empty(0, np.int64) for p in parts]
            if all(len(p) > 0 for p in parts):
                return parts
    raise PartitionError(f"could not give every client a sample after {MAX_REDRAWS} re-draws")


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> List[ClientDataset]:
    """Non-IID split of ``ds`` into ``spec.num_clients`` clients."""
    n = len(ds)
    K = spec.num_clients
    if K > n:
        raise ConfigurationError(f"{K} clients for {n} samples")
    y = ds.y
    assigned: Dict[int, np.ndarray] = {}
    pool = np.arange(n)
    reserved = spec.reserved_fraction or {}
    if reserved:
        perm = np.random.default_rng([spec.seed, 0]).permutation(n)
        pos = 0
        for k in sorted(reserved):
            take = int(round(reserved[k] * n))
            if take < 1:
                raise PartitionError(f"reserved share of client {k} rounds to 0 samples")
            assigned[k] = np.sort(perm[pos:pos + take])
            pos += take
        pool = np.sort(perm[pos:])
    rest = [k for k in range(K) if k not in assigned]
    if rest:
        if len(pool) < len(rest):
            raise PartitionError("not enough unreserved samples for the remaining clients")
        for k, part in zip(rest, _dirichlet_split(y, pool, len(rest), ds.num_classes, spec.alpha, spec.seed)):
            assigned[k] = part
    elif len(pool):
        raise PartitionError(f"{len(pool)} samples left over after reservations")

    clients = []
    for k in range(K):
        idx = assigned[k]
        n_lab = int(round(spec.fraction_labeled(k) * len(idx)))
        keep = np.random.default_rng([spec.seed, 2, k]).permutation(len(idx))[:n_lab]
        lab_mask = np.zeros(len(idx), dtype=bool)
        lab_mask[keep] = True
        li, ui = idx[lab_mask], idx[~lab_mask]
        clients.append(
            ClientDataset.build(k, ds.X[li], y[li], ds.X[ui], y[ui], li, ui, feature_dim=ds.feature_dim)
        )
    return clients


def augment(x, strength: str, rng: np.random.Generator, sigma_weak: float = SIGMA_WEAK,
            sigma_strong: float = SIGMA_STRONG, p_drop: float = P_DROP) -> np.ndarray:
    """Weak view: additive Gaussian noise. Strong view: larger noise then random coordinate zeroing.

    Works on a single vector or a batch; all randomness comes from ``rng``.
    """
    x = np.asarray(x, dtype=np.float64)
    if strength == "weak":
        if sigma_weak == 0:
            return x.copy()
        return x + sigma_weak * rng.standard_normal(x.shape)
    if strength == "strong":
        out = x + sigma_strong * rng.standard_normal(x.shape)
        out[rng.random(x.shape) < p_drop] = 0.0
        return out
    raise ConfigurationError(f"unknown augmentation strength {strength!r}")


# -- evaluation-only access -------------------------------------------------

def oracle_true_labels(client: ClientDataset) -> np.ndarray:
    """True labels of ``client``'s unlabeled samples, aligned with ``X_unlabeled``.

    Evaluation use only (pseudo-label accuracy, heterogeneity reports).
    """
    return client._oracle_labels.copy()


def client_class_histogram(client: ClientDataset, num_classes: int) -> np.ndarray:
    labels = np.concatenate([client.y_labeled, oracle_true_labels(client)])
    return np.bincount(labels, minlength=num_classes)


def heterogeneity(clients: Sequence[ClientDataset], num_classes: int) -> float:
    """Mean total-variation distance between client and global class histograms."""
    hists = np.array([client_class_histogram(c, num_classes) for c in clients], dtype=np.float64)
    glob = hists.sum(axis=0) / hists.sum()
    local = hists / hists.sum(axis=1, keepdims=True)
    return float(np.mean(0.5 * np.abs(local - glob).sum(axis=1)))


# -- serialization -----------------------------------------------------------

def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "format": "fedsemi.dataset/1",
        "num_classes": ds.num_classes,
        "seed": ds.seed,
        "samples": ds.X.tolist(),
        "labels": ds.y.tolist(),
    }


def dataset_from_dict(d: dict) -> Dataset:
    X = np.array(d["samples"], dtype=np.float64)
    return Dataset(X.reshape(len(d["labels"]), -1), d["labels"], int(d["num_classes"]), d.get("seed"))


def client_to_dict(c: ClientDataset) -> dict:
    return {
        "client_id": c.client_id,
        "labeled": {
            "indices": c.labeled_indices.tolist(),
            "samples": c.X_labeled.tolist(),
            "labels": c.y_labeled.tolist(),
        },
        "unlabeled": {"indices": c.unlabeled_indices.tolist(), "samples": c.X_unlabeled.tolist()},
        "_oracle": {"unlabeled_labels": oracle_true_labels(c).tolist()},
    }


def client_from_dict(d: dict, feature_dim: int) -> ClientDataset:
    lab, unl = d["labeled"], d["unlabeled"]
    return ClientDataset.build(
        d["client_id"],
        lab["samples"],
        lab["labels"],
        unl["samples"],
        d.get("_oracle", {}).get("unlabeled_labels"),
        lab["indices"],
        unl["indices"],
        feature_dim=feature_dim,
    )


def save_partition(path, clients: Sequence[ClientDataset], num_classes: int,
                   test: Optional[Dataset] = None) -> Path:
    path = Path(path)
    doc = {
        "format": "fedsemi.partition/1",
        "num_classes": num_classes,
        "feature_dim": clients[0].feature_dim,
        "clients": [client_to_dict(c) for c in clients],
        "test": dataset_to_dict(test) if test is not None else None,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    return path


def load_partition(path) -> Tuple[List[ClientDataset], int, Optional[Dataset]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "fedsemi.partition/1":
        raise DataError(f"{path}: not a fedsemi partition file")
    D = int(doc["feature_dim"])
    clients = [client_from_dict(c, D) for c in doc["clients"]]
    test = dataset_from_dict(doc["test"]) if doc.get("test") else None
    return clients, int(doc["num_classes"]), test
