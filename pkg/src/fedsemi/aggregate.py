"""Server-side aggregation and the client-side scalars it consumes.

Three strategies resolve one convex coefficient per client:

* ``fedavg``: proportional to local data size.
* ``fedavg_semi``: ``lam1 * N^L_k / N^L_total + lam2 * Nhat^U_k / Nhat^U_total``.
* ``semianagg``: the unlabeled term is replaced by anchor-based diversity.
  Each client compares, per pseudo-class, features of the received global
  encoder against features of a frozen random anchor encoder. Low mean
  cosine similarity means high diversity ``r_c = 1 - w_hat_c``; diversities
  are normalized per class across clients and summed per client.

Clients only ever send model parameters and per-class scalars.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import tensor_net as tn
from .data_sim import ClientDataset
from .errors import AggregationError, AlignmentError, ConfigurationError
from .local_train import ThresholdState, assign_from_logits

STRATEGIES = ("fedavg", "fedavg_semi", "semianagg")
WEIGHT_SUM_TOL = 1e-9
COS_SNAP = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureDictionary:
    """Unit-normalized anchor features of one client's unlabeled samples.

    Rows whose raw feature vector is all zeros cannot be normalized; they are
    stored as zeros with ``valid[i] = False`` and skipped by the similarity sums.
    """

    features: np.ndarray
    valid: np.ndarray
    anchor_seed: Optional[int] = None

    def __len__(self):
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def storage_bytes(self, bytes_per_value: int = 4) -> int:
        return len(self) * self.feature_dim * bytes_per_value


def normalize_rows(feats: np.ndarray):
    """Return ``(unit_rows, valid)``; zero rows stay zero and are flagged invalid."""
    feats = np.asarray(feats, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1)
    valid = norms > 0
    unit = np.zeros_like(feats)
    unit[valid] = feats[valid] / norms[valid, None]
    return unit, valid


def build_anchor_dictionary(anchor_params: tn.ModelParams, client: ClientDataset,
                            anchor_seed: Optional[int] = None) -> FeatureDictionary:
    feats = tn.encode(anchor_params, client.X_unlabeled) if client.n_unlabeled else np.zeros(
        (0, anchor_params.arch.feature_dim))
    unit, valid = normalize_rows(feats)
    unit.flags.writeable = False
    valid.flags.writeable = False
    return FeatureDictionary(unit, valid, anchor_seed)


@dataclass
class SimilarityReport:
    """Per-class mean anchor/global cosine (``None`` = no data) and confident counts."""

    client_id: int
    w_hat: List[Optional[float]]
    counts: List[int]
    n_labeled: int
    n_zero_features: int = 0

    @property
    def n_confident(self) -> int:
        return int(sum(self.counts))

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @classmethod
    def empty(cls, client_id: int, num_classes: int, n_labeled: int) -> "SimilarityReport":
        return cls(client_id, [None] * num_classes, [0] * num_classes, n_labeled)

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "w_hat": self.w_hat,
            "counts": self.counts,
            "n_confident": self.n_confident,
            "n_labeled": self.n_labeled,
            "n_zero_features": self.n_zero_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityReport":
        return cls(int(d["client_id"]), list(d["w_hat"]), [int(c) for c in d["counts"]],
                   int(d["n_labeled"]), int(d.get("n_zero_features", 0)))


def pseudo_aware_similarity(q_unit, q_valid, global_feats, pseudo, num_classes: int):
    """Per-class mean cosine between anchor rows and (raw) global feature rows.

    ``pseudo`` holds a class index or -1 per row. Returns ``(w_hat, counts,
    n_zero)`` where ``counts[c]`` counts every confident row of class ``c``
    and ``w_hat[c]`` averages over those rows with two non-zero feature
    vectors (``None`` when there are none).
    """
    qhat, qhat_valid = normalize_rows(global_feats)
    pseudo = np.asarray(pseudo)
    conf = pseudo >= 0
    usable = conf & q_valid & qhat_valid
    cos = np.clip(np.einsum("ij,ij->i", q_unit, qhat), -1.0, 1.0)
    # identical directions should give r = 0 exactly, not a rounding residue
    cos[cos > 1.0 - COS_SNAP] = 1.0
    counts = np.bincount(pseudo[conf], minlength=num_classes)
    n_used = np.bincount(pseudo[usable], minlength=num_classes)
    sums = np.bincount(pseudo[usable], weights=cos[usable], minlength=num_classes)
    w_hat = [float(sums[c] / n_used[c]) if n_used[c] else None for c in range(num_classes)]
    return w_hat, [int(c) for c in counts], int((conf & ~usable).sum())


def compute_similarity_report(
    global_params: tn.ModelParams,
    client: ClientDataset,
    dictionary: FeatureDictionary,
    state: ThresholdState,
) -> SimilarityReport:
    """One pass of the frozen global model over the client's unlabeled data."""
    C = global_params.arch.num_classes
    if len(dictionary) != client.n_unlabeled:
        raise AlignmentError(
            f"client {client.client_id}: dictionary has {len(dictionary)} rows for {client.n_unlabeled} samples"
        )
    if client.n_unlabeled == 0:
        return SimilarityReport.empty(client.client_id, C, client.n_labeled)
    feats, logits = tn.forward(global_params, client.X_unlabeled)
    pseudo = assign_from_logits(logits, state).pseudo_class
    w_hat, counts, n_zero = pseudo_aware_similarity(dictionary.features, dictionary.valid, feats, pseudo, C)
    return SimilarityReport(client.client_id, w_hat, counts, client.n_labeled, n_zero)


@dataclass
class AggregationWeights:
    """Resolved per-client mixing coefficients for one round.

    ``coefficients[k] = lambda_hat_1 * sup_weights[k] + lambda_hat_2 * unsup_weights[k]``
    with the lambdas being the *effective* ones after degenerate-case
    handling. ``r``/``r_hat`` are only populated by ``semianagg`` (``nan`` in
    ``r`` marks a class with no data).
    """

    strategy: str
    client_ids: List[int]
    lambda_hat_1: float
    lambda_hat_2: float
    sup_weights: np.ndarray
    unsup_weights: np.ndarray
    coefficients: np.ndarray
    r: Optional[np.ndarray] = None
    r_hat: Optional[np.ndarray] = None
    r_hat_k: Optional[np.ndarray] = None
    fallback: str = ""

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else _nan_to_none(np.asarray(a).tolist())

        return {
            "strategy": self.strategy,
            "client_ids": self.client_ids,
            "lambda_hat_1": self.lambda_hat_1,
            "lambda_hat_2": self.lambda_hat_2,
            "sup_weights": arr(self.sup_weights),
            "unsup_weights": arr(self.unsup_weights),
            "coefficients": arr(self.coefficients),
            "r": arr(self.r),
            "r_hat": arr(self.r_hat),
            "r_hat_k": arr(self.r_hat_k),
            "fallback": self.fallback,
        }


def _nan_to_none(x):
    if isinstance(x, list):
        return [_nan_to_none(v) for v in x]
    return None if isinstance(x, float) and math.isnan(x) else x


def weighted_average(updates: Sequence[tn.ModelParams], weights) -> tn.ModelParams:
    """Convex combination of congruent parameter sets.

    Computed as ``p_0 + sum_k w_k (p_k - p_0)``, which equals ``sum_k w_k p_k``
    for weights summing to one and returns ``p_0`` bit for bit when all
    inputs are identical.
    """
    w = np.asarray(weights, dtype=np.float64)
    if len(updates) == 0 or len(updates) != len(w):
        raise AggregationError(f"{len(updates)} updates for {len(w)} weights")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise AggregationError("weights must be finite and non-negative")
    if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise AggregationError(f"weights sum to {w.sum()!r}, not 1")
    base = updates[0]
    for u in updates[1:]:
        if u.arch != base.arch:
            raise AggregationError("updates have different architectures")
    ws, bs = [], []
    for i in range(base.arch.n_layers):
        acc_w = base.weights[i].copy()
        acc_b = base.biases[i].copy()
        for wk, u in zip(w[1:], updates[1:]):
            acc_w += wk * (u.weights[i] - base.weights[i])
            acc_b += wk * (u.biases[i] - base.biases[i])
        ws.append(acc_w)
        bs.append(acc_b)
    return tn.ModelParams(base.arch, tuple(ws), tuple(bs))


def _normalized(x: np.ndarray) -> np.ndarray:
    total = x.sum()
    return x / total if total > 0 else np.zeros_like(x)


def _check_lambda(lam1: float):
    if not 0.0 <= lam1 <= 1.0:
        raise ConfigurationError(f"lambda_hat_1 must lie in [0, 1], got {lam1}")


def _combine(strategy, ids, lam1, sup, unsup, **extra) -> AggregationWeights:
    """Mix the two terms, moving all mass to whichever term is non-empty."""
    has_sup, has_unsup = sup.sum() > 0, unsup.sum() > 0
    fallback = extra.pop("fallback", "")
    if not has_sup and not has_unsup:
        raise AggregationError("no labeled samples and no confident unlabeled samples this round")
    if not has_unsup:
        lam1 = 1.0
        fallback = fallback or "no_unsupervised_mass"
    elif not has_sup:
        lam1 = 0.0
        fallback = fallback or "no_supervised_mass"
    lam2 = 1.0 - lam1
    coef = lam1 * sup + lam2 * unsup
    return AggregationWeights(strategy, list(ids), lam1, lam2, sup, unsup, coef, fallback=fallback, **extra)


def fedavg_weights(updates) -> AggregationWeights:
    """Weights proportional to total local data, ``N^L_k + N^U_k``."""
    ids = [u.client_id for u in updates]
    sizes = np.array([u.n_labeled + u.n_unlabeled for u in updates], dtype=np.float64)
    if sizes.sum() <= 0:
        raise AggregationError("all clients are empty")
    w = sizes / sizes.sum()
    return AggregationWeights("fedavg", ids, 1.0, 0.0, w, np.zeros_like(w), w.copy())


def fedavg_semi_weights(updates, lambda_hat_1: float = 0.5) -> AggregationWeights:
    _check_lambda(lambda_hat_1)
    ids = [u.client_id for u in updates]
    sup = _normalized(np.array([u.n_labeled for u in updates], dtype=np.float64))
    unsup = _normalized(np.array([u.n_confident for u in updates], dtype=np.float64))
    return _combine("fedavg_semi", ids, lambda_hat_1, sup, unsup)


def semianagg_weights(reports: Sequence[SimilarityReport], lambda_hat_1: float = 0.5) -> AggregationWeights:
    _check_lambda(lambda_hat_1)
    K = len(reports)
    if K == 0:
        raise AggregationError("no reports")
    C = reports[0].num_classes
    if any(rep.num_classes != C or len(rep.w_hat) != C for rep in reports):
        raise AggregationError("reports disagree on the number of classes")
    ids = [rep.client_id for rep in reports]

    w_hat = np.array([[np.nan if v is None else v for v in rep.w_hat] for rep in reports], dtype=np.float64)
    has = ~np.isnan(w_hat)
    r = np.where(has, 1.0 - w_hat, np.nan)
    r0 = np.where(has, r, 0.0)
    denom = r0.sum(axis=0)
    r_hat = np.zeros((K, C))
    cols = denom > 0
    r_hat[:, cols] = r0[:, cols] / denom[cols]
    r_hat_k = r_hat.sum(axis=1)

    fallback = ""
    if r_hat_k.sum() > 0:
        unsup = r_hat_k / r_hat_k.sum()
    else:
        contributing = np.array([rep.n_confident > 0 for rep in reports], dtype=np.float64)
        unsup = _normalized(contributing)
        if contributing.any():
            fallback = "uniform_unsupervised"
    sup = _normalized(np.array([rep.n_labeled for rep in reports], dtype=np.float64))
    return _combine("semianagg", ids, lambda_hat_1, sup, unsup, r=r, r_hat=r_hat, r_hat_k=r_hat_k,
                    fallback=fallback)


@dataclass
class ClientUpdate:
    """What one client returns to the server after a round."""

    client_id: int
    params: tn.ModelParams
    report: SimilarityReport
    n_labeled: int
    n_unlabeled: int
    n_confident: int
    aborted: bool = False


def resolve_weights(updates: Sequence[ClientUpdate], strategy: str, lambda_hat_1: float = 0.5) -> AggregationWeights:
    if strategy == "fedavg":
        return fedavg_weights(updates)
    if strategy == "fedavg_semi":
        return fedavg_semi_weights(updates, lambda_hat_1)
    if strategy == "semianagg":
        return semianagg_weights([u.report for u in updates], lambda_hat_1)
    raise ConfigurationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def aggregate_round(updates: Sequence[ClientUpdate], strategy: str, lambda_hat_1: float = 0.5):
    """Return ``(new_global_params, weights)``; updates are consumed in ascending client id order."""
    if not updates:
        raise AggregationError("no client updates")
    ordered = sorted(updates, key=lambda u: u.client_id)
    weights = resolve_weights(ordered, strategy, lambda_hat_1)
    return weighted_average([u.params for u in ordered], weights.coefficients), weights


def round_record_json(round_index: int, reports: Sequence[SimilarityReport], weights: AggregationWeights) -> str:
    return json.dumps(
        {"round": round_index, "reports": [r.to_dict() for r in reports], "weights": weights.to_dict()},
        indent=1,
    )
