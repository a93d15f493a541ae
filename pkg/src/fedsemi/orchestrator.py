"""Federation driver: warm-up, FedSemi rounds, evaluation, outputs and leave-one-out.

Every random draw is derived from the master seed. Client ``k`` in round
``t`` gets its own generator seeded from ``(seed, k, t)``, so results do not
depend on the order (or the threads) in which clients are processed.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata

from . import tensor_net as tn
from .aggregate import (
    STRATEGIES,
    AggregationWeights,
    ClientUpdate,
    FeatureDictionary,
    SimilarityReport,
    aggregate_round,
    build_anchor_dictionary,
    compute_similarity_report,
    round_record_json,
)
from .data_sim import (
    ClientDataset,
    Dataset,
    PartitionSpec,
    dirichlet_partition,
    gen_gaussian_mixture,
    load_partition,
    make_imbalanced_counts,
    oracle_true_labels,
)
from .errors import ConfigurationError, DataError
from .local_train import LocalTrainConfig, ThresholdState, assign_pseudo_labels, train_local_round

log = logging.getLogger(__name__)

THREADS_ENV = "FEDSEMI_THREADS"


# -- configuration -----------------------------------------------------------

@dataclass
class DatasetConfig:
    num_classes: int = 4
    feature_dim: int = 8
    n_max: int = 1124
    imbalance_factor: float = 10.0
    n_per_class: Optional[List[int]] = None
    spread: float = 0.5
    test_per_class: int = 250
    seed: Optional[int] = None
    partition_path: Optional[str] = None


@dataclass
class PartitionConfig:
    num_clients: int = 6
    alpha: float = 0.8
    labeled_client_ids: List[int] = field(default_factory=lambda: [0])
    label_fraction: Optional[Dict[str, float]] = None
    reserved_fraction: Optional[Dict[str, float]] = field(default_factory=lambda: {"0": 0.05})
    seed: Optional[int] = None


@dataclass
class ModelConfig:
    hidden_dims: List[int] = field(default_factory=lambda: [32, 32])
    encoder_split: Optional[int] = None


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    strategy: str = "semianagg"
    lambda_hat_1: Union[float, List[float]] = 0.5
    anchor_seed: int = 0
    warmup_rounds: int = 20
    rounds: int = 100
    eval_every: int = 1
    seed: int = 0
    exclude_clients: List[int] = field(default_factory=list)
    out_dir: str = "runs/default"
    threads: Optional[int] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.warmup_rounds < 0 or self.rounds < 1 or self.eval_every < 1:
            raise ConfigurationError("need warmup_rounds >= 0, rounds >= 1, eval_every >= 1")
        lams = self.lambda_hat_1 if isinstance(self.lambda_hat_1, list) else [self.lambda_hat_1]
        if not lams or any(not 0.0 <= float(v) <= 1.0 for v in lams):
            raise ConfigurationError("lambda_hat_1 values must lie in [0, 1]")

    @property
    def architecture(self) -> tn.Architecture:
        dims = [self.dataset.feature_dim, *self.model.hidden_dims, self.dataset.num_classes]
        return tn.Architecture(tuple(dims), self.model.encoder_split)

    def lambda_at(self, fedsemi_round: int) -> float:
        """Supervised mixing weight for 1-based FedSemi round ``fedsemi_round``."""
        if isinstance(self.lambda_hat_1, list):
            return float(self.lambda_hat_1[min(fedsemi_round, len(self.lambda_hat_1)) - 1])
        return float(self.lambda_hat_1)

    def to_dict(self) -> dict:
        return asdict(self)

    def echo(self) -> dict:
        """Config fields that determine results (no output path, no thread count)."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("threads")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        sections = {"dataset": DatasetConfig, "partition": PartitionConfig, "model": ModelConfig,
                    "local": LocalTrainConfig}
        kwargs = {}
        for name, sub in sections.items():
            if name in d:
                kwargs[name] = _build(sub, d.pop(name), name)
        kwargs.update(_check_keys(cls, d, "config", exclude=sections))
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc


def _check_keys(cls, d, where, exclude=()):
    known = {f.name for f in fields(cls)} - set(exclude)
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown {where} field(s): {sorted(unknown)}")
    return d


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be an object")
    try:
        return cls(**_check_keys(cls, d, where))
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(doc)


# -- seeds -------------------------------------------------------------------

def derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, np.uint64)[0])


def client_rng(master_seed: int, client_id: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(client_id), int(round_index), 0xC11E])


def _thread_count(cfg: ExperimentConfig) -> int:
    n = cfg.threads
    if n is None:
        n = int(os.environ.get(THREADS_ENV, "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


# -- data --------------------------------------------------------------------

def build_data(cfg: ExperimentConfig):
    """Return ``(clients, test_set)``, honoring ``exclude_clients``."""
    dc, pc = cfg.dataset, cfg.partition
    if dc.partition_path:
        clients, C, test = load_partition(dc.partition_path)
        if C != dc.num_classes or clients[0].feature_dim != dc.feature_dim:
            raise ConfigurationError(f"{dc.partition_path}: classes/feature_dim disagree with the config")
        if test is None:
            raise DataError(f"{dc.partition_path}: pinned partition has no test set")
    else:
        data_seed = dc.seed if dc.seed is not None else derive_seed(cfg.seed, 1)
        counts = dc.n_per_class or make_imbalanced_counts(dc.num_classes, dc.n_max, dc.imbalance_factor)
        train = gen_gaussian_mixture(dc.num_classes, dc.feature_dim, counts, dc.spread, data_seed)
        test = gen_gaussian_mixture(dc.num_classes, dc.feature_dim, [dc.test_per_class] * dc.num_classes,
                                    dc.spread, data_seed, sample_seed=1)
        spec = PartitionSpec(
            num_clients=pc.num_clients,
            alpha=pc.alpha,
            labeled_client_ids=tuple(pc.labeled_client_ids),
            seed=pc.seed if pc.seed is not None else derive_seed(cfg.seed, 2),
            label_fraction=pc.label_fraction,
            reserved_fraction=pc.reserved_fraction,
        )
        clients = dirichlet_partition(train, spec)
    excluded = set(cfg.exclude_clients)
    return [c for c in clients if c.client_id not in excluded], test


# -- evaluation --------------------------------------------------------------

def evaluate(params: tn.ModelParams, test: Dataset) -> dict:
    """Accuracy, balanced accuracy, macro precision and macro one-vs-rest AUC."""
    if len(test) == 0:
        raise DataError("empty test set")
    _, logits = tn.forward(params, test.X)
    return classification_metrics(test.y, tn.softmax(logits), test.num_classes)


def classification_metrics(y_true, scores, num_classes: int) -> dict:
    y = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    pred = scores.argmax(axis=1)
    recalls, precisions, aucs = [], [], []
    for c in range(num_classes):
        pos = y == c
        if pos.any():
            recalls.append(np.mean(pred[pos] == c))
        if (pred == c).any():
            precisions.append(np.mean(y[pred == c] == c))
        n1, n0 = int(pos.sum()), int((~pos).sum())
        if n1 and n0:
            ranks = rankdata(scores[:, c])
            aucs.append((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))
    return {
        "acc": float(np.mean(pred == y)),
        "b_acc": float(np.mean(recalls)),
        "precision": float(np.mean(precisions)) if precisions else 0.0,
        "auc": float(np.mean(aucs)) if aucs else float("nan"),
    }


def pseudo_label_accuracy(params, client: ClientDataset, state: ThresholdState) -> Optional[float]:
    """Oracle accuracy of the confident pseudo-labels the given model assigns (evaluation only)."""
    if client.n_unlabeled == 0:
        return None
    a = assign_pseudo_labels(params, client.X_unlabeled, state)
    if not a.confident.any():
        return None
    return float(np.mean(a.pseudo_class[a.confident] == oracle_true_labels(client)[a.confident]))


@dataclass
class MetricsRecord:
    round: int
    phase: str
    acc: float
    b_acc: float
    precision: float
    auc: float
    weights: Dict[int, float]
    unsup_weights: Dict[int, float]
    pseudo_acc: Dict[int, Optional[float]]
    n_confident: Dict[int, int]


# -- federation --------------------------------------------------------------

@dataclass
class FederationState:
    cfg: ExperimentConfig
    clients: List[ClientDataset]
    test: Dataset
    params: tn.ModelParams
    thresholds: Dict[int, ThresholdState]
    dictionaries: Dict[int, FeatureDictionary]
    round: int = 0
    fedsemi_round: int = 0
    metrics: List[MetricsRecord] = field(default_factory=list)
    records: List[dict] = field(default_factory=list)

    @property
    def client_ids(self) -> List[int]:
        return [c.client_id for c in self.clients]


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def _should_eval(local_round: int, phase_len: int, every: int) -> bool:
    return local_round % every == 0 or local_round == phase_len


def init_federation(cfg: ExperimentConfig, clients=None, test=None) -> FederationState:
    """Initial global model and, once for the whole run, every client's anchor dictionary."""
    if clients is None:
        clients, test = build_data(cfg)
    arch = cfg.architecture
    params = tn.init_params(arch, derive_seed(cfg.seed, 3))
    anchor = tn.init_params(arch, cfg.anchor_seed)
    C = arch.num_classes
    return FederationState(
        cfg=cfg,
        clients=sorted(clients, key=lambda c: c.client_id),
        test=test,
        params=params,
        thresholds={c.client_id: ThresholdState.fresh(C, cfg.local.base_tau) for c in clients},
        dictionaries={c.client_id: build_anchor_dictionary(anchor, c, cfg.anchor_seed) for c in clients},
    )


def _record(state, phase, weights: AggregationWeights, updates, pseudo_acc):
    cfg = state.cfg
    ids = state.client_ids
    coef = dict(zip(weights.client_ids, weights.coefficients.tolist()))
    unsup = dict(zip(weights.client_ids, weights.unsup_weights.tolist()))
    m = evaluate(state.params, state.test)
    state.metrics.append(MetricsRecord(
        round=state.round, phase=phase, **m,
        weights={k: coef.get(k, 0.0) for k in ids},
        unsup_weights={k: unsup.get(k, 0.0) for k in ids},
        pseudo_acc=pseudo_acc,
        n_confident={u.client_id: u.n_confident for u in updates},
    ))


def _round_record(state, phase, updates, weights, lam1):
    ids = state.client_ids
    coef = dict(zip(weights.client_ids, weights.coefficients.tolist()))
    return {
        "round": state.round,
        "phase": phase,
        "lambda_hat_1": lam1,
        "clients": [
            {"client_id": u.client_id, "n_labeled": u.n_labeled, "n_unlabeled": u.n_unlabeled,
             "n_confident": u.n_confident, "aborted": u.aborted}
            for u in updates
        ],
        "reports": [u.report.to_dict() for u in updates],
        "weights": weights.to_dict(),
        "coefficients": {str(k): coef.get(k, 0.0) for k in ids},
    }


def run_warmup(cfg: ExperimentConfig, clients=None, test=None) -> FederationState:
    """Supervised rounds over labeled clients, aggregated by labeled sample counts."""
    state = init_federation(cfg, clients, test)
    labeled = [c for c in state.clients if c.n_labeled > 0]
    if not labeled:
        raise ConfigurationError("warm-up needs at least one client with labeled data")
    C = cfg.dataset.num_classes
    threads = _thread_count(cfg)
    for r in range(1, cfg.warmup_rounds + 1):
        state.round += 1
        t = state.round

        def work(client):
            res = train_local_round(client, state.params, cfg.local, state.thresholds[client.client_id],
                                    client_rng(cfg.seed, client.client_id, t), supervised_only=True)
            return ClientUpdate(client.client_id, res.params,
                                SimilarityReport.empty(client.client_id, C, client.n_labeled),
                                client.n_labeled, client.n_unlabeled, 0, res.aborted)

        updates = _map(work, labeled, threads)
        state.params, weights = aggregate_round(updates, "fedavg_semi", 1.0)
        state.records.append(_round_record(state, "warmup", updates, weights, 1.0))
        if _should_eval(r, cfg.warmup_rounds, cfg.eval_every):
            _record(state, "warmup", weights, updates, {k: None for k in state.client_ids})
    return state


def _client_step(state: FederationState, client: ClientDataset, t: int):
    cfg = state.cfg
    cid = client.client_id
    thr = state.thresholds[cid]
    report = compute_similarity_report(state.params, client, state.dictionaries[cid], thr)
    res = train_local_round(client, state.params, cfg.local, thr, client_rng(cfg.seed, cid, t))
    if res.n_confident != report.n_confident:
        raise AssertionError("round-start pass disagrees between training and report")
    if res.aborted:
        log.warning("client %d round %d: %s; passing the global model through", cid, t, res.message)
        report = SimilarityReport(cid, [1.0 if n else None for n in report.counts], report.counts,
                                  report.n_labeled, report.n_zero_features)
    update = ClientUpdate(cid, res.params, report, client.n_labeled, client.n_unlabeled,
                          res.n_confident, res.aborted)
    return update, res.state


def run_round(state: FederationState, cfg: Optional[ExperimentConfig] = None) -> FederationState:
    """Broadcast, local training on every client, aggregation; returns the next state."""
    cfg = cfg or state.cfg
    state = replace(state, cfg=cfg, thresholds=dict(state.thresholds), metrics=list(state.metrics),
                    records=list(state.records))
    state.round += 1
    state.fedsemi_round += 1
    t = state.round
    lam1 = cfg.lambda_at(state.fedsemi_round)

    evaluate_now = _should_eval(state.fedsemi_round, cfg.rounds, cfg.eval_every)
    pseudo_acc = {}
    if evaluate_now:
        pseudo_acc = {c.client_id: pseudo_label_accuracy(state.params, c, state.thresholds[c.client_id])
                      for c in state.clients}

    outcomes = _map(lambda c: _client_step(state, c, t), state.clients, _thread_count(cfg))
    updates = [u for u, _ in outcomes]
    for u, thr in outcomes:
        state.thresholds[u.client_id] = thr
    state.params, weights = aggregate_round(updates, cfg.strategy, lam1)
    state.records.append(_round_record(state, "fedsemi", updates, weights, lam1))
    if evaluate_now:
        _record(state, "fedsemi", weights, updates, pseudo_acc)
    return state


def run_federation(cfg: ExperimentConfig, clients=None, test=None,
                   on_round: Optional[Callable[[FederationState], None]] = None) -> FederationState:
    state = run_warmup(cfg, clients, test)
    for _ in range(cfg.rounds):
        state = run_round(state, cfg)
        if on_round is not None:
            on_round(state)
    return state


# -- outputs -----------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def metrics_csv(state: FederationState) -> str:
    ids = state.client_ids
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "acc", "b_acc", "precision", "auc"]
               + [f"weight_{k}" for k in ids] + [f"pseudo_acc_{k}" for k in ids])
    for m in state.metrics:
        w.writerow([m.round, _fmt(m.acc), _fmt(m.b_acc), _fmt(m.precision), _fmt(m.auc)]
                   + [_fmt(m.weights[k]) for k in ids] + [_fmt(m.pseudo_acc.get(k)) for k in ids])
    return buf.getvalue()


def summary_dict(state: FederationState) -> dict:
    final = state.metrics[-1]
    return {
        "config": state.cfg.echo(),
        "strategy": state.cfg.strategy,
        "rounds_total": state.round,
        "final_round": final.round,
        "final_metrics": {"acc": final.acc, "b_acc": final.b_acc, "precision": final.precision,
                          "auc": final.auc},
        "clients": [{"client_id": c.client_id, "n_labeled": c.n_labeled, "n_unlabeled": c.n_unlabeled}
                    for c in state.clients],
        "aggregation_weights": [{"round": r["round"], "phase": r["phase"], "coefficients": r["coefficients"]}
                                for r in state.records],
    }


def write_outputs(state: FederationState, out_dir) -> Path:
    out = Path(out_dir)
    try:
        (out / "weights").mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(state))
        (out / "summary.json").write_text(json.dumps(summary_dict(state), indent=1, sort_keys=True))
        for rec in state.records:
            (out / "weights" / f"round_{rec['round']}.json").write_text(json.dumps(rec, indent=1))
    except OSError as exc:
        raise OSError(f"cannot write outputs under {out}: {exc}") from exc
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> FederationState:
    """Warm-up plus ``cfg.rounds`` FedSemi rounds; writes metrics.csv, summary.json and weights/."""
    state = run_federation(cfg)
    write_outputs(state, out_dir if out_dir is not None else cfg.out_dir)
    return state


# -- leave-one-out -----------------------------------------------------------

@dataclass
class LooRow:
    client_id: str
    data_size: int
    error_full: float
    error_without: float

    @property
    def delta_error(self) -> float:
        return self.error_without - self.error_full


def leave_one_out(cfg: ExperimentConfig, out_dir=None) -> List[LooRow]:
    """Value each fully unlabeled client by the error increase when it is left out.

    The first row is the full-run baseline (``client_id == "full"``).
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    clients, _ = build_data(cfg)
    unlabeled = [c for c in clients if c.n_labeled == 0 and c.n_unlabeled > 0]
    if len(unlabeled) < 2:
        raise ConfigurationError("leave-one-out needs at least 2 fully unlabeled clients")
    full = run_experiment(cfg, out / "full")
    err_full = 1.0 - full.metrics[-1].acc
    rows = [LooRow("full", sum(c.size for c in clients), err_full, err_full)]
    for c in unlabeled:
        sub = replace(cfg, exclude_clients=sorted(set(cfg.exclude_clients) | {c.client_id}))
        st = run_experiment(sub, out / f"without_{c.client_id}")
        rows.append(LooRow(str(c.client_id), c.size, err_full, 1.0 - st.metrics[-1].acc))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client_id", "data_size", "error_full", "error_without", "delta_error"])
    for r in rows:
        w.writerow([r.client_id, r.data_size, _fmt(r.error_full), _fmt(r.error_without), _fmt(r.delta_error)])
    out.mkdir(parents=True, exist_ok=True)
    (out / "loo.csv").write_text(buf.getvalue())
    return rows


# -- config overrides ----------------------------------------------------------

def set_config_value(cfg: ExperimentConfig, path: str, value) -> ExperimentConfig:
    """Return a copy of ``cfg`` with the dotted field ``path`` set to ``value``."""
    d = cfg.to_dict()
    node = d
    parts = path.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigurationError(f"no config section {p!r} in {path!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigurationError(f"unknown config field {path!r}")
    node[parts[-1]] = value
    return ExperimentConfig.from_dict(copy.deepcopy(d))
