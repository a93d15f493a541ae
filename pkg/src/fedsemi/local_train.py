"""Client-side training for one federated round.

The local objective is ``lambda_sup * L_sup + lambda_unsup * L_unsup``:
cross-entropy on labeled data (optionally logit-adjusted) plus
cross-entropy of the strong view against pseudo-labels from the weak view.
Pseudo-labels use FlexMatch-style class-adaptive thresholds with the linear
mapping ``tau_c = beta_c * tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from . import tensor_net as tn
from .data_sim import P_DROP, SIGMA_STRONG, SIGMA_WEAK, ClientDataset, augment
from .errors import ConfigurationError, NumericalError

IGNORED = -1


@dataclass(frozen=True, eq=False)
class ThresholdState:
    """Per-client learning status for class-adaptive thresholds.

    ``sigma[c]`` counts unlabeled samples predicted as ``c`` with confidence
    above ``base_tau``; ``unused_count`` counts the rest. A state that has
    never seen any sample carries no evidence and falls back to ``base_tau``
    for every class.
    """

    base_tau: float
    sigma: np.ndarray
    unused_count: int = 0

    @classmethod
    def fresh(cls, num_classes: int, base_tau: float = 0.95) -> "ThresholdState":
        if not 0.0 < base_tau <= 1.0:
            raise ConfigurationError(f"base_tau must lie in (0, 1], got {base_tau}")
        return cls(float(base_tau), np.zeros(num_classes, dtype=np.int64), 0)

    @property
    def num_classes(self) -> int:
        return len(self.sigma)

    def betas(self) -> np.ndarray:
        denom = max(int(self.sigma.max(initial=0)), int(self.unused_count))
        if denom == 0:
            return np.ones(self.num_classes)
        return self.sigma / denom

    def class_thresholds(self) -> np.ndarray:
        return self.betas() * self.base_tau


@dataclass(frozen=True, eq=False)
class PseudoLabelAssignment:
    predicted: np.ndarray      # argmax class, always set
    confidence: np.ndarray     # max softmax probability
    pseudo_class: np.ndarray   # predicted class, or IGNORED

    def __len__(self):
        return len(self.predicted)

    @property
    def confident(self) -> np.ndarray:
        return self.pseudo_class != IGNORED


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr_labeled: float = 0.03
    lr_unlabeled: float = 0.02
    lambda_sup: float = 1.0
    lambda_unsup: float = 1.0
    weight_decay: float = 5e-4
    decay_head: bool = False
    logit_adjust_tau: float = 1.0
    class_prior: Optional[tuple] = None
    base_tau: float = 0.95
    sigma_weak: float = SIGMA_WEAK
    sigma_strong: float = SIGMA_STRONG
    p_drop: float = P_DROP

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_labeled <= 0 or self.lr_unlabeled <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.lambda_sup < 0 or self.lambda_unsup < 0 or self.logit_adjust_tau < 0:
            raise ConfigurationError("loss coefficients must be non-negative")
        if self.class_prior is not None:
            object.__setattr__(self, "class_prior", tuple(float(p) for p in self.class_prior))


@dataclass
class LocalRoundResult:
    params: tn.ModelParams
    state: ThresholdState
    n_confident: int
    lr: float
    n_steps: int = 0
    losses: List[float] = field(default_factory=list)
    aborted: bool = False
    message: str = ""


def logit_adjust_offsets(class_prior, tau_la: float) -> np.ndarray:
    """Per-class logit offsets ``tau_la * log(prior)``."""
    prior = np.asarray(class_prior, dtype=np.float64)
    if tau_la < 0:
        raise ConfigurationError("tau_la must be non-negative")
    if np.any(prior <= 0):
        raise ConfigurationError("class prior entries must be positive")
    if abs(prior.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"class prior sums to {prior.sum()}, not 1")
    if tau_la == 0:
        return np.zeros_like(prior)
    return tau_la * np.log(prior)


def smoothed_label_prior(labels, num_classes: int) -> np.ndarray:
    """Add-one smoothed class frequencies, strictly positive."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes) + 1.0
    return counts / counts.sum()


def update_thresholds(state: ThresholdState, assignments: PseudoLabelAssignment) -> ThresholdState:
    """Recount learning status from the latest assignments (made against ``base_tau``)."""
    if len(assignments) == 0:
        return state
    above = assignments.confidence > state.base_tau
    sigma = np.bincount(assignments.predicted[above], minlength=state.num_classes).astype(np.int64)
    return replace(state, sigma=sigma, unused_count=int(len(assignments) - above.sum()))


def assign_from_logits(logits: np.ndarray, state: ThresholdState) -> PseudoLabelAssignment:
    probs = tn.softmax(logits)
    pred = probs.argmax(axis=1)
    conf = probs[np.arange(len(pred)), pred]
    passed = conf > state.class_thresholds()[pred]
    return PseudoLabelAssignment(pred, conf, np.where(passed, pred, IGNORED))


def assign_pseudo_labels(
    params: tn.ModelParams,
    inputs,
    state: ThresholdState,
    weak_rng: Optional[np.random.Generator] = None,
    sigma_weak: float = SIGMA_WEAK,
) -> PseudoLabelAssignment:
    """Pseudo-label a batch; with ``weak_rng`` the weak view is labeled, otherwise the raw input."""
    x = np.asarray(inputs, dtype=np.float64)
    if weak_rng is not None:
        x = augment(x, "weak", weak_rng, sigma_weak=sigma_weak)
    _, logits = tn.forward(params, x)
    return assign_from_logits(logits, state)


def semi_supervised_loss(
    params: tn.ModelParams,
    x_labeled,
    y_labeled,
    x_strong,
    pseudo_class,
    lambda_sup: float = 1.0,
    lambda_unsup: float = 1.0,
    class_offsets=None,
):
    """One step of the local objective ``lambda_sup * L_sup + lambda_unsup * L_unsup``.

    Either batch may be ``None``. Pseudo-labels equal to ``IGNORED`` are
    masked out of ``L_unsup``; offsets apply to ``L_sup`` only. Returns
    ``(total, grad, sup_loss, unsup_loss)``.
    """
    terms = []
    sup = unsup = 0.0
    if x_labeled is not None and len(x_labeled):
        sup, g = tn.loss_and_grad(params, x_labeled, y_labeled, class_offsets=class_offsets)
        terms.append((lambda_sup, g))
    if x_strong is not None and len(x_strong):
        pseudo_class = np.asarray(pseudo_class)
        mask = pseudo_class != IGNORED
        unsup, g = tn.loss_and_grad(params, x_strong, np.where(mask, pseudo_class, 0), sample_mask=mask)
        terms.append((lambda_unsup, g))
    if not terms:
        return 0.0, tn.zeros_like(params.arch, tn.Gradient), 0.0, 0.0
    return lambda_sup * sup + lambda_unsup * unsup, tn.combine(terms), sup, unsup


def _batches(n: int, size: int) -> int:
    return math.ceil(n / size) if n else 0


def train_local_round(
    client: ClientDataset,
    global_params: tn.ModelParams,
    cfg: LocalTrainConfig,
    state: ThresholdState,
    rng: np.random.Generator,
    supervised_only: bool = False,
) -> LocalRoundResult:
    """Run ``cfg.epochs`` local epochs starting from ``global_params``.

    ``n_confident`` is the number of unlabeled samples the received global
    model labels confidently (round-start pass, no augmentation, current
    thresholds). With ``supervised_only`` the unlabeled data and the
    threshold state are left untouched (warm-up rounds).
    """
    NL, NU = client.n_labeled, client.n_unlabeled
    use_unlabeled = NU > 0 and not supervised_only and cfg.lambda_unsup > 0
    n_conf = 0
    if NU > 0 and not supervised_only:
        n_conf = int(assign_pseudo_labels(global_params, client.X_unlabeled, state).confident.sum())
    lr = cfg.lr_labeled if NL > 0 else cfg.lr_unlabeled
    result = LocalRoundResult(global_params, state, n_conf, lr)

    lam_sup = cfg.lambda_sup if NL > 0 else 0.0
    offsets = None
    if NL > 0 and cfg.logit_adjust_tau > 0:
        prior = cfg.class_prior
        if prior is None:
            prior = smoothed_label_prior(client.y_labeled, global_params.arch.num_classes)
        offsets = logit_adjust_offsets(prior, cfg.logit_adjust_tau)

    B = cfg.batch_size
    nb_l = _batches(NL, B) if lam_sup > 0 else 0
    nb_u = _batches(NU, B) if use_unlabeled else 0
    steps_per_epoch = max(nb_l, nb_u)
    params = global_params
    for _ in range(cfg.epochs):
        perm_l = rng.permutation(NL) if nb_l else None
        perm_u = rng.permutation(NU) if nb_u else None
        seen_pred = np.full(NU, -1, dtype=np.int64)
        seen_conf = np.zeros(NU)
        for s in range(steps_per_epoch):
            xl = yl = xs = pseudo = None
            if nb_l:
                j = (s % nb_l) * B
                idx = perm_l[j:j + B]
                xl = augment(client.X_labeled[idx], "weak", rng, sigma_weak=cfg.sigma_weak)
                yl = client.y_labeled[idx]
            if nb_u:
                j = (s % nb_u) * B
                idx = perm_u[j:j + B]
                xu = client.X_unlabeled[idx]
                a = assign_pseudo_labels(params, xu, result.state, rng, sigma_weak=cfg.sigma_weak)
                seen_pred[idx] = a.predicted
                seen_conf[idx] = a.confidence
                xs = augment(xu, "strong", rng, sigma_strong=cfg.sigma_strong, p_drop=cfg.p_drop)
                pseudo = a.pseudo_class
            total, grad, _, _ = semi_supervised_loss(params, xl, yl, xs, pseudo, lam_sup, cfg.lambda_unsup,
                                                     offsets)
            if not math.isfinite(total):
                return LocalRoundResult(global_params, state, n_conf, lr, result.n_steps, result.losses,
                                        aborted=True, message=f"non-finite loss at step {result.n_steps}")
            try:
                params = tn.sgd_step(params, grad, lr, cfg.weight_decay, cfg.decay_head)
            except NumericalError as exc:
                return LocalRoundResult(global_params, state, n_conf, lr, result.n_steps, result.losses,
                                        aborted=True, message=str(exc))
            result.losses.append(total)
            result.n_steps += 1
        if nb_u:
            seen = seen_pred >= 0
            result.state = update_thresholds(
                result.state, PseudoLabelAssignment(seen_pred[seen], seen_conf[seen], seen_pred[seen])
            )
    if not params.is_finite():
        return LocalRoundResult(global_params, state, n_conf, lr, result.n_steps, result.losses,
                                aborted=True, message="non-finite parameters after training")
    result.params = params
    return result
