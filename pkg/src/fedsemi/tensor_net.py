"""Dense rectified network with exact backprop, in float64.

Parameters are stored per layer as ``W`` of shape ``(fan_in, fan_out)`` and
``b`` of shape ``(fan_out,)`` so that a layer computes ``x @ W + b``.
Every non-final layer is followed by ReLU.

The network is split in two: layers ``[0, encoder_split)`` form the encoder
and produce the *features*; the remaining layers form the classification
head and produce the *logits*.

Flat vector layout (used by :func:`flatten` / :func:`unflatten` and by
aggregation): layer-major, and inside each layer the weight matrix in
row-major (C) order followed by the bias vector::

    [W0.ravel(), b0, W1.ravel(), b1, ..., W_{L-1}.ravel(), b_{L-1}]
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError, ShapeError


@dataclass(frozen=True)
class Architecture:
    layer_dims: Tuple[int, ...]
    encoder_split: Optional[int] = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2:
            raise ConfigurationError(f"layer_dims needs at least 2 entries, got {dims}")
        if any(d < 1 for d in dims):
            raise ConfigurationError(f"layer_dims entries must be >= 1, got {dims}")
        object.__setattr__(self, "layer_dims", dims)
        n_layers = len(dims) - 1
        split = n_layers - 1 if self.encoder_split is None else int(self.encoder_split)
        if not 1 <= split < n_layers:
            raise ConfigurationError(
                f"encoder_split must satisfy 1 <= split < {n_layers} for dims {dims}, got {split}"
            )
        object.__setattr__(self, "encoder_split", split)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[self.encoder_split]

    @property
    def n_params(self) -> int:
        d = self.layer_dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(self.n_layers))

    def is_head_layer(self, layer: int) -> bool:
        return layer >= self.encoder_split


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Per-layer weights and biases conforming to ``arch``. Arrays are read-only."""

    arch: Architecture
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def __post_init__(self):
        ws = tuple(_frozen(w) for w in self.weights)
        bs = tuple(_frozen(b) for b in self.biases)
        dims = self.arch.layer_dims
        if len(ws) != self.arch.n_layers or len(bs) != self.arch.n_layers:
            raise ShapeError(f"expected {self.arch.n_layers} layers, got {len(ws)} weights / {len(bs)} biases")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ShapeError(f"layer {i}: got W{w.shape} b{b.shape} for dims {dims}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    def layers(self):
        return zip(self.weights, self.biases)

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.layers())

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of architecture and every array."""
        return (
            self.arch == other.arch
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


class Gradient(ModelParams):
    """Partial derivatives of a scalar loss, shaped like :class:`ModelParams`."""


def zeros_like(arch: Architecture, cls=ModelParams) -> ModelParams:
    d = arch.layer_dims
    return cls(
        arch,
        tuple(np.zeros((d[i], d[i + 1])) for i in range(arch.n_layers)),
        tuple(np.zeros(d[i + 1]) for i in range(arch.n_layers)),
    )


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """Kaiming-normal weights (std ``sqrt(2 / fan_in)``) and zero biases.

    The generator is numpy's PCG64 seeded with ``seed``, so the same
    ``(arch, seed)`` gives bit-identical parameters everywhere. This is what
    makes a shared anchor encoder reproducible across clients.
    """
    if not isinstance(arch, Architecture):
        raise ConfigurationError("init_params expects an Architecture")
    rng = np.random.default_rng(int(seed))
    d = arch.layer_dims
    weights = []
    for i in range(arch.n_layers):
        std = np.sqrt(2.0 / d[i])
        weights.append(rng.standard_normal((d[i], d[i + 1])) * std)
    biases = [np.zeros(d[i + 1]) for i in range(arch.n_layers)]
    return ModelParams(arch, tuple(weights), tuple(biases))


def _as_batch(params: ModelParams, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise ShapeError(f"inputs of shape {np.shape(inputs)} do not match input dim {params.arch.input_dim}")
    return x


def _forward_trace(params: ModelParams, x: np.ndarray):
    """Return the list of layer inputs (activations) and the final logits."""
    acts = [x]
    h = x
    last = params.arch.n_layers - 1
    for i, (w, b) in enumerate(params.layers()):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(params: ModelParams, inputs) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(features, logits)`` for a batch (or a single vector, promoted to a batch of 1)."""
    acts = _forward_trace(params, _as_batch(params, inputs))
    return acts[params.arch.encoder_split], acts[-1]


def encode(params: ModelParams, inputs) -> np.ndarray:
    """Encoder-only pass; cheaper than :func:`forward` when logits are not needed."""
    h = _as_batch(params, inputs)
    for w, b in list(params.layers())[: params.arch.encoder_split]:
        h = np.maximum(h @ w + b, 0.0)
    return h


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def loss_and_grad(
    params: ModelParams,
    inputs,
    targets,
    sample_mask=None,
    class_offsets=None,
) -> Tuple[float, Gradient]:
    """Masked mean softmax cross-entropy and its exact gradient.

    ``class_offsets`` are added to the logits before the softmax (logit
    adjustment). Samples with ``sample_mask == 0`` contribute nothing; if
    every sample is masked the loss is 0 and the gradient is all zeros.
    """
    x = _as_batch(params, inputs)
    n = x.shape[0]
    C = params.arch.num_classes
    y = np.asarray(targets, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} targets for a batch of {n}")
    mask = np.ones(n, dtype=bool) if sample_mask is None else np.asarray(sample_mask).reshape(-1).astype(bool)
    if mask.shape[0] != n:
        raise ShapeError(f"mask length {mask.shape[0]} != batch size {n}")
    if np.any((y[mask] < 0) | (y[mask] >= C)):
        raise DataError(f"targets must lie in [0, {C})")

    m = int(mask.sum())
    if m == 0:
        return 0.0, zeros_like(params.arch, Gradient)

    acts = _forward_trace(params, x)
    z = acts[-1]
    if class_offsets is not None:
        z = z + np.asarray(class_offsets, dtype=np.float64)
    logp = log_softmax(z)
    idx = np.flatnonzero(mask)
    yt = y[idx]
    loss = float(-logp[idx, yt].sum() / m)

    dz = np.zeros_like(z)
    dz[idx] = np.exp(logp[idx])
    dz[idx, yt] -= 1.0
    dz /= m

    L = params.arch.n_layers
    gw = [None] * L
    gb = [None] * L
    for i in range(L - 1, -1, -1):
        gw[i] = acts[i].T @ dz
        gb[i] = dz.sum(axis=0)
        if i > 0:
            dz = (dz @ params.weights[i].T) * (acts[i] > 0)
    return loss, Gradient(params.arch, tuple(gw), tuple(gb))


def combine(terms: Sequence[Tuple[float, ModelParams]], cls=Gradient) -> ModelParams:
    """Linear combination ``sum(c * g)`` of congruent parameter sets."""
    arch = terms[0][1].arch
    L = arch.n_layers
    ws = [sum(c * g.weights[i] for c, g in terms) for i in range(L)]
    bs = [sum(c * g.biases[i] for c, g in terms) for i in range(L)]
    return cls(arch, tuple(ws), tuple(bs))


def sgd_step(
    params: ModelParams,
    grad: ModelParams,
    lr: float,
    weight_decay: float = 0.0,
    decay_head: bool = False,
) -> ModelParams:
    """One plain SGD step, ``p - lr * (g + weight_decay * p)``.

    Weight decay touches weight matrices only. With ``decay_head=False`` the
    head layers are not decayed either.
    """
    if lr <= 0:
        raise ConfigurationError(f"lr must be positive, got {lr}")
    if weight_decay < 0:
        raise ConfigurationError(f"weight_decay must be non-negative, got {weight_decay}")
    if params.arch != grad.arch:
        raise ShapeError("gradient does not match parameter architecture")
    if not grad.is_finite():
        raise NumericalError("non-finite gradient; step refused")
    new_w, new_b = [], []
    for i, ((w, b), (gw, gb)) in enumerate(zip(params.layers(), grad.layers())):
        if weight_decay and (decay_head or not params.arch.is_head_layer(i)):
            gw = gw + weight_decay * w
        new_w.append(w - lr * gw)
        new_b.append(b - lr * gb)
    return ModelParams(params.arch, tuple(new_w), tuple(new_b))


def flatten(params: ModelParams) -> np.ndarray:
    parts = []
    for w, b in params.layers():
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(arch: Architecture, vector) -> ModelParams:
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    if v.shape[0] != arch.n_params:
        raise ShapeError(f"vector of length {v.shape[0]} does not match {arch.n_params} parameters")
    d = arch.layer_dims
    ws, bs = [], []
    pos = 0
    for i in range(arch.n_layers):
        k = d[i] * d[i + 1]
        ws.append(v[pos:pos + k].reshape(d[i], d[i + 1]).copy())
        pos += k
        bs.append(v[pos:pos + d[i + 1]].copy())
        pos += d[i + 1]
    return ModelParams(arch, tuple(ws), tuple(bs))
