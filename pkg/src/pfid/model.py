"""A small rectifier network trained from scratch with momentum SGD.

Layout: ``input -> [affine + ReLU] * len(hidden_dims) -> affine (embedding)
-> affine (logits)``.  The embedding is the linear output feeding the
classification head; it is what the evaluation code consumes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, atomic_write_text
from .losses import LossConfig, LossOutput, cross_entropy_loss, pfid_loss, siamese_batch_loss
from .numerics import l2_normalize
from .pairing import PairBatch, epoch_batches

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pfid-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_MODES = ("ce", "pfid", "siamese")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = (64,)
    embedding_dim: int = 32
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if min((self.input_dim, self.embedding_dim, *self.hidden_dims)) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.embedding_dim, self.num_classes]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    pairs_per_batch: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (25, 35)
    loss_mode: str = "pfid"
    margin: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.pairs_per_batch < 1:
            raise ValueError("epochs and pairs_per_batch must be >= 1")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(e >= self.epochs or e < 0 for e in d):
            raise ValueError(f"lr_decay_epochs must be strictly increasing and < epochs, got {d}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.margin < 0 or (self.loss_mode == "siamese" and self.margin == 0):
            raise ValueError("margin must be >= 0 (and > 0 for the siamese loss)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch: one decay per decay epoch already reached."""
        n = sum(1 for e in self.lr_decay_epochs if e <= epoch)
        return self.learning_rate * self.lr_decay_factor ** n


@dataclass
class Network:
    config: NetworkConfig
    weights: list[np.ndarray]  # (fan_in, fan_out)
    biases: list[np.ndarray]

    @property
    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]


@dataclass
class SGDState:
    velocity: list[np.ndarray] = field(default_factory=list)


def init_network(config: NetworkConfig) -> Network:
    """Uniform weights in ``+-sqrt(6 / fan_in)``, zero biases."""
    rng = np.random.default_rng(config.seed)
    dims = config.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(config, weights, biases)


def _forward_cache(net: Network, x: np.ndarray):
    acts = [x]
    h = x
    n_hidden = len(net.config.hidden_dims)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < n_hidden:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(net: Network, inputs) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings and logits for one input vector or a batch of rows."""
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != net.config.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != network input dim {net.config.input_dim}")
    acts = _forward_cache(net, x)
    emb, logits = acts[-2], acts[-1]
    return (emb[0], logits[0]) if single else (emb, logits)


def backward(net: Network, acts, grad_logits, grad_emb=None) -> list[np.ndarray]:
    """Parameter gradients in the order of :attr:`Network.params`."""
    n_layers = len(net.weights)
    n_hidden = len(net.config.hidden_dims)
    gw = [None] * n_layers
    gb = [None] * n_layers
    g = np.asarray(grad_logits, dtype=np.float64)
    for i in reversed(range(n_layers)):
        if i == n_layers - 2 and grad_emb is not None:
            g = g + grad_emb
        if i < n_hidden:
            g = g * (acts[i + 1] > 0)
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = g @ net.weights[i].T
    return [*gw, *gb]


def batch_loss(net: Network, x, labels, pairs: PairBatch, mode: str, margin: float):
    """Loss value and parameter gradients for one batch (no weight decay)."""
    acts = _forward_cache(net, np.asarray(x, dtype=np.float64))
    emb, logits = acts[-2], acts[-1]
    if mode == "ce":
        out = cross_entropy_loss(logits, labels)
    elif mode == "pfid":
        out = pfid_loss(logits, labels, pairs, LossConfig(margin))
    elif mode == "siamese":
        out = siamese_batch_loss(emb, net.config.num_classes, pairs, margin)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return out.value, backward(net, acts, out.grad_logits, out.grad_embeddings)


def sgd_step(net: Network, grads, config: TrainConfig, epoch: int, state: SGDState) -> Network:
    """In-place momentum SGD with L2 weight decay folded into the gradient."""
    params = net.params
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match parameters")
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter block {k}")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    lr = config.lr_at(epoch)
    for p, v, g in zip(params, state.velocity, grads):
        v *= config.momentum
        v += g + config.weight_decay * p
        p -= lr * v
    return net


def train(dataset: Dataset, net_config: NetworkConfig, train_config: TrainConfig, on_batch=None):
    """Fit a fresh network; returns ``(network, per-epoch mean loss)``.

    Each epoch visits every anchor eligible for a similar pair once, in an
    order drawn from ``train_config.seed``; all three loss modes see the same
    batches.  ``on_batch(epoch, batch)`` is called before each update.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.labels.max() > net_config.num_classes:
        raise ValueError("dataset labels exceed the network's class count")
    if dataset.dim != net_config.input_dim:
        raise ValueError(f"dataset dim {dataset.dim} != network input dim {net_config.input_dim}")
    net = init_network(net_config)
    state = SGDState()
    rng = np.random.default_rng(train_config.seed)
    history = []
    for epoch in range(train_config.epochs):
        losses = []
        for batch in epoch_batches(dataset.labels, train_config.pairs_per_batch, rng):
            if on_batch is not None:
                on_batch(epoch, batch)
            idx = batch.sample_indices
            value, grads = batch_loss(
                net, dataset.features[idx], dataset.labels[idx], batch, train_config.loss_mode, train_config.margin
            )
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            sgd_step(net, grads, train_config, epoch, state)
            losses.append(value)
        if not losses:
            raise ValueError("dataset too small for a single batch")
        history.append(float(np.mean(losses)))
        log.debug("epoch %d lr %.1e loss %.6f", epoch, train_config.lr_at(epoch), history[-1])
    return net, history


def embed(net: Network, features) -> np.ndarray:
    """L2-normalized embeddings for rows of ``features``."""
    emb, _ = forward(net, np.atleast_2d(features))
    norms = np.linalg.norm(emb, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"zero embedding for sample(s) {zero.tolist()[:10]}")
    return l2_normalize(emb)


def predict(net: Network, features) -> np.ndarray:
    _, logits = forward(net, np.atleast_2d(features))
    return np.argmax(logits, axis=1) + 1


# -- checkpoints -------------------------------------------------------------
# JSON text.  Floats are written with repr(), which round-trips float64
# exactly, so the format is independent of platform byte order.


def checkpoint_dict(net: Network, extra: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "network_config": asdict(net.config),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "extra": extra or {},
    }


def save_checkpoint(net: Network, path, extra: dict | None = None) -> None:
    atomic_write_text(path, json.dumps(checkpoint_dict(net, extra), sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[Network, dict]:
    """Returns the network and the ``extra`` metadata stored with it."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    config = NetworkConfig(**doc["network_config"])
    weights = [np.array(w, dtype=np.float64).reshape(a, b) for w, a, b in
               zip(doc["weights"], config.layer_dims[:-1], config.layer_dims[1:])]
    biases = [np.array(b, dtype=np.float64) for b in doc["biases"]]
    return Network(config, weights, biases), doc.get("extra", {})
