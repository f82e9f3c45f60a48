"""Projector, EMA source prototypes, nearest-source-prototype classifier and its losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset, TransformSpec, transform_batch
from .tensorcore import (
    Activation, BatchNorm, Linear, Tensor, as_tensor, backward, clamp_min, l2_normalize,
    log, matmul, mean, softmax, stable_softmax, tsum, xlogx,
)

log_ = logging.getLogger(__name__)

PROTOTYPE_SOURCES = ("projection_z", "representation_h", "classifier_weights")
LOG_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# projector
# ---------------------------------------------------------------------------


class Projector:
    """h -> z head. depth 0 is the identity; depth d >= 2 stacks d-1
    (linear, batchnorm, relu) blocks before the final linear layer."""

    def __init__(self, in_dim, depth=2, width=512, hidden=None, seed=0, trainable=False):
        if not 0 <= depth <= 3:
            raise ValueError(f"projector depth must be in 0..3, got {depth}")
        self.in_dim = in_dim
        self.depth = depth
        self.width = width
        self.hidden = hidden or width
        self.trainable = trainable
        rng = np.random.default_rng([seed, 2718])
        units = []
        d = in_dim
        for i in range(depth - 1):
            units += [Linear(f"proj{i}", d, self.hidden, rng), BatchNorm(f"proj{i}_bn", self.hidden),
                      Activation(f"proj{i}_relu", "relu")]
            d = self.hidden
        if depth >= 1:
            units.append(Linear(f"proj{depth - 1}", d, width, rng))
        self.units = units

    @property
    def out_dim(self):
        return self.width if self.depth else self.in_dim

    def parameters(self):
        return [p for u in self.units for p in u.params]

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, h, mode="eval", bn_mode="batch"):
        x = as_tensor(h)
        for u in self.units:
            x = u(x, mode, bn_mode)
        return x

    def state(self):
        return ([p.data.copy() for p in self.parameters()],
                [(u.running_mean.copy(), u.running_var.copy()) for u in self.units if isinstance(u, BatchNorm)])

    def load_state(self, state):
        params, stats = state
        for p, d in zip(self.parameters(), params):
            p.data = d.copy()
        for u, (m, v) in zip([u for u in self.units if isinstance(u, BatchNorm)], stats):
            u.running_mean, u.running_var = m.copy(), v.copy()


# ---------------------------------------------------------------------------
# prototypes
# ---------------------------------------------------------------------------


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # (C, d)
    alpha: float = 0.99
    tau: float = 0.1
    source_kind: str = "projection_z"
    initialized: np.ndarray = field(default=None)

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.initialized is None:
            self.initialized = np.ones(len(self.prototypes), dtype=bool)
        if self.source_kind not in PROTOTYPE_SOURCES:
            raise ValueError(f"unknown prototype source {self.source_kind!r}")

    @classmethod
    def empty(cls, num_classes, dim, alpha=0.99, tau=0.1, source_kind="projection_z"):
        return cls(np.zeros((num_classes, dim)), alpha, tau, source_kind, np.zeros(num_classes, dtype=bool))

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    @property
    def dim(self):
        return self.prototypes.shape[1]

    def update(self, z, labels):
        """EMA update, one sample at a time in batch order; first sight of a class initializes it."""
        z = np.asarray(z, dtype=np.float64)
        for zi, k in zip(z, labels):
            k = int(k)
            if not self.initialized[k]:
                self.prototypes[k] = zi
                self.initialized[k] = True
            else:
                self.prototypes[k] = self.alpha * self.prototypes[k] + (1.0 - self.alpha) * zi

    def copy(self):
        return PrototypeBank(self.prototypes.copy(), self.alpha, self.tau, self.source_kind,
                             self.initialized.copy())


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


def _normalized_prototypes(bank):
    q = bank.prototypes
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    return q / np.maximum(norms, 1e-12)


def nsp_predict(z, bank: PrototypeBank):
    """Softmax over k of cos(z, q_k) / tau. Accepts one vector or a batch of rows."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None] if single else z
    if zb.shape[1] != bank.dim:
        raise ValueError(f"projection dim {zb.shape[1]} != prototype dim {bank.dim}")
    norms = np.linalg.norm(zb, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        log_.warning("zero-norm projection; NSP prediction falls back to uniform")
    sims = (zb / np.maximum(norms, 1e-12)) @ _normalized_prototypes(bank).T
    out = stable_softmax(sims, bank.tau)
    return out[0] if single else out


def nsp_probs(z: Tensor, bank: PrototypeBank) -> Tensor:
    """Differentiable NSP prediction for a batch; prototypes are constants."""
    z = as_tensor(z)
    if z.shape[1] != bank.dim:
        raise ValueError(f"projection dim {z.shape[1]} != prototype dim {bank.dim}")
    sims = matmul(l2_normalize(z, axis=1), Tensor(_normalized_prototypes(bank).T))
    return softmax(sims, bank.tau, axis=1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def entropy_t(p, axis=-1):
    return -tsum(xlogx(p), axis=axis)


def information_maximization(p, w_individual, w_diversity):
    """w_individual * mean_i H(p_i) - w_diversity * H(mean_i p_i)."""
    p = as_tensor(p)
    if p.shape[0] == 0:
        raise ValueError("empty batch")
    return mean(entropy_t(p, axis=1)) * w_individual - entropy_t(mean(p, 0)) * w_diversity


def _targets(y, num_classes):
    y = np.asarray(y)
    if y.ndim == 2:
        return y.astype(np.float64)
    onehot = np.zeros((len(y), num_classes))
    onehot[np.arange(len(y)), y.astype(int)] = 1.0
    return onehot


def batch_cross_entropy(targets, q, floor=LOG_FLOOR):
    """mean_i CE(targets_i, q_i) with q clamped at `floor` before the log."""
    q = as_tensor(q)
    return mean(-tsum(as_tensor(targets) * log(clamp_min(q, floor)), axis=1))


def embedding_loss(y, y_hat, y_hat_t):
    """(1/N) sum_i CE(y_i, y_hat_i) + CE(y_i, y_hat'_i); y as labels or one-hot rows."""
    y_hat, y_hat_t = as_tensor(y_hat), as_tensor(y_hat_t)
    if y_hat.shape != y_hat_t.shape or len(y) != y_hat.shape[0]:
        raise ValueError("embedding_loss: batch shapes do not match")
    t = _targets(y, y_hat.shape[1])
    return batch_cross_entropy(t, y_hat) + batch_cross_entropy(t, y_hat_t)


def aux_entropy_loss(y_hat, lambda_a1=0.8, lambda_a2=0.25):
    return information_maximization(y_hat, lambda_a1, lambda_a2)


def aux_selfsup_loss(y_hat, y_hat_t, stop_grad=True):
    """-(1/N) sum_i sum_k y_hat_i^k log y_hat'_i^k; y_hat is a fixed target when stop_grad."""
    y_hat, y_hat_t = as_tensor(y_hat), as_tensor(y_hat_t)
    if y_hat.shape != y_hat_t.shape:
        raise ValueError("aux_selfsup_loss: batch shapes do not match")
    target = y_hat.detach() if stop_grad else y_hat
    return batch_cross_entropy(target, y_hat_t)


def aux_total(y_hat, y_hat_t, lambda_a1=0.8, lambda_a2=0.25, lambda_s=0.1, stop_grad=True):
    loss = aux_entropy_loss(y_hat, lambda_a1, lambda_a2)
    if lambda_s == 0:
        return loss
    return loss + aux_selfsup_loss(y_hat, y_hat_t, stop_grad) * lambda_s


# ---------------------------------------------------------------------------
# pre-deployment training
# ---------------------------------------------------------------------------


@dataclass
class ProjectorHistory:
    mean_cos: list = field(default_factory=list)  # index 0: after initialization
    loss: list = field(default_factory=list)


def encode_all(model, images, batch_size=256):
    """Frozen-encoder representations using the stored batchnorm estimates."""
    saved = model.bn_mode
    model.bn_mode = "running"
    try:
        out = [model.encode(images[i:i + batch_size], mode="eval").data for i in range(0, len(images), batch_size)]
    finally:
        model.bn_mode = saved
    return np.concatenate(out)


def project_all(projector, h, batch_size=64, bn_mode="batch"):
    if projector.depth == 0:
        return np.asarray(h)
    chunks = []
    for i in range(0, len(h), batch_size):
        part = h[i:i + batch_size]
        mode_bn = bn_mode if len(part) >= 2 else "running"
        chunks.append(projector(part, mode="eval", bn_mode=mode_bn).data)
    return np.concatenate(chunks)


def mean_prototype_cosine(z, labels, bank):
    zn = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    q = _normalized_prototypes(bank)[np.asarray(labels, dtype=int)]
    return float(np.mean(np.sum(zn * q, axis=1)))


def train_projector_and_prototypes(model, dataset: Dataset, transform: TransformSpec, epochs=20, seed=0,
                                   depth=2, width=512, hidden=None, lr=0.05, batch_size=64, alpha=0.99,
                                   tau=0.1, source_kind="projection_z"):
    """Train the projector on the frozen encoder and build the EMA prototype bank.

    Returns (projector, bank, history). The encoder is never updated here.
    """
    C = dataset.num_classes
    present = set(np.unique(dataset.labels).tolist())
    missing = sorted(set(range(C)) - present)
    if missing:
        raise ValueError(f"classes {missing} absent from the source dataset")
    if source_kind not in PROTOTYPE_SOURCES:
        raise ValueError(f"unknown prototype source {source_kind!r}")
    if source_kind != "projection_z" and depth != 0:
        raise ValueError(f"prototype source {source_kind!r} requires projector depth 0")

    h_all = encode_all(model, dataset.images)
    projector = Projector(h_all.shape[1], depth=depth, width=width, hidden=hidden, seed=seed)
    history = ProjectorHistory()

    if source_kind == "classifier_weights":
        w = model.units[-1].params[0].data.copy()
        bank = PrototypeBank(w, alpha, tau, source_kind)
        history.mean_cos.append(mean_prototype_cosine(h_all, dataset.labels, bank))
        return projector, bank, history

    rng = np.random.default_rng([seed, 4242])
    bank = PrototypeBank.empty(C, projector.out_dim, alpha, tau, source_kind)

    # phase 1: first projection of each class seeds its prototype
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            continue
        z = projector(h_all[idx], mode="train").data if depth else h_all[idx]
        for zi, k in zip(z, dataset.labels[idx]):
            if not bank.initialized[k]:
                bank.prototypes[k] = zi
                bank.initialized[k] = True
        if bank.initialized.all():
            break
    history.mean_cos.append(mean_prototype_cosine(project_all(projector, h_all), dataset.labels, bank))

    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            y = dataset.labels[idx]
            if depth == 0:
                bank.update(h_all[idx], y)
                continue
            x_t = transform_batch(dataset.images[idx], transform, rng)
            h_t = encode_all(model, x_t)
            projector.zero_grads()
            z = projector(h_all[idx], mode="train")
            z_t = projector(h_t, mode="train")
            bank.update(z.data, y)
            loss = embedding_loss(y, nsp_probs(z, bank), nsp_probs(z_t, bank))
            backward(loss)
            for p in projector.parameters():
                p.data = p.data - lr * p.grad
            losses.append(loss.item())
        if losses:
            history.loss.append(float(np.mean(losses)))
        history.mean_cos.append(mean_prototype_cosine(project_all(projector, h_all), dataset.labels, bank))
    return projector, bank, history
