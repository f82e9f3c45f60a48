"""Source pre-training, the online predict-then-update loop, and ablations."""
from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import nsp
from .datagen import Dataset, TargetStream, TransformSpec, default_transform, transform_batch
from .nsp import PrototypeBank, Projector
from .swr import PenaltyVector, SwrVariant, ThetaStar, advance_theta_star, proximal_update
from .tensorcore import NonFiniteError, Model, apply_update, log_softmax, softmax

log = logging.getLogger(__name__)

MODES = ("source_only", "main_only", "main+nsp", "main+swr", "main+swr+nsp_ent", "full", "supervised_oracle")

# (main, swr, aux_ent, aux_sel)
_COMPONENTS = {
    "source_only": (False, False, False, False),
    "main_only": (True, False, False, False),
    "main+nsp": (True, False, True, True),
    "main+swr": (True, True, False, False),
    "main+swr+nsp_ent": (True, True, True, False),
    "full": (True, True, True, True),
    "supervised_oracle": (False, False, False, False),
}

# calibrated on the desk experiment with the sweep in scripts/lr_sweep.py
DEFAULT_LR = {
    "source_only": 0.0,
    "main_only": 0.1,
    "main+nsp": 0.1,
    "main+swr": 0.1,
    "main+swr+nsp_ent": 0.1,
    "full": 0.1,
    "supervised_oracle": 0.03,
}


class DivergenceError(FloatingPointError):
    pass


class ArtifactMismatch(ValueError):
    pass


@dataclass(frozen=True)
class AdaptConfig:
    mode: str = "full"
    lr: Optional[float] = None
    lambda_m1: float = 0.2
    lambda_m2: float = 0.25
    lambda_a1: float = 0.8
    lambda_a2: float = 0.25
    lambda_s: float = 0.1
    lambda_r: float = 250.0
    tau: float = 0.1
    bn_mode: str = "batch"
    swr_variant: SwrVariant = field(default_factory=SwrVariant)
    projector_finetune: bool = False
    selfsup_stop_grad: bool = True
    test_time_ema: bool = False
    epochs: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("lambda_m1", "lambda_m2", "lambda_a1", "lambda_a2", "lambda_s", "lambda_r"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr is not None and self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 1 <= self.epochs <= 3:
            raise ValueError("epochs must be in 1..3")
        if self.bn_mode not in ("batch", "running"):
            raise ValueError(f"bn_mode must be 'batch' or 'running', got {self.bn_mode!r}")

    @property
    def step_size(self) -> float:
        if self.mode == "source_only":
            return 0.0
        return DEFAULT_LR[self.mode] if self.lr is None else self.lr

    @property
    def components(self):
        return _COMPONENTS[self.mode]

    @property
    def uses_nsp(self):
        return self.components[2] or self.components[3]

    def describe(self) -> dict:
        d = asdict(self)
        d["swr_variant"] = self.swr_variant.format()
        d["lr"] = self.step_size
        return d

    def hash(self) -> str:
        text = "\n".join(f"{k}={v!r}" for k, v in sorted(self.describe().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# source training
# ---------------------------------------------------------------------------


def supervised_loss(logits, labels):
    lp = log_softmax(logits, axis=1)
    onehot = np.zeros(lp.shape)
    onehot[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return -(lp * onehot).sum() * (1.0 / len(labels))


def pretrain_source(model: Model, dataset: Dataset, epochs=20, lr=0.1, seed=0, batch_size=50) -> Model:
    """Cross-entropy SGD in train mode; fills the batchnorm running estimates."""
    rng = np.random.default_rng([seed, 1234])
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        for b, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            model.zero_grads()
            loss = supervised_loss(model.forward(dataset.images[idx], mode="train"), dataset.labels[idx])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            model.backward(loss)
            apply_update(model, lr)
    return model


def predict(model: Model, images, batch_size=256):
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model.forward(images[i:i + batch_size], mode="eval").data)
    return np.concatenate(out)


def accuracy(model: Model, dataset: Dataset, bn_mode="running"):
    saved = model.bn_mode
    model.bn_mode = bn_mode
    try:
        return float(np.mean(predict(model, dataset.images).argmax(1) == dataset.labels))
    finally:
        model.bn_mode = saved


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def main_entropy_loss(probs, lambda_m1=0.2, lambda_m2=0.25):
    """lambda_m1 * mean_i H(p_i) - lambda_m2 * H(mean_i p_i)."""
    return nsp.information_maximization(probs, lambda_m1, lambda_m2)


# ---------------------------------------------------------------------------
# one adaptation step
# ---------------------------------------------------------------------------


@dataclass
class Artifacts:
    """Everything prepared before deployment from one source checkpoint."""

    penalty: Optional[PenaltyVector] = None
    projector: Optional[Projector] = None
    bank: Optional[PrototypeBank] = None
    transform: TransformSpec = field(default_factory=default_transform)
    source_hash: Optional[bytes] = None


@dataclass
class StepResult:
    predictions: np.ndarray
    main_entropy: float
    nsp_entropy: float
    theta_star: Optional[ThetaStar]
    loss: float
    aborted: bool = False


def _row_entropy(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)


def tta_step(model: Model, artifacts: Artifacts, theta_star: Optional[ThetaStar], images, config: AdaptConfig,
             rng, labels=None) -> StepResult:
    """Predict on the batch, then take one update on it.

    Predictions come from the pre-update parameters. `labels` is only read in
    supervised_oracle mode.
    """
    if len(images) < 2:
        raise ValueError("batch size must be >= 2")
    use_main, use_swr, use_ent, use_sel = config.components
    lr = config.step_size
    model.bn_mode = config.bn_mode
    projector, bank = artifacts.projector, artifacts.bank

    h = model.encode(images, mode="eval")
    logits = model.classify(h, mode="eval")
    probs = softmax(logits, axis=1)
    predictions = np.argmax(logits.data, axis=1)
    main_entropy = float(np.mean(_row_entropy(probs.data)))

    y_hat = None
    nsp_entropy = float("nan")
    if bank is not None:
        z = projector(h, mode="eval", bn_mode=config.bn_mode) if projector is not None else h
        y_hat = nsp.nsp_probs(z, bank)
        nsp_entropy = float(np.mean(_row_entropy(y_hat.data)))

    terms = []
    if use_main:
        terms.append(main_entropy_loss(probs, config.lambda_m1, config.lambda_m2))
    if config.mode == "supervised_oracle":
        if labels is None:
            raise ValueError("supervised_oracle mode needs labels")
        terms.append(supervised_loss(logits, labels))
    if (use_ent or use_sel) and y_hat is None:
        raise ValueError(f"mode {config.mode!r} needs a prototype bank")
    if use_ent:
        terms.append(nsp.aux_entropy_loss(y_hat, config.lambda_a1, config.lambda_a2))
    if use_sel and config.lambda_s:
        x_t = transform_batch(images, artifacts.transform, rng)
        h_t = model.encode(x_t, mode="eval")
        z_t = projector(h_t, mode="eval", bn_mode=config.bn_mode) if projector is not None else h_t
        terms.append(nsp.aux_selfsup_loss(y_hat, nsp.nsp_probs(z_t, bank), config.selfsup_stop_grad)
                     * config.lambda_s)

    if not terms or lr == 0:
        return StepResult(predictions, main_entropy, nsp_entropy, theta_star, 0.0)

    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    loss_value = loss.item()

    saved_model = model.state()
    saved_proj = projector.state() if projector is not None else None
    saved_bank = bank.copy() if bank is not None else None
    try:
        if not np.isfinite(loss_value):
            raise NonFiniteError(f"non-finite loss {loss_value}")
        model.zero_grads()
        finetune = projector is not None and config.projector_finetune
        if finetune:
            projector.zero_grads()
        if loss.requires_grad:
            model.backward(loss)
        if use_swr:
            if artifacts.penalty is None or theta_star is None:
                raise ValueError(f"mode {config.mode!r} needs a penalty vector and theta*")
            proximal_update(model, theta_star, artifacts.penalty, lr, config.lambda_r)
        else:
            apply_update(model, lr)
        if finetune:
            for p in projector.parameters():
                if p.grad is not None:
                    if not np.all(np.isfinite(p.grad)):
                        raise NonFiniteError("non-finite gradient in projector")
                    p.data = p.data - lr * p.grad
        if not all(np.all(np.isfinite(p.data)) for p in model.parameters()):
            raise NonFiniteError("non-finite parameters after update")
        if config.test_time_ema and bank is not None:
            bank.update(z.data, np.argmax(y_hat.data, axis=1))
    except NonFiniteError as exc:
        model.load_state(saved_model)
        if saved_proj is not None:
            projector.load_state(saved_proj)
        if saved_bank is not None:
            bank.prototypes, bank.initialized = saved_bank.prototypes, saved_bank.initialized
        log.warning("adaptation step aborted and rolled back: %s", exc)
        return StepResult(predictions, main_entropy, nsp_entropy, theta_star, loss_value, aborted=True)

    if theta_star is not None:
        theta_star = advance_theta_star(theta_star, model)
    return StepResult(predictions, main_entropy, nsp_entropy, theta_star, loss_value)


# ---------------------------------------------------------------------------
# online evaluation
# ---------------------------------------------------------------------------


@dataclass
class BatchRecord:
    batch_index: int
    n: int
    n_wrong: int
    mean_main_entropy: float
    mean_nsp_entropy: float


@dataclass
class MetricsRecord:
    seed: int
    corruption: str
    severity: int
    config_hash: str
    mode: str
    lr: float
    batches: list = field(default_factory=list)
    n_aborted: int = 0

    @property
    def n(self):
        return sum(b.n for b in self.batches)

    @property
    def n_wrong(self):
        return sum(b.n_wrong for b in self.batches)

    @property
    def error_rate(self):
        return self.n_wrong / self.n if self.n else float("nan")

    def quartile_entropies(self):
        """Mean main entropy over the first and last quarter of batches."""
        e = np.array([b.mean_main_entropy for b in self.batches])
        q = max(1, len(e) // 4)
        return float(e[:q].mean()), float(e[-q:].mean())


class MetricsRecorder:
    """The only consumer of target labels."""

    def __init__(self, oracle):
        self._oracle = oracle
        self.batches = []

    def record(self, batch_index, keys, predictions, main_entropy, nsp_entropy):
        truth = self._oracle(keys)
        self.batches.append(BatchRecord(batch_index, len(keys), int(np.sum(predictions != truth)),
                                        main_entropy, nsp_entropy))


def run_online_evaluation(source_model: Model, artifacts: Artifacts, stream: TargetStream, config: AdaptConfig,
                          source_hash: Optional[bytes] = None) -> MetricsRecord:
    """Adapt a private copy of the source model on the stream, predicting before each update.

    With epochs > 1 the stream is revisited (reshuffled per epoch) and the
    last epoch's predictions are scored.
    """
    if source_hash is not None and artifacts.source_hash is not None and source_hash != artifacts.source_hash:
        raise ArtifactMismatch("artifacts were prepared from a different source checkpoint")
    model = source_model.copy()
    local = Artifacts(artifacts.penalty,
                      _copy_projector(artifacts.projector),
                      artifacts.bank.copy() if artifacts.bank is not None else None,
                      artifacts.transform, artifacts.source_hash)
    theta_star = ThetaStar.from_model(model, config.swr_variant.theta_star_policy)
    rng = np.random.default_rng([stream.seed, 99])
    record = MetricsRecord(stream.seed, stream.corruption.kind if stream.corruption else "none",
                           stream.corruption.severity if stream.corruption else 0,
                           config.hash(), config.mode, config.step_size)
    current = stream
    for epoch in range(config.epochs):
        if epoch:
            current = stream.reshuffled(epoch)
        recorder = MetricsRecorder(current.oracle)
        for batch in current:
            labels = current.oracle(batch.keys) if config.mode == "supervised_oracle" else None
            res = tta_step(model, local, theta_star, batch.images, config, rng, labels)
            theta_star = res.theta_star
            record.n_aborted += int(res.aborted)
            recorder.record(batch.index, batch.keys, res.predictions, res.main_entropy, res.nsp_entropy)
        record.batches = recorder.batches
    return record


def _copy_projector(projector):
    return None if projector is None else copy.deepcopy(projector)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

TABLE_ORDER = ("source_only", "main_only", "main+nsp", "main+swr", "main+swr+nsp_ent", "full", "supervised_oracle")
# the four standard rates plus higher ones, where unregularized entropy minimization breaks down
LR_SWEEP = (10.0, 3.0, 1.0, 0.3, 1e-1, 1e-2, 1e-3, 1e-4)


@dataclass
class AblationRow:
    mode: str
    lr: float
    errors: list
    failures: list

    @property
    def mean(self):
        return float(np.mean(self.errors)) if self.errors else float("nan")

    @property
    def std(self):
        return float(np.std(self.errors)) if self.errors else float("nan")


def ablation_matrix(source_model: Model, artifacts: Artifacts, configs, seeds,
                    make_stream: Callable[[int], TargetStream], source_hash=None):
    """Run every config on every seed; returns (rows ordered like the ablation table, records)."""
    rows = {}
    records = []
    for cfg in configs:
        key = (cfg.mode, cfg.step_size)
        row = rows.setdefault(key, AblationRow(cfg.mode, cfg.step_size, [], []))
        for seed in seeds:
            try:
                rec = run_online_evaluation(source_model, artifacts, make_stream(seed), cfg, source_hash)
            except Exception as exc:  # collected, not fatal
                row.failures.append((seed, repr(exc)))
                continue
            row.errors.append(rec.error_rate)
            records.append(rec)
    ordered = sorted(rows.values(), key=lambda r: (TABLE_ORDER.index(r.mode), -r.lr))
    return ordered, records


def lr_sweep_configs(base: AdaptConfig, lrs=LR_SWEEP, modes=("main_only", "main+swr")):
    return [replace(base, mode=m, lr=lr) for m in modes for lr in lrs]
