"""Per-layer penalty vector from gradient agreement, and the weighted proximal regularizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datagen import TransformSpec, apply_transform
from .tensorcore import Model, NonFiniteError, Tensor, layer_grad_vectors, log_softmax

FLIPS = ("none", "vertical", "horizontal")
MANUAL_CURVES = (None, "constant", "linear_ramp", "step")
THETA_STAR_POLICIES = ("update_prev", "freeze_source")

# max(s) - min(s) below this counts as a degenerate (constant) similarity profile
DEGENERATE_RANGE = 1e-12


@dataclass(frozen=True)
class SwrVariant:
    exponent: int = 2
    flip: str = "none"
    manual_curve: Optional[str] = None
    manual_constant: float = 1.0
    theta_star_policy: str = "update_prev"

    def __post_init__(self):
        if self.exponent not in (1, 2, 3):
            raise ValueError(f"exponent must be 1, 2 or 3, got {self.exponent}")
        if self.flip not in FLIPS:
            raise ValueError(f"flip must be one of {FLIPS}, got {self.flip!r}")
        if self.manual_curve not in MANUAL_CURVES:
            raise ValueError(f"manual_curve must be one of {MANUAL_CURVES[1:]}, got {self.manual_curve!r}")
        if not 0.0 <= self.manual_constant <= 1.0:
            raise ValueError("manual_constant must be in [0, 1]")
        if self.theta_star_policy not in THETA_STAR_POLICIES:
            raise ValueError(f"theta_star_policy must be one of {THETA_STAR_POLICIES}")

    @classmethod
    def parse(cls, text: str) -> "SwrVariant":
        """Parse 'exponent=3,flip=vertical,curve=step,constant=0.5,theta_star=freeze_source'."""
        kwargs = {}
        aliases = {"curve": "manual_curve", "constant": "manual_constant", "theta_star": "theta_star_policy"}
        for part in filter(None, (p.strip() for p in text.split(","))):
            if "=" not in part:
                raise ValueError(f"bad swr variant item {part!r}")
            k, v = (s.strip() for s in part.split("=", 1))
            k = aliases.get(k, k)
            if k == "exponent":
                kwargs[k] = int(v)
            elif k == "manual_constant":
                kwargs[k] = float(v)
            elif k == "manual_curve":
                kwargs[k] = None if v in ("none", "") else v
            elif k in ("flip", "theta_star_policy"):
                kwargs[k] = v
            else:
                raise ValueError(f"unknown swr variant key {k!r}")
        return cls(**kwargs)

    def format(self) -> str:
        return (f"exponent={self.exponent},flip={self.flip},curve={self.manual_curve or 'none'},"
                f"constant={self.manual_constant!r},theta_star={self.theta_star_policy}")


@dataclass
class PenaltyVector:
    similarities: np.ndarray
    penalties: np.ndarray
    unit_names: list
    variant: SwrVariant = field(default_factory=SwrVariant)
    n_samples: int = 0

    def __post_init__(self):
        self.similarities = np.asarray(self.similarities, dtype=np.float64)
        self.penalties = np.asarray(self.penalties, dtype=np.float64)
        if not (len(self.similarities) == len(self.penalties) == len(self.unit_names)):
            raise ValueError("similarities, penalties and unit_names must have equal length")

    def as_dict(self):
        return dict(zip(self.unit_names, self.penalties))

    @classmethod
    def uniform(cls, model: Model, value=1.0):
        names = [u.name for u in model.parametric_units]
        return cls(np.full(len(names), np.nan), np.full(len(names), float(value)), names,
                   SwrVariant(manual_curve="constant", manual_constant=float(value)), 0)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two flat vectors; 0 if either norm is < 1e-12."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def minmax_normalize(s):
    s = np.asarray(s, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi - lo <= DEGENERATE_RANGE:
        return np.ones_like(s)
    return (s - lo) / (hi - lo)


def penalties_from_similarities(s, exponent=2):
    return minmax_normalize(s) ** exponent


def apply_flip(w, flip):
    w = np.asarray(w, dtype=np.float64)
    if flip == "vertical":
        return 1.0 - w
    if flip == "horizontal":
        return w[::-1].copy()
    return w.copy()


def manual_curve(model: Model, curve: str, constant=1.0):
    units = model.parametric_units
    n = len(units)
    if curve == "constant":
        return np.full(n, float(constant))
    if curve == "linear_ramp":
        return np.linspace(0.0, 1.0, n) if n > 1 else np.ones(1)
    if curve == "step":
        enc = {id(u) for u in model.units[:model.encoder_end]}
        return np.array([0.0 if id(u) in enc else 1.0 for u in units])
    raise ValueError(f"unknown manual curve {curve!r}")


def _sample_grads(model, x, y):
    model.zero_grads()
    logits = model.forward(x[None], mode="eval")
    model.backward(_ce(logits, y))
    return layer_grad_vectors(model)


def _ce(logits, y):
    lp = log_softmax(logits)
    onehot = np.zeros(lp.shape)
    onehot[0, int(y)] = 1.0
    return -(lp * onehot).sum()


def compute_penalty_vector(model: Model, images, labels, transform: TransformSpec, n_samples=1024,
                           variant: SwrVariant = SwrVariant(), seed=0) -> PenaltyVector:
    """Average per-unit cosine between task-loss gradients of x and T(x).

    Draws `n_samples` of (images, labels) without replacement (seeded) and
    processes them one at a time with the stored batchnorm estimates;
    parameters and running statistics are left untouched.
    """
    units = model.parametric_units
    if not units:
        raise ValueError("model has no parametric units")
    names = [u.name for u in units]
    if variant.manual_curve is not None:
        w = manual_curve(model, variant.manual_curve, variant.manual_constant)
        return PenaltyVector(np.full(len(names), np.nan), apply_flip(w, variant.flip), names, variant, 0)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if len(images) < n_samples:
        raise ValueError(f"need {n_samples} source samples, got {len(images)}")

    saved_mode = model.bn_mode
    model.bn_mode = "running"
    rng = np.random.default_rng([seed, 31337])
    chosen = np.random.default_rng([seed, 4242]).permutation(len(images))[:n_samples]
    total = np.zeros(len(names))
    try:
        for i in chosen:
            x, y = images[i], labels[i]
            g = _sample_grads(model, x, y)
            g_t = _sample_grads(model, apply_transform(x, transform, rng), y)
            total += [cosine_similarity(g[n], g_t[n]) for n in names]
    finally:
        model.bn_mode = saved_mode
        model.zero_grads()
    s = total / n_samples
    w = apply_flip(penalties_from_similarities(s, variant.exponent), variant.flip)
    return PenaltyVector(s, w, names, variant, n_samples)


# ---------------------------------------------------------------------------
# theta* and the regularizer
# ---------------------------------------------------------------------------


@dataclass
class ThetaStar:
    params: list  # arrays in model.parameters() order
    policy: str = "update_prev"

    @classmethod
    def from_model(cls, model: Model, policy="update_prev"):
        if policy not in THETA_STAR_POLICIES:
            raise ValueError(f"unknown theta* policy {policy!r}")
        return cls([p.data.copy() for p in model.parameters()], policy)

    def copy(self):
        return ThetaStar([p.copy() for p in self.params], self.policy)


def advance_theta_star(theta_star: ThetaStar, model: Model) -> ThetaStar:
    if theta_star.policy == "freeze_source":
        return theta_star
    return ThetaStar([p.data.copy() for p in model.parameters()], theta_star.policy)


def _unit_weights(model, penalty: PenaltyVector):
    names = [u.name for u in model.parametric_units]
    if names != list(penalty.unit_names):
        raise ValueError(f"penalty vector units {penalty.unit_names} do not match model units {names}")
    return penalty.as_dict()


def _check_layout(model, theta_star):
    params = model.parameters()
    if len(params) != len(theta_star.params) or any(
            p.shape != t.shape for p, t in zip(params, theta_star.params)):
        raise ValueError("theta* layout does not match the model")


def swr_regularization(model: Model, theta_star: ThetaStar, penalty: PenaltyVector, lambda_r: float):
    """lambda_r * sum_l w_l ||theta_l - theta*_l||^2 and its gradient per parameter tensor."""
    _check_layout(model, theta_star)
    weights = _unit_weights(model, penalty)
    loss = 0.0
    grads = []
    anchors = iter(theta_star.params)
    for u in model.units:
        for p in u.params:
            diff = p.data - next(anchors)
            w = weights[u.name]
            loss += lambda_r * w * float(np.sum(diff * diff))
            grads.append(2.0 * lambda_r * w * diff)
    return loss, grads


def swr_loss_tensor(model: Model, theta_star: ThetaStar, penalty: PenaltyVector, lambda_r: float) -> Tensor:
    """Differentiable version of the regularizer, for gradient checks."""
    _check_layout(model, theta_star)
    weights = _unit_weights(model, penalty)
    total = None
    anchors = iter(theta_star.params)
    for u in model.units:
        for p in u.params:
            diff = p - next(anchors)
            term = (diff * diff).sum() * (lambda_r * weights[u.name])
            total = term if total is None else total + term
    return total


def proximal_update(model: Model, theta_star: ThetaStar, penalty: PenaltyVector, lr: float, lambda_r: float):
    """SGD step with the regularizer taken implicitly.

    Solves theta' = theta - lr * (g + 2 lambda_r w_l (theta' - theta*)), i.e.
    theta' = (theta - lr g + c theta*) / (1 + c) with c = 2 lr lambda_r w_l.
    With theta == theta* this is a per-unit step size lr / (1 + c).
    """
    _check_layout(model, theta_star)
    weights = _unit_weights(model, penalty)
    for u in model.parametric_units:
        for p in u.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in unit '{u.name}'")
    anchors = iter(theta_star.params)
    for u in model.units:
        c = 2.0 * lr * lambda_r * weights.get(u.name, 0.0)
        for p in u.params:
            anchor = next(anchors)
            g = p.grad if p.grad is not None else 0.0
            p.data = (p.data - lr * g + c * anchor) / (1.0 + c)
