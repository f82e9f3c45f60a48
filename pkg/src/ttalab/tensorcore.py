"""Small reverse-mode autodiff core on top of numpy (float64 throughout).

Parameters live in named layer units so that per-unit gradient vectors can be
read off directly; that is what the penalty-vector computation needs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an input does not match a unit's expected signature."""


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# Tensor + graph
# ---------------------------------------------------------------------------


class Tensor:
    """A node in the computation graph.

    `backward_fn` maps the output gradient to one gradient per parent (None
    where a parent needs no gradient).
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self.parents

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf.

    Intermediate gradients live only for the duration of the call, so the
    same graph can be back-propagated more than once (grads add up).
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any trainable parameter")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# Elementwise / reduction primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


# set to a list while a gradient check is probing for kinks
_relu_masks = None


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    if _relu_masks is not None:
        _relu_masks.append(mask.tobytes())
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def clamp_min(x, floor):
    """max(x, floor); gradient is zero where the floor is active."""
    x = as_tensor(x)
    mask = x.data >= floor
    return _make(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,))


def xlogx(p):
    """p*log(p) with the 0*log(0) = 0 convention."""
    p = as_tensor(p)
    safe = np.where(p.data > 0, p.data, 1.0)
    out = np.where(p.data > 0, p.data * np.log(safe), 0.0)
    grad_local = np.log(np.maximum(p.data, 1e-300)) + 1.0
    return _make(out, (p,), lambda g: (g * grad_local,))


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def softmax(logits, tau=1.0, axis=-1):
    """Row-wise temperature softmax with max-shift for stability."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    z = logits.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / tau,)

    return _make(out, (logits,), bw)


def log_softmax(logits, tau=1.0, axis=-1):
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    z = logits.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / tau,)

    return _make(out, (logits,), bw)


def l2_normalize(x, axis=-1, eps=1e-12):
    """x / max(||x||, eps) along `axis`."""
    x = as_tensor(x)
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True))
    return x / clamp_min(norm, eps)


# ---------------------------------------------------------------------------
# Convolution (3x3, stride 1, zero padding 1) via explicit patch extraction
# ---------------------------------------------------------------------------


def conv2d(x, weight, bias):
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv expects {cw} input channels, got {c}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    # (n, c, h, w, kh, kw) -> (n*h*w, c*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)
    wmat = weight.data.reshape(f, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, h, w, f).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * h * w, f)
        gw = (gm.T @ cols).reshape(weight.shape)
        gb = gm.sum(axis=0)
        gcols = (gm @ wmat).reshape(n, h, w, c, kh, kw)
        gpad = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                gpad[:, :, i:i + h, j:j + w] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gpad[:, :, 1:-1, 1:-1], gw, gb

    return _make(out, (x, weight, bias), bw)


# ---------------------------------------------------------------------------
# Layer units
# ---------------------------------------------------------------------------

PARAM_KINDS = ("linear", "conv2d", "batchnorm")


def _param(data, name):
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


@dataclass(eq=False)
class LayerUnit:
    """A named layer owning all of its parameters."""

    name: str
    kind: str
    params: list = field(default_factory=list)

    @property
    def n_params(self):
        return int(sum(p.data.size for p in self.params))

    def attrs(self) -> dict:
        return {}

    def __call__(self, x, mode, bn_mode):
        raise NotImplementedError


class Linear(LayerUnit):
    def __init__(self, name, in_features, out_features, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(in_features)
        w = rng.uniform(-bound, bound, size=(out_features, in_features))
        b = rng.uniform(-bound, bound, size=(out_features,))
        super().__init__(name, "linear", [_param(w, f"{name}.weight"), _param(b, f"{name}.bias")])

    @property
    def in_features(self):
        return self.params[0].shape[1]

    def __call__(self, x, mode, bn_mode):
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"unit '{self.name}' expects (N, {self.in_features}), got {x.shape}")
        w, b = self.params
        return matmul(x, _transpose(w)) + b


def _transpose(t):
    return _make(t.data.T, (t,), lambda g: (g.T,))


class Conv2d(LayerUnit):
    def __init__(self, name, in_channels, out_channels, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(in_channels * 9)
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, 3, 3))
        b = rng.uniform(-bound, bound, size=(out_channels,))
        super().__init__(name, "conv2d", [_param(w, f"{name}.weight"), _param(b, f"{name}.bias")])

    def __call__(self, x, mode, bn_mode):
        cin = self.params[0].shape[1]
        if x.data.ndim != 4 or x.shape[1] != cin:
            raise ShapeError(f"unit '{self.name}' expects (N, {cin}, H, W), got {x.shape}")
        return conv2d(x, *self.params)


class BatchNorm(LayerUnit):
    """Batch normalization over (N,) or (N, H, W) per feature/channel.

    mode="train" always normalizes with batch statistics and refreshes the
    running estimates. mode="eval" uses batch statistics when bn_mode is
    "batch" (no running update) and the stored estimates when "running".
    """

    def __init__(self, name, num_features, eps=1e-5, momentum=0.1):
        super().__init__(name, "batchnorm", [_param(np.ones(num_features), f"{name}.weight"),
                                              _param(np.zeros(num_features), f"{name}.bias")])
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def attrs(self):
        return {"eps": self.eps, "momentum": self.momentum}

    def __call__(self, x, mode, bn_mode):
        nf = self.running_mean.shape[0]
        if x.data.ndim not in (2, 4) or x.shape[1] != nf:
            raise ShapeError(f"unit '{self.name}' expects {nf} features, got shape {x.shape}")
        axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
        bshape = (1, nf) if x.data.ndim == 2 else (1, nf, 1, 1)
        gamma = reshape(self.params[0], bshape)
        beta = reshape(self.params[1], bshape)
        use_batch = mode == "train" or bn_mode == "batch"
        if use_batch:
            count = int(np.prod([x.shape[a] for a in axes]))
            if x.shape[0] < 2:
                raise ShapeError(f"unit '{self.name}': batch statistics need N >= 2, got N={x.shape[0]}")
            mu = mean(x, axes, keepdims=True)
            centered = x - mu
            var = mean(centered * centered, axes, keepdims=True)
            xhat = centered / sqrt(var + self.eps)
            if mode == "train":
                m = self.momentum
                unbiased = var.data.reshape(nf) * count / max(count - 1, 1)
                self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(nf)
                self.running_var = (1 - m) * self.running_var + m * unbiased
        else:
            rm = self.running_mean.reshape(bshape)
            rv = self.running_var.reshape(bshape)
            xhat = (x - rm) / np.sqrt(rv + self.eps)
        return xhat * gamma + beta


class Activation(LayerUnit):
    """Parameter-free unit: relu, avgpool2 (2x2 mean pool) or flatten."""

    OPS = ("relu", "avgpool2", "flatten")

    def __init__(self, name, op):
        if op not in self.OPS:
            raise ValueError(f"unknown activation op {op!r}")
        super().__init__(name, "activation", [])
        self.op = op

    def attrs(self):
        return {"op": self.op}

    def __call__(self, x, mode, bn_mode):
        if self.op == "relu":
            return relu(x)
        if self.op == "flatten":
            return reshape(x, (x.shape[0], -1))
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"unit '{self.name}': avgpool2 needs even spatial dims, got {x.shape}")
        return mean(reshape(x, (n, c, h // 2, 2, w // 2, 2)), (3, 5))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Model:
    """Ordered layer units; units[:encoder_end] are the encoder, the rest the classifier."""

    units: list
    encoder_end: int
    bn_mode: str = "running"
    input_shape: tuple = ()

    def __post_init__(self):
        if not 0 < self.encoder_end < len(self.units):
            raise ValueError(f"encoder_end must be in (0, {len(self.units)}), got {self.encoder_end}")
        if self.bn_mode not in ("running", "batch"):
            raise ValueError(f"bn_mode must be 'running' or 'batch', got {self.bn_mode!r}")
        names = [u.name for u in self.units]
        if len(set(names)) != len(names):
            raise ValueError("unit names must be unique")
        self._forwarded = False

    # -- parameters -------------------------------------------------------
    @property
    def parametric_units(self):
        return [u for u in self.units if u.params]

    def parameters(self):
        return [p for u in self.units for p in u.params]

    def encoder_parameters(self):
        return [p for u in self.units[:self.encoder_end] for p in u.params]

    def classifier_parameters(self):
        return [p for u in self.units[self.encoder_end:] for p in u.params]

    def batchnorm_units(self):
        return [u for u in self.units if isinstance(u, BatchNorm)]

    def num_parameters(self):
        return sum(u.n_params for u in self.units)

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    def state(self):
        """Copies of all parameter arrays and batchnorm running statistics."""
        params = [p.data.copy() for p in self.parameters()]
        stats = [(u.running_mean.copy(), u.running_var.copy()) for u in self.batchnorm_units()]
        return params, stats

    def load_state(self, state):
        params, stats = state
        for p, d in zip(self.parameters(), params):
            p.data = d.copy()
        for u, (m, v) in zip(self.batchnorm_units(), stats):
            u.running_mean, u.running_var = m.copy(), v.copy()

    def copy(self) -> "Model":
        import copy
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.grad = None
        return clone

    # -- forward ----------------------------------------------------------
    def _run(self, x, units, mode):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        for u in units:
            x = u(x, mode, self.bn_mode)
        self._forwarded = True
        return x

    def forward(self, batch, mode="eval"):
        x = as_tensor(batch)
        if self.input_shape and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"unit '{self.units[0].name}' expects input (N, *{tuple(self.input_shape)}), "
                             f"got {x.shape}")
        return self._run(x, self.units, mode)

    __call__ = forward

    def encode(self, batch, mode="eval"):
        x = as_tensor(batch)
        if self.input_shape and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"unit '{self.units[0].name}' expects input (N, *{tuple(self.input_shape)}), "
                             f"got {x.shape}")
        return self._run(x, self.units[:self.encoder_end], mode)

    def classify(self, h, mode="eval"):
        return self._run(as_tensor(h), self.units[self.encoder_end:], mode)

    def backward(self, loss):
        if not self._forwarded or not isinstance(loss, Tensor) or loss.is_leaf:
            raise GraphError("backward called without a preceding forward pass")
        backward(loss)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_cnn(num_classes, in_channels=3, image_size=16, channels=(8, 12), hidden=16, seed=0):
    """conv-bn-relu-pool x2, then linear-relu (encoder) and a linear classifier."""
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    side = image_size // 4
    units = [
        Conv2d("conv1", in_channels, c1, rng), BatchNorm("bn1", c1), Activation("relu1", "relu"),
        Activation("pool1", "avgpool2"),
        Conv2d("conv2", c1, c2, rng), BatchNorm("bn2", c2), Activation("relu2", "relu"),
        Activation("pool2", "avgpool2"), Activation("flatten", "flatten"),
        Linear("fc1", c2 * side * side, hidden, rng), Activation("relu3", "relu"),
        Linear("fc2", hidden, num_classes, rng),
    ]
    return Model(units, encoder_end=len(units) - 1, input_shape=(in_channels, image_size, image_size))


def build_mlp(num_classes, in_features, hidden=(64, 32), seed=0, batchnorm=False):
    rng = np.random.default_rng(seed)
    h1, h2 = hidden
    units = [Activation("flatten", "flatten"), Linear("fc1", in_features, h1, rng)]
    if batchnorm:
        units.append(BatchNorm("bn1", h1))
    units += [Activation("relu1", "relu"), Linear("fc2", h1, h2, rng)]
    if batchnorm:
        units.append(BatchNorm("bn2", h2))
    units += [Activation("relu2", "relu"), Linear("fc3", h2, num_classes, rng)]
    return Model(units, encoder_end=len(units) - 1)


# ---------------------------------------------------------------------------
# Gradient utilities
# ---------------------------------------------------------------------------


def layer_grad_vectors(model) -> dict:
    """One flat gradient vector per parametric unit, in declaration order."""
    out = {}
    for u in model.parametric_units:
        missing = [p.name for p in u.params if p.grad is None]
        if missing:
            raise GraphError(f"unit '{u.name}' has no gradients for {missing}")
        out[u.name] = np.concatenate([p.grad.ravel() for p in u.params])
    return out


def apply_update(model, lr: float) -> None:
    """Plain SGD step: theta <- theta - lr * grad."""
    for u in model.parametric_units:
        for p in u.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in unit '{u.name}'")
    for p in model.parameters():
        if p.grad is not None:
            p.data = p.data - lr * p.grad


def numeric_gradient_check(params: Sequence[Tensor], loss_fn: Callable[[], Tensor], eps=1e-3,
                           max_checks_per_param=20, seed=0, skip_kinks=False) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn` must rebuild the loss from the current parameter values.
    Checks a random subset of at most `max_checks_per_param` entries per tensor.
    With `skip_kinks`, an entry whose +/-eps probes flip any relu on or off is
    passed over for the next candidate: a central difference across a kink
    measures the kink, not the gradient.
    """
    global _relu_masks

    def probe():
        global _relu_masks
        _relu_masks = []
        try:
            value = loss_fn().item()
            return value, _relu_masks
        finally:
            _relu_masks = None

    for p in params:
        p.grad = np.zeros_like(p.data)
    if skip_kinks:
        _relu_masks = []
    try:
        loss = loss_fn()
        base_pattern = _relu_masks
    finally:
        _relu_masks = None
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        n = flat.size
        order = np.arange(n) if n <= max_checks_per_param else rng.permutation(n)
        checked = 0
        for i in order:
            if checked == max_checks_per_param:
                break
            orig = flat[i]
            flat[i] = orig + eps
            fp, pat_p = probe()
            flat[i] = orig - eps
            fm, pat_m = probe()
            flat[i] = orig
            if skip_kinks and (pat_p != base_pattern or pat_m != base_pattern):
                continue
            checked += 1
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Plain-array probability helpers
# ---------------------------------------------------------------------------


def stable_softmax(logits, tau=1.0):
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    x = np.asarray(logits, dtype=DTYPE) / tau
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _check_dist(p, name):
    p = np.asarray(p, dtype=DTYPE)
    if np.any(p < 0):
        raise ValueError(f"{name} has negative entries")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError(f"{name} does not sum to 1")
    return p


def entropy(p):
    """Natural-log entropy along the last axis; 0*log 0 = 0."""
    p = _check_dist(p, "p")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def cross_entropy(p, q, floor=1e-12):
    p = _check_dist(p, "p")
    q = _check_dist(q, "q")
    return -(p * np.log(np.maximum(q, floor))).sum(axis=-1)
