"""Dense MLP with an explicit forward tape, backward pass and SGD updates.

Matrices are plain 2-D ``float64`` numpy arrays (row-major). A model is an
ordered list of :class:`Layer` objects; the forward pass returns the output
together with a tape of per-layer inputs and pre-activations that
:func:`backward` consumes.

Losses are evaluated on the raw model output (logits) through
:func:`head_loss`, which applies the task link (sigmoid for binary
classification, identity for regression) before the loss itself.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, DomainError, ShapeError

IDENTITY = "identity"
RELU = "relu"
SIGMOID = "sigmoid"
SOFTMAX = "softmax"
ACTIVATIONS = (IDENTITY, RELU, SIGMOID, SOFTMAX)

BCE = "bce"
MSE = "mse"
LOSSES = (BCE, MSE)


def _as_matrix(x, name="matrix"):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


@dataclass
class Layer:
    """Affine map followed by an activation.

    ``mask`` is an optional fixed connectivity pattern for ``weights``;
    masked-out entries receive zero gradient and so keep their value.
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = RELU
    mask: np.ndarray = None

    def __post_init__(self):
        self.weights = _as_matrix(self.weights, "weights")
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.shape[1] != self.bias.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != weights cols {self.weights.shape[1]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float64)
            if self.mask.shape != self.weights.shape:
                raise ShapeError("mask shape must equal weights shape")

    @property
    def fan_in(self):
        return self.weights.shape[0]

    @property
    def fan_out(self):
        return self.weights.shape[1]

    def copy(self):
        return Layer(
            self.weights.copy(),
            self.bias.copy(),
            self.activation,
            None if self.mask is None else self.mask.copy(),
        )


class MlpModel:
    def __init__(self, layers, input_dim=None):
        layers = list(layers)
        if not layers:
            raise ConfigError("an MLP needs at least one layer")
        if input_dim is None:
            input_dim = layers[0].fan_in
        if input_dim < 1:
            raise ConfigError("input_dim must be positive")
        prev = input_dim
        for k, layer in enumerate(layers):
            if layer.fan_in != prev:
                raise ShapeError(f"layer {k} fan_in {layer.fan_in} != previous width {prev}")
            prev = layer.fan_out
        self.layers = layers
        self.input_dim = int(input_dim)

    @classmethod
    def initialize(cls, input_dim, widths, activations, rng):
        """Glorot-uniform weights, zero biases.

        ``rng`` is a ``numpy.random.Generator``; draws happen layer by layer so
        the same generator state always yields the same model.
        """
        if len(widths) != len(activations):
            raise ConfigError("widths and activations must have equal length")
        layers = []
        fan_in = int(input_dim)
        for width, act in zip(widths, activations):
            limit = np.sqrt(6.0 / (fan_in + width))
            w = rng.uniform(-limit, limit, size=(fan_in, width))
            layers.append(Layer(w, np.zeros(width), act))
            fan_in = width
        return cls(layers, input_dim)

    @property
    def output_dim(self):
        return self.layers[-1].fan_out

    @property
    def n_params(self):
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def copy(self):
        return MlpModel([l.copy() for l in self.layers], self.input_dim)

    def flat(self):
        return np.concatenate([np.concatenate([l.weights.ravel(), l.bias]) for l in self.layers])

    def __repr__(self):
        dims = [self.input_dim] + [l.fan_out for l in self.layers]
        acts = ",".join(l.activation for l in self.layers)
        return f"MlpModel(dims={dims}, activations=[{acts}])"


@dataclass
class GradientSet:
    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, model):
        return cls(
            [np.zeros_like(l.weights) for l in model.layers],
            [np.zeros_like(l.bias) for l in model.layers],
        )

    def flat(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, vector):
        """A new GradientSet of the same shapes filled from ``vector``."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.size:
            raise ShapeError(f"flat vector has {vector.size} entries, expected {self.size}")
        ws, bs = [], []
        pos = 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vector[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(vector[pos:pos + b.size].copy())
            pos += b.size
        return GradientSet(ws, bs)

    @property
    def size(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def __add__(self, other):
        return GradientSet(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scaled(self, c):
        return GradientSet([w * c for w in self.weights], [b * c for b in self.biases])

    def check_congruent(self, model):
        if len(self.weights) != len(model.layers) or len(self.biases) != len(model.layers):
            raise ShapeError("gradient set has a different layer count than the model")
        for k, (w, b, layer) in enumerate(zip(self.weights, self.biases, model.layers)):
            if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"gradient shapes for layer {k} do not match the model")


@dataclass
class Tape:
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def activate(z, activation):
    if activation == RELU:
        return np.maximum(z, 0.0)
    if activation == IDENTITY:
        return z
    if activation == SIGMOID:
        return _sigmoid(z)
    if activation == SOFTMAX:
        return _softmax(z)
    raise ConfigError(f"unknown activation {activation!r}")


def _activation_backward(grad, z, a, activation):
    if activation == RELU:
        # derivative at exactly 0 is taken as 0
        return _kernels.relu_backward(grad, z)
    if activation == IDENTITY:
        return grad
    if activation == SIGMOID:
        return grad * a * (1.0 - a)
    if activation == SOFTMAX:
        return a * (grad - np.sum(grad * a, axis=1, keepdims=True))
    raise ConfigError(f"unknown activation {activation!r}")


def _forward_from(model, start, x, tape=None):
    a = x
    for layer in model.layers[start:]:
        z = a @ layer.weights + layer.bias
        out = activate(z, layer.activation)
        if tape is not None:
            tape.inputs.append(a)
            tape.pre.append(z)
            tape.post.append(out)
        a = out
    return a


def forward(model, batch):
    """Run ``batch`` (B x input_dim) through the model.

    Returns ``(output, tape)``.
    """
    x = _as_matrix(batch, "batch")
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"batch has {x.shape[1]} columns, model expects {model.input_dim}")
    tape = Tape()
    out = _forward_from(model, 0, x, tape)
    return out, tape


def backward(model, tape, upstream_grad):
    """Backpropagate ``upstream_grad`` (dLoss/dOutput) through the tape.

    Returns ``(param_grads, input_grad)``.
    """
    g = _as_matrix(upstream_grad, "upstream_grad")
    if len(tape.pre) != len(model.layers):
        raise ShapeError("tape does not belong to this model")
    if g.shape != tape.post[-1].shape:
        raise ShapeError(f"upstream grad shape {g.shape} != output shape {tape.post[-1].shape}")
    n = len(model.layers)
    gw = [None] * n
    gb = [None] * n
    for k in range(n - 1, -1, -1):
        layer = model.layers[k]
        dz = _activation_backward(g, tape.pre[k], tape.post[k], layer.activation)
        w_grad = tape.inputs[k].T @ dz
        if layer.mask is not None:
            w_grad *= layer.mask
        gw[k] = w_grad
        gb[k] = dz.sum(axis=0)
        g = dz @ layer.weights.T
    return GradientSet(gw, gb), g


def sgd_step(model, grads, lr):
    """In-place ``theta <- theta - lr * g`` for every parameter; returns ``model``."""
    grads.check_congruent(model)
    if lr == 0.0:
        return model
    for layer, w, b in zip(model.layers, grads.weights, grads.biases):
        layer.weights -= lr * w
        layer.bias -= lr * b
    return model


def loss_and_grad(kind, predictions, targets):
    """Loss on link-space predictions and its gradient w.r.t. ``predictions``.

    Reduction is a mean over rows and a sum over output columns. For MSE the
    gradient is ``2 (pred - target) / B``. BCE requires predictions strictly
    inside (0, 1).
    """
    p = _as_matrix(predictions, "predictions")
    y = _as_matrix(targets, "targets")
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and targets {y.shape} differ in shape")
    b = p.shape[0]
    if kind == MSE:
        diff = p - y
        return float(np.sum(diff * diff) / b), 2.0 * diff / b
    if kind == BCE:
        if np.any(p <= 0.0) or np.any(p >= 1.0) or not np.all(np.isfinite(p)):
            raise DomainError("BCE predictions must lie strictly inside (0, 1); apply the sigmoid first")
        loss = -np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)) / b
        grad = (p - y) / (p * (1.0 - p)) / b
        return float(loss), grad
    raise ConfigError(f"unknown loss kind {kind!r}")


def link(kind, logits):
    """Apply the task link to raw outputs: sigmoid for BCE, identity for MSE."""
    if kind == BCE:
        return _sigmoid(logits)
    if kind == MSE:
        return logits
    raise ConfigError(f"unknown loss kind {kind!r}")


def head_loss(kind, logits, targets):
    """Loss and gradient w.r.t. the raw model output.

    For BCE the sigmoid and log-loss are fused so saturated logits stay finite.
    Returns ``(loss, grad, predictions)`` where predictions are link outputs.
    """
    z = _as_matrix(logits, "logits")
    y = _as_matrix(targets, "targets")
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} and targets {y.shape} differ in shape")
    b = z.shape[0]
    if kind == BCE:
        p = _sigmoid(z)
        per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        return float(np.sum(per) / b), (p - y) / b, p
    if kind == MSE:
        loss, grad = loss_and_grad(MSE, z, y)
        return loss, grad, z
    raise ConfigError(f"unknown loss kind {kind!r}")


def l2_regularizer(model, lam, layers=None):
    """Penalty ``lam * sum(theta^2)`` and its gradient ``2 lam theta``.

    ``layers`` restricts the penalty to a subset of layer indices.
    """
    if lam < 0:
        raise ConfigError("regularization strength must be non-negative")
    grads = GradientSet.zeros_like(model)
    selected = range(len(model.layers)) if layers is None else layers
    penalty = 0.0
    if lam == 0:
        return penalty, grads
    for k in selected:
        layer = model.layers[k]
        penalty += lam * (float(np.sum(layer.weights ** 2)) + float(np.sum(layer.bias ** 2)))
        grads.weights[k] = 2.0 * lam * layer.weights
        grads.biases[k] = 2.0 * lam * layer.bias
    return penalty, grads


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst: tuple
    n_checked: int
    n_skipped: int
    tolerance: float
    step: float

    @property
    def passed(self):
        return self.n_checked > 0 and self.max_rel_error < self.tolerance

    def as_dict(self):
        return {
            "max_rel_error": self.max_rel_error,
            "max_abs_error": self.max_abs_error,
            "worst": list(self.worst),
            "n_checked": self.n_checked,
            "n_skipped": self.n_skipped,
            "tolerance": self.tolerance,
            "step": self.step,
            "passed": self.passed,
        }


def _relu_pattern(model, tape, start):
    return [
        tape.pre[k] > 0.0
        for k in range(start, len(model.layers))
        if model.layers[k].activation == RELU
    ]


def finite_difference_check(model, batch, targets, loss_kind, step=1e-5, tolerance=1e-4, floor=1e-6):
    """Compare analytic gradients with central differences for every parameter.

    Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
    the floor keeps float64 round-off in the difference quotient (about 1e-11
    for O(1) losses at step 1e-5) from dominating gradients that are
    essentially zero.
    A parameter is skipped when either perturbation flips the on/off state of
    any ReLU unit downstream (a kink lies within ``step``); masked weights are
    skipped as they are not free parameters.
    """
    if step <= 0:
        raise ConfigError("finite-difference step must be positive")
    x = _as_matrix(batch, "batch")
    y = _as_matrix(targets, "targets")
    model = model.copy()
    out, tape = forward(model, x)
    _, g_out, _ = head_loss(loss_kind, out, y)
    grads, _ = backward(model, tape, g_out)

    max_rel = 0.0
    max_abs = 0.0
    worst = ()
    checked = 0
    skipped = 0
    for k, layer in enumerate(model.layers):
        a_in = tape.inputs[k]
        base_pattern = _relu_pattern(model, tape, k)
        for kind, param, analytic in (
            ("w", layer.weights, grads.weights[k]),
            ("b", layer.bias, grads.biases[k]),
        ):
            for idx in np.ndindex(param.shape):
                if kind == "w" and layer.mask is not None and layer.mask[idx] == 0.0:
                    skipped += 1
                    continue
                orig = param[idx]
                losses = []
                kink = False
                for sign in (1.0, -1.0):
                    param[idx] = orig + sign * step
                    t = Tape()
                    o = _forward_from(model, k, a_in, t)
                    pattern = [
                        t.pre[j - k] > 0.0
                        for j in range(k, len(model.layers))
                        if model.layers[j].activation == RELU
                    ]
                    if any(not np.array_equal(p, q) for p, q in zip(pattern, base_pattern)):
                        kink = True
                    losses.append(head_loss(loss_kind, o, y)[0])
                param[idx] = orig
                if kink:
                    skipped += 1
                    continue
                numeric = (losses[0] - losses[1]) / (2.0 * step)
                a = float(analytic[idx])
                abs_err = abs(a - numeric)
                rel = abs_err / max(abs(a), abs(numeric), floor)
                checked += 1
                max_abs = max(max_abs, abs_err)
                if rel > max_rel:
                    max_rel = rel
                    worst = (k, kind) + tuple(int(i) for i in idx)
    return GradCheckReport(max_rel, max_abs, worst, checked, skipped, tolerance, step)
