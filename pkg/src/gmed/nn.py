"""Dense rectifier network with hand-written backpropagation.

Parameters are treated as values: every update returns a new
:class:`MlpParams` so a pre-update and post-update copy can coexist.
"""

from dataclasses import dataclass

import numpy as np


class StaleCacheError(ValueError):
    """A forward cache was used with parameters it was not built from."""


@dataclass(frozen=True)
class MlpParams:
    """Weights are stored ``(out, in)``; hidden layers use ReLU, the last is linear."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bad shapes {w.shape} / {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: in-dim {w.shape[1]} does not chain "
                                 f"with previous out-dim {self.weights[i - 1].shape[0]}")

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def n_layers(self):
        return len(self.weights)

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def astype(self, dtype):
        return MlpParams(tuple(w.astype(dtype) for w in self.weights),
                         tuple(b.astype(dtype) for b in self.biases))

    def to_vector(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec):
        """Build params shaped like ``self`` from a flat vector."""
        vec = np.asarray(vec)
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos:pos + a.size].reshape(a.shape).astype(a.dtype, copy=False))
            pos += a.size
        if pos != vec.size:
            raise ValueError(f"vector has {vec.size} entries, params need {pos}")
        return MlpParams(tuple(out[0::2]), tuple(out[1::2]))

    def all_finite(self):
        return all(np.isfinite(a).all() for a in self.arrays())


@dataclass(frozen=True)
class ForwardCache:
    params: MlpParams
    inputs: np.ndarray
    pre_activations: tuple
    post_activations: tuple


@dataclass(frozen=True)
class GradBundle:
    param_grads: MlpParams
    input_grads: np.ndarray | None


def init_mlp(layer_sizes, seed, dtype=np.float32):
    """He-normal weights, zero biases; deterministic in ``seed``."""
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ValueError("layer_sizes needs at least an input and an output size")
    if any(int(s) != s or s <= 0 for s in sizes):
        raise ValueError(f"layer sizes must be positive integers, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        std = np.sqrt(2.0 / n_in)
        weights.append((rng.standard_normal((n_out, n_in)) * std).astype(dtype))
        biases.append(np.zeros(n_out, dtype=dtype))
    return MlpParams(tuple(weights), tuple(biases))


def forward(params, x):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise ValueError(f"expected input of shape (batch, {params.weights[0].shape[1]}), "
                         f"got {x.shape}")
    x = x.astype(params.dtype, copy=False)
    pre, post = [], []
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0)
        post.append(h)
    return h, ForwardCache(params, x, tuple(pre), tuple(post))


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def _check_labels(labels, n_classes, n_rows):
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise ValueError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64, copy=False)


def cross_entropy(logits, labels, reduction="mean"):
    """Softmax cross-entropy, evaluated in float64.

    ``reduction="none"`` returns the per-row losses.
    """
    logits = np.asarray(logits)
    labels = _check_labels(labels, logits.shape[1], logits.shape[0])
    losses = -log_softmax(logits)[np.arange(len(labels)), labels]
    if reduction == "none":
        return losses
    if reduction == "mean":
        return float(losses.mean())
    if reduction == "sum":
        return float(losses.sum())
    raise ValueError(f"unknown reduction {reduction!r}")


def backward(params, cache, labels, input_grad=True, param_grads=True):
    """Gradients of the mean-batch cross-entropy.

    Returns parameter gradients (unless ``param_grads=False``, which leaves
    them as ``None``) and, if requested, the gradient with respect to every
    input row.
    """
    if cache.params is not params:
        raise StaleCacheError("forward cache was computed with different parameters")
    logits = cache.post_activations[-1]
    labels = _check_labels(labels, logits.shape[1], logits.shape[0])
    n = logits.shape[0]
    delta = softmax(logits)
    delta[np.arange(n), labels] -= 1.0
    delta = (delta / n).astype(params.dtype)

    grad_w, grad_b = [None] * params.n_layers, [None] * params.n_layers
    for i in range(params.n_layers - 1, -1, -1):
        if param_grads:
            h_in = cache.post_activations[i - 1] if i else cache.inputs
            grad_w[i] = delta.T @ h_in
            grad_b[i] = delta.sum(axis=0, dtype=np.float64).astype(params.dtype)
        if i or input_grad:
            delta = delta @ params.weights[i]
            if i:
                delta = delta * (cache.pre_activations[i - 1] > 0)
    grads = MlpParams(tuple(grad_w), tuple(grad_b)) if param_grads else None
    return GradBundle(grads, delta if input_grad else None)


def loss_and_grads(params, x, y, input_grad=True):
    logits, cache = forward(params, x)
    return cross_entropy(logits, y), backward(params, cache, y, input_grad=input_grad)


def sgd_step(params, grads, lr):
    """Return ``params - lr * grads`` as a new value; ``params`` is untouched."""
    if not np.isfinite(lr):
        raise ValueError(f"learning rate must be finite, got {lr}")
    if isinstance(grads, GradBundle):
        grads = grads.param_grads
    if grads.layer_sizes != params.layer_sizes:
        raise ValueError("gradient shapes do not match parameters")
    lr = params.dtype.type(lr)
    return MlpParams(tuple(_axpy(w, g, lr) for w, g in zip(params.weights, grads.weights)),
                     tuple(_axpy(b, g, lr) for b, g in zip(params.biases, grads.biases)))


def _axpy(p, g, lr):
    # one temporary instead of two; same rounding as p - lr * g
    out = np.multiply(g, lr, dtype=p.dtype)
    return np.subtract(p, out, out=out)


def predict_logits(params, x, chunk=4096):
    x = np.asarray(x)
    out = [forward(params, x[i:i + chunk])[0] for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.empty((0, params.layer_sizes[-1]))


def predict(params, x):
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(predict_logits(params, x), axis=1)


def evaluate_accuracy(params, x, y):
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate accuracy on an empty set")
    return float(np.mean(predict(params, x) == y))
