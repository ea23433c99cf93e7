"""Gradient-based editing of replay-memory examples.

The edit moves a stored input toward larger interference, the loss
increase that one virtual SGD step on the incoming stream batch would
cause, while ``beta`` penalises loss at the current parameters.
Because the virtual parameters do not depend on the stored input, the
input gradient of ``d - beta * loss`` is just two input-gradient passes:

    grad_x loss(x; theta') - (1 + beta) * grad_x loss(x; theta)
"""

from dataclasses import dataclass

import numpy as np

from . import nn

EDIT_KINDS = ("gmed", "random", "adversarial", "optimal", "none")


@dataclass(frozen=True)
class EditConfig:
    alpha: float = 5.0
    beta: float = 0.01
    gamma: float = 1.0
    steps: int = 1
    kind: str = "gmed"
    writeback: bool = True
    n_extra_edit: int = 0
    random_norm: str = "l2"

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise ValueError(f"unknown edit kind {self.kind!r}; expected one of {EDIT_KINDS}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.n_extra_edit < 0:
            raise ValueError("n_extra_edit must be non-negative")
        if self.random_norm not in ("l2", "sign"):
            raise ValueError("random_norm must be 'l2' or 'sign'")


def virtual_update(params, x, y, lr):
    """One SGD step on the stream batch; the caller discards the result after editing."""
    _, grads = nn.loss_and_grads(params, x, y, input_grad=False)
    return nn.sgd_step(params, grads.param_grads, lr)


class VirtualStep:
    """One SGD step on the stream batch, with weight changes kept factored.

    The batch-mean weight gradient of layer ``i`` is ``deltas[i].T @
    inputs[i]``, of rank at most the batch size, so the stepped network
    can be evaluated without materialising its weight matrices. A pass at
    the original and a pass at the stepped parameters then share the
    first-layer product, and deeper layers run both passes as one stacked
    matmul. ``probe`` is an optional batch whose first-layer product is
    computed together with the stream batch's; :meth:`gmed_direction`
    reuses it when called with that same array object.
    """

    def __init__(self, params, x, y, lr, probe=None):
        self.params = params
        self.lr = params.dtype.type(lr)
        x = np.asarray(x).astype(params.dtype, copy=False)
        n = len(x)
        w0 = params.weights[0]
        if probe is not None:
            z0 = np.concatenate([x, np.asarray(probe, dtype=params.dtype)]) @ w0.T
            self._probe, self._probe_z0 = probe, z0[n:]
            z0 = z0[:n]
        else:
            z0 = x @ w0.T
            self._probe = self._probe_z0 = None
        pre, post = [], [x]
        h = x
        for i in range(params.n_layers):
            z = (z0 if i == 0 else h @ params.weights[i].T) + params.biases[i]
            pre.append(z)
            h = np.maximum(z, 0)
            post.append(h)
        logits = pre[-1]
        labels = nn._check_labels(y, logits.shape[1], n)
        delta = nn.softmax(logits)
        delta[np.arange(n), labels] -= 1.0
        delta = (delta / n).astype(params.dtype)
        deltas, biases = [None] * params.n_layers, [None] * params.n_layers
        for i in range(params.n_layers - 1, -1, -1):
            deltas[i] = delta
            g_b = delta.sum(axis=0, dtype=np.float64).astype(params.dtype)
            biases[i] = params.biases[i] - self.lr * g_b
            if i:
                delta = (delta @ params.weights[i]) * (pre[i - 1] > 0)
        self.deltas = tuple(deltas)
        self.inputs = tuple(post[:-1])
        self.biases = tuple(biases)

    def materialize(self):
        """The stepped parameters as a plain :class:`MlpParams`."""
        return nn.MlpParams(tuple(w - self.lr * (d.T @ h) for w, d, h in
                                  zip(self.params.weights, self.deltas, self.inputs)),
                            self.biases)

    def _low_rank(self, i, h):
        # h @ (lr * D.T @ H).T
        return self.lr * ((h @ self.inputs[i].T) @ self.deltas[i])

    def _low_rank_back(self, i, dz):
        # dz @ (lr * D.T @ H)
        return self.lr * ((dz @ self.deltas[i].T) @ self.inputs[i])

    def gmed_direction(self, x, y, beta):
        """Same value as :func:`gmed_direction` on the materialised step."""
        p = self.params
        same = x is self._probe
        x = np.asarray(x).astype(p.dtype, copy=False)
        n, last = len(x), p.n_layers - 1
        z0 = self._probe_z0 if same else x @ p.weights[0].T
        z = z0 + p.biases[0]
        z_v = z0 - self._low_rank(0, x) + self.biases[0]
        pre, pre_v = [z], [z_v]
        for i in range(1, p.n_layers):
            h, h_v = np.maximum(z, 0), np.maximum(z_v, 0)
            both = np.concatenate([h, h_v]) @ p.weights[i].T
            z = both[:n] + p.biases[i]
            z_v = both[n:] - self._low_rank(i, h_v) + self.biases[i]
            pre.append(z)
            pre_v.append(z_v)
        labels = nn._check_labels(y, z.shape[1], n)

        def out_delta(logits):
            d = nn.softmax(logits)
            d[np.arange(n), labels] -= 1.0
            return (d / n).astype(p.dtype)

        d, d_v = out_delta(z), out_delta(z_v)
        for i in range(last, -1, -1):
            both = np.concatenate([d, d_v]) @ p.weights[i]
            g, g_v = both[:n], both[n:] - self._low_rank_back(i, d_v)
            if i:
                d, d_v = g * (pre[i - 1] > 0), g_v * (pre_v[i - 1] > 0)
        return g_v - (1.0 + beta) * g


def as_params(params_after):
    return params_after.materialize() if isinstance(params_after, VirtualStep) else params_after


def interference(params, params_after, x, y):
    """Per-example ``loss(params_after) - loss(params)``."""
    params_after = as_params(params_after)
    before = nn.cross_entropy(nn.forward(params, x)[0], y, reduction="none")
    after = nn.cross_entropy(nn.forward(params_after, x)[0], y, reduction="none")
    return after - before


def input_grad(params, x, y):
    _, cache = nn.forward(params, x)
    return nn.backward(params, cache, y, input_grad=True, param_grads=False).input_grads


def gmed_direction(x, y, params, params_after, beta):
    """Input gradient of the batch-mean ``d - beta * loss_before``."""
    if isinstance(params_after, VirtualStep):
        return params_after.gmed_direction(x, y, beta)
    g_after = input_grad(params_after, x, y)
    g_before = input_grad(params, x, y)
    return g_after - (1.0 + beta) * g_before


def random_direction(shape, rng, norm="l2", dtype=np.float32):
    u = rng.standard_normal(shape)
    if norm == "sign":
        return np.sign(u).astype(dtype)
    lengths = np.linalg.norm(u, axis=1, keepdims=True)
    return (u / np.where(lengths == 0, 1.0, lengths)).astype(dtype)


def adversarial_direction(x, y, params):
    return np.sign(input_grad(params, x, y))


def edit_step(x, y, k, params, params_after, cfg, rng=None, direction_fn=None,
              first_direction=None):
    """Apply ``cfg.steps`` edits to a batch of stored inputs.

    ``k`` is the per-example replay count; the stride ``gamma**k * alpha``
    stays fixed for all inner steps while the direction is recomputed.
    ``direction_fn(x)`` supplies the direction for ``kind="optimal"``;
    ``first_direction``, if given, replaces the first computed direction.
    Edited inputs are not clipped to the pixel range.
    """
    x = np.asarray(x)
    if cfg.kind == "none":
        return x.copy()
    stride = (cfg.alpha * np.power(cfg.gamma, np.asarray(k, dtype=np.float64))).astype(x.dtype)
    stride = stride.reshape(-1, 1)
    for i in range(cfg.steps):
        if i == 0 and first_direction is not None:
            d = first_direction
        else:
            d = edit_direction(x, y, params, params_after, cfg, rng, direction_fn)
        x = x + stride * d.astype(x.dtype)
    return x


def edit_direction(x, y, params, params_after, cfg, rng=None, direction_fn=None):
    if cfg.kind == "gmed":
        return gmed_direction(x, y, params, params_after, cfg.beta)
    if cfg.kind == "random":
        if rng is None:
            raise ValueError("random edits need an rng")
        return random_direction(x.shape, rng, cfg.random_norm, x.dtype)
    if cfg.kind == "adversarial":
        return adversarial_direction(x, y, params)
    if cfg.kind == "optimal":
        if direction_fn is None:
            raise ValueError("optimal edits need a direction_fn")
        return direction_fn(x)
    return np.zeros_like(x)


def optimal_edit_direction(params, x_m, y_m, x_d, y_d, lr, hist_x, hist_y, eps=None,
                           rel_eps=1e-3):
    """Hindsight edit direction that reduces the loss of previously visited examples.

    Returns the negative gradient of ``sum_i loss(x_i; theta_next(x_m))``
    with respect to ``x_m``, where ``theta_next`` is the SGD step on the
    memory batch plus the step on the stream batch. The mixed second
    derivative is taken by a central difference of input gradients along
    ``h``, the history-loss parameter gradient at ``theta_next``. ``eps``
    defaults to ``rel_eps * |theta| / |h|``.
    """
    if len(hist_y) == 0:
        raise ValueError("optimal edits need a non-empty history sample")
    _, g_mem = nn.loss_and_grads(params, x_m, y_m, input_grad=False)
    _, g_str = nn.loss_and_grads(params, x_d, y_d, input_grad=False)
    theta_vec = params.to_vector().astype(np.float64)
    step = g_mem.param_grads.to_vector().astype(np.float64) + g_str.param_grads.to_vector()
    theta_next = params.from_vector(theta_vec - lr * step)
    _, g_hist = nn.loss_and_grads(theta_next, hist_x, hist_y, input_grad=False)
    h = g_hist.param_grads.to_vector().astype(np.float64)
    h_norm = np.linalg.norm(h)
    if h_norm == 0:
        return np.zeros_like(np.asarray(x_m))
    if eps is None:
        eps = rel_eps * np.linalg.norm(theta_vec) / h_norm
    plus = params.from_vector(theta_vec + eps * h)
    minus = params.from_vector(theta_vec - eps * h)
    diff = (input_grad(plus, x_m, y_m).astype(np.float64)
            - input_grad(minus, x_m, y_m).astype(np.float64))
    # d/dx_m loss(theta - lr * grad loss(x_m)) = -lr * (mixed Hessian) h; we descend it
    return (lr / (2.0 * eps)) * diff
