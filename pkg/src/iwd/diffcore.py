"""Dense feed-forward networks with hand-written reverse-mode gradients.

The same small machinery drives the classifier, the patch critic and the
perturbation updates. Parameters live in one flat float64 vector laid out
layer by layer as ``W_1, b_1, W_2, b_2, ...`` with ``W_l`` stored row-major
with shape ``(fan_in, fan_out)`` so that ``z = a @ W + b``.

Besides plain backprop there is a forward-over-reverse routine,
:func:`input_gradient_vjp`, that returns ``d/dθ <v, ∇_x f(x; θ)>``. The
gradient penalty of a scalar critic needs exactly this quantity.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, FormatError, LabelError, NumericError, ValidationError

ACTIVATIONS = ("relu", "tanh")
OUTPUTS = ("logits", "scalar")
MAGIC = b"IWDNET1\0"


@dataclass(frozen=True)
class NetworkSpec:
    layer_widths: tuple
    activation: str = "relu"
    output: str = "logits"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValidationError("a network needs at least 2 layer widths")
        if any(w < 1 for w in widths):
            raise ValidationError(f"layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.output not in OUTPUTS:
            raise ValidationError(f"unknown output kind {self.output!r}")
        if self.output == "scalar" and widths[-1] != 1:
            raise ValidationError("scalar output requires a final width of 1")

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def n_params(self):
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))


def init_params(spec, rng):
    """Glorot-uniform weights, zero biases."""
    chunks = []
    w = spec.layer_widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-a, a, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks).astype(np.float64)


def unpack(spec, params):
    """Views ``[(W, b), ...]`` into the flat parameter vector.

    A stack of networks is a ``(..., n_params)`` array; W then has shape
    ``(..., fan_in, fan_out)`` and b ``(..., 1, fan_out)``.
    """
    params = np.asarray(params)
    if params.ndim < 1 or params.shape[-1] != spec.n_params:
        raise DimensionError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    lead = params.shape[:-1]
    layers = []
    off = 0
    w = spec.layer_widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        W = params[..., off:off + fan_in * fan_out].reshape(*lead, fan_in, fan_out)
        off += fan_in * fan_out
        b = params[..., off:off + fan_out].reshape(*lead, 1, fan_out)
        off += fan_out
        layers.append((W, b))
    return layers


def _t(a):
    return np.swapaxes(a, -1, -2)


def _flatten(grads, lead):
    return np.concatenate([np.concatenate([gW.reshape(*lead, -1), gb.reshape(*lead, -1)], axis=-1)
                           for gW, gb in grads], axis=-1)


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_d1(kind, z, a):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _act_d2(kind, z, a):
    if kind == "relu":
        return np.zeros_like(z)
    return -2.0 * a * (1.0 - a * a)


def _as_batch(spec, x, stacked=False):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if (X.ndim != 2 and not stacked) or X.shape[-1] != spec.layer_widths[0]:
        raise DimensionError(
            f"input has shape {x.shape}, network expects width {spec.layer_widths[0]}"
        )
    return X, single


def _forward_cache(spec, params, X):
    layers = unpack(spec, params)
    acts = [X]
    pre = []
    a = X
    for li, (W, b) in enumerate(layers):
        z = a @ W + b
        pre.append(z)
        a = z if li == len(layers) - 1 else _act(spec.activation, z)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activation in layer {li + 1}", layer=li + 1)
        acts.append(a)
    return layers, pre, acts


def forward(spec, params, x):
    """Network output for one input vector or a batch of row vectors.

    With stacked parameters ``(S, n_params)`` the input is ``(S, n, d)``.
    """
    X, single = _as_batch(spec, x, np.ndim(params) > 1)
    _, _, acts = _forward_cache(spec, params, X)
    out = acts[-1]
    return out[0] if single else out


@dataclass
class GradientBundle:
    loss: float
    grad_params: np.ndarray
    grad_input: np.ndarray


def backward(spec, params, x, loss_head):
    """Loss value plus gradients w.r.t. parameters and input.

    ``loss_head(output) -> (loss, dloss/doutput)`` receives the network output
    with the same batch layout as ``x``.
    """
    X, single = _as_batch(spec, x, np.ndim(params) > 1)
    layers, pre, acts = _forward_cache(spec, params, X)
    out = acts[-1][0] if single else acts[-1]
    loss, dout = loss_head(out)
    delta = np.asarray(dout, dtype=np.float64).reshape(acts[-1].shape)
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        grads.append((_t(acts[li]) @ delta, delta.sum(axis=-2)))
        delta = delta @ _t(W)
        if li > 0:
            delta = delta * _act_d1(spec.activation, pre[li - 1], acts[li])
        if not np.all(np.isfinite(delta)):
            raise NumericError(f"non-finite gradient in layer {li + 1}", layer=li + 1)
    flat = _flatten(grads[::-1], np.shape(params)[:-1])
    gx = delta[0] if single else delta
    return GradientBundle(float(loss), flat, gx)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    mx = z.max(axis=-1, keepdims=True)
    return z - mx - np.log(np.exp(z - mx).sum(axis=-1, keepdims=True))


def _check_labels(labels, k):
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelError(f"label out of range for {k} classes: {labels}")
    return labels.astype(np.int64)


def cross_entropy(logits, label):
    """Cross-entropy of one logit vector against a class index."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    y = int(_check_labels(label, z.shape[-1]))
    return float(-log_softmax(z)[y])


def cross_entropy_batch(logits, labels):
    """Per-sample cross-entropy for a (B, K) logit matrix."""
    z = np.asarray(logits, dtype=np.float64)
    y = _check_labels(labels, z.shape[1])
    return -log_softmax(z)[np.arange(len(y)), y]


def cross_entropy_head(labels, weights=None):
    """Loss head for :func:`backward`: sum_i w_i * CE_i (default mean)."""
    labels = np.atleast_1d(labels)

    def head(out):
        z = np.atleast_2d(out)
        y = _check_labels(labels, z.shape[1])
        w = np.full(len(y), 1.0 / len(y)) if weights is None else np.asarray(weights, float)
        ls = log_softmax(z)
        loss = -(w * ls[np.arange(len(y)), y]).sum()
        d = np.exp(ls)
        d[np.arange(len(y)), y] -= 1.0
        d *= w[:, None]
        return loss, d.reshape(np.shape(out))

    return head


def linear_head(coef):
    """Loss head ``sum(coef * output)``."""
    coef = np.asarray(coef, dtype=np.float64)

    def head(out):
        return float((coef * out).sum()), np.broadcast_to(coef, np.shape(out)).copy()

    return head


# ---------------------------------------------------------------------------
# forward-over-reverse for scalar networks
# ---------------------------------------------------------------------------


def input_gradient(spec, params, X):
    """∇_x f(x) for every row of X (scalar-output networks)."""
    if spec.layer_widths[-1] != 1:
        raise ValidationError("input_gradient needs a scalar-output network")
    g = backward(spec, params, np.atleast_2d(X), linear_head(1.0))
    return g.grad_input


def input_gradient_vjp(spec, params, X, V):
    """Return (G, dθ) with G[i] = ∇_x f(X[i]) and dθ = ∇_θ Σ_i <V[i], G[i]>.

    Uses a tangent (forward-mode) pass seeded with V followed by reverse-mode
    differentiation of the tangent output.
    """
    if spec.layer_widths[-1] != 1:
        raise ValidationError("input_gradient_vjp needs a scalar-output network")
    X = np.asarray(X, dtype=np.float64)
    X = X if X.ndim >= 2 else X[None]
    V = np.asarray(V, dtype=np.float64).reshape(X.shape)
    layers, pre, acts = _forward_cache(spec, params, X)
    L = len(layers)
    kind = spec.activation

    tangents = [V]
    tpre = []
    t = V
    for li, (W, _) in enumerate(layers):
        tz = t @ W
        tpre.append(tz)
        t = tz if li == L - 1 else _act_d1(kind, pre[li], acts[li + 1]) * tz
        tangents.append(t)

    # plain input gradient for G
    delta = np.ones_like(acts[-1])
    for li in range(L - 1, -1, -1):
        delta = delta @ _t(layers[li][0])
        if li > 0:
            delta = delta * _act_d1(kind, pre[li - 1], acts[li])
    G = delta

    zbar = np.zeros_like(pre[-1])
    tbar = np.ones_like(tpre[-1])
    grads = []
    for li in range(L - 1, -1, -1):
        W, _ = layers[li]
        gW = _t(acts[li]) @ zbar + _t(tangents[li]) @ tbar
        gb = zbar.sum(axis=-2)
        grads.append((gW, gb))
        if li == 0:
            break
        abar = zbar @ _t(W)
        atbar = tbar @ _t(W)
        z_prev = pre[li - 1]
        a_prev = acts[li]
        d1 = _act_d1(kind, z_prev, a_prev)
        zbar = abar * d1 + atbar * _act_d2(kind, z_prev, a_prev) * tpre[li - 1]
        tbar = atbar * d1
    flat = _flatten(grads[::-1], np.shape(params)[:-1])
    if not np.all(np.isfinite(flat)):
        raise NumericError("non-finite second-order gradient")
    return G, flat


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 5e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValidationError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("adam betas must lie in (0, 1)")


def make_optimizer(kind, learning_rate, n_params, beta1=0.5, beta2=0.999, eps=1e-8):
    return OptimizerState(kind, float(learning_rate), beta1, beta2, eps, 0,
                          np.zeros(n_params), np.zeros(n_params))


def optimizer_step(state, params, grads):
    """One descent step. Returns ``(new_params, new_state)``; inputs are untouched.

    To ascend, pass the negated gradient.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise DimensionError(f"parameter shape {params.shape} != gradient shape {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient passed to optimizer")
    lr = state.learning_rate
    if state.kind == "sgd":
        return params - lr * grads, replace(state, t=state.t + 1)
    m0 = np.zeros_like(params) if state.m is None else state.m
    v0 = np.zeros_like(params) if state.v is None else state.v
    t = state.t + 1
    m = state.beta1 * m0 + (1 - state.beta1) * grads
    v = state.beta2 * v0 + (1 - state.beta2) * grads * grads
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    new = params - lr * mhat / (np.sqrt(vhat) + state.eps)
    return new, replace(state, t=t, m=m, v=v)


# ---------------------------------------------------------------------------
# binary serialization
# ---------------------------------------------------------------------------


def params_to_bytes(spec, params):
    params = np.asarray(params, dtype="<f8")
    if params.size != spec.n_params:
        raise DimensionError("parameter vector does not match spec")
    w = spec.layer_widths
    head = MAGIC + struct.pack("<I", len(w)) + struct.pack(f"<{len(w)}I", *w)
    return head + params.tobytes()


def params_from_bytes(blob, activation="relu", output="logits"):
    """Inverse of :func:`params_to_bytes`. Activation/output are not stored."""
    if blob[:8] != MAGIC:
        raise FormatError("bad network magic", offset=0)
    if len(blob) < 12:
        raise FormatError("truncated layer count", offset=8)
    (n,) = struct.unpack_from("<I", blob, 8)
    end = 12 + 4 * n
    if len(blob) < end:
        raise FormatError("truncated layer widths", offset=12)
    widths = struct.unpack_from(f"<{n}I", blob, 12)
    spec = NetworkSpec(widths, activation, output)
    need = end + 8 * spec.n_params
    if len(blob) != need:
        raise FormatError(f"expected {need} bytes, found {len(blob)}", offset=end)
    params = np.frombuffer(blob, dtype="<f8", offset=end).astype(np.float64)
    return spec, params
