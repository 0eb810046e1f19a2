"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Everything is 64-bit: the models here are desk-scale and exact gradients
matter more than speed, so forward values and gradients are kept tight enough
for central finite-difference checks at h=1e-4.

Recording model: ops executed inside a ``with GradTape() as tape:`` block
append a backward closure to the tape in execution order. Execution order is
a topological order of the computation DAG, so replaying the closures in
reverse propagates output gradients to every recorded input. Outside a tape
(the default), ops compute forward values only and produce bit-identical
results. Tapes are thread-local; independent tapes may run concurrently on
disjoint tensors.

Conventions fixed here and relied on by the oracles in the test suite:

* layer_norm / batch_norm2d use population (biased) variance;
* gelu is the exact erf form, not the tanh approximation;
* dropout takes an explicit seeded generator per call site;
* argmax ties elsewhere in the package break to the lower index.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

from .exceptions import DimensionError, NotRecordingError, UninitializedStatsError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``data`` is never mutated by ops (parameter updates done by optimizers are
    the one sanctioned exception, outside any recording). ``grad`` is lazily
    allocated during backward replay; accumulation across fan-out happens
    within a single replay. The supported training pattern is one backward per
    recorded forward: reset the tape and set grads back to None between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def backward(self):
        backward(self)


def as_tensor(x, requires_grad=False):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


class GradTape:
    """Ordered log of executed ops; replaying it in reverse yields gradients.

    A tape collects entries only while it is the innermost active tape on the
    current thread. ``reset`` drops all entries; a fresh tape per forward pass
    is the cheapest way to get the same effect.
    """

    def __init__(self):
        self._entries = []

    def __enter__(self):
        stack = getattr(_STATE, "stack", None)
        if stack is None:
            stack = _STATE.stack = []
        stack.append(self)
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _STATE.stack
        stack.pop()
        _STATE.tape = stack[-1] if stack else None
        return False

    def reset(self):
        self._entries.clear()

    def __len__(self):
        return len(self._entries)

    def backward(self, scalar):
        """Seed ``scalar`` with gradient 1 and replay the log in reverse."""
        if scalar.data.size != 1:
            raise DimensionError(
                f"backward requires a scalar (one element), got shape {scalar.data.shape}"
            )
        scalar.grad = np.ones_like(scalar.data)
        for out, fn in reversed(self._entries):
            if out.grad is not None:
                fn()


def backward(scalar):
    """Backward pass from a recorded scalar through the tape that recorded it."""
    tape = scalar._tape
    if tape is None:
        raise NotRecordingError(
            "tensor was not recorded; run the forward pass inside a GradTape"
        )
    tape.backward(scalar)


def no_grad():
    """Context in which nothing records, even inside an outer tape."""

    class _NoGrad:
        def __enter__(self):
            stack = getattr(_STATE, "stack", None)
            if stack is None:
                stack = _STATE.stack = []
            stack.append(None)
            _STATE.tape = None

        def __exit__(self, exc_type, exc, tb):
            stack = _STATE.stack
            stack.pop()
            _STATE.tape = stack[-1] if stack else None
            return False

    return _NoGrad()


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _record(out, inputs, backward_fn):
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    out._tape = tape
    tape._entries.append((out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def scale(t, c):
    t = as_tensor(t)
    c = float(c)
    out = Tensor(t.data * c)

    def bwd():
        if t.requires_grad:
            _accum(t, out.grad * c)

    return _record(out, (t,), bwd)


def relu(t):
    t = as_tensor(t)
    out = Tensor(np.maximum(t.data, 0.0))

    def bwd():
        if t.requires_grad:
            _accum(t, out.grad * (t.data > 0))

    return _record(out, (t,), bwd)


def gelu(t):
    """Exact Gaussian-error linear unit: x * Phi(x), with Phi the normal CDF."""
    t = as_tensor(t)
    x = t.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = Tensor(x * cdf)

    def bwd():
        if t.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            _accum(t, out.grad * (cdf + x * pdf))

    return _record(out, (t,), bwd)


def softmax(t, axis=-1):
    """Max-stabilized softmax along ``axis``; rows sum to 1 for any finite input."""
    t = as_tensor(t)
    if not -t.data.ndim <= axis < t.data.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {t.data.shape}")
    with np.errstate(over="ignore"):
        # the shifted exponent may underflow to -inf for extreme finite
        # inputs; exp maps it to 0 and rows still sum to 1
        z = t.data - t.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd():
        if t.requires_grad:
            g = out.grad
            _accum(t, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _record(out, (t,), bwd)


def reshape(t, shape):
    t = as_tensor(t)
    out = Tensor(t.data.reshape(shape))

    def bwd():
        if t.requires_grad:
            _accum(t, out.grad.reshape(t.data.shape))

    return _record(out, (t,), bwd)


def transpose(t, axes):
    t = as_tensor(t)
    axes = tuple(axes)
    out = Tensor(np.transpose(t.data, axes))
    inv = tuple(np.argsort(axes))

    def bwd():
        if t.requires_grad:
            _accum(t, np.transpose(out.grad, inv))

    return _record(out, (t,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat requires at least one tensor")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd():
        parts = np.split(out.grad, splits, axis=axis)
        for t, g in zip(tensors, parts):
            if t.requires_grad:
                _accum(t, g)

    return _record(out, tuple(tensors), bwd)


def broadcast_to(t, shape):
    t = as_tensor(t)
    out = Tensor(np.broadcast_to(t.data, shape).copy())

    def bwd():
        if t.requires_grad:
            _accum(t, _unbroadcast(out.grad, t.data.shape))

    return _record(out, (t,), bwd)


def index(t, key):
    """Basic (non-advanced) indexing with scatter-add gradient."""
    t = as_tensor(t)
    out = Tensor(t.data[key])

    def bwd():
        if t.requires_grad:
            buf = np.zeros_like(t.data)
            buf[key] += out.grad
            _accum(t, buf)

    return _record(out, (t,), bwd)


def tsum(t, axis=None, keepdims=False):
    t = as_tensor(t)
    out = Tensor(t.data.sum(axis=axis, keepdims=keepdims))

    def bwd():
        if t.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(t, np.broadcast_to(g, t.data.shape).copy())

    return _record(out, (t,), bwd)


def tmean(t, axis=None, keepdims=False):
    t = as_tensor(t)
    out = Tensor(t.data.mean(axis=axis, keepdims=keepdims))
    denom = t.data.size / out.data.size

    def bwd():
        if t.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(t, np.broadcast_to(g, t.data.shape) / denom)

    return _record(out, (t,), bwd)


def dropout(t, rate, rng, training=True):
    """Inverted dropout with an explicit generator; identity when not training.

    ``rng`` must be a seeded ``numpy.random.Generator`` so a training run is
    reproducible from its seed alone.
    """
    t = as_tensor(t)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return t
    keep = 1.0 - rate
    mask = (rng.random(t.data.shape) >= rate) / keep
    out = Tensor(t.data * mask)

    def bwd():
        if t.requires_grad:
            _accum(t, out.grad * mask)

    return _record(out, (t,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product; leading axes broadcast, gradients da=g.bT, db=aT.g."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def bwd():
        g = out.grad
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to mean 0 / population variance 1, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match last dimension {d} of input {x.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd():
        g = out.grad
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            _accum(
                x,
                inv
                * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                ),
            )

    return _record(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolutional ops
# ---------------------------------------------------------------------------


def _conv_windows(xp, kh, kw, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernels, stride=1, padding=0):
    """2-D cross-correlation.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernels`` is
    (C_out, C_in, kh, kw). Output spatial size is
    floor((H + 2*padding - kh)/stride) + 1.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    squeezed = x.data.ndim == 3
    xd = x.data[None] if squeezed else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise DimensionError(
            f"conv2d: expected 3D/4D input and 4D kernels, got {x.data.shape} "
            f"and {kernels.data.shape}"
        )
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernels.data.shape
    if kcin != cin:
        raise DimensionError(
            f"conv2d: input has {cin} channels but kernels expect {kcin}"
        )
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _conv_windows(xp, kh, kw, stride)  # (N, C_in, H', W', kh, kw)
    out_nhwc = np.tensordot(win, kernels.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = np.moveaxis(out_nhwc, 3, 1)  # (N, C_out, H', W')
    hq, wq = out_data.shape[2], out_data.shape[3]
    out = Tensor(out_data[0] if squeezed else out_data)

    def bwd():
        g = out.grad[None] if squeezed else out.grad  # (N, C_out, H', W')
        if kernels.requires_grad:
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            _accum(kernels, gk)  # (C_out, C_in, kh, kw)
        if x.requires_grad:
            # scatter g*K back onto the padded input, one kernel tap at a time
            gcol = np.tensordot(g, kernels.data, axes=([1], [0]))  # (N,H',W',C_in,kh,kw)
            gcol = np.moveaxis(gcol, 3, 1)  # (N, C_in, H', W', kh, kw)
            gx = np.zeros((n, cin, hp, wp))
            for a in range(kh):
                for b in range(kw):
                    gx[:, :, a : a + stride * hq : stride, b : b + stride * wq : stride] += gcol[
                        :, :, :, :, a, b
                    ]
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            _accum(x, gx[0] if squeezed else gx)

    return _record(out, (x, kernels), bwd)


def avg_pool2d(x, size=2, stride=None):
    """Average pooling over (N, C, H, W) windows of ``size`` with ``stride``."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"avg_pool2d expects (N, C, H, W), got {x.data.shape}")
    stride = size if stride is None else stride
    n, c, h, w = x.data.shape
    if size > h or size > w:
        raise DimensionError(f"avg_pool2d: window {size} larger than input {h}x{w}")
    win = _conv_windows(x.data, size, size, stride)
    out = Tensor(win.mean(axis=(4, 5)))
    hq, wq = out.data.shape[2], out.data.shape[3]
    inv = 1.0 / (size * size)

    def bwd():
        if x.requires_grad:
            g = out.grad * inv
            gx = np.zeros_like(x.data)
            for a in range(size):
                for b in range(size):
                    gx[:, :, a : a + stride * hq : stride, b : b + stride * wq : stride] += g
            _accum(x, gx)

    return _record(out, (x,), bwd)


def global_avg_pool(x):
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects (N, C, H, W), got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    inv = 1.0 / (h * w)

    def bwd():
        if x.requires_grad:
            _accum(x, np.broadcast_to(out.grad[:, :, None, None], x.data.shape) * inv)

    return _record(out, (x,), bwd)


class RunningStats:
    """Per-channel running mean/variance for batch norm.

    Starts at mean 0 / variance 1 and stays flagged uninitialized until the
    first training batch; inference before that raises. Updates follow
    running = (1 - momentum) * running + momentum * batch with biased batch
    variance.
    """

    def __init__(self, channels, momentum=0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = float(momentum)
        self.initialized = False

    def update(self, batch_mean, batch_var):
        m = self.momentum
        self.mean = (1.0 - m) * self.mean + m * batch_mean
        self.var = (1.0 - m) * self.var + m * batch_var
        self.initialized = True

    def copy(self):
        out = RunningStats(len(self.mean), self.momentum)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        out.initialized = self.initialized
        return out


def batch_norm2d(x, gamma, beta, stats, training, eps=1e-5):
    """Channel-wise batch normalization over (N, C, H, W).

    Training mode normalizes by the batch's biased statistics and updates
    ``stats``; inference mode normalizes by the running statistics. The output
    stays on the gradient path in both modes so downstream hooks (Grad-CAM++)
    can differentiate through it.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm2d expects (N, C, H, W), got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,) or len(stats.mean) != c:
        raise DimensionError(
            f"batch_norm2d: channel mismatch, input has {c} channels, "
            f"gamma {gamma.data.shape}, beta {beta.data.shape}, stats {len(stats.mean)}"
        )
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        stats.update(mu, var)
    else:
        if not stats.initialized:
            raise UninitializedStatsError(
                "batch_norm2d inference requested before any running statistics "
                "were recorded; run at least one training batch first"
            )
        mu = stats.mean
        var = stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[:, None, None]) * inv[:, None, None]
    out = Tensor(xhat * gamma.data[:, None, None] + beta.data[:, None, None])

    def bwd():
        g = out.grad
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = g * gamma.data[:, None, None]
            if training:
                m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
                mean_g = gx.sum(axis=(0, 2, 3)) / m
                mean_gx = (gx * xhat).sum(axis=(0, 2, 3)) / m
                _accum(
                    x,
                    inv[:, None, None]
                    * (gx - mean_g[:, None, None] - xhat * mean_gx[:, None, None]),
                )
            else:
                _accum(x, gx * inv[:, None, None])

    return _record(out, (x, gamma, beta), bwd)


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy_loss expects (N, K) logits, got {logits.data.shape}")
    n = logits.data.shape[0]
    if labels.shape != (n,):
        raise DimensionError(
            f"cross_entropy_loss: {n} logit rows but labels shape {labels.shape}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    out = Tensor(-logp[np.arange(n), labels].mean())

    def bwd():
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            _accum(logits, out.grad * p / n)

    return _record(out, (logits,), bwd)
