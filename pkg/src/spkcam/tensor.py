"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive computes its forward value and, when a :class:`Tape` is
supplied, records a node whose backward closure maps the output gradient to
input gradients.  ``Tape.backward`` walks the recording in reverse and can
return gradients for any tensor that appeared on the tape, including
intermediate activations (needed for gradient-weighted saliency maps), not
just leaf parameters.

Conventions:
    * storage is dense, row-major, float64
    * relu'(0) = 0
    * batchnorm uses biased batch variance in training mode and running
      statistics in eval mode, epsilon 1e-5
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatchError",
    "DivergenceError",
    "conv2d",
    "relu",
    "sigmoid",
    "batchnorm2d",
    "global_avg_pool",
    "avg_pool2d",
    "linear",
    "add",
    "mul_scalar",
    "elementwise_mul",
    "channel_scale",
    "tensor_sum",
    "select",
    "softmax_cross_entropy",
    "standardize_columns",
    "l2_normalize_rows",
    "squared_l2_distance",
    "sgd_step",
    "SgdOptimizer",
]

# When enabled, every primitive validates that its output is finite.  Off by
# default: training checks gradients at each sgd_step instead, which catches
# divergence without scanning every intermediate array.
CHECK_FINITE = False

_ID_COUNTER = itertools.count()


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class DivergenceError(RuntimeError):
    """Non-finite values appeared where finite ones are required."""


class Tensor:
    """Dense float64 array with an identity usable as a tape key."""

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False, check_finite: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if check_finite and not np.all(np.isfinite(arr)):
            raise DivergenceError("tensor contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ID_COUNTER)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.data.shape})"


def _out(data) -> Tensor:
    t = Tensor(data, check_finite=CHECK_FINITE)
    return t


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Nodes are appended in execution order, so the record is topologically
    sorted by construction.
    """

    def __init__(self):
        self._nodes = []
        self._shapes = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs, backward) -> None:
        ids = tuple(t.id for t in inputs)
        self._nodes.append((out.id, ids, backward))
        self._shapes[out.id] = out.data.shape
        for t in inputs:
            self._shapes.setdefault(t.id, t.data.shape)

    def knows(self, tensor_id: int) -> bool:
        return tensor_id in self._shapes

    def backward(self, output: Tensor, wrt) -> dict:
        """Gradients of a scalar ``output`` with respect to requested tensors.

        ``wrt`` is an iterable of Tensors or tensor ids that appeared on this
        tape.  Returns ``{id: ndarray}``.  A requested tensor that the scalar
        does not depend on gets a zero gradient.  Each call starts from a
        fresh accumulator, so repeated calls return identical results.
        """
        if output.data.shape != ():
            raise ShapeMismatchError(
                f"backward requires a scalar output, got shape {output.data.shape}"
            )
        wanted = []
        for w in wrt:
            wid = w.id if isinstance(w, Tensor) else int(w)
            if wid not in self._shapes:
                raise KeyError(f"tensor id {wid} was not recorded on this tape")
            wanted.append(wid)

        grads = {output.id: np.ones((), dtype=np.float64)}
        for out_id, in_ids, backward in reversed(self._nodes):
            g = grads.get(out_id)
            if g is None:
                continue
            for in_id, gi in zip(in_ids, backward(g)):
                if gi is None:
                    continue
                acc = grads.get(in_id)
                grads[in_id] = gi if acc is None else acc + gi
        return {
            wid: grads.get(wid, np.zeros(self._shapes[wid])) for wid in wanted
        }


def _pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _require_shape(name: str, got, expected) -> None:
    if tuple(got) != tuple(expected):
        raise ShapeMismatchError(f"{name}: expected shape {tuple(expected)}, got {tuple(got)}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int):
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def _col2im(dcols, x_shape, kh, kw, sh, sw, ph, pw, oh, ow):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    dwin = dcols.reshape(n, oh, ow, c, kh, kw).transpose(3, 4, 5, 0, 1, 2)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki : ki + oh * sh : sh, kj : kj + ow * sw : sw] += dwin[
                :, ki, kj
            ].transpose(1, 0, 2, 3)
    if ph or pw:
        return dxp[:, :, ph : ph + h, pw : pw + w]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, tape: Tape | None = None) -> Tensor:
    """2-D cross-correlation, NCHW layout, weight (C_out, C_in, kh, kw)."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeMismatchError(
            f"conv2d: weight expects {ci} input channels, input has {c}"
        )
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatchError(
            f"conv2d: kernel ({kh},{kw}) does not fit input ({h},{w}) with padding ({ph},{pw})"
        )
    if bias is not None:
        _require_shape("conv2d bias", bias.shape, (co,))

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    wmat = weight.data.reshape(co, -1)
    ymat = cols @ wmat.T
    if bias is not None:
        ymat = ymat + bias.data
    out = _out(ymat.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))

    if tape is not None:
        x_shape = x.shape

        def backward(g):
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
            dw = (gmat.T @ cols).reshape(co, ci, kh, kw)
            dcols = gmat @ wmat
            dx = _col2im(dcols, x_shape, kh, kw, sh, sw, ph, pw, oh, ow)
            if bias is not None:
                return dx, dw, gmat.sum(axis=0)
            return dx, dw

        inputs = (x, weight) if bias is None else (x, weight, bias)
        tape._record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise and pooling


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = _out(np.maximum(x.data, 0.0))
    if tape is not None:
        mask = x.data > 0.0

        def backward(g):
            return (g * mask,)

        tape._record(out, (x,), backward)
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    s[~pos] = ez / (1.0 + ez)
    out = _out(s)
    if tape is not None:

        def backward(g):
            return (g * s * (1.0 - s),)

        tape._record(out, (x,), backward)
    return out


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    tape: Tape | None = None,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize and the running buffers
    are updated in place; in eval mode the running buffers normalize.
    """
    if x.ndim != 4:
        raise ShapeMismatchError(f"batchnorm2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    _require_shape("batchnorm2d gamma", gamma.shape, (c,))
    _require_shape("batchnorm2d beta", beta.shape, (c,))

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = _out(xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None])

    if tape is not None:
        m = n * h * w

        if training:

            def backward(g):
                dbeta = g.sum(axis=(0, 2, 3))
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
                coeff = (gamma.data * inv / m)[None, :, None, None]
                dx = coeff * (
                    m * g
                    - dbeta[None, :, None, None]
                    - xhat * dgamma[None, :, None, None]
                )
                return dx, dgamma, dbeta

        else:

            def backward(g):
                dbeta = g.sum(axis=(0, 2, 3))
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
                dx = g * (gamma.data * inv)[None, :, None, None]
                return dx, dgamma, dbeta

        tape._record(out, (x, gamma, beta), backward)
    return out


def global_avg_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """(N, C, H, W) -> (N, C) mean over the spatial axes."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = _out(x.data.mean(axis=(2, 3)))
    if tape is not None:

        def backward(g):
            return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

        tape._record(out, (x,), backward)
    return out


def avg_pool2d(x: Tensor, kernel, stride=None, tape: Tape | None = None) -> Tensor:
    """Average pooling with no implicit padding."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    if x.ndim != 4:
        raise ShapeMismatchError(f"avg_pool2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatchError(f"avg_pool2d: kernel ({kh},{kw}) does not fit input ({h},{w})")
    s0, s1, s2, s3 = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )
    out = _out(windows.mean(axis=(4, 5)))
    if tape is not None:

        def backward(g):
            dx = np.zeros((n, c, h, w))
            gshare = g / (kh * kw)
            for ki in range(kh):
                for kj in range(kw):
                    dx[:, :, ki : ki + oh * sh : sh, kj : kj + ow * sw : sw] += gshare
            return (dx,)

        tape._record(out, (x,), backward)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, tape: Tape | None = None) -> Tensor:
    """y = x @ weight.T + bias with x (N, in), weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeMismatchError(
            f"linear: expected 2-d input and weight, got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(
            f"linear: input features {x.shape[1]} != weight features {weight.shape[1]}"
        )
    if bias is not None:
        _require_shape("linear bias", bias.shape, (weight.shape[0],))
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = _out(y)
    if tape is not None:

        def backward(g):
            dx = g @ weight.data
            dw = g.T @ x.data
            if bias is not None:
                return dx, dw, g.sum(axis=0)
            return dx, dw

        inputs = (x, weight) if bias is None else (x, weight, bias)
        tape._record(out, inputs, backward)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _require_shape("add", b.shape, a.shape)
    out = _out(a.data + b.data)
    if tape is not None:

        def backward(g):
            return g, g

        tape._record(out, (a, b), backward)
    return out


def mul_scalar(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    c = float(c)
    out = _out(a.data * c)
    if tape is not None:

        def backward(g):
            return (g * c,)

        tape._record(out, (a,), backward)
    return out


def elementwise_mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _require_shape("elementwise_mul", b.shape, a.shape)
    out = _out(a.data * b.data)
    if tape is not None:

        def backward(g):
            return g * b.data, g * a.data

        tape._record(out, (a, b), backward)
    return out


def channel_scale(x: Tensor, gate: Tensor, tape: Tape | None = None) -> Tensor:
    """Scale each (N, C) channel plane of x (N, C, H, W) by gate (N, C)."""
    if x.ndim != 4 or gate.ndim != 2 or gate.shape != x.shape[:2]:
        raise ShapeMismatchError(
            f"channel_scale: expected x (N,C,H,W) and gate (N,C), got {x.shape} and {gate.shape}"
        )
    out = _out(x.data * gate.data[:, :, None, None])
    if tape is not None:

        def backward(g):
            dx = g * gate.data[:, :, None, None]
            dgate = (g * x.data).sum(axis=(2, 3))
            return dx, dgate

        tape._record(out, (x, gate), backward)
    return out


def tensor_sum(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = _out(x.data.sum())
    if tape is not None:
        shape = x.shape

        def backward(g):
            return (np.full(shape, float(g)),)

        tape._record(out, (x,), backward)
    return out


def select(x: Tensor, index, tape: Tape | None = None) -> Tensor:
    """Pick one element of x as a scalar tensor."""
    index = tuple(int(i) for i in index) if isinstance(index, (tuple, list)) else (int(index),)
    if len(index) != x.ndim:
        raise ShapeMismatchError(f"select: index {index} does not address shape {x.shape}")
    out = _out(np.asarray(x.data[index]))
    if tape is not None:
        shape = x.shape

        def backward(g):
            dx = np.zeros(shape)
            dx[index] = float(g)
            return (dx,)

        tape._record(out, (x,), backward)
    return out


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels, tape: Tape | None = None) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    logits (N, C), labels (N,) with 0 <= label < C.
    """
    if logits.ndim != 2:
        raise ShapeMismatchError(f"softmax_cross_entropy: expected 2-d logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeMismatchError(
            f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows"
        )
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    out = _out(np.asarray(-logp[np.arange(n), labels].mean()))
    if tape is not None:

        def backward(g):
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            return (d * (float(g) / n),)

        tape._record(out, (logits,), backward)
    return out


def standardize_columns(
    x: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    tape: Tape | None = None,
) -> Tensor:
    """Per-column batch standardization of an (N, D) matrix, no affine terms.

    Each feature column is shifted to mean zero and scaled to unit variance.
    In training mode the batch statistics normalize and the running buffers
    are updated in place; in eval mode the running buffers normalize.  There
    is no learned scale or shift, so no parameter can undo the constraint
    that the batch stays spread out along every dimension.
    """
    if x.ndim != 2:
        raise ShapeMismatchError(f"standardize_columns: expected 2-d input, got {x.shape}")
    n, d = x.shape
    _require_shape("standardize_columns running_mean", running_mean.shape, (d,))
    _require_shape("standardize_columns running_var", running_var.shape, (d,))

    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :]) * inv[None, :]
    out = _out(xhat)

    if tape is not None:
        if training:

            def backward(g):
                gsum = g.sum(axis=0)
                gdot = (g * xhat).sum(axis=0)
                return ((inv / n)[None, :] * (n * g - gsum[None, :] - xhat * gdot[None, :]),)

        else:

            def backward(g):
                return (g * inv[None, :],)

        tape._record(out, (x,), backward)
    return out


def l2_normalize_rows(x: Tensor, eps: float = 1e-12, tape: Tape | None = None) -> Tensor:
    """Scale each row of an (N, D) matrix to (almost) unit Euclidean length.

    Rows are divided by sqrt(||row||^2 + eps), so the map is smooth
    everywhere and an all-zero row stays (near) zero instead of dividing by
    zero.  The output is scale-invariant per row away from zero, so the
    gradient has no radial component: backward projects the incoming
    gradient onto the tangent plane and divides by the stabilized norm.
    """
    if x.ndim != 2:
        raise ShapeMismatchError(f"l2_normalize_rows: expected 2-d input, got {x.shape}")
    s = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    y = x.data / s
    out = _out(y)
    if tape is not None:

        def backward(g):
            radial = (g * y).sum(axis=1, keepdims=True)
            return ((g - y * radial) / s,)

        tape._record(out, (x,), backward)
    return out


def squared_l2_distance(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Mean over rows of the squared Euclidean distance between a and b (N, D)."""
    if a.ndim != 2 or b.shape != a.shape:
        raise ShapeMismatchError(
            f"squared_l2_distance: expected matching 2-d inputs, got {a.shape} and {b.shape}"
        )
    n = a.shape[0]
    diff = a.data - b.data
    out = _out(np.asarray((diff * diff).sum(axis=1).mean()))
    if tape is not None:

        def backward(g):
            d = diff * (2.0 * float(g) / n)
            return d, -d

        tape._record(out, (a, b), backward)
    return out


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, learning_rate: float, momentum: float):
    """One SGD-with-momentum update: v <- momentum*v + g, p <- p - lr*v.

    Returns (new_param, new_velocity); inputs are not modified.
    """
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ShapeMismatchError(
            f"sgd_step: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("training diverged: non-finite gradient")
    v = momentum * velocity + grad
    return param - learning_rate * v, v


class SgdOptimizer:
    """Momentum SGD over a named parameter dict, velocities kept per name."""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self._velocity = {}

    def step(self, params: dict, grads: dict) -> None:
        """Update each Tensor in ``params`` using ``grads`` keyed by name."""
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            v = self._velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            p.data, self._velocity[name] = sgd_step(
                p.data, g, v, self.learning_rate, self.momentum
            )
