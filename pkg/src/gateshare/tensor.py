"""Dense float64 tensors with taped reverse-mode differentiation.

Every differentiable op records itself on the active ``Tape``. Replaying the
tape in reverse order propagates adjoints from a scalar loss back to every
tracked tensor. The tape is thread-local: one graph per thread, tensors are
free to move between threads once their tape is closed.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np
from scipy.special import ndtr

from .errors import NumericError, ShapeError

_node_ids = itertools.count()
_tls = threading.local()

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array, optionally tracked in the computation graph.

    ``grad`` is allocated lazily on the first backward pass and accumulates
    across passes until ``zero_grad`` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; `other` may be a Tensor or a python scalar.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0)) if isinstance(other, Tensor) else shift(self, -other)


class _Op:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops; reverse replay visits each exactly once."""

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_tls, "tapes", None)
        if stack is None:
            stack = _tls.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tapes.pop()
        return False


def active_tape() -> Tape | None:
    stack = getattr(_tls, "tapes", None)
    return stack[-1] if stack else None


def _track(name, inputs, out_data, backward_fn) -> Tensor:
    """Wrap op output; record on the tape when tracking is live."""
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        tape.ops.append(_Op(name, inputs, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor.

    Adjoints are propagated per call; only ``.grad`` buffers persist, so
    backward of a sum of losses equals the sum of backwards.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = active_tape()
    if tape is None:
        raise ShapeError("backward requires an active Tape")

    adjoints: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
    tensors: dict[int, Tensor] = {loss.node_id: loss}
    for op in reversed(tape.ops):
        out_adj = adjoints.get(op.output.node_id)
        if out_adj is None:
            continue
        for inp, g in zip(op.inputs, op.backward_fn(out_adj)):
            if g is None:
                continue
            nid = inp.node_id
            if nid in adjoints:
                adjoints[nid] = adjoints[nid] + g
            else:
                adjoints[nid] = g
                tensors[nid] = inp

    for nid, adj in adjoints.items():
        t = tensors[nid]
        if not t.requires_grad:
            continue
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += np.broadcast_to(adj, t.data.shape)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches the original shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and broadcast ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _track("add", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _track("mul", (a, b), out,
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _track("scale", (a,), a.data * k, lambda g: (g * k,))


def shift(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _track("shift", (a,), a.data + k, lambda g: (g,))


def scalar_affine(x: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """alpha*x + beta with learnable scalar alpha, beta."""
    if alpha.size != 1 or beta.size != 1:
        raise ShapeError(f"scalar_affine: alpha/beta must be scalars, got {alpha.shape}, {beta.shape}")
    a = float(alpha.data)
    out = a * x.data + float(beta.data)

    def bwd(g):
        return (g * a,
                np.sum(g * x.data).reshape(alpha.shape),
                np.sum(g).reshape(beta.shape))

    return _track("scalar_affine", (x, alpha, beta), out, bwd)


def channel_affine(x: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """Per-channel alpha[c]*x[:, c] + beta[c] on an [N, C, H, W] tensor."""
    if x.data.ndim != 4 or alpha.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"channel_affine: x {x.shape} needs [N,C,H,W] with alpha/beta [C], "
            f"got {alpha.shape}, {beta.shape}")
    a = alpha.data[None, :, None, None]
    out = a * x.data + beta.data[None, :, None, None]

    def bwd(g):
        return (g * a,
                np.sum(g * x.data, axis=(0, 2, 3)),
                np.sum(g, axis=(0, 2, 3)))

    return _track("channel_affine", (x, alpha, beta), out, bwd)


def gather_channels(x: Tensor, index: np.ndarray) -> Tensor:
    """out[:, c] = x[:, index[c]] on an [N, C, H, W] tensor."""
    idx = np.asarray(index, dtype=np.intp)
    if x.data.ndim != 4:
        raise ShapeError(f"gather_channels: expected [N,C,H,W], got {x.shape}")
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise ShapeError(f"gather_channels: index out of range for C={x.shape[1]}")
    out = x.data[:, idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    return _track("gather_channels", (x,), out, bwd)


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate [N, C_i, H, W] tensors along the channel axis."""
    if not parts or any(p.data.ndim != 4 for p in parts):
        raise ShapeError("concat_channels: expected a list of [N,C,H,W] tensors")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return _track("concat_channels", tuple(parts), out, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.data.shape
    return _track("reshape", (x,), x.data.reshape(shape),
                  lambda g: (g.reshape(old),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _track("mean", (x,), np.asarray(x.data.mean()),
                  lambda g: (np.full(x.data.shape, float(g) / n),))


def total(x: Tensor) -> Tensor:
    return _track("sum", (x,), np.asarray(x.data.sum()),
                  lambda g: (np.full(x.data.shape, float(g)),))


# ---------------------------------------------------------------------------
# gates and pointwise nonlinearities
# ---------------------------------------------------------------------------

class GateCounter:
    """Counts scalar gate evaluations; used to certify gate budgets."""

    def __init__(self):
        self.step_evals = 0
        self.smooth_evals = 0

    def __enter__(self) -> "GateCounter":
        stack = getattr(_tls, "counters", None)
        if stack is None:
            stack = _tls.counters = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.counters.pop()
        return False


def _count(step: int = 0, smooth: int = 0) -> None:
    for c in getattr(_tls, "counters", ()):
        c.step_evals += step
        c.smooth_evals += smooth


def drelu(x: Tensor) -> Tensor:
    """Step gate: 1 where x >= 0 else 0. Derivative is 0 everywhere, so the
    result is a constant w.r.t. x and is never recorded on the tape."""
    _count(step=x.size)
    return Tensor((x.data >= 0.0).astype(np.float64))


def gelu_gate(x: Tensor, gamma: float) -> Tensor:
    """Smooth gate ndtr(gamma*x); backward passes gamma*pdf(gamma*x)."""
    gamma = float(gamma)
    if gamma <= 0.0:
        raise ShapeError(f"gelu_gate: gamma must be positive, got {gamma}")
    _count(smooth=x.size)
    z = gamma * x.data
    out = ndtr(z)

    def bwd(g):
        return (g * gamma * _INV_SQRT_2PI * np.exp(-0.5 * z * z),)

    return _track("gelu_gate", (x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    """x * 1[x >= 0]; forward bits match the gated product exactly."""
    gate = (x.data >= 0.0).astype(np.float64)
    _count(step=x.size)
    return _track("relu", (x,), x.data * gate, lambda g: (g * gate,))


def gelu(x: Tensor) -> Tensor:
    """x * ndtr(x), the smooth activation used by teacher models."""
    _count(smooth=x.size)
    phi = ndtr(x.data)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _track("gelu", (x,), x.data * phi,
                  lambda g: (g * (phi + x.data * pdf),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _track("matmul", (a, b), out,
                  lambda g: (g @ b.data.T, a.data.T @ g))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/kernel, got {x.shape}, {w.shape}")
    n, c, h, ww = x.shape
    f, ck, kh, kw = w.shape
    if ck != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ck}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{ww} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)        # [N, C*kh*kw, OH*OW]
    wf = w.data.reshape(f, -1)
    out = np.einsum("fk,nkp->nfp", wf, cols).reshape(n, f, oh, ow)

    def bwd(g):
        gf = g.reshape(n, f, oh * ow)
        gw = np.einsum("nfp,nkp->fk", gf, cols).reshape(w.shape)
        gcols = np.einsum("fk,nfp->nkp", wf, gf).reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + ww] if pad else gxp
        return (gx, gw)

    return _track("conv2d", (x, w), out, bwd)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over a batch of integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} with labels {labels.shape}")
    n = logits.shape[0]
    logp = _log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def bwd(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (float(g) / n),)

    return _track("cross_entropy", (logits,), np.asarray(loss), bwd)


def kd_divergence(student: Tensor, teacher: np.ndarray, temperature: float) -> Tensor:
    """T^2-scaled mean KL(softmax(teacher/T) || softmax(student/T)).

    Teacher logits are constants; only the student receives gradient.
    """
    t = float(temperature)
    if t <= 0.0:
        raise ShapeError(f"kd_divergence: temperature must be positive, got {t}")
    teacher = np.asarray(teacher, dtype=np.float64)
    if teacher.shape != student.data.shape:
        raise ShapeError(f"kd_divergence: student {student.shape} vs teacher {teacher.shape}")
    n = student.shape[0]
    lp_t = _log_softmax(teacher / t)
    p_t = np.exp(lp_t)
    lp_s = _log_softmax(student.data / t)
    val = t * t * float((p_t * (lp_t - lp_s)).sum() / n)

    def bwd(g):
        q = np.exp(lp_s)
        return ((q - p_t) * (t * float(g) / n),)

    return _track("kd_divergence", (student,), np.asarray(val), bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f, point: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic gradient of scalar f and central
    differences, |analytic - numeric| / (|analytic| + 1e-8)."""
    point.zero_grad()
    with Tape():
        out = f(point)
        if out.data.shape != ():
            raise ShapeError("finite_diff_check: f must be scalar-valued")
        backward(out)
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()

    numeric = np.zeros_like(point.data)
    flat = point.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(point).data)
        flat[i] = orig - h
        lo = float(f(point).data)
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(f"finite_diff_check: non-finite f at coordinate {i}")
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * h)

    err = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    return float(err.max()) if err.size else 0.0
