"""Dense float tensors with reverse-mode automatic differentiation.

Define-by-run: an op executed while a `Tape` is active records a backward
closure on that tape whenever any input requires a gradient.  `backward`
walks the tape in reverse execution order (which is already topological)
and accumulates into each participating tensor's ``.grad``.  Tapes are
single-use: `backward` consumes and clears the tape.  Gradients persist on
leaves across tapes until `zero_grad`, so backward on a sum of losses and
two separate backwards agree.

Everything is numpy under the hood; float32 is the working dtype, but ops
preserve float64 inputs so finite-difference checks can run at full
precision.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
NORM_EPS = 1e-12  # added to the norm in l2_normalize
LN_EPS = 1e-5  # variance guard in layer_norm

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    """Operands have incompatible shapes; message names both."""


class DomainError(ValueError):
    """Op applied to exactly invalid inputs (log of <=0, division by 0)."""


class Tensor:
    """N-dimensional float array, optionally tracked for gradients.

    ``grad`` is lazily allocated by `backward` and always matches ``data``
    in shape.  Tensors are treated as immutable after creation; all ops
    allocate fresh outputs.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_TAPE_STACK: list[Optional["Tape"]] = []


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    __slots__ = ("_nodes", "_consumed")

    def __init__(self):
        # each node: (output tensor, backward closure, op name)
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None], str]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def op_names(self) -> list[str]:
        return [name for _, _, name in self._nodes]

    def first_nonfinite(self) -> Optional[str]:
        """Name of the earliest recorded op with a non-finite output, if any."""
        for out, _, name in self._nodes:
            if not np.all(np.isfinite(out.data)):
                return name
        return None

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every tensor the loss depends on.

        The tape is cleared afterwards (single-use policy).
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward")
        if not self._nodes:
            raise RuntimeError("backward on an empty tape")
        if loss.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for out, bwd, _ in reversed(self._nodes):
            if out.grad is not None:
                bwd(out.grad)
        self._nodes.clear()
        self._consumed = True


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Context that suspends recording (used for teacher/eval forwards)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()


def backward(loss: Tensor) -> None:
    """Run backward on the currently active tape."""
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward requires an active tape")
    tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # never mutate in place: grads may alias freshly propagated arrays
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes that were broadcast to reach g.shape from shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _record(out: Tensor, bwd: Callable[[np.ndarray], None], name: str) -> None:
    tape = active_tape()
    if tape is not None:
        tape._nodes.append((out, bwd, name))


def _wants_grad(*ts: Tensor) -> bool:
    return active_tape() is not None and any(t.requires_grad for t in ts)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    # N-d activations against a 2-d weight collapse to one gemm; the
    # generic batched path handles broadcast leading dims
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        lead = a.shape[:-1]
        data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*lead, b.shape[-1])
    else:
        data = np.matmul(a.data, b.data)
    out = Tensor(data, requires_grad=_wants_grad(a, b))
    if out.requires_grad:

        def bwd(g):
            if flat:
                g2 = g.reshape(-1, g.shape[-1])
                if a.requires_grad:
                    _accum(a, (g2 @ b.data.T).reshape(a.shape))
                if b.requires_grad:
                    _accum(b, a.data.reshape(-1, a.shape[-1]).T @ g2)
            else:
                if a.requires_grad:
                    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                    _accum(a, _unbroadcast(ga, a.shape))
                if b.requires_grad:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                    _accum(b, _unbroadcast(gb, b.shape))

        _record(out, bwd, "matmul")
    return out


def _binary(a, b, fwd, name, da, db) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None
    out = Tensor(data, requires_grad=_wants_grad(a, b))
    if out.requires_grad:

        def bwd(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(da(g, a.data, b.data), a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(db(g, a.data, b.data), b.shape))

        _record(out, bwd, name)
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, "add", lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, "sub", lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, "mul", lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    b_t = _as_tensor(b)
    if np.any(b_t.data == 0):
        raise DomainError("div: divisor contains exact zeros")
    return _binary(
        a,
        b_t,
        np.divide,
        "div",
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def scalar_mul(x, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    out = Tensor(x.data * np.asarray(s, dtype=x.data.dtype), requires_grad=_wants_grad(x))
    if out.requires_grad:

        def bwd(g):
            _accum(x, g * np.asarray(s, dtype=g.dtype))

        _record(out, bwd, "scalar_mul")
    return out


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.exp(x.data), requires_grad=_wants_grad(x))
    if out.requires_grad:
        y = out.data

        def bwd(g):
            _accum(x, g * y)

        _record(out, bwd, "exp")
    return out


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: input contains values <= 0")
    out = Tensor(np.log(x.data), requires_grad=_wants_grad(x))
    if out.requires_grad:

        def bwd(g):
            _accum(x, g / x.data)

        _record(out, bwd, "log")
    return out


def gelu(x) -> Tensor:
    """Tanh-form gelu: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = _as_tensor(x)
    d = x.data
    x2 = d * d
    u = x2 * _GELU_A
    u += 1.0
    u *= d
    u *= _GELU_C
    t = np.tanh(u, out=u)
    one_t = t + 1.0
    out_data = one_t * d
    out_data *= 0.5
    out = Tensor(out_data, requires_grad=_wants_grad(x))
    if out.requires_grad:
        # product rule; tanh' = 1 - t^2 reuses the forward tanh.
        # local = 0.5 (1+t) + 0.5 d (1-t^2) c (1 + 3 a x^2), built in place
        s = t * t
        np.subtract(1.0, s, out=s)
        s *= d
        s *= 0.5 * _GELU_C
        x2 *= 3.0 * _GELU_A
        x2 += 1.0
        s *= x2
        one_t *= 0.5
        s += one_t
        local = s

        def bwd(g):
            _accum(x, g * local)

        _record(out, bwd, "gelu")
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=_wants_grad(x))
    if out.requires_grad:

        def bwd(g):
            inner = np.sum(g * y, axis=axis, keepdims=True)
            _accum(x, y * (g - inner))

        _record(out, bwd, "softmax")
    return out


def layer_norm(x) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance (no affine)."""
    x = _as_tensor(x)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(LN_EPS, dtype=x.data.dtype))
    y = xc * inv
    out = Tensor(y, requires_grad=_wants_grad(x))
    if out.requires_grad:

        def bwd(g):
            gm = np.mean(g, axis=-1, keepdims=True)
            gy = np.mean(g * y, axis=-1, keepdims=True)
            _accum(x, inv * (g - gm - y * gy))

        _record(out, bwd, "layer_norm")
    return out


def _reduce(x, axis, keepdims, name, np_fn, scale_fn) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np_fn(x.data, axis=axis, keepdims=keepdims), requires_grad=_wants_grad(x))
    if out.requires_grad:
        shape = x.shape
        scale = scale_fn(shape, axis)

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, shape) * scale)

        _record(out, bwd, name)
    return out


def sum_(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return _reduce(x, axis, keepdims, "sum", np.sum, lambda shape, ax: 1.0)


def mean(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    def scale(shape, ax):
        n = np.prod(shape) if ax is None else shape[ax]
        return 1.0 / float(n)

    return _reduce(x, axis, keepdims, "mean", np.mean, scale)


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.transpose(x.data, axes), requires_grad=_wants_grad(x))
    if out.requires_grad:
        inv = None if axes is None else np.argsort(axes)

        def bwd(g):
            _accum(x, np.transpose(g, inv))

        _record(out, bwd, "transpose")
    return out


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.reshape(x.data, shape), requires_grad=_wants_grad(x))
    if out.requires_grad:
        orig = x.shape

        def bwd(g):
            _accum(x, np.reshape(g, orig))

        _record(out, bwd, "reshape")
    return out


def slice_(x, key) -> Tensor:
    """Basic (non-fancy) slicing; gradient scatters back into a zero buffer."""
    x = _as_tensor(x)
    out = Tensor(x.data[key], requires_grad=_wants_grad(x))
    if out.requires_grad:

        def bwd(g):
            full = np.zeros_like(x.data)
            full[key] = g
            _accum(x, full)

        _record(out, bwd, "slice")
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis), requires_grad=_wants_grad(*ts))
    if out.requires_grad:
        sizes = [t.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)

        def bwd(g):
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accum(t, g[tuple(idx)])

        _record(out, bwd, "concat")
    return out


def l2_normalize(x, axis: int = -1) -> Tensor:
    """x / (||x|| + 1e-12) along axis; the epsilon guards the zero vector."""
    x = _as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    d = n + np.asarray(NORM_EPS, dtype=x.data.dtype)
    y = x.data / d
    out = Tensor(y, requires_grad=_wants_grad(x))
    if out.requires_grad:

        def bwd(g):
            inner = np.sum(g * x.data, axis=axis, keepdims=True)
            _accum(x, g / d - x.data * (inner / (d * d * d)))

        _record(out, bwd, "l2_normalize")
    return out


OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "mean": mean,
    "sum": sum_,
    "transpose": transpose,
    "reshape": reshape,
    "slice": slice_,
    "concat": concat,
    "l2_normalize": l2_normalize,
    "scalar_mul": scalar_mul,
}


def forward_op(name: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch an op by identifier; |inputs| is op-dependent."""
    if name not in OPS:
        raise KeyError(f"unknown op {name!r}; valid: {sorted(OPS)}")
    fn = OPS[name]
    if name in ("concat",):
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# fused kernels
#
# Numerically identical compositions of the primitives above, collapsed
# into single tape nodes with hand-derived backwards to cut interpreter
# and memory-traffic overhead on the training hot path.  grad_check over
# model losses exercises these paths end to end.
# ---------------------------------------------------------------------------


def linear(x, w, b) -> Tensor:
    """x @ w + b for n-d activations against a 2-d weight."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    lead = x.shape[:-1]
    n = w.shape[1]
    x2 = x.data.reshape(-1, x.shape[-1])
    data = x2 @ w.data
    data += b.data
    out = Tensor(data.reshape(*lead, n), requires_grad=_wants_grad(x, w, b))
    if out.requires_grad:

        def bwd(g):
            g2 = np.ascontiguousarray(g).reshape(-1, n)
            if x.requires_grad:
                _accum(x, (g2 @ w.data.T).reshape(x.shape))
            if w.requires_grad:
                _accum(w, x2.T @ g2)
            if b.requires_grad:
                _accum(b, g2.sum(axis=0))

        _record(out, bwd, "linear")
    return out


def layer_norm_affine(x, scale, shift) -> Tensor:
    """scale * layer_norm(x) + shift over the last axis, as one node."""
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    var += LN_EPS
    inv = 1.0 / np.sqrt(var, out=var)
    y = xc
    y *= inv
    data = y * scale.data
    data += shift.data
    out = Tensor(data, requires_grad=_wants_grad(x, scale, shift))
    if out.requires_grad:

        def bwd(g):
            n = g.shape[-1]
            if scale.requires_grad or shift.requires_grad:
                g2 = np.ascontiguousarray(g).reshape(-1, n)
            if scale.requires_grad:
                _accum(scale, np.einsum("ij,ij->j", g2, y.reshape(-1, n), optimize=False))
            if shift.requires_grad:
                _accum(shift, g2.sum(axis=0))
            if x.requires_grad:
                gy = g * scale.data
                gm = np.mean(gy, axis=-1, keepdims=True)
                gyy = np.mean(gy * y, axis=-1, keepdims=True)
                gy -= gm
                gy -= y * gyy
                gy *= inv
                _accum(x, gy)

        _record(out, bwd, "layer_norm_affine")
    return out


def attention_core(q, k, v, scale: float, mask_bias=None) -> Tensor:
    """softmax(q @ k^T * scale + bias) @ v over (..., T, D) head tensors."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    kt = np.swapaxes(k.data, -1, -2)
    s = np.matmul(q.data, kt)
    s *= scale
    if mask_bias is not None:
        s += mask_bias.data if isinstance(mask_bias, Tensor) else mask_bias
    s -= np.max(s, axis=-1, keepdims=True)
    np.exp(s, out=s)
    denom = np.sum(s, axis=-1, keepdims=True)
    s /= denom
    att = s
    out = Tensor(np.matmul(att, v.data), requires_grad=_wants_grad(q, k, v))
    if out.requires_grad:

        def bwd(g):
            if v.requires_grad:
                gv = np.matmul(np.swapaxes(att, -1, -2), g)
                _accum(v, _unbroadcast(gv, v.shape))
            if q.requires_grad or k.requires_grad:
                da = np.matmul(g, np.swapaxes(v.data, -1, -2))
                inner = np.sum(da * att, axis=-1, keepdims=True)
                da -= inner
                da *= att
                da *= scale
                if q.requires_grad:
                    _accum(q, _unbroadcast(np.matmul(da, k.data), q.shape))
                if k.requires_grad:
                    gk = np.matmul(np.swapaxes(da, -1, -2), q.data)
                    _accum(k, _unbroadcast(gk, k.shape))

        _record(out, bwd, "attention_core")
    return out


# ---------------------------------------------------------------------------
# composed helpers (not primitives, built from the ops above)
# ---------------------------------------------------------------------------


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) with the max folded out as a constant shift.

    The shift is gradient-free; d/dx log-sum-exp(x) = softmax(x) either way.
    """
    m = np.max(x.data, axis=axis, keepdims=True)
    z = sub(x, Tensor(m))
    s = sum_(exp(z), axis=axis, keepdims=keepdims)
    m_out = m if keepdims else np.squeeze(m, axis=axis)
    return add(log(s), Tensor(m_out))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return sub(x, logsumexp(x, axis=axis, keepdims=True))


def zero_grads(tensors) -> None:
    """Clear .grad on an iterable or dict of tensors."""
    it = tensors.values() if isinstance(tensors, dict) else tensors
    for t in it:
        t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 regardless of the input dtype: the quantity being
    checked is |analytic - fd| / max(1, |analytic|) per coordinate, and the
    1e-4 scale of interest is below float32 finite-difference noise.
    """
    if not (0.0 < h < 1e-1):
        raise ValueError(f"step size h must lie in (0, 1e-1), got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(xt)
        if loss.size != 1:
            raise ShapeError(f"grad_check expects a scalar function, got {loss.shape}")
        tape.backward(loss)
    analytic = np.zeros_like(base) if xt.grad is None else np.asarray(xt.grad, dtype=np.float64)

    probe = Tensor(base.copy())
    flat = probe.data.reshape(-1)
    fd = np.zeros(base.size, dtype=np.float64)
    for i in range(base.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(probe).data.reshape(()))
        flat[i] = orig - h
        fm = float(f(probe).data.reshape(()))
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic.reshape(-1) - fd) / np.maximum(1.0, np.abs(analytic.reshape(-1)))
    return float(np.max(err)) if err.size else 0.0
