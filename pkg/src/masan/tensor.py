"""Minimal reverse-mode differentiable array engine.

Values are dense float32 numpy arrays wrapped in :class:`Tensor`.  Operations
executed while a :class:`Tape` is active (and that touch at least one tensor
with ``requires_grad``) are appended to the tape; :func:`backward` then walks
the tape in exact reverse order.

Several kernels take an optional leading "group" axis ``P`` so that 64
independent per-patch sub-networks can be evaluated as one batched call:
``conv3d`` and ``group_norm`` accept ``x[P, N, C, ...]`` with per-group
weights.  The plain ``[N, C, ...]`` form is the ``P = 1`` case.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's precondition."""


class Tensor:
    """Dense float32 array with an optional gradient-tracking flag."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_dt(), order="C")
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; shapes must still match exactly
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter(Tensor):
    """A named learnable tensor; ``grad`` always matches ``shape`` after backward."""

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> Tensor:
        return self

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


_state = threading.local()


def _dt():
    return getattr(_state, "dtype", DTYPE)


class precision:
    """Evaluate with a different float type inside the block.

    Only the gradient oracle uses this (float64 reference evaluations);
    models are stored and trained in float32.
    """

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type

    def __enter__(self):
        self.prev = _dt()
        _state.dtype = self.dtype

    def __exit__(self, *exc):
        _state.dtype = self.prev
        return False


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; tapes are thread-local so independent runs in
    different threads never share state.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


class no_tape:
    """Suspend recording (e.g. for evaluation inside a training loop)."""

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(None)

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data.astype(_dt(), copy=False)
    out.grad = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), backward_fn, op))
    return out


def backward(loss: Tensor, tape: Tape, params: Iterable[Parameter] = ()) -> dict[str, np.ndarray]:
    """Reverse-mode accumulation of d(loss)/d(leaf) over ``tape``.

    Every leaf with ``requires_grad`` reached from ``loss`` gets ``.grad``
    assigned.  Parameters passed in ``params`` that the loss does not touch
    receive an all-zero gradient.  Returns ``{name: grad}`` for parameters.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.out) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t

    for key, t in leaves.items():
        g = grads.get(key)
        if g is not None:
            t.grad = np.ascontiguousarray(g, dtype=_dt()).reshape(t.shape)
    out = {}
    for p in params:
        if id(p) not in leaves:
            p.grad = np.zeros_like(p.data)
        out[p.name] = p.grad
    for t in leaves.values():
        if isinstance(t, Parameter):
            out[t.name] = t.grad
    return out


# ---------------------------------------------------------------------------
# element-wise


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = _dt()(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, _dt()(0)), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(_dt())
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(a, floor)``; gradient is zero where clamped."""
    x = a.data
    if floor > 0:
        clamped = x < floor
        xc = np.where(clamped, _dt()(floor), x)
    else:
        clamped = None
        xc = x

    def bw(g):
        gx = g / xc
        if clamped is not None:
            gx = np.where(clamped, _dt()(0), gx)
        return (gx,)

    return _record("log", np.log(xc), (a,), bw)


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"relu": relu, "sigmoid": sigmoid, "abs": abs_}


def elementwise(op_code: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch by op code: add, sub, mul, relu, sigmoid, abs, scale."""
    if op_code in _BINARY:
        if not isinstance(b, Tensor):
            raise ShapeError(f"{op_code} needs a second tensor operand")
        return _BINARY[op_code](a, b)
    if op_code in _UNARY:
        return _UNARY[op_code](a)
    if op_code == "scale":
        if b is None or isinstance(b, Tensor):
            raise ValueError("scale needs a scalar constant")
        return scale(a, float(b))
    raise ValueError(f"unknown op code {op_code!r}")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes (same rank required)."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    return _record("expand", np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,),
                   lambda g: (g.sum(axis=axes, keepdims=True),))


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    shape = a.shape

    def bw(g):
        gx = np.zeros(shape, dtype=_dt())
        gx[index] += g
        return (gx,)

    return _record("take", np.ascontiguousarray(a.data[index]), (a,), bw)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    axis = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
                s != t for i, (s, t) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape} on axis {axis}")
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record("concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", np.matmul(ad, bd), (a, b),
                   lambda g: (np.matmul(g, bd.swapaxes(-1, -2)), np.matmul(ad.swapaxes(-1, -2), g)))


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axes {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op_code: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes`` (all axes when ``None``)."""
    axes = _norm_axes(axes, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    if op_code == "sum":
        y = x.data.sum(axis=axes, keepdims=keepdims)
        bw = lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),)
    elif op_code == "mean":
        n = int(np.prod([shape[i] for i in axes])) if axes else 1
        y = x.data.mean(axis=axes, keepdims=keepdims)
        bw = lambda g: (np.broadcast_to(g.reshape(kept) / _dt()(n), shape).copy(),)
    elif op_code == "max":
        m = x.data.max(axis=axes, keepdims=True)
        mask = (x.data == m).astype(_dt())
        mask /= mask.sum(axis=axes, keepdims=True)  # ties share the gradient
        y = m if keepdims else m.reshape([s for i, s in enumerate(shape) if i not in axes])
        bw = lambda g: (mask * g.reshape(kept),)
    else:
        raise ValueError(f"unknown reduction {op_code!r}")
    return _record(f"reduce_{op_code}", np.asarray(y, dtype=_dt()), (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axes(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", y, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------------------
# volumetric kernels


def _triple(v) -> tuple[int, int, int]:
    return (v, v, v) if isinstance(v, int) else tuple(v)


def _pad_spatial(x: np.ndarray, lo: tuple[int, int, int], hi: tuple[int, int, int]) -> np.ndarray:
    """Zero-pad (positive) or crop (negative) the last three axes."""
    if all(v == 0 for v in lo + hi):
        return x
    crop = tuple(slice(max(-l, 0), x.shape[-3 + i] - max(-h, 0)) for i, (l, h) in enumerate(zip(lo, hi)))
    x = x[(Ellipsis,) + crop]
    pad = [(0, 0)] * (x.ndim - 3) + [(max(l, 0), max(h, 0)) for l, h in zip(lo, hi)]
    return np.pad(x, pad)


_CHUNK_ELEMS = 1 << 18


def _correlate(xp: np.ndarray, wmat: np.ndarray, kernel: tuple[int, int, int], stride: int,
               out_ext: tuple[int, int, int]) -> np.ndarray:
    """Valid cross-correlation of a padded channel-major input.

    ``xp[P, C, N, Dp, Hp, Wp]`` with ``wmat[P, F, C*kd*kh*kw]`` gives
    ``[P, F, N*Do*Ho*Wo]``.  The im2col buffer is built a few groups at a
    time so it stays cache resident.
    """
    P, C, N = xp.shape[:3]
    kd, kh, kw = kernel
    Do, Ho, Wo = out_ext
    s = stride
    K = C * kd * kh * kw
    M = N * Do * Ho * Wo
    F = wmat.shape[1]
    step = max(1, _CHUNK_ELEMS // (K * M))
    buf = np.empty((min(step, P), C, kd, kh, kw, N, Do, Ho, Wo), dtype=_dt())
    y = np.empty((P, F, M), dtype=_dt())
    for i in range(0, P, step):
        j = min(P, i + step)
        cols = buf[:j - i]
        src = xp[i:j]
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    cols[:, :, a, b, c] = src[:, :, :, a:a + s * (Do - 1) + 1:s,
                                              b:b + s * (Ho - 1) + 1:s, c:c + s * (Wo - 1) + 1:s]
        np.matmul(wmat[i:j], cols.reshape(j - i, K, M), out=y[i:j])
    return y


def _weight_grad(xp: np.ndarray, gy: np.ndarray, kernel, stride, out_ext) -> np.ndarray:
    """``sum_m gy[p, f, m] * cols[p, k, m]`` with cols rebuilt chunk-wise."""
    P, C, N = xp.shape[:3]
    kd, kh, kw = kernel
    Do, Ho, Wo = out_ext
    s = stride
    K = C * kd * kh * kw
    M = N * Do * Ho * Wo
    F = gy.shape[1]
    step = max(1, _CHUNK_ELEMS // (K * M))
    buf = np.empty((min(step, P), C, kd, kh, kw, N, Do, Ho, Wo), dtype=_dt())
    gw = np.empty((P, F, K), dtype=_dt())
    for i in range(0, P, step):
        j = min(P, i + step)
        cols = buf[:j - i]
        src = xp[i:j]
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    cols[:, :, a, b, c] = src[:, :, :, a:a + s * (Do - 1) + 1:s,
                                              b:b + s * (Ho - 1) + 1:s, c:c + s * (Wo - 1) + 1:s]
        np.matmul(gy[i:j], cols.reshape(j - i, K, M).transpose(0, 2, 1), out=gw[i:j])
    return gw


def _conv_input_grad(gt, wd, ext, out_ext, kernel, s, p):
    """Stride-dilated output gradient correlated with the flipped, channel-swapped kernel."""
    P, F, N = gt.shape[:3]
    C = wd.shape[2]
    if s > 1:
        dil = np.zeros((P, F, N) + tuple(s * (o - 1) + 1 for o in out_ext), dtype=_dt())
        dil[:, :, :, ::s, ::s, ::s] = gt
    else:
        dil = gt
    lo = tuple(k - 1 - p for k in kernel)
    hi = tuple(e + k - 1 - dl - (k - 1 - p) for e, k, dl in zip(ext, kernel, dil.shape[3:]))
    gp = _pad_spatial(dil, lo, hi)
    wf = np.ascontiguousarray(wd[:, :, :, ::-1, ::-1, ::-1].transpose(0, 2, 1, 3, 4, 5)).reshape(P, C, -1)
    gx = _correlate(gp, wf, kernel, 1, ext)
    gx = np.ascontiguousarray(gx.reshape((P, C, N) + ext).transpose(0, 2, 1, 3, 4, 5))
    return gx


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """3-D cross-correlation with zero padding.

    ``x[N,C,D,H,W]`` with ``w[F,C,kd,kh,kw]`` and ``bias[F]``, or the grouped
    form ``x[P,N,C,D,H,W]`` with ``w[P,F,C,kd,kh,kw]`` and ``bias[P,F]`` where
    group ``p`` of the input only ever meets group ``p`` of the weights.
    """
    grouped = x.ndim == 6
    if x.ndim not in (5, 6) or w.ndim != x.ndim:
        raise ShapeError(f"conv3d: expected 5-D or 6-D input/weight, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv3d: stride must be >= 1 and padding >= 0")
    xd = x.data if grouped else x.data[None]
    wd = w.data if grouped else w.data[None]
    P, N, C, D, H, W = xd.shape
    _, F, Cw, kd, kh, kw = wd.shape
    if wd.shape[0] != P or Cw != C:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with weight {w.shape}")
    if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv3d: kernel extents must be odd, got {(kd, kh, kw)}")
    if D + 2 * padding < kd or H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"conv3d: kernel {(kd, kh, kw)} larger than padded input {(D, H, W)}+2*{padding}")
    if bias is not None:
        bd = bias.data if grouped else bias.data[None]
        if bd.shape != (P, F):
            raise ShapeError(f"conv3d: bias shape {bias.shape} does not match {F} filters")
    s, p = stride, padding
    kernel = (kd, kh, kw)
    ext = (D, H, W)
    out_ext = tuple((e + 2 * p - k) // s + 1 for e, k in zip(ext, kernel))

    # channel-major working layout [P, C, N, ...]
    xp = _pad_spatial(xd.transpose(0, 2, 1, 3, 4, 5), (p, p, p), (p, p, p))
    wmat = wd.reshape(P, F, -1)
    y = _correlate(xp, wmat, kernel, s, out_ext)
    if bias is not None:
        y += bd[:, :, None]
    out = np.ascontiguousarray(y.reshape((P, F, N) + out_ext).transpose(0, 2, 1, 3, 4, 5))
    if not grouped:
        out = out[0]

    def bw(g):
        g6 = g if grouped else g[None]
        gt = g6.transpose(0, 2, 1, 3, 4, 5)  # [P, F, N, Do, Ho, Wo]
        gy = np.ascontiguousarray(gt).reshape(P, F, -1)
        gw = _weight_grad(xp, gy, kernel, s, out_ext).reshape(wd.shape)
        gx = _conv_input_grad(gt, wd, ext, out_ext, kernel, s, p) if x.requires_grad else None
        gb = gy.sum(axis=2) if bias is not None else None
        if not grouped:
            gx = gx[0] if gx is not None else None
            gw = gw[0]
            gb = gb[0] if gb is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record("conv3d", out, inputs, bw)


def _interp_matrix(n: int) -> np.ndarray:
    """Corner-aligned linear interpolation from n to 2n samples."""
    m = np.zeros((2 * n, n), dtype=np.float64)
    if n == 1:
        m[:, 0] = 1.0
        return m.astype(_dt())
    for i in range(2 * n):
        pos = i * (n - 1) / (2 * n - 1)
        i0 = min(int(np.floor(pos)), n - 2)
        frac = pos - i0
        m[i, i0] += 1.0 - frac
        m[i, i0 + 1] += frac
    return m.astype(_dt())


def _along(x: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(m, x, axes=(1, axis)), 0, axis)


def upsample_trilinear2x(x: Tensor) -> Tensor:
    """Double the last three extents by corner-aligned trilinear interpolation."""
    if x.ndim < 3:
        raise ShapeError(f"upsample needs at least 3 spatial axes, got {x.shape}")
    nd = x.ndim
    mats = [_interp_matrix(n) for n in x.shape[-3:]]
    y = x.data
    for k, m in enumerate(mats):
        y = _along(y, m, nd - 3 + k)

    def bw(g):
        for k, m in enumerate(mats):
            g = _along(g, m.T, nd - 3 + k)
        return (g,)

    return _record("upsample", np.ascontiguousarray(y), (x,), bw)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               grouped: bool = False) -> Tensor:
    """Group normalization.

    ``x[N,C,...]`` with ``gamma/beta[C]``; with ``grouped=True`` the input is
    ``x[P,N,C,...]`` and ``gamma/beta`` are ``[P,C]``.
    """
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    xd = x.data if grouped else x.data[None]
    gd = gamma.data if grouped else gamma.data[None]
    bd = beta.data if grouped else beta.data[None]
    P, N, C = xd.shape[:3]
    if C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible by {groups} groups")
    if gd.shape != (P, C) or bd.shape != (P, C):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} do not match {C} channels")
    spatial = xd.shape[3:]
    xr = xd.reshape(P, N, groups, -1)
    mean = xr.mean(axis=-1, keepdims=True)
    xc = xr - mean
    # constant groups standardize to exactly zero
    const = xr.max(axis=-1, keepdims=True) == xr.min(axis=-1, keepdims=True)
    xc = np.where(const, _dt()(0), xc)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _dt()(eps))
    xhat = (xc * inv).reshape(xd.shape)
    aff = (P, 1, C) + (1,) * len(spatial)
    y = xhat * gd.reshape(aff) + bd.reshape(aff)
    if not grouped:
        y = y[0]
    red = (1,) + tuple(range(3, xd.ndim))

    def bw(g):
        g6 = g if grouped else g[None]
        ggamma = (g6 * xhat).sum(axis=red)
        gbeta = g6.sum(axis=red)
        gxhat = (g6 * gd.reshape(aff)).reshape(xr.shape)
        xh = xhat.reshape(xr.shape)
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xh * (gxhat * xh).mean(axis=-1, keepdims=True))
        gx = gx.reshape(xd.shape)
        if not grouped:
            return gx[0], ggamma[0], gbeta[0]
        return gx, ggamma, gbeta

    return _record("group_norm", y, (x, gamma, beta), bw)
