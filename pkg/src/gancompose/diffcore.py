"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape`.  Outside a tape
everything runs forward only, which is what inference paths use.

    with Tape():
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * x).sum()
        (gx,) = grad(loss, [x])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    out: Tensor
    backward: Callable


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so the list is already
    topologically sorted.  A tape is meant to be used for one forward and
    backward pass and then dropped.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        # break out <-> node cycles so large buffers are freed by refcount
        for node in self.nodes:
            node.out.node = None
        self.nodes = []
        return False


def active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, backward)
        out.node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def abs_(x) -> Tensor:
    """Absolute value; the subgradient at zero is taken as 0."""
    x = as_tensor(x)
    s = np.sign(x.data)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * s,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def smooth_leaky(x, slope: float = 0.2) -> Tensor:
    """Smooth leaky unit: slope*x + (1-slope)*(x + sqrt(x^2 + 1) - 1)/2, zero at 0."""
    x = as_tensor(x)
    y, d = kernels.smooth_leaky(x.data, slope)
    return _record("smooth_leaky", y, (x,), lambda g: (g * d,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x, index) -> Tensor:
    """Basic or integer-array indexing; the backward pass scatters with accumulation."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record("getitem", x.data[index], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _record("concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)
    return _record("stack", np.stack([x.data for x in xs], axis=axis), tuple(xs),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def norm(x) -> Tensor:
    """Euclidean norm of all entries; gradient at the origin is defined as 0."""
    x = as_tensor(x)
    n = float(np.sqrt(np.sum(x.data * x.data)))

    def backward(g):
        if n == 0.0:
            return (np.zeros(x.shape),)
        return (g * x.data / n,)

    return _record("norm", np.asarray(n), (x,), backward)


def channel_normalize(x, eps: float = 1e-3) -> Tensor:
    """Divide a (C, H, W) map by its per-pixel channel RMS, softened by ``eps``."""
    x = as_tensor(x)
    c = x.shape[0]
    r = np.sqrt(np.mean(x.data * x.data, axis=0) + eps)
    out = x.data / r

    def backward(g):
        dot = np.sum(g * x.data, axis=0)
        return (g / r - x.data * (dot / (c * r ** 3)),)

    return _record("channel_normalize", out, (x,), backward)


def l1(a, b) -> Tensor:
    """Mean absolute difference."""
    return mean(abs_(sub(a, b)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def channel_mix(weight: np.ndarray, x) -> Tensor:
    """Apply a fixed (out, in) matrix across the channel axis of a (C, H, W) map."""
    x = as_tensor(x)
    c, h, w = x.shape
    if weight.shape[1] != c:
        raise ShapeError(f"channel_mix: weight {weight.shape} vs {c} input channels")
    out = (weight @ x.data.reshape(c, h * w)).reshape(weight.shape[0], h, w)
    return _record("channel_mix", out, (x,),
                   lambda g: ((weight.T @ g.reshape(weight.shape[0], h * w)).reshape(c, h, w),))


def dwconv3x3(x, kernel: np.ndarray) -> Tensor:
    """Depthwise 3x3 correlation with a fixed kernel and replicated borders."""
    x = as_tensor(x)
    return _record("dwconv3x3", kernels.dwconv3x3(x.data, kernel), (x,),
                   lambda g: (kernels.dwconv3x3_backward(g, kernel),))


def shift_field(kernel: np.ndarray, pattern: np.ndarray | None, shape) -> np.ndarray:
    """Depthwise-filtered shift pattern; a constant pattern gives the kernel sums."""
    if pattern is None:
        return np.broadcast_to(kernel.sum(axis=(1, 2))[:, None, None], shape).copy()
    return kernels.dwconv3x3(pattern, kernel)


def modconv(x, scale, shift, kernel: np.ndarray, mix: np.ndarray, bias: np.ndarray,
            gain: float, slope: float = 0.2, field: np.ndarray | None = None) -> Tensor:
    """Fused synthesis layer.

    ``gain * smooth_leaky(mix @ (scale * dwconv3x3(x, kernel) + shift * field) + bias)``
    with per-channel ``scale`` and ``shift`` vectors.  ``field`` is
    :func:`shift_field` of the fixed spatial pattern (all ones when omitted).
    Kernel, mix, bias and field are frozen; gradients flow to x, scale and shift.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[0]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"modconv: scale {scale.shape} / shift {shift.shape} vs {c} channels")
    if field is None:
        field = shift_field(kernel, None, x.shape)
    elif field.shape != x.shape:
        raise ShapeError(f"modconv: shift field {field.shape} vs input {x.shape}")
    xd, sd = x.data, scale.data
    y, d = kernels.modconv_forward(xd, sd, shift.data, kernel, field, mix, bias, gain, slope)

    def backward(g):
        return kernels.modconv_backward(g, xd, sd, kernel, field, mix, d)

    return _record("modconv", y, (x, scale, shift), backward)


def conv3x3(x, weight: np.ndarray) -> Tensor:
    """Dense 3x3 convolution (zero padding) with a fixed (out, in, 3, 3) weight."""
    x = as_tensor(x)
    c, h, w = x.shape
    co = weight.shape[0]
    if weight.shape[1] != c:
        raise ShapeError(f"conv3x3: weight {weight.shape} vs {c} input channels")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((9 * c, h * w))
    for t, (di, dj) in enumerate(np.ndindex(3, 3)):
        cols[t * c:(t + 1) * c] = xp[:, di:di + h, dj:dj + w].reshape(c, h * w)
    wmat = weight.transpose(0, 2, 3, 1).reshape(co, 9 * c)
    out = (wmat @ cols).reshape(co, h, w)

    def backward(g):
        gcols = (wmat.T @ g.reshape(co, h * w))
        gp = np.zeros((c, h + 2, w + 2))
        for t, (di, dj) in enumerate(np.ndindex(3, 3)):
            gp[:, di:di + h, dj:dj + w] += gcols[t * c:(t + 1) * c].reshape(c, h, w)
        return (gp[:, 1:h + 1, 1:w + 1],)

    return _record("conv3x3", out, (x,), backward)


# ---------------------------------------------------------------------------
# image resampling


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) half-pixel-centred bilinear interpolation weights."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


_matrix_cache: dict = {}


def _bilinear_cached(n_in, n_out):
    key = (n_in, n_out)
    if key not in _matrix_cache:
        _matrix_cache[key] = bilinear_matrix(n_in, n_out)
    return _matrix_cache[key]


def resize_bilinear(img, height: int, width: int) -> Tensor:
    """Bilinear resize of a (C, H, W) image with align-corners disabled."""
    img = as_tensor(img)
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img
    rh = _bilinear_cached(h, height)
    rw = _bilinear_cached(w, width)
    out = np.matmul(np.matmul(rh, img.data), rw.T)
    return _record("resize_bilinear", out, (img,),
                   lambda g: (np.matmul(np.matmul(rh.T, g), rw),))


def upsample_bilinear_2x(img) -> Tensor:
    img = as_tensor(img)
    _, h, w = img.shape
    if h < 1 or w < 1:
        raise ShapeError(f"upsample: empty image {img.shape}")
    return resize_bilinear(img, 2 * h, 2 * w)


def downsample_avg(img, target: int) -> Tensor:
    """Non-overlapping box average down to (C, target, target)."""
    img = as_tensor(img)
    c, h, w = img.shape
    if h % target or w % target:
        raise ShapeError(f"downsample_avg: {h}x{w} is not divisible by {target}")
    fh, fw = h // target, w // target
    if fh == 1 and fw == 1:
        return img
    out = img.data.reshape(c, target, fh, target, fw).mean(axis=(2, 4))

    def backward(g):
        return (np.repeat(np.repeat(g, fh, axis=1), fw, axis=2) / (fh * fw),)

    return _record("downsample_avg", out, (img,), backward)


def avg_pool2x(img) -> Tensor:
    img = as_tensor(img)
    c, h, w = img.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x: odd size {h}x{w}")
    out = img.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return _record("avg_pool2x", out, (img,),
                   lambda g: (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,))


def crop(img, box) -> Tensor:
    """Sub-image inside ``box`` (any object with row, col, height, width)."""
    img = as_tensor(img)
    _, h, w = img.shape
    r, c, bh, bw = box.row, box.col, box.height, box.width
    if r < 0 or c < 0 or bh < 1 or bw < 1 or r + bh > h or c + bw > w:
        raise ShapeError(f"crop: box {(r, c, bh, bw)} outside image of extent {h}x{w}")
    shape = img.shape

    def backward(g):
        out = np.zeros(shape)
        out[:, r:r + bh, c:c + bw] = g
        return (out,)

    return _record("crop", img.data[:, r:r + bh, c:c + bw], (img,), backward)


def paste(canvas, inset, box) -> Tensor:
    """Replace the pixels of ``canvas`` inside ``box`` with ``inset``."""
    canvas, inset = as_tensor(canvas), as_tensor(inset)
    r, c, bh, bw = box.row, box.col, box.height, box.width
    if inset.shape[1:] != (bh, bw) or inset.shape[0] != canvas.shape[0]:
        raise ShapeError(f"paste: inset {inset.shape} does not fit box {(bh, bw)}")
    out = canvas.data.copy()
    out[:, r:r + bh, c:c + bw] = inset.data

    def backward(g):
        gc = g.copy()
        gc[:, r:r + bh, c:c + bw] = 0.0
        return (gc, g[:, r:r + bh, c:c + bw].copy())

    return _record("paste", out, (canvas, inset), backward)


# ---------------------------------------------------------------------------
# differentiation


def grad(loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``leaves``.

    Leaves that the loss does not depend on receive zero arrays.
    """
    if loss.size != 1:
        raise ShapeError(f"grad: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        return [np.zeros(leaf.shape) for leaf in leaves]
    tape = active_tape()
    nodes = tape.nodes if tape is not None else []
    stop = next((i for i in range(len(nodes) - 1, -1, -1) if nodes[i] is loss.node), None)
    if stop is None:
        raise RuntimeError("grad: loss was not recorded on the active tape")
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(nodes[:stop + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return [np.asarray(grads.get(id(leaf), np.zeros(leaf.shape)), dtype=np.float64).reshape(leaf.shape)
            for leaf in leaves]


def value_and_grad(f: Callable[..., Tensor], *arrays: np.ndarray):
    """Evaluate ``f`` on fresh leaves built from ``arrays``; return (value, grads)."""
    with Tape():
        leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        loss = f(*leaves)
        grads = grad(loss, leaves)
    return float(loss.data), grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """Elementwise |a-b| / max(|a|, |b|); entries where both are tiny count as 0."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(scale <= floor, 0.0, np.abs(a - b) / np.maximum(scale, floor))


def finite_difference_check(f: Callable[[Tensor], Tensor], leaf, eps: float = 1e-6,
                            coords=None, rng=None, n_coords: int | None = None) -> float:
    """Largest relative error between ``grad`` and central differences of ``f``.

    ``coords`` restricts the check to the given flat indices; alternatively
    ``n_coords`` draws that many indices from ``rng``.  The relative error of a
    coordinate is measured against the largest analytic gradient entry so a
    near-zero component does not dominate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(leaf.data if isinstance(leaf, Tensor) else leaf, dtype=np.float64)
    _, (g,) = value_and_grad(f, x0)
    flat = x0.reshape(-1)
    if coords is None:
        if n_coords is not None and n_coords < flat.size:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        else:
            coords = np.arange(flat.size)
    coords = np.asarray(coords)
    numeric = np.empty(len(coords))
    for n, i in enumerate(coords):
        xp = flat.copy()
        xp[i] += eps
        xm = flat.copy()
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(x0.shape))).data
        fm = f(Tensor(xm.reshape(x0.shape))).data
        numeric[n] = (float(fp) - float(fm)) / (2.0 * eps)
    analytic = g.reshape(-1)[coords]
    scale = max(float(np.max(np.abs(g))), float(np.max(np.abs(numeric))) if numeric.size else 0.0)
    if scale <= 1e-12:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **kw) -> "AdamState":
        shape = np.shape(param.data if isinstance(param, Tensor) else param)
        return cls(np.zeros(shape), np.zeros(shape), **kw)


def adam_update(state: AdamState, param, g, lr: float):
    """One bias-corrected ADAM step.

    Pure: returns ``(new_param, new_state)`` and leaves the inputs untouched.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    p = np.asarray(param.data if isinstance(param, Tensor) else param, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape or p.shape != state.m.shape:
        raise ShapeError(f"adam_update: param {p.shape}, grad {g.shape}, state {state.m.shape}")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_p = p - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_p, AdamState(m, v, t, state.beta1, state.beta2, state.epsilon)
