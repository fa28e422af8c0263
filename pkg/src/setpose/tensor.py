"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything in this package computes on 64-bit reals: the finite-difference
gradient checks downstream are run at 1e-4 relative tolerance, which is not
dependable in 32-bit arithmetic. Values are ordinary numpy arrays; a tensor
optionally carries a handle into a :class:`Tape`, the append-only record of
operations that :func:`backward` replays in reverse.

The tape is rebuilt for every forward pass (no graph reuse), and one tape must
never be touched from two threads. Tensors that are not attached to a tape are
immutable value carriers and safe to share.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand extents are incompatible for the requested operation."""


class NonScalarRoot(ValueError):
    """backward() was asked to differentiate a non-scalar output."""


Pullback = Callable[[np.ndarray], np.ndarray]


class Tape:
    """Append-only record of differentiable operations (a Wengert list).

    Node ``i`` stores one ``(operand_node, pullback)`` edge per differentiable
    operand; the pullback maps the node's adjoint to that operand's adjoint
    contribution. Append order is a topological order by construction, since
    an operation can only consume tensors that already exist.
    """

    __slots__ = ("_edges",)

    def __init__(self) -> None:
        self._edges: list[tuple[tuple[int, Pullback], ...]] = []

    def __len__(self) -> int:
        return len(self._edges)

    def _emit(self, edges: Iterable[tuple[int, Pullback]]) -> int:
        self._edges.append(tuple(edges))
        return len(self._edges) - 1

    def watch(self, t: "Tensor") -> "Tensor":
        """Register ``t`` as a leaf of this tape (a differentiation root input)."""
        t.tape = self
        t.node = self._emit(())
        return t

    def leaf(self, data) -> "Tensor":
        """Create a new leaf tensor attached to this tape."""
        return self.watch(Tensor(data))


class Tensor:
    """A dense row-major float64 array, optionally attached to a tape.

    ``tape``/``node`` are the differentiation-graph handle; both are ``None``
    for plain value tensors (the inference fast path records nothing).
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape: Tape | None = None
        self.node: int | None = None
        if tape is not None:
            tape.watch(self)

    # -- value access ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        """Drop the graph handle in place and return self."""
        self.tape = None
        self.node = None
        return self

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators ---------------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value: np.ndarray, *edges: tuple[Tensor, Pullback]) -> Tensor:
    """Build the result tensor, recording pullbacks for tape-attached operands."""
    tape = None
    for op, _ in edges:
        if op.tape is not None:
            if tape is None:
                tape = op.tape
            elif tape is not op.tape:
                raise ValueError("operands belong to different tapes")
    out = Tensor(value)
    if tape is not None:
        out.tape = tape
        out.node = tape._emit((op.node, pull) for op, pull in edges if op.tape is tape)
    return out


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Reverse-accumulate adjoints of a scalar ``root`` over the whole tape.

    Returns a map from node id to the gradient d(root)/d(node) for every node
    reachable from the root; query leaves via their ``node`` handle. Traversal
    runs in strict anti-append order, so accumulation is deterministic.
    """
    if root.tape is not tape or root.node is None:
        raise ValueError("root does not belong to this tape")
    if root.data.size != 1:
        raise NonScalarRoot(f"root has shape {root.shape}; expected a scalar")
    grads: dict[int, np.ndarray] = {root.node: np.ones_like(root.data)}
    for nid in range(root.node, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        for pid, pull in tape._edges[nid]:
            contrib = pull(g)
            acc = grads.get(pid)
            grads[pid] = contrib if acc is None else acc + contrib
    return grads


def grad_of(grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    """Gradient for ``t`` out of a backward() map, zeros if unreachable."""
    if t.node is None:
        raise ValueError("tensor is not attached to a tape")
    g = grads.get(t.node)
    return np.zeros_like(t.data) if g is None else g


# -- broadcasting helper ----------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data / b.data,
        (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a, lambda g: -g))


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a fixed real exponent."""
    a = as_tensor(a)
    c = float(exponent)
    return _record(a.data**c, (a, lambda g: g * c * a.data ** (c - 1.0)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    val = np.exp(a.data)
    return _record(val, (a, lambda g: g * val))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a, lambda g: g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    val = np.sqrt(a.data)
    return _record(val, (a, lambda g: g * 0.5 / val))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _record(np.where(mask, a.data, 0.0), (a, lambda g: g * mask))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    val = 1.0 / (1.0 + np.exp(-a.data))
    return _record(val, (a, lambda g: g * val * (1.0 - val)))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record(np.abs(a.data), (a, lambda g: g * sign))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only through the interior."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    return _record(np.clip(a.data, lo, hi), (a, lambda g: g * mask))


# -- reductions and shape ops -------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def pull(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g, shape).copy() if g.shape != shape else g * np.ones(shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape).copy()

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a, pull))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) / float(n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    return _record(a.data.reshape(shape), (a, lambda g: g.reshape(orig)))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        inv = None
    else:
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a, lambda g: g.transpose(inv)))


def index(a, key) -> Tensor:
    """Basic (non-fancy) indexing with scatter-add backward."""
    a = as_tensor(a)
    shape = a.data.shape

    def pull(g: np.ndarray) -> np.ndarray:
        z = np.zeros(shape)
        z[key] += g
        return z

    return _record(np.array(a.data[key]), (a, pull))


def gather_rows(a, idx) -> Tensor:
    """Select rows by an integer index array; duplicates accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.data.shape

    def pull(g: np.ndarray) -> np.ndarray:
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return z

    return _record(a.data[idx], (a, pull))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    val = np.concatenate([p.data for p in parts], axis=axis)

    def make_pull(i: int) -> Pullback:
        sl = [slice(None)] * val.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _record(val, *[(p, make_pull(i)) for i, p in enumerate(parts)])


# -- linear algebra and sampling ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"inner extents differ: {a.shape} @ {b.shape}")
    return _record(
        a.data @ b.data,
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    )


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a 2-d tensor, computed with max subtraction."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatch(f"softmax_rows expects a 2-d tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=1, keepdims=True)

    def pull(g: np.ndarray) -> np.ndarray:
        return val * (g - (g * val).sum(axis=1, keepdims=True))

    return _record(val, (x, pull))


def bilinear_sample(fmap, points) -> Tensor:
    """Bilinear interpolation of an [h, w, c] map at continuous (x, y) points.

    Out-of-range corner contributions are zero (zero padding), which keeps the
    result differentiable with respect to both the map values and the point
    coordinates everywhere except the measure-zero cell boundaries.
    """
    fmap = as_tensor(fmap)
    points = as_tensor(points)
    if fmap.data.ndim != 3:
        raise ShapeMismatch(f"bilinear_sample expects an [h, w, c] map, got {fmap.shape}")
    if points.data.ndim != 2 or points.data.shape[1] != 2:
        raise ShapeMismatch(f"points must be [p, 2], got {points.shape}")

    h, w, c = fmap.data.shape
    x = points.data[:, 0]
    y = points.data[:, 1]
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = x - x0
    fy = y - y0

    # corner order: (x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1)
    corner_x = (x0, x0 + 1, x0, x0 + 1)
    corner_y = (y0, y0, y0 + 1, y0 + 1)
    weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    dw_dx = (-(1 - fy), (1 - fy), -fy, fy)
    dw_dy = (-(1 - fx), -fx, (1 - fx), fx)

    p = x.shape[0]
    out = np.zeros((p, c))
    valid_masks = []
    corner_vals = []
    for cx, cy, wgt in zip(corner_x, corner_y, weights):
        valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        vals = np.zeros((p, c))
        if valid.any():
            vals[valid] = fmap.data[cy[valid], cx[valid]]
        valid_masks.append(valid)
        corner_vals.append(vals)
        out += wgt[:, None] * vals

    def pull_map(g: np.ndarray) -> np.ndarray:
        gm = np.zeros((h, w, c))
        for cx, cy, wgt, valid in zip(corner_x, corner_y, weights, valid_masks):
            if valid.any():
                np.add.at(gm, (cy[valid], cx[valid]), wgt[valid, None] * g[valid])
        return gm

    def pull_points(g: np.ndarray) -> np.ndarray:
        gp = np.zeros((p, 2))
        for dwx, dwy, vals in zip(dw_dx, dw_dy, corner_vals):
            inner = (g * vals).sum(axis=1)
            gp[:, 0] += dwx * inner
            gp[:, 1] += dwy * inner
        return gp

    return _record(out, (fmap, pull_map), (points, pull_points))


# -- finite-difference oracle --------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], object], x, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function of one tensor.

    ``f`` receives a fresh tape-free Tensor per evaluation and must return a
    scalar (float or size-1 tensor). This is the verification oracle for the
    analytic gradients and is deliberately independent of the tape machinery.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_base.size):
        orig = flat_base[i]
        flat_base[i] = orig + eps
        f_plus = _scalar(f(Tensor(base.copy())))
        flat_base[i] = orig - eps
        f_minus = _scalar(f(Tensor(base.copy())))
        flat_base[i] = orig
        flat_grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        if v.data.size != 1:
            raise NonScalarRoot("finite_diff_grad target must return a scalar")
        return float(v.data.reshape(-1)[0])
    return float(v)


def max_rel_error(analytic, numeric) -> float:
    """Max-norm relative disagreement used by all gradient checks.

    The scale floor keeps noise on near-zero gradients from registering while
    still flagging a gradient that is wrongly zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), 1e-2)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


# -- seeded randomness ---------------------------------------------------------


class RngState:
    """Seeded, splittable PRNG with a fixed algorithm (PCG64).

    Identical seeds produce identical streams on every platform; ``split``
    derives independent child states deterministically.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed) if _seq is None else _seq
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def split(self, n: int) -> list["RngState"]:
        return [RngState(self.seed, _seq=child) for child in self._seq.spawn(n)]

    def uniform(self, shape=(), low: float = -1.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
