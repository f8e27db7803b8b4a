"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation as a :class:`Node` in execution
order, so the node list is already topologically sorted.  Calling
:func:`backward` walks the list in reverse and accumulates vector-Jacobian
products.  The graph is rebuilt for every evaluation (define-by-run).

Broadcasting is deliberately restricted: binary elementwise operations
accept equal shapes or a scalar (shape ``()`` node or Python number)
paired with an array.  Anything else raises :class:`ShapeError`.

Reductions whose operands are indexed by agent (``softmax`` and
``weighted_sum``) sum their terms in sorted order, and matrix products pad
their output width to a multiple of 8.  Both make a row's result
independent of where the row sits in the batch, which is what lets the
model be exactly equivariant under agent relabeling.
"""

from __future__ import annotations

import numbers

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Node",
    "Tape",
    "Gradients",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "square",
    "matmul",
    "affine",
    "concat",
    "stack",
    "softmax",
    "inner",
    "sum",
    "reshape",
    "take",
    "weighted_sum",
    "lstm_cell",
    "norm",
    "stop_gradient",
]


class Node:
    """One recorded value on a tape."""

    __slots__ = ("tape", "id", "value", "parents", "backward_fn", "requires_grad")

    def __init__(self, tape, id, value, parents, backward_fn, requires_grad):
        self.tape = tape
        self.id = id
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.value.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)


class Gradients:
    """Gradient buffer returned by :func:`backward`.

    Indexing with a node (or node id) yields its gradient; nodes the root
    does not depend on read as zeros of the node's shape.
    """

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, key):
        node_id = key.id if isinstance(key, Node) else int(key)
        g = self._grads.get(node_id)
        if g is None:
            return np.zeros(self._tape.nodes[node_id].value.shape)
        return g

    def __contains__(self, key):
        node_id = key.id if isinstance(key, Node) else int(key)
        return node_id in self._grads

    def __len__(self):
        return len(self._tape.nodes)


class Tape:
    """Append-only record of operations."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def _record(self, value, parents, backward_fn):
        requires_grad = False
        for p in parents:
            if p.requires_grad:
                requires_grad = True
                break
        if not requires_grad:
            parents, backward_fn = (), None
        node = Node(self, len(self.nodes), value, parents, backward_fn, requires_grad)
        self.nodes.append(node)
        return node

    def variable(self, value):
        """Leaf node that gradients flow into."""
        node = Node(self, len(self.nodes), _as_array(value), (), None, True)
        self.nodes.append(node)
        return node

    def constant(self, value):
        """Leaf node excluded from differentiation."""
        node = Node(self, len(self.nodes), _as_array(value), (), None, False)
        self.nodes.append(node)
        return node

    def backward(self, root, keep_intermediate=True):
        return backward(self, root, keep_intermediate=keep_intermediate)


def _as_array(value):
    arr = np.array(value, dtype=np.float64)
    return arr


def backward(tape, root, keep_intermediate=True):
    """Propagate d(root)/d(node) to every node ``root`` depends on.

    ``root`` must be scalar-shaped.  With ``keep_intermediate=False`` only
    leaf gradients are retained, which bounds memory during training.
    """
    if root.tape is not tape:
        raise ValueError("root node belongs to a different tape")
    if root.value.shape != () and root.value.size != 1:
        raise ShapeError("backward", root.value.shape, (), detail="root must be scalar")

    grads = {root.id: np.ones(root.value.shape)}
    owned = set()
    nodes = tape.nodes
    for k in range(root.id, -1, -1):
        node = nodes[k]
        g = grads.get(k)
        if g is None:
            continue
        fn = node.backward_fn
        if fn is None:
            continue
        if not keep_intermediate:
            del grads[k]
        parent_grads = fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = parent.id
            cur = grads.get(pid)
            if cur is None:
                grads[pid] = pg
            elif pid in owned and cur.ndim:
                cur += pg
            else:
                grads[pid] = cur + pg
                owned.add(pid)
    return Gradients(tape, grads)


# ---------------------------------------------------------------------------
# helpers


def _tape_of(*operands):
    tape = None
    for x in operands:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    if tape is None:
        raise TypeError("at least one operand must be a Node")
    return tape


def _lift(tape, x):
    if isinstance(x, Node):
        return x
    if isinstance(x, numbers.Number):
        return tape.constant(float(x))
    return tape.constant(x)


def _check_pair(op, a, b):
    sa, sb = a.value.shape, b.value.shape
    if sa != sb and sa != () and sb != ():
        raise ShapeError(op, sa, sb)


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _mm(a, b):
    """Matrix product whose rows do not depend on their position in ``a``.

    OpenBLAS switches micro-kernels for output widths that are not a
    multiple of 8, which can change the low bits of individual rows.
    """
    n = b.shape[1]
    pad = (-n) % 8
    if pad:
        b = np.concatenate([b, np.zeros((b.shape[0], pad))], axis=1)
        return (a @ b)[:, :n]
    return a @ b


def _sorted_sum(a, axis):
    return np.sort(a, axis=axis).sum(axis=axis)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    tape = _tape_of(a, b)
    if isinstance(b, numbers.Number):
        return tape._record(a.value + b, (a,), lambda g: (g,))
    if isinstance(a, numbers.Number):
        return tape._record(a + b.value, (b,), lambda g: (g,))
    a, b = _lift(tape, a), _lift(tape, b)
    _check_pair("add", a, b)
    sa, sb = a.value.shape, b.value.shape
    return tape._record(
        a.value + b.value, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb))
    )


def sub(a, b):
    tape = _tape_of(a, b)
    if isinstance(b, numbers.Number):
        return tape._record(a.value - b, (a,), lambda g: (g,))
    if isinstance(a, numbers.Number):
        return tape._record(a - b.value, (b,), lambda g: (-g,))
    a, b = _lift(tape, a), _lift(tape, b)
    _check_pair("sub", a, b)
    sa, sb = a.value.shape, b.value.shape
    return tape._record(
        a.value - b.value, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb))
    )


def mul(a, b):
    tape = _tape_of(a, b)
    if isinstance(b, numbers.Number):
        return tape._record(a.value * b, (a,), lambda g: (g * b,))
    if isinstance(a, numbers.Number):
        return tape._record(a * b.value, (b,), lambda g: (g * a,))
    a, b = _lift(tape, a), _lift(tape, b)
    _check_pair("mul", a, b)
    av, bv = a.value, b.value

    def fn(g):
        return (
            _reduce_to(g * bv, av.shape) if a.requires_grad else None,
            _reduce_to(g * av, bv.shape) if b.requires_grad else None,
        )

    return tape._record(av * bv, (a, b), fn)


def div(a, b):
    tape = _tape_of(a, b)
    if isinstance(b, numbers.Number):
        return tape._record(a.value / b, (a,), lambda g: (g / b,))
    a, b = _lift(tape, a), _lift(tape, b)
    _check_pair("div", a, b)
    av, bv = a.value, b.value
    out = av / bv

    def fn(g):
        return (
            _reduce_to(g / bv, av.shape) if a.requires_grad else None,
            _reduce_to(-g * out / bv, bv.shape) if b.requires_grad else None,
        )

    return tape._record(out, (a, b), fn)


def neg(a):
    return a.tape._record(-a.value, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.value)
    return a.tape._record(out, (a,), lambda g: (g * out,))


def log(a):
    av = a.value
    if np.any(av <= 0):
        raise DomainError(f"log: non-positive input (min {np.min(av)!r})")
    return a.tape._record(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    av = a.value
    if np.any(av <= 0):
        raise DomainError(f"sqrt: non-positive input (min {np.min(av)!r})")
    out = np.sqrt(av)
    return a.tape._record(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(a.value)
    return a.tape._record(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a):
    out = _sigmoid(a.value)
    return a.tape._record(out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a):
    av = a.value
    return a.tape._record(av * av, (a,), lambda g: (2.0 * g * av,))


def stop_gradient(a):
    return a.tape.constant(a.value)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape, detail="need [m,k] @ [k,n]")

    def fn(g):
        return (
            g @ bv.T if a.requires_grad else None,
            av.T @ g if b.requires_grad else None,
        )

    return tape._record(_mm(av, bv), (a, b), fn)


def affine(x, w, b):
    """``x @ w + b`` for ``x`` [m, k], ``w`` [k, n], ``b`` [n]."""
    tape = _tape_of(x, w, b)
    x, w, b = _lift(tape, x), _lift(tape, w), _lift(tape, b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError("affine", xv.shape, wv.shape)
    if bv.shape != (wv.shape[1],):
        raise ShapeError("affine", wv.shape, bv.shape, detail="bias width")
    out = _mm(xv, wv)
    out += bv

    def fn(g):
        return (
            g @ wv.T if x.requires_grad else None,
            xv.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return tape._record(out, (x, w, b), fn)


def inner(a, b):
    """Inner product over the last axis; [n] x [n] -> scalar."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape or av.ndim == 0:
        raise ShapeError("inner", av.shape, bv.shape)
    out = np.sum(av * bv, axis=-1)

    def fn(g):
        ge = g[..., None]
        return (
            ge * bv if a.requires_grad else None,
            ge * av if b.requires_grad else None,
        )

    return tape._record(out, (a, b), fn)


# ---------------------------------------------------------------------------
# structure


def concat(parts, axis=0):
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    values = [p.value for p in parts]
    ref = values[0]
    ax = axis % ref.ndim if ref.ndim else 0
    for v in values[1:]:
        if v.ndim != ref.ndim or any(
            v.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise ShapeError("concat", ref.shape, v.shape, detail=f"axis {axis}")
    out = np.concatenate(values, axis=ax)
    bounds = np.cumsum([v.shape[ax] for v in values])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return tape._record(out, tuple(parts), fn)


def stack(parts, axis=0):
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    shape = parts[0].value.shape
    for p in parts[1:]:
        if p.value.shape != shape:
            raise ShapeError("stack", shape, p.value.shape)
    out = np.stack([p.value for p in parts], axis=axis)

    def fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return tape._record(out, tuple(parts), fn)


def reshape(a, shape):
    src = a.value.shape
    out = a.value.reshape(shape)
    return a.tape._record(out, (a,), lambda g: (g.reshape(src),))


def take(a, index):
    """Gather rows of ``a`` (axis 0) at integer positions ``index``."""
    av = a.value
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -av.shape[0] or index.max() >= av.shape[0]):
        raise ShapeError("take", av.shape, index.shape, detail="index out of range")

    def fn(g):
        out = np.zeros(av.shape)
        np.add.at(out, index, g)
        return (out,)

    return a.tape._record(av[index], (a,), fn)


_BASIC_INDEX = (slice, int, np.integer, type(Ellipsis), type(None))


def _getitem(a, index):
    parts = index if isinstance(index, tuple) else (index,)
    if not all(isinstance(p, _BASIC_INDEX) for p in parts):
        raise TypeError("Node supports basic slicing only; use take() for gathers")
    av = a.value
    out = av[index]

    def fn(g):
        full = np.zeros(av.shape)
        full[index] = g
        return (full,)

    return a.tape._record(np.asarray(out), (a,), fn)


def sum(a, axis=None):
    av = a.value
    out = np.asarray(av.sum(axis=axis))
    if axis is None:
        return a.tape._record(out, (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))
    ax = axis % av.ndim

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax), av.shape).copy(),)

    return a.tape._record(out, (a,), fn)


# ---------------------------------------------------------------------------
# attention and recurrence


def softmax(a):
    """Softmax over the last axis, stabilized by max subtraction."""
    av = a.value
    if av.ndim == 0 or av.shape[-1] == 0:
        raise ShapeError("softmax", av.shape, detail="need at least one logit")
    e = np.exp(av - av.max(axis=-1, keepdims=True))
    out = e / _sorted_sum(e, axis=-1)[..., None]

    def fn(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return a.tape._record(out, (a,), fn)


def weighted_sum(w, v):
    """``out[..., h] = sum_k w[..., k] * v[..., k, h]``, terms summed in sorted order."""
    tape = _tape_of(w, v)
    w, v = _lift(tape, w), _lift(tape, v)
    wv, vv = w.value, v.value
    if vv.ndim != wv.ndim + 1 or vv.shape[:-1] != wv.shape:
        raise ShapeError("weighted_sum", wv.shape, vv.shape)
    out = _sorted_sum(wv[..., None] * vv, axis=-2)

    def fn(g):
        return (
            np.sum(vv * g[..., None, :], axis=-1) if w.requires_grad else None,
            wv[..., None] * g[..., None, :] if v.requires_grad else None,
        )

    return tape._record(out, (w, v), fn)


def _sigmoid_(a):
    np.negative(a, out=a)
    with np.errstate(over="ignore"):  # exp overflow to inf gives the correct limit 0
        np.exp(a, out=a)
    a += 1.0
    np.reciprocal(a, out=a)
    return a


def lstm_cell(x, state, w, b):
    """One step of a single-layer LSTM for a batch of rows.

    ``x`` is [m, k]; ``state`` packs ``h`` and ``c`` as [2, m, H]; ``w`` is
    [4, k + H, H] acting on ``[x, h]`` per gate and ``b`` is [4, H].  Gate
    order is input, forget, output, candidate.  Each gate is kept as its
    own contiguous block, which is markedly faster than slicing a fused
    [m, 4H] pre-activation.  Returns the new packed state.
    """
    tape = _tape_of(x, state, w, b)
    x, state, w, b = (_lift(tape, t) for t in (x, state, w, b))
    xv, sv, wv, bv = x.value, state.value, w.value, b.value
    if xv.ndim != 2 or sv.ndim != 3 or sv.shape[0] != 2 or sv.shape[1] != xv.shape[0]:
        raise ShapeError("lstm_cell", xv.shape, sv.shape)
    m, k = xv.shape
    hdim = sv.shape[2]
    if wv.shape != (4, k + hdim, hdim) or bv.shape != (4, hdim):
        raise ShapeError("lstm_cell", xv.shape, sv.shape, wv.shape, bv.shape)
    h, c = sv[0], sv[1]
    wx, wh = wv[:, :k], wv[:, k:]
    z = np.empty((4, m, hdim))
    for q in range(4):
        z[q] = _mm(xv, wx[q])
        z[q] += _mm(h, wh[q])
        z[q] += bv[q]
    _sigmoid_(z[:3])
    np.tanh(z[3], out=z[3])
    gi, gf, go, gg = z
    out = np.empty((2, m, hdim))
    c_new = out[1]
    np.multiply(gf, c, out=c_new)
    c_new += gi * gg
    tc = np.tanh(c_new)
    np.multiply(go, tc, out=out[0])

    def fn(g):
        gh, gc = g[0], g[1]
        dc = 1.0 - tc * tc
        dc *= go
        dc *= gh
        dc += gc
        dz = np.empty((4, m, hdim))
        np.multiply(dc, gg, out=dz[0])
        dz[0] *= gi * (1.0 - gi)
        np.multiply(dc, c, out=dz[1])
        dz[1] *= gf * (1.0 - gf)
        np.multiply(gh, tc, out=dz[2])
        dz[2] *= go * (1.0 - go)
        np.multiply(dc, gi, out=dz[3])
        dz[3] *= 1.0 - gg * gg
        dx = dstate = dw = db = None
        if x.requires_grad:
            dx = dz[0] @ wx[0].T
            for q in range(1, 4):
                dx += dz[q] @ wx[q].T
        if state.requires_grad:
            dstate = np.empty((2, m, hdim))
            np.matmul(dz[0], wh[0].T, out=dstate[0])
            for q in range(1, 4):
                dstate[0] += dz[q] @ wh[q].T
            np.multiply(dc, gf, out=dstate[1])
        if w.requires_grad:
            dw = np.empty(wv.shape)
            for q in range(4):
                np.matmul(xv.T, dz[q], out=dw[q, :k])
                np.matmul(h.T, dz[q], out=dw[q, k:])
        if b.requires_grad:
            db = np.ones(m) @ dz
        return dx, dstate, dw, db

    return tape._record(out, (x, state, w, b), fn)


def norm(a):
    """Euclidean norm over the last axis; value and gradient are 0 at the origin."""
    av = a.value
    if av.ndim == 0:
        raise ShapeError("norm", av.shape, detail="need at least one axis")
    out = np.sqrt(np.sum(av * av, axis=-1))

    def fn(g):
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.where(out > 0.0, g / safe, 0.0)
        return (av * scale[..., None],)

    return a.tape._record(out, (a,), fn)
