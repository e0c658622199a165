"""Dense math and reverse-mode differentiation over a fixed operation set.

The engine only ever differentiates one kind of computation: affine layers,
elementwise activations, positional encodings, compositing sums/products and
the two losses. So instead of a general autodiff system this module records a
tape of a closed set of primitives operating on numpy arrays. Each primitive
knows its own vector-Jacobian product; the backward pass walks the tape in
reverse and accumulates adjoints in recording order, which keeps gradients
bit-deterministic in single-threaded use.

Convention: every op accepts Vars, ndarrays or python scalars. If no argument
is a Var the op computes plain numpy and returns a plain result, so the same
function doubles as ordinary math (e.g. softplus(-5.0) -> float). Dtype
follows the inputs; training runs float32, oracles rerun the identical code
in float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(RuntimeError):
    """A primitive produced a non-finite value (raised in tape debug mode)."""


# ---------------------------------------------------------------------------
# Parameter storage


class Segment:
    __slots__ = ("name", "shape", "offset", "size")

    def __init__(self, name: str, shape: tuple, offset: int):
        self.name = name
        self.shape = tuple(int(s) for s in shape)
        self.offset = int(offset)
        self.size = int(np.prod(self.shape)) if self.shape else 1

    def __repr__(self):
        return f"Segment({self.name!r}, shape={self.shape}, offset={self.offset})"


class ParamVector:
    """Flat parameter array with named, shaped segments (houses theta).

    Segments are views into one contiguous array so optimizers can treat the
    whole model as a single vector while layers address their own weights by
    name. Segment names are unique; total length equals the sum of segment
    sizes.
    """

    def __init__(self, segments: Sequence[Segment], values: np.ndarray):
        self.segments = list(segments)
        self._by_name = {}
        for seg in self.segments:
            if seg.name in self._by_name:
                raise ValueError(f"duplicate segment name {seg.name!r}")
            self._by_name[seg.name] = seg
        total = sum(s.size for s in self.segments)
        values = np.asarray(values)
        if values.ndim != 1 or values.size != total:
            raise ValueError(f"values must be flat of length {total}, got shape {values.shape}")
        self.values = values

    @classmethod
    def build(cls, layout: Iterable[tuple[str, tuple]], dtype=np.float32) -> "ParamVector":
        segments = []
        offset = 0
        for name, shape in layout:
            seg = Segment(name, shape, offset)
            segments.append(seg)
            offset += seg.size
        return cls(segments, np.zeros(offset, dtype=dtype))

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def segment(self, name: str) -> Segment:
        return self._by_name[name]

    def view(self, name: str) -> np.ndarray:
        """Shaped view into the flat array; writes through."""
        seg = self._by_name[name]
        return self.values[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def set(self, name: str, arr) -> None:
        self.view(name)[...] = arr

    def copy(self) -> "ParamVector":
        return ParamVector(self.segments, self.values.copy())

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.segments, self.values.astype(dtype))

    def __len__(self) -> int:
        return self.values.size


# ---------------------------------------------------------------------------
# Tape and variables


class Var:
    """Array value tracked on a GradTape.

    requires_grad propagates through ops; ops whose inputs all have
    requires_grad=False produce untracked Vars, so inference runs the same
    code without recording anything.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, tape=None, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; definitions below once the op functions exist
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return neg(self)


class _Node:
    __slots__ = ("name", "out", "inputs", "vjp")

    def __init__(self, name, out, inputs, vjp):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class GradTape:
    """Recorded op sequence; replaying backward yields exact adjoints.

    Single-threaded by contract. Several tapes may evaluate concurrently over
    a shared read-only ParamVector; cross-tape gradient reduction is the
    caller's explicit sum.
    """

    def __init__(self, debug: bool = False):
        self.nodes: list[_Node] = []
        self.debug = debug

    def leaf(self, data) -> Var:
        return Var(data, tape=self, requires_grad=True)

    def backward(self, loss: Var) -> None:
        if loss.data.ndim != 0:
            raise ValueError("backward expects a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if inp is None or not inp.requires_grad or gi is None:
                    continue
                if inp.grad is None:
                    inp.grad = gi
                else:
                    inp.grad = inp.grad + gi
            if self.debug:
                for inp, gi in zip(node.inputs, grads):
                    if gi is not None and not np.all(np.isfinite(gi)):
                        raise NonFiniteError(f"non-finite adjoint from op '{node.name}'")

    def release(self) -> None:
        """Drop the recorded graph once adjoints are extracted.

        nodes -> out Var -> tape is a reference cycle, so an exhausted tape
        otherwise waits for the cyclic collector; at hundreds of MB per
        training step that backlog can exhaust RAM before a full collection
        runs. Clearing the node list lets plain refcounting free every
        intermediate buffer immediately.
        """
        self.nodes.clear()


def _data(x):
    return x.data if isinstance(x, Var) else x


def _record(name: str, out_data, inputs: Sequence, vjp: Callable):
    """Wrap op output; record on the inputs' tape if any input is tracked."""
    vars_in = [x if isinstance(x, Var) else None for x in inputs]
    tape = None
    needs = False
    for v in vars_in:
        if v is not None and v.requires_grad:
            needs = True
            if v.tape is not None:
                if tape is not None and tape is not v.tape:
                    raise ValueError(f"op '{name}' mixes variables from two tapes")
                tape = v.tape
    out = Var(out_data, tape=tape, requires_grad=needs)
    if needs and tape is not None:
        if tape.debug and not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"non-finite output of op '{name}'")
        tape.nodes.append(_Node(name, out, vars_in, vjp))
    return out


def _any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and linear primitives


def add(a, b):
    ad, bd = _data(a), _data(b)
    out = ad + bd
    if not _any_var(a, b):
        return out
    sa, sb = np.shape(ad), np.shape(bd)
    return _record("add", out, [a, b],
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    ad, bd = _data(a), _data(b)
    out = ad - bd
    if not _any_var(a, b):
        return out
    sa, sb = np.shape(ad), np.shape(bd)
    return _record("sub", out, [a, b],
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    ad, bd = _data(a), _data(b)
    out = ad * bd
    if not _any_var(a, b):
        return out
    sa, sb = np.shape(ad), np.shape(bd)
    return _record("mul", out, [a, b],
                   lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def div(a, b):
    ad, bd = _data(a), _data(b)
    out = ad / bd
    if not _any_var(a, b):
        return out
    sa, sb = np.shape(ad), np.shape(bd)
    return _record("div", out, [a, b],
                   lambda g: (_unbroadcast(g / bd, sa),
                              _unbroadcast(-g * ad / (bd * bd), sb)))


def neg(a):
    ad = _data(a)
    if not _any_var(a):
        return -ad
    return _record("neg", -ad, [a], lambda g: (-g,))


def matmul(a, b):
    """2-D matrix product (the only rank the engine needs)."""
    ad, bd = _data(a), _data(b)
    out = ad @ bd
    if not _any_var(a, b):
        return out
    return _record("matmul", out, [a, b],
                   lambda g: (g @ bd.T, ad.T @ g))


def relu(x):
    xd = _data(x)
    out = np.maximum(xd, 0)
    if not _any_var(x):
        return out
    return _record("relu", out, [x], lambda g: (g * (xd > 0),))


def _sigmoid_raw(x):
    # stable on both tails: never evaluates exp of a large positive number
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.astype(x.dtype) if hasattr(x, "dtype") else out


def sigmoid(x):
    xd = np.asarray(_data(x))
    out = _sigmoid_raw(xd)
    if not _any_var(x):
        return out
    return _record("sigmoid", out, [x], lambda g: (g * out * (1.0 - out),))


def softplus(x):
    """log(1 + exp(x)), overflow-safe: x + log1p(exp(-x)) for x > 0."""
    xd = np.asarray(_data(x))
    out = np.where(xd > 0, xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    if not _any_var(x):
        return out if out.ndim else float(out)
    return _record("softplus", out, [x], lambda g: (g * _sigmoid_raw(xd),))


def exp(x):
    xd = _data(x)
    out = np.exp(xd)
    if not _any_var(x):
        return out
    return _record("exp", out, [x], lambda g: (g * out,))


def sin(x):
    xd = _data(x)
    out = np.sin(xd)
    if not _any_var(x):
        return out
    return _record("sin", out, [x], lambda g: (g * np.cos(xd),))


def cos(x):
    xd = _data(x)
    out = np.cos(xd)
    if not _any_var(x):
        return out
    return _record("cos", out, [x], lambda g: (g * -np.sin(xd),))


# ---------------------------------------------------------------------------
# Shape, indexing and reduction primitives


def reshape(x, shape):
    xd = _data(x)
    out = np.reshape(xd, shape)
    if not _any_var(x):
        return out
    orig = np.shape(xd)
    return _record("reshape", out, [x], lambda g: (np.reshape(g, orig),))


def concat(parts, axis=-1):
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    if not any(isinstance(p, Var) for p in parts):
        return out
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, list(parts), vjp)


def gather_rows(x, idx):
    """out[i] = x[idx[i]] along the leading axis."""
    xd = _data(x)
    idx = np.asarray(idx)
    out = xd[idx]
    if not _any_var(x):
        return out
    shape = np.shape(xd)

    def vjp(g):
        buf = np.zeros(shape, dtype=g.dtype)
        np.add.at(buf, idx, g)
        return (buf,)

    return _record("gather_rows", out, [x], vjp)


def scatter_rows(values, idx, num_rows):
    """Scatter-add rows of `values` into a zero buffer of num_rows rows."""
    vd = _data(values)
    idx = np.asarray(idx)
    out_shape = (num_rows,) + np.shape(vd)[1:]
    out = np.zeros(out_shape, dtype=vd.dtype)
    np.add.at(out, idx, vd)
    if not _any_var(values):
        return out
    return _record("scatter_rows", out, [values], lambda g: (g[idx],))


def reduce_sum(x, axis=None, keepdims=False):
    xd = _data(x)
    out = np.sum(xd, axis=axis, keepdims=keepdims)
    if not _any_var(x):
        return out
    shape = np.shape(xd)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record("reduce_sum", out, [x], vjp)


def reduce_mean(x):
    """Mean over every entry (scalar output)."""
    xd = _data(x)
    out = np.mean(xd)
    if not _any_var(x):
        return out
    shape = np.shape(xd)
    n = xd.size
    return _record("reduce_mean", out, [x],
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def cumsum_exclusive(x, axis=-1):
    """out[..., i] = sum_{j < i} x[..., j]; the compositing prefix sum."""
    xd = _data(x)
    inc = np.cumsum(xd, axis=axis)
    out = inc - xd  # exclusive = inclusive shifted by one
    if not _any_var(x):
        return out

    def vjp(g):
        # adjoint of x_j is sum_{i > j} g_i, a strict suffix sum
        suf = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (suf - g,)

    return _record("cumsum_exclusive", out, [x], vjp)


def weighted_reduce(w, f):
    """Compositing sum over the sample axis: (R,N),(R,N,C)->(R,C) or (R,N),(R,N)->(R,).

    This is the C = sum_i w_i f_i channel reduction.
    """
    wd, fd = _data(w), _data(f)
    if fd.ndim == wd.ndim:
        out = np.einsum("rn,rn->r", wd, fd)

        def vjp(g):
            return (g[:, None] * fd, g[:, None] * wd)
    else:
        out = np.einsum("rn,rnc->rc", wd, fd)

        def vjp(g):
            return (np.einsum("rc,rnc->rn", g, fd), wd[:, :, None] * g[:, None, :])

    if not _any_var(w, f):
        return out
    return _record("weighted_reduce", out, [w, f], vjp)


def normalize_rows(x):
    """Unit-normalize each row of an (M,3) array."""
    xd = _data(x)
    n = np.linalg.norm(xd, axis=-1, keepdims=True)
    out = xd / n
    if not _any_var(x):
        return out

    def vjp(g):
        u = out
        return ((g - u * np.sum(u * g, axis=-1, keepdims=True)) / n,)

    return _record("normalize_rows", out, [x], vjp)


# ---------------------------------------------------------------------------
# Rotation projection (shared with the scene module, which re-exports it)


def _project_so3_raw(m: np.ndarray) -> np.ndarray:
    u, s, vt = np.linalg.svd(m)
    if s[-1] <= 1e-9:
        raise ValueError("project_so3: matrix is rank deficient (smallest singular value <= 1e-9)")
    d = np.sign(np.linalg.det(u @ vt))
    return (u * np.array([1.0, 1.0, d])) @ vt


def _vee(a: np.ndarray) -> np.ndarray:
    return np.array([a[2, 1], a[0, 2], a[1, 0]], dtype=a.dtype)


def _skew(q: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -q[2], q[1]],
                     [q[2], 0.0, -q[0]],
                     [-q[1], q[0], 0.0]], dtype=q.dtype)


def project_so3(m):
    """Nearest rotation to a full-rank 3x3 matrix: R = U diag(1,1,det(UV^T)) V^T.

    Differentiable. The VJP comes from the polar factorization M = R S with
    S = R^T M symmetric: solving (tr(S) I - S) q = vee(R^T G - G^T R) gives
    Mbar = R [q]_x, which avoids differentiating the SVD factors themselves.
    """
    md = np.asarray(_data(m))
    if md.shape != (3, 3):
        raise ValueError(f"project_so3 expects a 3x3 matrix, got {md.shape}")
    r = _project_so3_raw(md)
    if not _any_var(m):
        return r
    s = r.T @ md  # symmetric polar factor

    def vjp(g):
        rhs = _vee(r.T @ g - g.T @ r)
        q = np.linalg.solve(np.trace(s) * np.eye(3, dtype=s.dtype) - s, rhs)
        return (r @ _skew(q),)

    return _record("project_so3", r, [m], vjp)


# ---------------------------------------------------------------------------
# Losses


def softmax_cross_entropy(logits, target_class: int):
    """-log softmax(logits)[target_class], stable via max subtraction."""
    ld = np.asarray(_data(logits))
    if ld.ndim != 1 or ld.size == 0:
        raise ValueError("softmax_cross_entropy expects a non-empty logit vector")
    k = int(target_class)
    if not 0 <= k < ld.size:
        raise IndexError(f"target class {k} out of range for {ld.size} logits")
    shifted = ld - np.max(ld)
    logz = np.log(np.sum(np.exp(shifted)))
    out = logz - shifted[k]
    if not _any_var(logits):
        return float(out)

    def vjp(g):
        p = np.exp(shifted - logz)
        p[k] -= 1.0
        return (g * p,)

    return _record("softmax_cross_entropy", np.asarray(out), [logits], vjp)


def cross_entropy_mean(logits, labels, mask=None):
    """Mean softmax cross-entropy over rows of (M,C) logits.

    Rows where mask is False are excluded from the mean (and its
    denominator). With zero selected rows the loss is exactly 0.
    """
    ld = np.asarray(_data(logits))
    labels = np.asarray(labels, dtype=np.int64)
    if mask is None:
        sel = np.arange(ld.shape[0])
    else:
        sel = np.nonzero(np.asarray(mask))[0]
    m = sel.size
    if m == 0:
        out = np.asarray(0.0, dtype=ld.dtype)
        if not _any_var(logits):
            return float(out)
        return _record("cross_entropy_mean", out, [logits],
                       lambda g: (np.zeros_like(ld),))
    lsel = ld[sel]
    shifted = lsel - lsel.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = shifted[np.arange(m), labels[sel]]
    out = np.asarray((logz[:, 0] - picked).mean(), dtype=ld.dtype)
    if not _any_var(logits):
        return float(out)

    def vjp(g):
        p = np.exp(shifted - logz)
        p[np.arange(m), labels[sel]] -= 1.0
        buf = np.zeros_like(ld)
        buf[sel] = p * (g / m)
        return (buf,)

    return _record("cross_entropy_mean", out, [logits], vjp)


def mse(pred, target):
    """Mean over all entries of the squared difference."""
    d = sub(pred, target)
    return reduce_mean(mul(d, d))


# ---------------------------------------------------------------------------
# Whole-vector driver and finite-difference harness


def forward_backward(loss_fn, params: ParamVector, debug: bool = False):
    """Evaluate loss_fn over tape leaves of `params`; return (loss, grad).

    loss_fn receives a dict mapping segment name to a leaf Var and must
    return a scalar Var (or plain scalar for constant losses). The gradient
    comes back as a flat array aligned with params.values.
    """
    tape = GradTape(debug=debug)
    leaves = {seg.name: tape.leaf(params.view(seg.name)) for seg in params.segments}
    loss = loss_fn(leaves)
    grad = np.zeros(params.size, dtype=params.values.dtype)
    if not isinstance(loss, Var) or loss.tape is None:
        # loss ignored the parameters entirely
        return float(_data(loss)), grad
    tape.backward(loss)
    for seg in params.segments:
        lg = leaves[seg.name].grad
        if lg is not None:
            grad[seg.offset:seg.offset + seg.size] = np.asarray(lg).ravel()
    out = float(loss.data)
    tape.release()
    return out, grad


def evaluate(loss_fn, params: ParamVector) -> float:
    """Forward-only evaluation of a loss_fn written against forward_backward."""
    leaves = {seg.name: Var(params.view(seg.name)) for seg in params.segments}
    return float(_data(loss_fn(leaves)))


def fd_gradient(loss_fn, params: ParamVector, indices, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of loss_fn at the probed flat indices.

    The oracle for gradient checks. Run it on a float64 copy of the params;
    float32 rounding drowns the h^2 truncation term otherwise.
    """
    out = np.zeros(len(indices), dtype=np.float64)
    for j, i in enumerate(indices):
        p = params.copy()
        p.values[i] += h
        fp = evaluate(loss_fn, p)
        p.values[i] -= 2 * h
        fm = evaluate(loss_fn, p)
        out[j] = (fp - fm) / (2 * h)
    return out
