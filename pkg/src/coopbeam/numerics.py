"""Dense tensors with reverse-mode differentiation on a per-evaluation tape.

Tensors store a flat float array plus a shape; complex quantities live in
:class:`ComplexSplit` pairs of real tensors.  Every differentiable op appends
one node to the active :class:`Tape`; ``Tape.backward`` replays the nodes in
reverse to accumulate leaf gradients.

Default precision is 32-bit.  The :func:`precision` context switches the
whole module to 64-bit for gradient and oracle checks.

Row-wise matrix products in :func:`linear` go through ``np.einsum`` rather
than BLAS: einsum evaluates every output row with the same scalar loop, so
permuting input rows permutes the output bitwise.  The equivariance suite
relies on that.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

_LN2 = float(np.log(2.0))

_active_dtype = np.float32


def default_dtype():
    """dtype new tensors are created with (float32 unless in 64-bit mode)."""
    return _active_dtype


@contextlib.contextmanager
def precision(bits):
    """Temporarily switch the module to 32- or 64-bit arithmetic."""
    global _active_dtype
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    saved = _active_dtype
    _active_dtype = np.float32 if bits == 32 else np.float64
    try:
        yield
    finally:
        _active_dtype = saved


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    """Flat float storage plus shape; optionally a node on a tape.

    ``data`` is always 1-D with ``len(data) == prod(shape)``.  ``track`` marks
    tensors that gradients propagate into (leaves and anything computed from
    them); plain constants have ``tape is None`` and ``track False``.
    """

    __slots__ = ("shape", "data", "tape", "track", "grad")

    def __init__(self, data, shape, tape=None, track=False):
        self.data = data
        self.shape = shape
        self.tape = tape
        self.track = track
        self.grad = None

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return len(self.shape)

    def array(self):
        """Shaped (read-only by convention) view of the flat storage."""
        return self.data.reshape(self.shape)

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0])

    def __float__(self):
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, track={self.track})"


def constant(values, dtype=None):
    """Tensor not attached to any tape; gradients never flow into it."""
    arr = np.ascontiguousarray(values, dtype=dtype or _active_dtype)
    return Tensor(arr.reshape(-1), arr.shape)


@dataclass
class ComplexSplit:
    """Complex quantity stored as separate real and imaginary tensors."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise DimensionError(
                f"re/im shapes differ: {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self):
        return self.re.shape

    def numpy(self):
        return self.re.array().astype(np.complex128) + 1j * self.im.array()


class Tape:
    """Append-only record of one evaluation; replayed in reverse by backward.

    Single-writer: one tape per evaluation, never shared across concurrent
    evaluations.  ``record_grad=False`` keeps the tape as a branch recorder
    only (used for finite-difference probes).  ``record_branches=True`` logs
    every ReLU mask / argmax selection so two evaluations can be compared for
    crossing a nondifferentiable point.
    """

    def __init__(self, record_grad=True, record_branches=False):
        self.nodes = []          # (out, inputs, backward_fn, op_name)
        self.leaves = []
        self.record_grad = record_grad
        self.record_branches = record_branches
        self.branches = []

    def leaf(self, values, dtype=None):
        arr = np.ascontiguousarray(values, dtype=dtype or _active_dtype)
        t = Tensor(arr.reshape(-1), arr.shape, self, track=True)
        self.leaves.append(t)
        return t

    def _branch(self, payload):
        if self.record_branches:
            self.branches.append(payload.tobytes())

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) for every leaf on this tape."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss is not a tensor on this tape")
        if loss.size != 1:
            raise DimensionError(f"loss must be scalar, has shape {loss.shape}")
        for out, _, _, _ in self.nodes:
            out.grad = None
        for t in self.leaves:
            t.grad = None
        loss.grad = np.ones(1, dtype=loss.data.dtype)
        for out, inputs, backward_fn, _ in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or not t.track:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi
        for t in self.leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def backward(tape, loss):
    """Functional alias for :meth:`Tape.backward`."""
    tape.backward(loss)


def _find_tape(tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _emit(tape, inputs, out_arr, backward_fn, op):
    flat = out_arr if out_arr.ndim == 1 else out_arr.reshape(-1)
    if tape is not None and tape.record_grad and any(t.track for t in inputs):
        out = Tensor(flat, out_arr.shape, tape, track=True)
        tape.nodes.append((out, inputs, backward_fn, op))
        return out
    return Tensor(flat, out_arr.shape)


# ---------------------------------------------------------------------------
# ops

def linear(x, w, b):
    """Affine map w @ x + b, applied row-wise when x is a matrix.

    w has shape (n_out, n_in), b (n_out,); x is (n_in,) or (rows, n_in).
    """
    wa, ba, xa = w.array(), b.array(), x.array()
    if wa.ndim != 2 or ba.ndim != 1 or wa.shape[0] != ba.shape[0]:
        raise DimensionError(f"bad parameter shapes w={w.shape} b={b.shape}")
    if xa.shape[-1] != wa.shape[1] or xa.ndim not in (1, 2):
        raise DimensionError(f"linear: x {x.shape} does not conform to w {w.shape}")
    tape = _find_tape((x, w, b))
    if xa.ndim == 1:
        out = wa @ xa + ba

        def backward_fn(g):
            return g @ wa, np.outer(g, xa), g
    else:
        # einsum keeps each output row's accumulation order independent of
        # its position, so row permutations commute bitwise with this op.
        out = np.einsum("ij,kj->ik", xa, wa) + ba

        def backward_fn(g):
            g2 = g.reshape(out.shape)
            return g2 @ wa, g2.T @ xa, g2.sum(axis=0)

    return _emit(tape, (x, w, b), out, backward_fn, "linear")


def relu(x):
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    xa = x.data
    mask = xa > 0
    tape = _find_tape((x,))
    if tape is not None:
        tape._branch(mask)
    out = np.where(mask, xa, 0).reshape(x.shape)

    def backward_fn(g):
        return (np.where(mask, g.reshape(-1), 0),)

    return _emit(tape, (x,), out, backward_fn, "relu")


def concat(xs):
    """Concatenate rank-1 tensors in order."""
    if not xs:
        raise ValueError("concat of an empty list")
    for t in xs:
        if t.ndim != 1:
            raise DimensionError(f"concat expects rank-1 tensors, got {t.shape}")
    tape = _find_tape(xs)
    out = np.concatenate([t.data for t in xs])
    sizes = [t.size for t in xs]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _emit(tape, tuple(xs), out, backward_fn, "concat")


def _concat_axis(xs, axis, op):
    if not xs:
        raise ValueError(f"{op} of an empty list")
    tape = _find_tape(xs)
    arrs = [t.array() for t in xs]
    out = np.concatenate(arrs, axis=axis)
    sizes = [a.shape[axis] for a in arrs]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        g = g.reshape(out.shape)
        pieces = []
        sl = [slice(None)] * out.ndim
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(sl)]).reshape(-1))
        return tuple(pieces)

    return _emit(tape, tuple(xs), out, backward_fn, op)


def hcat(xs):
    """Concatenate rank-2 tensors along columns."""
    for t in xs:
        if t.ndim != 2:
            raise DimensionError(f"hcat expects rank-2 tensors, got {t.shape}")
    return _concat_axis(xs, 1, "hcat")


def vstack(xs):
    """Concatenate rank-2 tensors along rows."""
    for t in xs:
        if t.ndim != 2:
            raise DimensionError(f"vstack expects rank-2 tensors, got {t.shape}")
    return _concat_axis(xs, 0, "vstack")


def reduce_max(xs):
    """Elementwise maximum across a non-empty list of same-shape tensors.

    Gradient flows to the argmax element per coordinate; ties break toward
    the lowest list index.
    """
    if not xs:
        raise ValueError("reduce_max of an empty list")
    shape = xs[0].shape
    for t in xs:
        if t.shape != shape:
            raise DimensionError("reduce_max inputs must share a shape")
    tape = _find_tape(xs)
    stacked = np.stack([t.data for t in xs])
    sel = stacked.argmax(axis=0)          # first occurrence wins ties
    if tape is not None:
        tape._branch(sel)
    out = np.take_along_axis(stacked, sel[None], axis=0)[0].reshape(shape)

    def backward_fn(g):
        g = g.reshape(-1)
        return tuple(np.where(sel == i, g, 0) for i in range(len(xs)))

    return _emit(tape, tuple(xs), out, backward_fn, "reduce_max")


def amax(x, axis):
    """Maximum along one axis; gradient routed to the first argmax."""
    xa = x.array()
    tape = _find_tape((x,))
    sel = xa.argmax(axis=axis)
    if tape is not None:
        tape._branch(sel)
    out = np.take_along_axis(xa, np.expand_dims(sel, axis), axis=axis)
    out = np.squeeze(out, axis=axis)

    def backward_fn(g):
        gx = np.zeros_like(xa)
        np.put_along_axis(gx, np.expand_dims(sel, axis),
                          np.expand_dims(g.reshape(out.shape), axis), axis=axis)
        return (gx.reshape(-1),)

    return _emit(tape, (x,), out, backward_fn, "amax")


def gather_rows(x, idx):
    """Select rows of a rank-2 tensor; idx may have any shape.

    Output shape is idx.shape + (columns,).  Backward scatter-adds.
    """
    if x.ndim != 2:
        raise DimensionError(f"gather_rows expects rank-2, got {x.shape}")
    idx = np.asarray(idx)
    xa = x.array()
    out = xa[idx.reshape(-1)].reshape(idx.shape + (x.shape[1],))
    tape = _find_tape((x,))

    def backward_fn(g):
        gx = np.zeros_like(xa)
        np.add.at(gx, idx.reshape(-1), g.reshape(-1, x.shape[1]))
        return (gx.reshape(-1),)

    return _emit(tape, (x,), out, backward_fn, "gather_rows")


def take(x, idx):
    """Gather arbitrary elements of the flattened tensor."""
    idx = np.asarray(idx)
    out = x.data[idx.reshape(-1)].reshape(idx.shape)
    tape = _find_tape((x,))

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx.reshape(-1), g.reshape(-1))
        return (gx,)

    return _emit(tape, (x,), out, backward_fn, "take")


def reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    tape = _find_tape((x,))

    def backward_fn(g):
        return (g.reshape(-1),)

    return _emit(tape, (x,), x.data.reshape(shape), backward_fn, "reshape")


def slice_cols(x, start, stop):
    """Columns [start, stop) of a rank-2 tensor."""
    if x.ndim != 2:
        raise DimensionError(f"slice_cols expects rank-2, got {x.shape}")
    xa = x.array()
    out = np.ascontiguousarray(xa[:, start:stop])
    tape = _find_tape((x,))

    def backward_fn(g):
        gx = np.zeros_like(xa)
        gx[:, start:stop] = g.reshape(out.shape)
        return (gx.reshape(-1),)

    return _emit(tape, (x,), out, backward_fn, "slice_cols")


def _binary(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return _find_tape((a, b))


def add(a, b):
    tape = _binary(a, b, "add")

    def backward_fn(g):
        return g, g

    return _emit(tape, (a, b), (a.data + b.data).reshape(a.shape), backward_fn, "add")


def sub(a, b):
    tape = _binary(a, b, "sub")

    def backward_fn(g):
        return g, -g

    return _emit(tape, (a, b), (a.data - b.data).reshape(a.shape), backward_fn, "sub")


def mul(a, b):
    tape = _binary(a, b, "mul")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return g * bd, g * ad

    return _emit(tape, (a, b), (ad * bd).reshape(a.shape), backward_fn, "mul")


def div(a, b):
    tape = _binary(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward_fn(g):
        return g / bd, -g * out / bd

    return _emit(tape, (a, b), out.reshape(a.shape), backward_fn, "div")


def scale(x, c):
    c = float(c)
    tape = _find_tape((x,))

    def backward_fn(g):
        return (g * c,)

    return _emit(tape, (x,), (x.data * c).reshape(x.shape), backward_fn, "scale")


def add_scalar(x, c):
    c = float(c)
    tape = _find_tape((x,))

    def backward_fn(g):
        return (g,)

    return _emit(tape, (x,), (x.data + c).reshape(x.shape), backward_fn, "add_scalar")


def sum_axis(x, axis=None):
    """Sum along one axis, or all entries (scalar output) when axis is None."""
    xa = x.array()
    tape = _find_tape((x,))
    if axis is None:
        out = xa.sum(dtype=xa.dtype).reshape(())

        def backward_fn(g):
            return (np.full_like(x.data, g.reshape(())),)
    else:
        out = xa.sum(axis=axis)

        def backward_fn(g):
            g = np.expand_dims(g.reshape(out.shape), axis)
            return (np.ascontiguousarray(np.broadcast_to(g, xa.shape)).reshape(-1),)

    return _emit(tape, (x,), out, backward_fn, "sum_axis")


def matmul(a, b):
    """Plain (p,q) @ (q,r) product (BLAS; not used where bitwise row order matters)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    aa, ba = a.array(), b.array()
    tape = _find_tape((a, b))

    def backward_fn(g):
        g2 = g.reshape(aa.shape[0], ba.shape[1])
        return g2 @ ba.T, aa.T @ g2

    return _emit(tape, (a, b), aa @ ba, backward_fn, "matmul")


def log2_1p(x):
    """log2(1 + x), for x > -1."""
    xa = x.data
    tape = _find_tape((x,))
    out = (np.log1p(xa) / _LN2).reshape(x.shape)

    def backward_fn(g):
        return (g / ((1.0 + xa) * _LN2),)

    return _emit(tape, (x,), out, backward_fn, "log2_1p")


def sqrt(x):
    tape = _find_tape((x,))
    out = np.sqrt(x.data)

    def backward_fn(g):
        return (g * (0.5 / out),)

    return _emit(tape, (x,), out.reshape(x.shape), backward_fn, "sqrt")


def minimum(a, b):
    """Elementwise min; gradient goes to a where a < b, else to b."""
    tape = _binary(a, b, "minimum")
    mask = a.data < b.data
    if tape is not None:
        tape._branch(mask)
    out = np.where(mask, a.data, b.data).reshape(a.shape)

    def backward_fn(g):
        g = g.reshape(-1)
        return np.where(mask, g, 0), np.where(mask, 0, g)

    return _emit(tape, (a, b), out, backward_fn, "minimum")


def rowscale(x, s):
    """Scale each row of a rank-2 tensor by a per-row factor."""
    if x.ndim != 2 or s.ndim != 1 or s.shape[0] != x.shape[0]:
        raise DimensionError(f"rowscale: x {x.shape}, s {s.shape}")
    xa, sa = x.array(), s.data
    tape = _find_tape((x, s))

    def backward_fn(g):
        g2 = g.reshape(xa.shape)
        return (g2 * sa[:, None]).reshape(-1), (g2 * xa).sum(axis=1)

    return _emit(tape, (x, s), xa * sa[:, None], backward_fn, "rowscale")


def complex_inner(h, v):
    """Hermitian inner product h^H v of two equal-length complex vectors.

    Returns a length-1 ComplexSplit; differentiable through all four parts.
    """
    if h.shape != v.shape or h.re.ndim != 1:
        raise DimensionError(f"complex_inner: shapes {h.shape} vs {v.shape}")
    rr = sum_axis(mul(h.re, v.re))
    ii = sum_axis(mul(h.im, v.im))
    ri = sum_axis(mul(h.re, v.im))
    ir = sum_axis(mul(h.im, v.re))
    re = reshape(add(rr, ii), (1,))
    im = reshape(sub(ri, ir), (1,))
    return ComplexSplit(re, im)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    """Per-coordinate comparison of tape gradients against central differences.

    rel_err entries are NaN for excluded coordinates (finite-difference probe
    crossed a ReLU kink or a max/min selection boundary).
    """

    rel_err: list
    excluded: list
    tolerance: float

    def _included(self):
        vals = np.concatenate([r.reshape(-1) for r in self.rel_err])
        return vals[~np.isnan(vals)]

    @property
    def n_coords(self):
        return sum(r.size for r in self.rel_err)

    @property
    def n_excluded(self):
        return sum(int(e.sum()) for e in self.excluded)

    @property
    def max_rel_err(self):
        inc = self._included()
        return float(inc.max()) if inc.size else 0.0

    def fraction_within(self, tol=None):
        inc = self._included()
        if inc.size == 0:
            return 1.0
        return float((inc <= (tol or self.tolerance)).mean())

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance


def _eval_branches(build, arrays):
    tape = Tape(record_grad=False, record_branches=True)
    leaves = [tape.leaf(a) for a in arrays]
    out = build(tape, *leaves)
    return out.item(), tape.branches


def grad_check(build, point, step=1e-5, tolerance=1e-3):
    """Compare tape gradients of a scalar function against central differences.

    ``build(tape, *leaves) -> scalar Tensor`` defines the function; ``point``
    is the list of leaf arrays to evaluate at.  Runs in 64-bit mode.  A
    coordinate whose +/- step evaluations disagree on any ReLU mask or
    argmax/min selection is excluded from the comparison (the difference
    quotient straddles a kink there).
    """
    point = [np.asarray(p, dtype=np.float64) for p in point]
    with precision(64):
        tape = Tape(record_branches=True)
        leaves = [tape.leaf(p) for p in point]
        loss = build(tape, *leaves)
        tape.backward(loss)
        tape_grads = [leaf.grad.copy() for leaf in leaves]

        gscale = max((float(np.abs(g).max()) for g in tape_grads if g.size),
                     default=0.0)
        floor = max(1e-300, 1e-9 * max(1.0, gscale))

        rel_err, excluded = [], []
        for li, base in enumerate(point):
            flat = base.reshape(-1)
            re_li = np.full(flat.shape, np.nan)
            ex_li = np.zeros(flat.shape, dtype=bool)
            for ci in range(flat.size):
                saved = flat[ci]
                flat[ci] = saved + step
                f_plus, br_plus = _eval_branches(build, point)
                flat[ci] = saved - step
                f_minus, br_minus = _eval_branches(build, point)
                flat[ci] = saved
                if br_plus != br_minus:
                    ex_li[ci] = True
                    continue
                fd = (f_plus - f_minus) / (2.0 * step)
                gt = tape_grads[li].reshape(-1)[ci]
                re_li[ci] = abs(gt - fd) / max(abs(gt), abs(fd), floor)
            rel_err.append(re_li.reshape(base.shape))
            excluded.append(ex_li.reshape(base.shape))

    return GradCheckReport(rel_err, excluded, tolerance)
