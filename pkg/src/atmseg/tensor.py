"""Dense float64 tensors with a reverse-mode gradient tape.

Every array value in this package is a :class:`Tensor` wrapping a contiguous
numpy float64 buffer.  Operations run eagerly; when an active :class:`Tape`
exists and any operand participates in differentiation, the operation also
records a node whose ``grad_fn`` maps the output gradient to input gradients.
``backward`` replays the tape once in reverse and leaves one gradient per
differentiable leaf.

Broadcasting is deliberately narrow: two shapes conform only when equal, or
when the smaller shape equals the trailing axes of the larger (a rank-0
scalar conforms with anything).  There is no silent expansion of unit axes.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf


class ContractViolation(ValueError):
    """An operation was called outside its documented domain."""


class BoundsError(IndexError):
    """An index-taking operation received an out-of-range index."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (detached loss, double backward, ...)."""


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)

_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; scalars go through scale / constant shift
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tensor_mean(self, axis)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class TapeNode:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "output", "grad_fn")

    def __init__(self, op, inputs, output, grad_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Tape:
    """Append-only record of primitive applications, consumed by backward.

    A tape is confined to one thread.  Use as a context manager::

        with Tape() as tape:
            loss = model_loss(...)
        grads = backward(loss, tape)
    """

    def __init__(self):
        self.nodes = []
        self.gradients = {}
        self._next_id = 0
        self._leaves = {}
        self._spent = False

    def __enter__(self):
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tape = None
        return False

    def _register_input(self, t: Tensor) -> int:
        if t._tape is self and t.node_id is not None:
            return t.node_id
        nid = self._next_id
        self._next_id += 1
        t.node_id = nid
        t._tape = self
        if t.requires_grad:
            self._leaves[nid] = t
        return nid

    def _register_output(self, t: Tensor) -> int:
        nid = self._next_id
        self._next_id += 1
        t.node_id = nid
        t._tape = self
        return nid

    def grad(self, t: Tensor):
        """Gradient Tensor for ``t`` after backward, or None."""
        if t._tape is not self or t.node_id is None:
            return None
        return self.gradients.get(t.node_id)


def _record(op: str, out: Tensor, inputs, grad_fn) -> Tensor:
    tape = _active_tape()
    req = any(t.requires_grad for t in inputs)
    out.requires_grad = req
    if tape is not None and req and not tape._spent:
        ids = tuple(tape._register_input(t) for t in inputs)
        oid = tape._register_output(out)
        tape.nodes.append(TapeNode(op, ids, oid, grad_fn))
    return out


def backward(loss: Tensor, tape: Tape):
    """Reverse-accumulate gradients of a scalar loss over the tape.

    Returns (and stores on the tape) a map node_id -> gradient Tensor with
    one entry per requires_grad leaf.  A second call on the same tape is
    rejected; record a fresh tape instead.
    """
    if loss.shape != ():
        raise ContractViolation(
            f"backward: loss must be a scalar, got shape {loss.shape}"
        )
    if loss._tape is not tape or loss.node_id is None:
        raise TapeError("backward: loss is not on tape")
    if tape._spent:
        raise TapeError("backward: tape already consumed; re-record the graph")
    tape._spent = True

    grads = {loss.node_id: np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        for iid, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None:
                continue
            acc = grads.get(iid)
            grads[iid] = gi if acc is None else acc + gi

    result = {}
    for nid, leaf in tape._leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(leaf.data)
        result[nid] = Tensor(np.asarray(g, dtype=np.float64))
    tape.gradients = result
    tape.nodes.clear()
    return result


# ---------------------------------------------------------------------------
# shape plumbing

def _conform(op: str, sa, sb):
    if sa == sb:
        return sa
    if len(sa) == 0:
        return sb
    if len(sb) == 0:
        return sa
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ContractViolation(f"{op}: shapes {sa} and {sb} do not conform")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _conform("add", a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _conform("sub", a.shape, b.shape)
    out = Tensor(a.data - b.data)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _conform("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def grad_fn(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record("mul", out, (a, b), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)

    def grad_fn(g):
        return (g * s,)

    return _record("scalar-scale", out, (a,), grad_fn)


def row_scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply each leading-index slice a[i] by the scalar s[i]."""
    if s.data.ndim != 1 or s.shape[0] != a.shape[0]:
        raise ContractViolation(
            f"row_scale: need one factor per row, got {a.shape} and {s.shape}"
        )
    sd = s.data.reshape((-1,) + (1,) * (a.data.ndim - 1))
    ad = a.data
    out = Tensor(ad * sd)

    def grad_fn(g):
        axes = tuple(range(1, ad.ndim))
        return g * sd, (g * ad).sum(axis=axes)

    return _record("row-scale", out, (a, s), grad_fn)


# ---------------------------------------------------------------------------
# movement

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ContractViolation(
            f"reshape: cannot view shape {a.shape} as {shape}"
        )
    old = a.shape
    out = Tensor(a.data.reshape(shape))

    def grad_fn(g):
        return (g.reshape(old),)

    return _record("reshape", out, (a,), grad_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ContractViolation(
            f"transpose: axes {axes} are not a permutation for shape {a.shape}"
        )
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))

    def grad_fn(g):
        return (g.transpose(inv),)

    return _record("transpose", out, (a,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractViolation("concat: need at least one tensor")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(tensors), grad_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ContractViolation(
            f"slice: range [{start}, {stop}) invalid for extent {n} on axis {axis}"
        )
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(np.ascontiguousarray(a.data[index]))
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return _record("slice", out, (a,), grad_fn)


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise BoundsError(
            f"gather-rows: index out of range for {n} rows "
            f"(got min {idx.min()}, max {idx.max()})"
        )
    out = Tensor(a.data[idx])
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return _record("gather-rows", out, (a,), grad_fn)


def scatter_rows(values: Tensor, indices, num_rows: int) -> Tensor:
    """Place rows of ``values`` at ``indices`` of a zero tensor; duplicates add."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[0] != values.shape[0]:
        raise ContractViolation(
            f"scatter-rows: {idx.shape[0]} indices for {values.shape[0]} rows"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise BoundsError(f"scatter-rows: index out of range for {num_rows} rows")
    full = np.zeros((num_rows,) + values.shape[1:], dtype=np.float64)
    np.add.at(full, idx, values.data)
    out = Tensor(full)

    def grad_fn(g):
        return (g[idx],)

    return _record("scatter-rows", out, (values,), grad_fn)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    return gather_rows(table, indices)


# ---------------------------------------------------------------------------
# reductions

def _reduce_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(int(x) % ndim for x in axis)


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    axes = _reduce_axes(axis, a.data.ndim)
    out = Tensor(a.data.sum(axis=axes))
    shape = a.shape

    def grad_fn(g):
        ge = np.expand_dims(g, axes) if g.ndim else g
        return (np.broadcast_to(ge, shape).copy(),)

    return _record("sum", out, (a,), grad_fn)


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    axes = _reduce_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = Tensor(a.data.mean(axis=axes))
    shape = a.shape

    def grad_fn(g):
        ge = np.expand_dims(g, axes) if g.ndim else g
        return (np.broadcast_to(ge, shape).copy() / count,)

    return _record("mean", out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    e = np.exp(ad - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", out, (a,), grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    y = np.empty_like(ad)
    pos = ad >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    y[~pos] = ex / (1.0 + ex)
    # keep outputs strictly inside (0, 1) even for extreme finite inputs
    np.clip(y, _SIG_LO, _SIG_HI, out=y)
    out = Tensor(y)

    def grad_fn(g):
        return (g * y * (1.0 - y),)

    return _record("sigmoid", out, (a,), grad_fn)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact-erf gaussian error linear unit."""
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    out = Tensor(ad * cdf)

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * ad * ad)
        return (g * (cdf + ad * pdf),)

    return _record("gelu", out, (a,), grad_fn)


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize along the last axis to zero mean / unit variance."""
    ad = a.data
    mu = ad.mean(axis=-1, keepdims=True)
    xc = ad - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y)
    n = a.shape[-1]

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record("layer-norm", out, (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    ad = a.data
    if ad.size and ad.min() <= 0:
        raise ContractViolation("log: inputs must be strictly positive")
    out = Tensor(np.log(ad))

    def grad_fn(g):
        return (g / ad,)

    return _record("log", out, (a,), grad_fn)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a real exponent; requires positive base."""
    p = float(p)
    ad = a.data
    if ad.size and ad.min() < 0:
        raise ContractViolation("power: base must be non-negative")
    y = ad ** p
    out = Tensor(y)

    def grad_fn(g):
        return (g * p * ad ** (p - 1.0),)

    return _record("power", out, (a,), grad_fn)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    out = Tensor(np.clip(ad, lo, hi))
    inside = (ad >= lo) & (ad <= hi)

    def grad_fn(g):
        return (g * inside,)

    return _record("clamp", out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ContractViolation(
            f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}"
        )
    if ad.shape[-1] != bd.shape[-2]:
        raise ContractViolation(
            f"matmul: inner extents differ, {a.shape} x {b.shape}"
        )
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ContractViolation(
            f"matmul: leading axes must match exactly, {a.shape} x {b.shape}"
        )
    out = Tensor(ad @ bd)

    def grad_fn(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _record("matmul", out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# bilinear resampling

def _source_coords(n_out: int, n_in: int):
    # half-pixel-center convention; lower edge clamped so constants reproduce
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.maximum(pos, 0.0)
    i0 = np.minimum(pos.astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = pos - i0
    return i0, i1, t


def bilinear_upsample2d(x: Tensor, target) -> Tensor:
    """Resample planes [N, h, w] to [N, H, W] with half-pixel alignment."""
    H, W = (int(v) for v in target)
    if x.data.ndim != 3:
        raise ContractViolation(
            f"bilinear_upsample2d: expected [N, h, w], got {x.shape}"
        )
    if H < 1 or W < 1:
        raise ContractViolation(
            f"bilinear_upsample2d: target extents must be >= 1, got {(H, W)}"
        )
    n, h, w = x.shape
    r0, r1, tr = _source_coords(H, h)
    c0, c1, tc = _source_coords(W, w)
    wr0, wr1 = (1.0 - tr)[:, None], tr[:, None]
    wc0, wc1 = (1.0 - tc)[None, :], tc[None, :]
    xd = x.data
    y = (
        xd[:, r0][:, :, c0] * (wr0 * wc0)
        + xd[:, r0][:, :, c1] * (wr0 * wc1)
        + xd[:, r1][:, :, c0] * (wr1 * wc0)
        + xd[:, r1][:, :, c1] * (wr1 * wc1)
    )
    out = Tensor(y)

    def grad_fn(g):
        gx = np.zeros((n, h, w), dtype=np.float64)
        for rows, wrow in ((r0, wr0), (r1, wr1)):
            for cols, wcol in ((c0, wc0), (c1, wc1)):
                contrib = g * (wrow * wcol)
                # scatter rows then columns; add.at keeps duplicates correct
                tmp = np.zeros((n, h, W), dtype=np.float64)
                np.add.at(tmp, (slice(None), rows), contrib)
                np.add.at(gx, (slice(None), slice(None), cols), tmp)
        return (gx,)

    out = _record("bilinear-upsample2d", out, (x,), grad_fn)
    return out


# ---------------------------------------------------------------------------
# primitive dispatch by id

_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-scale": scale,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *ts, axis=0: concat(ts, axis),
    "slice": slice_axis,
    "gather-rows": gather_rows,
    "scatter-rows": scatter_rows,
    "mean": tensor_mean,
    "sum": tensor_sum,
    "softmax": softmax,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "layer-norm": layer_norm,
    "embedding-lookup": embedding_lookup,
}


def primitive_suite(inputs, op: str, **params) -> Tensor:
    """Apply one primitive by id to a list of input tensors."""
    fn = _PRIMITIVES.get(op)
    if fn is None:
        raise ContractViolation(f"unknown primitive id: {op!r}")
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f, x: Tensor, step: float = 1e-4, max_coords=None,
                      seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued tensor function of ``x``.
    When ``max_coords`` is given, a fixed-seed subset of coordinates is
    probed instead of all of them.
    """
    if step <= 0:
        raise ContractViolation("finite_diff_check: step must be positive")
    prev = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            y = f(x)
            if y.shape != ():
                raise ContractViolation(
                    f"finite_diff_check: f must be scalar-valued, got {y.shape}"
                )
            backward(y, tape)
        analytic = tape.grad(x).data.reshape(-1)
    finally:
        x.requires_grad = prev

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = Rng(seed).permutation(flat.size)[:max_coords]
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x).data)
        flat[i] = orig - step
        fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# seeded randomness

class Rng:
    """Counter-based random stream; one seed gives one sequence everywhere."""

    def __init__(self, seed: int, stream: int = 0):
        self._key = (int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream) & 0xFFFFFFFFFFFFFFFF)
        self._gen = np.random.Generator(np.random.Philox(key=self._key))

    def split(self, stream: int) -> "Rng":
        """Independent stream derived from the same seed."""
        return Rng(self._key[0], self._key[1] ^ int(stream))

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def truncated_normal(self, shape, std: float = 0.02) -> np.ndarray:
        """Normal draws redrawn while outside two standard deviations."""
        out = self._gen.normal(0.0, std, size=shape)
        bad = np.abs(out) > 2.0 * std
        while bad.any():
            out[bad] = self._gen.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > 2.0 * std
        return out

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        v = self._gen.integers(low, high, size=shape)
        return v if shape is not None else int(v)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    # exact state save/restore (all words fit u64)
    _STATE_WORDS = 13

    def state_words(self) -> np.ndarray:
        st = self._gen.bit_generator.state
        words = list(st["state"]["counter"]) + list(st["state"]["key"])
        words += list(st["buffer"])
        words += [st["buffer_pos"], st["has_uint32"], st["uinteger"]]
        return np.array(words, dtype=np.uint64)

    @classmethod
    def from_state_words(cls, words) -> "Rng":
        words = np.asarray(words, dtype=np.uint64)
        if words.shape != (cls._STATE_WORDS,):
            raise ContractViolation(
                f"Rng state must have {cls._STATE_WORDS} words, got {words.shape}"
            )
        rng = cls(0)
        rng._key = (int(words[4]), int(words[5]))
        rng._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {"counter": words[0:4], "key": words[4:6]},
            "buffer": words[6:10],
            "buffer_pos": int(words[10]),
            "has_uint32": int(words[11]),
            "uinteger": int(words[12]),
        }
        return rng
