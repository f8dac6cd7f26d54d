"""Tape-based reverse-mode automatic differentiation.

Values are floats or numpy arrays. Every differentiable operation appends one
node to a :class:`Tape`; :meth:`Tape.backward` walks the nodes in reverse and
accumulates adjoints. Plain floats/arrays (and ``Var`` objects without a
``node_id``) act as constants.

The module-level functions (``exp``, ``log``, ``maximum``, ``where`` ...) accept
either plain numbers or ``Var`` so that the circuit code in :mod:`dpisim.dpi_core`
can run unchanged in inference (numpy) and training (tape) mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Var", "Tape", "Gradients", "SurrogateSpec", "TapeError",
    "record", "backward", "value_of", "is_var",
    "exp", "log", "sqrt", "absolute", "maximum", "minimum", "where", "clip",
    "sum", "mean", "matmul", "transpose", "logistic", "power",
    "spike_surrogate", "ste_round", "round_half_away", "checkpoint",
]


class TapeError(RuntimeError):
    """Raised when Vars from different tapes are combined or a Var is not on the tape."""


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if shape is None or type(g) is _Cotangent:
        return g
    if (g.shape if type(g) is np.ndarray else ()) == shape:
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    if shape == ():
        return float(g)
    return g


class _Node:
    __slots__ = ("kind", "parents", "partials", "vjp", "shape")

    def __init__(self, kind, parents, partials, vjp, shape):
        self.kind = kind
        self.parents = parents
        self.partials = partials
        self.vjp = vjp
        self.shape = shape


class Gradients(dict):
    """Map ``node_id -> adjoint``. Missing nodes (and constants) have zero gradient."""

    def __missing__(self, key):
        return 0.0

    def __getitem__(self, key):
        if isinstance(key, Var):
            if key.node_id is None:
                return np.zeros_like(key.value) if np.ndim(key.value) else 0.0
            key = key.node_id
        return super().__getitem__(key)


class Tape:
    """Ordered record of differentiable operations.

    Not thread-safe; use one tape per sample / per mismatch draw.
    """

    __slots__ = ("nodes", "marks")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.marks: list[int] = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value, kind: str = "leaf") -> "Var":
        """Register an independent variable."""
        value = _as_value(value)
        self.nodes.append(_Node(kind, (), (), None, np.shape(value)))
        return Var(value, self, len(self.nodes) - 1)

    def mark(self):
        self.marks.append(len(self.nodes))

    def backward(self, output: "Var", seed=None) -> Gradients:
        return backward(self, output, seed)


class Var:
    """A value optionally attached to a node on a tape."""

    __slots__ = ("value", "tape", "node_id")
    __array_priority__ = 100.0

    def __init__(self, value, tape: Tape | None = None, node_id: int | None = None):
        self.value = value
        self.tape = tape
        self.node_id = node_id

    def __repr__(self):
        return f"Var({self.value!r}, node_id={self.node_id})"

    @property
    def shape(self):
        return np.shape(self.value)

    def __float__(self):
        return float(self.value)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(other, self)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(other, self)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __neg__(self):
        return record("neg", [self], -self.value, [-1.0])

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        shape = np.shape(self.value)

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return record("index", [self], self.value[idx], vjp=vjp)

    # comparisons act on values only (no gradient)
    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)


def _as_value(x):
    if isinstance(x, np.ndarray):
        return x.astype(np.float64, copy=False)
    if isinstance(x, (list, tuple)):
        return np.asarray(x, dtype=np.float64)
    return float(x)


def is_var(x) -> bool:
    return isinstance(x, Var) and x.node_id is not None


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var) and a.node_id is not None:
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TapeError("cannot combine Vars recorded on different tapes")
    return tape


def record(op_kind: str, parents: Sequence, value, partials: Sequence | None = None,
           vjp: Callable | None = None) -> Var | float | np.ndarray:
    """Append a node computing ``value`` from ``parents``.

    ``partials[i]`` is the elementwise derivative of the output w.r.t. parent i
    (broadcast against the output shape), or a callable ``g -> parent adjoint``.
    Alternatively ``vjp(g)`` returns the adjoints of all parents at once.
    If no parent lives on a tape the plain value is returned.
    """
    tape = None
    ids = []
    for p in parents:
        if type(p) is Var and p.node_id is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise TapeError("cannot combine Vars recorded on different tapes")
            ids.append(p.node_id)
        else:
            ids.append(None)
    if tape is None:
        return value
    if vjp is None:
        if len(partials) != len(parents):
            raise ValueError("need one partial per parent")
        partials = [d if i is not None else None for d, i in zip(partials, ids)]
    shape = value.shape if type(value) is np.ndarray else ()
    tape.nodes.append(_Node(op_kind, ids, partials, vjp, shape))
    return Var(value, tape, len(tape.nodes) - 1)


def backward(tape: Tape, output: Var, seed=None) -> Gradients:
    """Reverse sweep from ``output``; returns adjoints for every reached node."""
    if not isinstance(output, Var) or output.node_id is None or output.tape is not tape:
        raise TapeError("output is not recorded on this tape")
    nodes = tape.nodes
    adj: list = [None] * (output.node_id + 1)
    adj[output.node_id] = np.ones_like(output.value) if seed is None else seed
    if np.ndim(adj[output.node_id]) == 0:
        adj[output.node_id] = float(adj[output.node_id])
    for nid in range(output.node_id, -1, -1):
        g = adj[nid]
        if g is None:
            continue
        node = nodes[nid]
        if not node.parents:
            continue
        if node.vjp is not None:
            contribs = node.vjp(g)
        else:
            contribs = []
            for pid, d in zip(node.parents, node.partials):
                if pid is None:
                    contribs.append(None)
                elif callable(d):
                    contribs.append(d(g))
                else:
                    contribs.append(g * d)
        for pid, c in zip(node.parents, contribs):
            if pid is None or c is None:
                continue
            c = _unbroadcast(c, nodes[pid].shape)
            prev = adj[pid]
            adj[pid] = c if prev is None else prev + c
    grads = Gradients()
    for nid, g in enumerate(adj):
        if g is not None:
            grads[nid] = g
    return grads


# elementary operations -----------------------------------------------------

def _add(a, b):
    return record("add", [a, b], value_of(a) + value_of(b), [1.0, 1.0])


def _sub(a, b):
    return record("sub", [a, b], value_of(a) - value_of(b), [1.0, -1.0])


def _mul(a, b):
    va, vb = value_of(a), value_of(b)
    return record("mul", [a, b], va * vb, [vb, va])


def _div(a, b):
    va, vb = value_of(a), value_of(b)
    out = va / vb
    return record("div", [a, b], out, [1.0 / vb, -out / vb])


def exp(x):
    out = np.exp(value_of(x))
    return record("exp", [x], out, [out])


def log(x):
    v = value_of(x)
    return record("log", [x], np.log(v), [1.0 / v])


def sqrt(x):
    out = np.sqrt(value_of(x))
    return record("sqrt", [x], out, [0.5 / out])


def power(x, p: float):
    v = value_of(x)
    return record("pow", [x], v ** p, [p * v ** (p - 1)])


def absolute(x):
    v = value_of(x)
    return record("abs", [x], np.abs(v), [np.sign(v)])


def maximum(x, floor):
    """Elementwise max; the gradient goes to whichever argument is selected (ties -> x)."""
    vx, vf = value_of(x), value_of(floor)
    sel = vx >= vf
    return record("max", [x, floor], np.where(sel, vx, vf) if np.ndim(sel) else (vx if sel else vf),
                  [sel * 1.0, 1.0 - sel])


def minimum(x, cap):
    vx, vc = value_of(x), value_of(cap)
    sel = vx <= vc
    return record("min", [x, cap], np.where(sel, vx, vc) if np.ndim(sel) else (vx if sel else vc),
                  [sel * 1.0, 1.0 - sel])


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


def where(cond, a, b):
    """``cond`` is a plain boolean mask (never differentiated)."""
    cond = np.asarray(value_of(cond), dtype=bool)
    va, vb = value_of(a), value_of(b)
    out = np.where(cond, va, vb)
    if out.ndim == 0:
        out = float(out)
    return record("where", [a, b], out, [cond * 1.0, (~cond) * 1.0])


def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    v = value_of(x)
    shape = np.shape(v)
    out = np.sum(v, axis=axis)
    if np.ndim(out) == 0:
        out = float(out)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy() if shape else g,)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record("sum", [x], out, vjp=vjp)


def mean(x, axis=None):
    n = np.size(value_of(x)) if axis is None else np.shape(value_of(x))[axis]
    return sum(x, axis) * (1.0 / n)


def matmul(a, b):
    va, vb = value_of(a), value_of(b)
    out = va @ vb

    def vjp(g):
        ga = gb = None
        if is_var(a):
            ga = np.outer(g, vb) if np.ndim(vb) == 1 else g @ np.swapaxes(vb, -1, -2)
        if is_var(b):
            gb = np.outer(va, g) if np.ndim(va) == 1 else np.swapaxes(va, -1, -2) @ g
        return (ga, gb)

    return record("matmul", [a, b], out, vjp=vjp)


def transpose(x):
    return record("transpose", [x], np.transpose(value_of(x)), vjp=lambda g: (np.transpose(g),))


def logistic(x):
    v = value_of(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * v))
    return record("logistic", [x], out, [out * (1.0 - out)])


# spikes and quantization ---------------------------------------------------

@dataclass(frozen=True)
class SurrogateSpec:
    """Pseudo-derivative of the spike step.

    ``width`` is in amperes (boxcar support), ``slope`` in 1/A (fast sigmoid).
    The fast-sigmoid density ``slope / (1 + slope |x|)^2`` peaks at ``slope``
    and has area 2; the smooth forward step uses half of it so it rises by one.
    With ``smooth_forward`` the forward pass uses the primitive of the
    surrogate instead of the hard step, so finite differences see the same
    function the backward pass differentiates. ``detach_reset`` stops the
    gradient through the reset branch of the membrane update.
    """

    kind: str = "boxcar"
    width: float = 1e-11
    slope: float = 1e11
    smooth_forward: bool = False
    detach_reset: bool = False

    def __post_init__(self):
        if self.kind not in ("boxcar", "fast_sigmoid"):
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if not (np.all(np.asarray(self.width) > 0) and np.all(np.asarray(self.slope) > 0)):
            raise ValueError("surrogate width and slope must be > 0")

    @classmethod
    def for_threshold(cls, threshold: float, kind: str = "boxcar", frac: float = 0.1,
                      smooth_forward: bool = False,
                      detach_reset: bool = False) -> "SurrogateSpec":
        """Default sizing: support/scale set to ``frac`` of the threshold current."""
        w = frac * threshold
        return cls(kind=kind, width=w, slope=1.0 / w, smooth_forward=smooth_forward,
                   detach_reset=detach_reset)

    def density(self, x):
        if self.kind == "boxcar":
            return (np.abs(x) < 0.5 * self.width) / self.width
        return self.slope / (1.0 + self.slope * np.abs(x)) ** 2

    def smooth(self, x):
        """Smooth stand-in for H(x); its derivative is what backward uses in smooth mode."""
        if self.kind == "boxcar":
            return np.clip(x / self.width + 0.5, 0.0, 1.0)
        return 0.5 * (1.0 + self.slope * x / (1.0 + self.slope * np.abs(x)))

    def smooth_density(self, x):
        if self.kind == "boxcar":
            return self.density(x)
        return 0.5 * self.density(x)


def spike_surrogate(i_mem, threshold, spec: SurrogateSpec):
    """Heaviside H(i_mem - threshold) with a surrogate backward pass."""
    x = value_of(i_mem) - value_of(threshold)
    if spec.smooth_forward:
        out = spec.smooth(x)
        d = spec.smooth_density(x)
    else:
        out = (x >= 0) * 1.0
        d = spec.density(x)
    if np.ndim(out) == 0:
        out = float(out)
    return record("spike", [i_mem, threshold], out, [d, -d])


def round_half_away(x):
    """Round to nearest integer, halves away from zero (so -0.5 -> -1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return float(out) if out.ndim == 0 else out


def ste_round(x):
    """Rounding in the forward pass, identity in the backward pass."""
    return record("ste_round", [x], round_half_away(value_of(x)), [1.0])


# checkpointing -------------------------------------------------------------

def checkpoint(fn: Callable, *args, plain_outputs: Sequence[int] = ()):
    """Run ``fn(*args)`` without recording its internals; recompute on backward.

    ``fn`` must return a tuple of values/Vars and be deterministic; outputs
    listed in ``plain_outputs`` are returned as plain values (non-differentiable
    bookkeeping such as refractory clocks). Only the
    inputs and outputs of the segment stay on the tape, which bounds memory
    on long simulations at the cost of one extra forward pass per segment.
    """
    tape = _tape_of(args)
    plain = [value_of(a) for a in args]
    outs = fn(*plain)
    if tape is None:
        return outs
    tape.mark()
    var_pos = [i for i, a in enumerate(args) if is_var(a)]
    shapes = [np.shape(o) for o in outs]

    def segment_vjp(cots):
        sub = Tape()
        inputs = list(plain)
        leaves = {}
        for i in var_pos:
            leaves[i] = sub.var(plain[i])
            inputs[i] = leaves[i]
        res = fn(*inputs)
        total = None
        for r, c in zip(res, cots):
            if c is None or not is_var(r):
                continue
            term = sum(r * c)
            total = term if total is None else total + term
        grads_in = [None] * len(args)
        if total is not None:
            g = sub.backward(total)
            for i in var_pos:
                grads_in[i] = g[leaves[i]]
        return tuple(grads_in)

    # hub node carries the tuple of output cotangents
    hub = _Node("segment", tuple(a.node_id if is_var(a) else None for a in args), None,
                segment_vjp, None)
    tape.nodes.append(hub)
    hub_id = len(tape.nodes) - 1
    results = []
    for k, o in enumerate(outs):
        if k in plain_outputs:
            results.append(value_of(o))
            continue

        def take(g, k=k, n=len(outs)):
            cot = [None] * n
            cot[k] = g
            return (_Cotangent(cot),)
        tape.nodes.append(_Node("select", (hub_id,), None, take, shapes[k]))
        results.append(Var(value_of(o), tape, len(tape.nodes) - 1))
    return tuple(results)


class _Cotangent(tuple):
    """Tuple of per-output adjoints accumulated at a checkpoint hub."""

    def __add__(self, other):
        return _Cotangent(a if b is None else b if a is None else a + b for a, b in zip(self, other))

