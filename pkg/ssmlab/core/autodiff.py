"""
A minimal array-level reverse-mode tape.

Each primitive records its inputs, its output, the forward function that
produced it and a vector-Jacobian product. A tape created with
record=False runs the very same primitives without keeping records, so
taped and untaped forward passes agree bitwise.

The recurrence is recorded one whole scan step at a time (`scan_step`,
`decode_step`), keeping tape length linear in sequence length.
"""
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from ssmlab.core.errors import NonFiniteError, ShapeMismatchError
from ssmlab.core.scan import advance, decode

logger = logging.getLogger(__name__)

# time axis of (..., T, D, N) coefficient tensors
TIME_AXIS = -3


@dataclass
class Sparse:
    """Cotangent that is nonzero only at one index of one axis."""
    axis: int
    index: int
    value: np.ndarray


@dataclass
class Record:
    op: str
    inputs: Tuple['Var', ...]
    output: 'Var'
    forward: Callable[..., np.ndarray]
    vjp: Callable[[np.ndarray], Tuple[Any, ...]]


class Var:
    """An array value living on a tape."""
    __slots__ = ('value', 'tape', 'uid', 'name')
    __array_priority__ = 1000

    def __init__(self, value: np.ndarray, tape: 'Tape', uid: int, name: Optional[str] = None):
        self.value = value
        self.tape = tape
        self.uid = uid
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f'Var(uid={self.uid}, shape={self.shape}, name={self.name})'

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


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self, record: bool = True):
        self.record = record
        self.records: List[Record] = []
        self.leaves: Dict[str, Var] = {}
        self.watched: Dict[str, List[Var]] = {}
        self._next_uid = 0
        self.op_count = 0

    def __len__(self) -> int:
        return len(self.records)

    def _new(self, value: np.ndarray, name: Optional[str] = None) -> Var:
        var = Var(value, self, self._next_uid, name)
        self._next_uid += 1
        return var

    def leaf(self, value: Any, name: Optional[str] = None) -> Var:
        """Register an input or parameter tensor."""
        var = self._new(np.asarray(value), name)
        if name is not None:
            self.leaves[name] = var
        return var

    def constant(self, value: Any) -> Var:
        return self._new(np.asarray(value))

    def watch(self, name: str, var: Var) -> Var:
        """Mark an intermediate so its gradient is reported under `name`."""
        self.watched.setdefault(name, []).append(var)
        return var

    def emit(self, op: str, inputs: Sequence[Var], forward: Callable[..., np.ndarray],
             vjp_maker: Callable[..., Callable]) -> Var:
        """Run `forward` on the input values and record the result."""
        values = [v.value for v in inputs]
        out = forward(*values)
        index = self.op_count
        self.op_count += 1
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(
                f"Operation {index} ('{op}') produced non-finite values", operation_index=index, op=op
            )
        var = self._new(out)
        if self.record:
            self.records.append(Record(op=op, inputs=tuple(inputs), output=var, forward=forward,
                                       vjp=vjp_maker(*values, out)))
        return var

    def replay(self) -> Dict[int, np.ndarray]:
        """Re-run every record from the leaf values; returns values by uid."""
        values: Dict[int, np.ndarray] = {}
        for rec in self.records:
            args = [values[v.uid] if v.uid in values else v.value for v in rec.inputs]
            values[rec.output.uid] = rec.forward(*args)
        return values

    def verify_replay(self) -> bool:
        """True when a replay reproduces every recorded output bitwise."""
        values = self.replay()
        return all(np.array_equal(values[rec.output.uid], rec.output.value) for rec in self.records)

    def backward(self, output: Var, cotangent: Any) -> Dict[int, np.ndarray]:
        """
        Reverse sweep for the scalar <cotangent, output>.

        Returns:
            cotangent of every reached Var, keyed by uid
        """
        if not self.record:
            raise RuntimeError('backward needs a recording tape')
        cotangent = np.asarray(cotangent, dtype=output.value.dtype)
        if cotangent.shape != output.shape:
            raise ShapeMismatchError(
                f'Cotangent shape {cotangent.shape} does not match output shape {output.shape}',
                dimension='cotangent'
            )
        grads: Dict[int, np.ndarray] = {output.uid: cotangent.copy()}
        for rec in reversed(self.records):
            g = grads.get(rec.output.uid)
            if g is None:
                continue
            for var, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is not None:
                    _accumulate(grads, var, gi)
        return grads


def _accumulate(grads: Dict[int, np.ndarray], var: Var, g: Any) -> None:
    if isinstance(g, Sparse):
        acc = grads.get(var.uid)
        if acc is None:
            acc = np.zeros(var.shape, dtype=np.result_type(var.value, g.value))
            grads[var.uid] = acc
        np.moveaxis(acc, g.axis, 0)[g.index] += g.value
        return
    acc = grads.get(var.uid)
    if acc is None:
        grads[var.uid] = np.array(g, dtype=np.result_type(var.value, g), copy=True)
    else:
        acc += g


def unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast cotangent back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _tape_of(*args) -> Tape:
    for arg in args:
        if isinstance(arg, Var):
            return arg.tape
    raise TypeError('At least one argument must be a Var')


def _lift(tape: Tape, x: Any) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


# -- elementwise arithmetic ------------------------------------------------

def add(x, y) -> Var:
    tape = _tape_of(x, y)
    x, y = _lift(tape, x), _lift(tape, y)
    sx, sy = x.shape, y.shape
    return tape.emit('add', (x, y), np.add,
                     lambda xv, yv, out: lambda g: (unbroadcast(g, sx), unbroadcast(g, sy)))


def sub(x, y) -> Var:
    tape = _tape_of(x, y)
    x, y = _lift(tape, x), _lift(tape, y)
    sx, sy = x.shape, y.shape
    return tape.emit('sub', (x, y), np.subtract,
                     lambda xv, yv, out: lambda g: (unbroadcast(g, sx), unbroadcast(-g, sy)))


def mul(x, y) -> Var:
    tape = _tape_of(x, y)
    x, y = _lift(tape, x), _lift(tape, y)
    sx, sy = x.shape, y.shape
    return tape.emit('mul', (x, y), np.multiply,
                     lambda xv, yv, out: lambda g: (unbroadcast(g * yv, sx), unbroadcast(g * xv, sy)))


def div(x, y) -> Var:
    tape = _tape_of(x, y)
    x, y = _lift(tape, x), _lift(tape, y)
    sx, sy = x.shape, y.shape
    return tape.emit('div', (x, y), np.divide,
                     lambda xv, yv, out: lambda g: (unbroadcast(g / yv, sx),
                                                    unbroadcast(-g * out / yv, sy)))


def neg(x: Var) -> Var:
    return x.tape.emit('neg', (x,), np.negative, lambda xv, out: lambda g: (-g,))


# -- elementwise functions ---------------------------------------------------

def exp(x: Var) -> Var:
    return x.tape.emit('exp', (x,), np.exp, lambda xv, out: lambda g: (g * out,))


def log(x: Var) -> Var:
    return x.tape.emit('log', (x,), np.log, lambda xv, out: lambda g: (g / xv,))


def sqrt(x: Var) -> Var:
    return x.tape.emit('sqrt', (x,), np.sqrt, lambda xv, out: lambda g: (g / (2.0 * out),))


def _softplus(x):
    return np.logaddexp(0.0, x)


def softplus(x: Var) -> Var:
    """log(1 + e^x)."""
    return x.tape.emit('softplus', (x,), _softplus, lambda xv, out: lambda g: (g * expit(xv),))


def sigmoid(x: Var) -> Var:
    return x.tape.emit('sigmoid', (x,), expit, lambda xv, out: lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x: Var) -> Var:
    return x.tape.emit('log_sigmoid', (x,), log_expit, lambda xv, out: lambda g: (g * expit(-xv),))


# -- reductions and shape ----------------------------------------------------

def reduce_sum(x: Var, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> Var:
    shape = x.shape

    def vjp_maker(xv, out):
        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return vjp

    return x.tape.emit('sum', (x,), lambda v: np.sum(v, axis=axis, keepdims=keepdims), vjp_maker)


def reduce_mean(x: Var, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> Var:
    count = x.value.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Var, shape: Tuple[int, ...]) -> Var:
    src = x.shape
    return x.tape.emit('reshape', (x,), lambda v: np.reshape(v, shape),
                       lambda xv, out: lambda g: (np.reshape(g, src),))


def broadcast_to(x: Var, shape: Tuple[int, ...]) -> Var:
    src = x.shape
    return x.tape.emit('broadcast_to', (x,), lambda v: np.array(np.broadcast_to(v, shape)),
                       lambda xv, out: lambda g: (unbroadcast(g, src),))


def stack(xs: Sequence[Var], axis: int = 0) -> Var:
    tape = _tape_of(*xs)

    def vjp_maker(*values):
        count = len(values) - 1
        return lambda g: tuple(np.take(g, i, axis=axis) for i in range(count))

    return tape.emit('stack', tuple(xs), lambda *vs: np.stack(vs, axis=axis), vjp_maker)


# -- linear algebra ----------------------------------------------------------

def linear(x: Var, w: Var) -> Var:
    """x @ w.T for x (..., in) and w (out, in)."""
    tape = _tape_of(x, w)
    x, w = _lift(tape, x), _lift(tape, w)

    def vjp_maker(xv, wv, out):
        def vjp(g):
            gx = g @ wv
            gw = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
            return gx, gw
        return vjp

    return tape.emit('linear', (x, w), lambda xv, wv: xv @ wv.T, vjp_maker)


def take(table: Var, ids: np.ndarray) -> Var:
    """Row lookup table[ids] (embedding)."""
    ids = np.asarray(ids, dtype=np.int64)

    def vjp_maker(tv, out):
        def vjp(g):
            gt = np.zeros_like(tv)
            np.add.at(gt, ids, g)
            return (gt,)
        return vjp

    return table.tape.emit('take', (table,), lambda tv: tv[ids], vjp_maker)


def pick(x: Var, ids: np.ndarray) -> Var:
    """x[..., ids[...]] along the last axis."""
    ids = np.asarray(ids, dtype=np.int64)[..., None]

    def vjp_maker(xv, out):
        def vjp(g):
            gx = np.zeros_like(xv)
            np.put_along_axis(gx, ids, g[..., None], axis=-1)
            return (gx,)
        return vjp

    return x.tape.emit('pick', (x,), lambda xv: np.take_along_axis(xv, ids, axis=-1)[..., 0],
                       vjp_maker)


def log_softmax(x: Var) -> Var:
    def forward(v):
        return v - logsumexp(v, axis=-1, keepdims=True)

    return x.tape.emit('log_softmax', (x,), forward,
                       lambda xv, out: lambda g: (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),))


def _shift(v: np.ndarray, k: int) -> np.ndarray:
    # delay by k along the time axis (-2 of (..., T, D))
    if k == 0:
        return v
    out = np.zeros_like(v)
    out[..., k:, :] = v[..., :-k, :]
    return out


def _unshift(v: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return v
    out = np.zeros_like(v)
    out[..., :-k, :] = v[..., k:, :]
    return out


def causal_conv(x: Var, w: Var, bias: Var) -> Var:
    """
    Depthwise causal convolution over time.

    x is (..., T, D), w is (K, D) with w[k] applied at delay k, bias is (D,).
    """
    K = w.shape[0]

    def forward(xv, wv, bv):
        out = xv * wv[0]
        for k in range(1, K):
            out = out + _shift(xv, k) * wv[k]
        return out + bv

    def vjp_maker(xv, wv, bv, out):
        def vjp(g):
            gx = g * wv[0]
            for k in range(1, K):
                gx = gx + _unshift(g * wv[k], k)
            lead = tuple(range(g.ndim - 1))
            gw = np.stack([np.sum(g * _shift(xv, k), axis=lead) for k in range(K)])
            gb = np.sum(g, axis=lead)
            return gx, gw, gb
        return vjp

    return x.tape.emit('causal_conv', (x, w, bias), forward, vjp_maker)


# -- the recurrence ------------------------------------------------------------

def scan_step(a: Var, u: Var, h_prev: Var, t: int) -> Var:
    """
    h_t = a_t * h_{t-1} + u_t, reading step t of (..., T, D, N) tensors a and u.
    """
    def forward(av, uv, hv):
        return advance(av[..., t, :, :], hv, uv[..., t, :, :])

    def vjp_maker(av, uv, hv, out):
        a_step = av.shape[:-3] + av.shape[-2:]
        u_step = uv.shape[:-3] + uv.shape[-2:]

        def vjp(g):
            return (Sparse(TIME_AXIS, t, unbroadcast(g * hv, a_step)),
                    Sparse(TIME_AXIS, t, unbroadcast(g, u_step)),
                    unbroadcast(g * av[..., t, :, :], hv.shape))
        return vjp

    return a.tape.emit('scan_step', (a, u, h_prev), forward, vjp_maker)


def decode_step(c: Var, h: Var, t: int) -> Var:
    """y_t = c_t . h_t over the state axis, reading step t of c."""
    def forward(cv, hv):
        return decode(cv[..., t, :, :], hv)

    def vjp_maker(cv, hv, out):
        c_step = cv.shape[:-3] + cv.shape[-2:]

        def vjp(g):
            g = g[..., None]
            return (Sparse(TIME_AXIS, t, unbroadcast(g * hv, c_step)),
                    unbroadcast(g * cv[..., t, :, :], hv.shape))
        return vjp

    return c.tape.emit('decode_step', (c, h), forward, vjp_maker)


def run_scan(a: Var, u: Var, c: Var) -> Tuple[Var, List[Var]]:
    """
    Unroll the recurrence on the tape.

    Returns:
        outputs (..., T, D) and the list of state Vars h_1..h_T
    """
    tape = _tape_of(a, u, c)
    T = a.shape[TIME_AXIS]
    h = tape.constant(np.zeros(a.shape[:-3] + a.shape[-2:], dtype=np.result_type(a.value, u.value)))
    states, ys = [], []
    for t in range(T):
        h = scan_step(a, u, h, t)
        states.append(h)
        ys.append(decode_step(c, h, t))
    return stack(ys, axis=-2), states


def gradients_by_name(tape: Tape, grads: Dict[int, np.ndarray]) -> Tuple[Dict[str, np.ndarray],
                                                                     Dict[str, List[np.ndarray]]]:
    """Gradients of named leaves and of watched intermediates (zeros when unreached)."""
    leaves = {name: grads.get(var.uid, np.zeros_like(var.value)) for name, var in tape.leaves.items()}
    watched = {name: [grads.get(v.uid, np.zeros_like(v.value)) for v in vars_]
               for name, vars_ in tape.watched.items()}
    return leaves, watched
