"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every differentiable operation is a *primitive* registered in ``PRIMITIVES``
with a forward rule and an exact vector-Jacobian rule. Operations executed
while a :class:`Tape` is active, and that touch at least one tensor with
``requires_grad``, are recorded in order; :func:`backward` walks the record in
reverse exactly once.

Elementwise primitives follow numpy broadcasting; their VJPs sum the incoming
gradient back down to each operand's shape.

>>> x = Tensor([1.0, -2.0], requires_grad=True)
>>> with Tape() as tape:
...     loss = sum_axis(square(x))
>>> backward(tape, loss)[tape.id_of(x)]
array([ 2., -4.])
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractViolation, DomainError, NumericalError

_TAPES = []


class Tensor:
    """Immutable float64 array with an optional gradient flag."""

    __slots__ = ("data", "requires_grad", "node_id", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None

    @classmethod
    def _wrap(cls, arr, requires_grad):
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_scale(self, other)
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scalar_scale(self, -1.0)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: int
    saved: object
    attrs: dict
    needs: tuple


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; tapes nest, the innermost one records.
    """

    nodes: list = field(default_factory=list)
    parameters: list = field(default_factory=list)
    _ids: dict = field(default_factory=dict, repr=False)
    _shapes: dict = field(default_factory=dict, repr=False)
    _keep: list = field(default_factory=list, repr=False)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def _register(self, t):
        key = id(t)
        nid = self._ids.get(key)
        if nid is None:
            nid = len(self._ids)
            self._ids[key] = nid
            self._shapes[nid] = t.shape
            self._keep.append(t)
            t.node_id = nid
        return nid

    def watch(self, t):
        """Register ``t`` as a trainable leaf and return its node id."""
        nid = self._register(t)
        if nid not in self.parameters:
            self.parameters.append(nid)
        return nid

    def id_of(self, t):
        """Node id of ``t`` on this tape (``None`` if never recorded)."""
        return self._ids.get(id(t))

    def _record(self, kind, inputs, out, saved, attrs):
        in_ids = []
        for t in inputs:
            if t.requires_grad and id(t) not in self._ids:
                self.watch(t)
            in_ids.append(self._register(t))
        out_id = self._register(out)
        needs = tuple(t.requires_grad for t in inputs)
        self.nodes.append(Node(kind, tuple(in_ids), out_id, saved, attrs, needs))


def active_tape():
    return _TAPES[-1] if _TAPES else None


@dataclass(frozen=True)
class Primitive:
    forward: object
    vjp: object
    check: object = None


PRIMITIVES = {}


def primitive(kind, check=None):
    def register(cls):
        PRIMITIVES[kind] = Primitive(cls.forward, cls.vjp, check)
        return cls

    return register


def apply_primitive(kind, inputs, attrs=None):
    """Run primitive ``kind`` on ``inputs`` and record it on the active tape."""
    return _apply(kind, inputs, attrs)[0]


def _apply(kind, inputs, attrs=None):
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ContractViolation(f"unknown primitive kind {kind!r}") from None
    attrs = attrs or {}
    inputs = [as_tensor(t) for t in inputs]
    arrays = [t.data for t in inputs]
    if prim.check is not None:
        prim.check(arrays, attrs)
    try:
        with np.errstate(all="ignore"):
            out, saved = prim.forward(arrays, attrs)
    except ValueError as exc:
        raise ContractViolation(f"{kind}: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{kind} produced a non-finite value", where=kind)
    requires = any(t.requires_grad for t in inputs)
    res = Tensor._wrap(out, requires)
    tape = active_tape()
    if tape is not None and requires:
        tape._record(kind, inputs, res, saved, attrs)
    return res, saved


def backward(tape, loss):
    """Gradients of scalar ``loss`` w.r.t. every trainable leaf on ``tape``.

    Returns ``{node_id: ndarray}``; leaves the loss does not depend on get
    zeros.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"loss must be a scalar, got shape {loss.shape}")
    grads = {}
    loss_id = tape.id_of(loss)
    if loss_id is not None:
        grads[loss_id] = np.ones(loss.shape)
    params = set(tape.parameters)
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        if node.output not in params:
            del grads[node.output]
        prim = PRIMITIVES[node.kind]
        in_arrays = [tape._keep[i].data for i in node.inputs]
        out_arr = tape._keep[node.output].data
        with np.errstate(all="ignore"):
            in_grads = prim.vjp(g, in_arrays, out_arr, node.saved, node.attrs, node.needs)
        for nid, need, gi in zip(node.inputs, node.needs, in_grads):
            if not need or gi is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    return {pid: grads.get(pid, np.zeros(tape._shapes[pid])) for pid in tape.parameters}


def gradients_for(tape, grads, tensors):
    """Map a ``{name: Tensor}`` dict onto its gradients (zeros if unused)."""
    out = {}
    for name, t in tensors.items():
        nid = tape.id_of(t)
        out[name] = grads[nid] if nid is not None and nid in grads else np.zeros(t.shape)
    return out


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(arrays, attrs):
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        raise ContractViolation(
            "shapes do not broadcast: " + " vs ".join(str(a.shape) for a in arrays)
        ) from None


def _check_last3(arrays, attrs):
    for a in arrays:
        if a.ndim == 0 or a.shape[-1] != 3:
            raise ContractViolation(f"expected a trailing axis of extent 3, got {a.shape}")
    _check_broadcast(arrays, attrs)


def _cross(a, b):
    return np.stack(
        (
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ),
        axis=-1,
    )


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


@primitive("add", check=_check_broadcast)
class _Add:
    def forward(x, attrs):
        return x[0] + x[1], None

    def vjp(g, x, out, saved, attrs, needs):
        return _unbroadcast(g, x[0].shape), _unbroadcast(g, x[1].shape)


@primitive("sub", check=_check_broadcast)
class _Sub:
    def forward(x, attrs):
        return x[0] - x[1], None

    def vjp(g, x, out, saved, attrs, needs):
        return _unbroadcast(g, x[0].shape), _unbroadcast(-g, x[1].shape)


@primitive("scalar_scale")
class _Scale:
    def forward(x, attrs):
        return x[0] * attrs["scale"], None

    def vjp(g, x, out, saved, attrs, needs):
        return (g * attrs["scale"],)


@primitive("elementwise_mul", check=_check_broadcast)
class _Mul:
    def forward(x, attrs):
        return x[0] * x[1], None

    def vjp(g, x, out, saved, attrs, needs):
        return (
            _unbroadcast(g * x[1], x[0].shape) if needs[0] else None,
            _unbroadcast(g * x[0], x[1].shape) if needs[1] else None,
        )


def _check_div(arrays, attrs):
    _check_broadcast(arrays, attrs)
    if np.any(arrays[1] == 0):
        raise DomainError("division by zero")


@primitive("div", check=_check_div)
class _Div:
    def forward(x, attrs):
        return x[0] / x[1], None

    def vjp(g, x, out, saved, attrs, needs):
        return (
            _unbroadcast(g / x[1], x[0].shape) if needs[0] else None,
            _unbroadcast(-g * out / x[1], x[1].shape) if needs[1] else None,
        )


def _check_contract(arrays, attrs):
    w, x = arrays
    axis = attrs["axis"]
    if w.ndim != 2:
        raise ContractViolation(f"weight must be a matrix, got shape {w.shape}")
    if not -x.ndim <= axis < x.ndim or x.shape[axis] != w.shape[1]:
        raise ContractViolation(
            f"weight {w.shape} does not match axis {axis} of input {x.shape}"
        )


@primitive("channel_contract", check=_check_contract)
class _Contract:
    """``out[..., j, ...] = sum_c W[j, c] * X[..., c, ...]`` along ``axis``."""

    def forward(x, attrs):
        w, a = x
        axis = attrs["axis"] % a.ndim
        return np.moveaxis(np.tensordot(a, w, axes=([axis], [1])), -1, axis), None

    def vjp(g, x, out, saved, attrs, needs):
        w, a = x
        axis = attrs["axis"] % a.ndim
        dw = da = None
        if needs[0]:
            gm = np.moveaxis(g, axis, 0).reshape(w.shape[0], -1)
            am = np.moveaxis(a, axis, 0).reshape(w.shape[1], -1)
            dw = gm @ am.T
        if needs[1]:
            da = np.moveaxis(np.tensordot(g, w, axes=([axis], [0])), -1, axis)
        return dw, da


@primitive("batched_cross", check=_check_last3)
class _CrossP:
    def forward(x, attrs):
        a, b = np.broadcast_arrays(x[0], x[1])
        return _cross(a, b), None

    def vjp(g, x, out, saved, attrs, needs):
        a, b = x
        return (
            _unbroadcast(_cross(b, g), a.shape) if needs[0] else None,
            _unbroadcast(_cross(g, a), b.shape) if needs[1] else None,
        )


@primitive("batched_dot", check=_check_last3)
class _Dot:
    def forward(x, attrs):
        return np.sum(x[0] * x[1], axis=-1), None

    def vjp(g, x, out, saved, attrs, needs):
        g = g[..., None]
        return (
            _unbroadcast(g * x[1], x[0].shape) if needs[0] else None,
            _unbroadcast(g * x[0], x[1].shape) if needs[1] else None,
        )


@primitive("l2_norm_lastaxis")
class _Norm:
    def forward(x, attrs):
        return np.sqrt(np.sum(x[0] * x[0], axis=-1)), None

    def vjp(g, x, out, saved, attrs, needs):
        # subgradient 0 at the origin
        scale = np.divide(g, out, out=np.zeros_like(out), where=out > 0)
        return (scale[..., None] * x[0],)


@primitive("softmax_axis")
class _Softmax:
    def forward(x, attrs):
        axis = attrs["axis"]
        e = np.exp(x[0] - np.max(x[0], axis=axis, keepdims=True))
        return e / np.sum(e, axis=axis, keepdims=True), None

    def vjp(g, x, out, saved, attrs, needs):
        axis = attrs["axis"]
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


@primitive("log_softmax_axis")
class _LogSoftmax:
    def forward(x, attrs):
        axis = attrs["axis"]
        shifted = x[0] - np.max(x[0], axis=axis, keepdims=True)
        return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True)), None

    def vjp(g, x, out, saved, attrs, needs):
        axis = attrs["axis"]
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)


def _reduce_shape(shape, axis, keepdims):
    axes = range(len(shape)) if axis is None else np.atleast_1d(axis) % max(len(shape), 1)
    return tuple(1 if i in set(axes) else n for i, n in enumerate(shape)), axes


@primitive("mean_axis")
class _Mean:
    def forward(x, attrs):
        return np.mean(x[0], axis=attrs["axis"], keepdims=attrs["keepdims"]), None

    def vjp(g, x, out, saved, attrs, needs):
        kept, axes = _reduce_shape(x[0].shape, attrs["axis"], True)
        count = int(np.prod([x[0].shape[i] for i in axes]))
        return (np.broadcast_to(g.reshape(kept), x[0].shape) / count,)


@primitive("sum_axis")
class _Sum:
    def forward(x, attrs):
        return np.sum(x[0], axis=attrs["axis"], keepdims=attrs["keepdims"]), None

    def vjp(g, x, out, saved, attrs, needs):
        kept, _ = _reduce_shape(x[0].shape, attrs["axis"], True)
        return (np.broadcast_to(g.reshape(kept), x[0].shape).copy(),)


@primitive("concat_axis")
class _Concat:
    def forward(x, attrs):
        return np.concatenate(x, axis=attrs["axis"]), None

    def vjp(g, x, out, saved, attrs, needs):
        cuts = np.cumsum([a.shape[attrs["axis"]] for a in x])[:-1]
        return tuple(np.split(g, cuts, axis=attrs["axis"]))


def _check_gather(arrays, attrs):
    idx = attrs["index"]
    n = arrays[0].shape[0] if arrays[0].ndim else 0
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ContractViolation(f"row index out of range for {n} rows")


@primitive("gather_rows", check=_check_gather)
class _Gather:
    def forward(x, attrs):
        return x[0][attrs["index"]], None

    def vjp(g, x, out, saved, attrs, needs):
        acc = np.zeros_like(x[0])
        np.add.at(acc, attrs["index"], g)
        return (acc,)


def _check_select(arrays, attrs):
    try:
        np.broadcast_shapes(attrs["mask"].shape, arrays[0].shape, arrays[1].shape)
    except ValueError:
        raise ContractViolation("mask does not broadcast against the operands") from None


@primitive("select_where", check=_check_select)
class _Select:
    def forward(x, attrs):
        return np.where(attrs["mask"], x[0], x[1]), None

    def vjp(g, x, out, saved, attrs, needs):
        m = attrs["mask"]
        return (
            _unbroadcast(np.where(m, g, 0.0), x[0].shape) if needs[0] else None,
            _unbroadcast(np.where(m, 0.0, g), x[1].shape) if needs[1] else None,
        )


def _check_mat3(arrays, attrs):
    m, v = arrays
    if m.shape[-2:] != (3, 3) or v.shape[-1] != 3:
        raise ContractViolation(f"mat3_apply expects (...,3,3) and (...,3), got {m.shape}, {v.shape}")
    try:
        np.broadcast_shapes(m.shape[:-2], v.shape[:-1])
    except ValueError:
        raise ContractViolation("batch shapes do not broadcast") from None


@primitive("mat3_apply", check=_check_mat3)
class _Mat3:
    def forward(x, attrs):
        return np.einsum("...ij,...j->...i", x[0], x[1]), None

    def vjp(g, x, out, saved, attrs, needs):
        m, v = x
        dm = dv = None
        if needs[0]:
            dm = _unbroadcast(g[..., :, None] * v[..., None, :], m.shape)
        if needs[1]:
            dv = _unbroadcast(np.einsum("...ij,...i->...j", m, g), v.shape)
        return dm, dv


def _check_t2(arrays, attrs):
    if arrays[0].ndim < 2:
        raise ContractViolation("transpose_last2 needs at least two axes")


@primitive("transpose_last2", check=_check_t2)
class _T2:
    def forward(x, attrs):
        return np.swapaxes(x[0], -1, -2), None

    def vjp(g, x, out, saved, attrs, needs):
        return (np.swapaxes(g, -1, -2),)


@primitive("square")
class _Square:
    def forward(x, attrs):
        return x[0] * x[0], None

    def vjp(g, x, out, saved, attrs, needs):
        return (2.0 * g * x[0],)


def _check_sqrt(arrays, attrs):
    if np.any(arrays[0] < 0):
        raise DomainError("sqrt of a negative value")


@primitive("sqrt", check=_check_sqrt)
class _Sqrt:
    def forward(x, attrs):
        return np.sqrt(x[0]), None

    def vjp(g, x, out, saved, attrs, needs):
        if np.any(out == 0):
            raise DomainError("sqrt is not differentiable at 0")
        return (g / (2.0 * out),)


def _check_log(arrays, attrs):
    if np.any(arrays[0] <= 0):
        raise DomainError("log of a non-positive value")


@primitive("log", check=_check_log)
class _Log:
    def forward(x, attrs):
        return np.log(x[0]), None

    def vjp(g, x, out, saved, attrs, needs):
        return (g / x[0],)


@primitive("sigmoid")
class _Sigmoid:
    def forward(x, attrs):
        a = x[0]
        e = np.exp(-np.abs(a))
        return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)), None

    def vjp(g, x, out, saved, attrs, needs):
        return (g * out * (1.0 - out),)


@primitive("reshape")
class _Reshape:
    def forward(x, attrs):
        return x[0].reshape(attrs["shape"]), None

    def vjp(g, x, out, saved, attrs, needs):
        return (g.reshape(x[0].shape),)


@primitive("broadcast_to")
class _Broadcast:
    def forward(x, attrs):
        return np.broadcast_to(x[0], attrs["shape"]).copy(), None

    def vjp(g, x, out, saved, attrs, needs):
        return (_unbroadcast(g, x[0].shape),)


@primitive("slice")
class _Slice:
    def forward(x, attrs):
        return np.array(x[0][attrs["index"]]), None

    def vjp(g, x, out, saved, attrs, needs):
        acc = np.zeros_like(x[0])
        acc[attrs["index"]] = g
        return (acc,)


ATTENTION_EPS = 1e-8


def _check_attention(arrays, attrs):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ContractViolation(f"Q, K, V shapes differ: {[a.shape for a in arrays]}")
    (shape,) = shapes
    if len(shape) != 3 or shape[2] != 3:
        raise ContractViolation(f"expected N x C x 3, got {shape}")


@primitive("cross_attention", check=_check_attention)
class _Attention:
    """Fused kernel; see :func:`oavnn.layers.cross_attention`."""

    def forward(x, attrs):
        q, k, v = (a.transpose(1, 0, 2) for a in x)
        out, alpha = kernels.attention_forward(q, k, v, attrs.get("eps", ATTENTION_EPS))
        return out.transpose(1, 0, 2), alpha

    def vjp(g, x, out, saved, attrs, needs):
        q, k, v = (a.transpose(1, 0, 2) for a in x)
        dq, dk, dv = kernels.attention_backward(
            q, k, v, saved, g.transpose(1, 0, 2), attrs.get("eps", ATTENTION_EPS)
        )
        return dq.transpose(1, 0, 2), dk.transpose(1, 0, 2), dv.transpose(1, 0, 2)


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def scalar_scale(a, s):
    return apply_primitive("scalar_scale", [a], {"scale": float(s)})


def elementwise_mul(a, b):
    return apply_primitive("elementwise_mul", [a, b])


def div(a, b):
    return apply_primitive("div", [a, b])


def channel_contract(w, x, axis):
    return apply_primitive("channel_contract", [w, x], {"axis": axis})


def batched_cross(a, b):
    return apply_primitive("batched_cross", [a, b])


def batched_dot(a, b):
    return apply_primitive("batched_dot", [a, b])


def l2_norm_lastaxis(a):
    return apply_primitive("l2_norm_lastaxis", [a])


def softmax_axis(a, axis=-1):
    return apply_primitive("softmax_axis", [a], {"axis": axis})


def log_softmax_axis(a, axis=-1):
    return apply_primitive("log_softmax_axis", [a], {"axis": axis})


def mean_axis(a, axis=None, keepdims=False):
    return apply_primitive("mean_axis", [a], {"axis": axis, "keepdims": keepdims})


def sum_axis(a, axis=None, keepdims=False):
    return apply_primitive("sum_axis", [a], {"axis": axis, "keepdims": keepdims})


def concat_axis(tensors, axis):
    return apply_primitive("concat_axis", list(tensors), {"axis": axis})


def gather_rows(a, index):
    return apply_primitive("gather_rows", [a], {"index": np.asarray(index, dtype=np.int64)})


def select_where(mask, a, b):
    return apply_primitive("select_where", [a, b], {"mask": np.asarray(mask, dtype=bool)})


def mat3_apply(m, v):
    return apply_primitive("mat3_apply", [m, v])


def transpose_last2(a):
    return apply_primitive("transpose_last2", [a])


def square(a):
    return apply_primitive("square", [a])


def sqrt(a):
    return apply_primitive("sqrt", [a])


def log(a):
    return apply_primitive("log", [a])


def sigmoid(a):
    return apply_primitive("sigmoid", [a])


def reshape(a, shape):
    return apply_primitive("reshape", [a], {"shape": tuple(shape)})


def broadcast_to(a, shape):
    return apply_primitive("broadcast_to", [a], {"shape": tuple(shape)})


def slice_(a, index):
    return apply_primitive("slice", [a], {"index": index})


def cross_attention_op(q, k, v, eps=ATTENTION_EPS):
    """Fused attention primitive; returns ``(out, alpha)``."""
    return _apply("cross_attention", [q, k, v], {"eps": eps})


# ---------------------------------------------------------------------------
# verification and optimisation
# ---------------------------------------------------------------------------


def grad_check(function, point, step=1e-5):
    """Max relative error between tape gradients and central differences.

    ``function`` maps a Tensor to a scalar Tensor. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ContractViolation("step must be positive")
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = function(leaf)
    value = np.asarray(y.data)
    if not np.all(np.isfinite(value)):
        raise DomainError("function value is not finite")
    grads = backward(tape, y)
    nid = tape.id_of(leaf)
    analytic = grads[nid] if nid is not None and nid in grads else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = function(Tensor(xp.reshape(x0.shape))).item()
        fm = function(Tensor(xm.reshape(x0.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError("function value is not finite near the check point")
        flat[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are ``{name: ndarray}``; returns new parameter
    arrays (inputs are not modified) and advances ``state`` in place.
    """
    if state.step < 0:
        raise ContractViolation("step counter must be non-negative")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ContractViolation(f"gradient for {name!r} has shape {g.shape}, expected {np.shape(p)}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        out[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out
