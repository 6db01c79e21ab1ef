"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the MLP denoiser needs are provided.  Broadcasting is
limited to rank-0 operands; anything wider goes through the explicit
:func:`expand` / :func:`reshape` ops so every gradient rule stays visible.

Usage::

    with Tape() as tape:
        tape.watch(params)
        loss = sum_all(mul(x, x))
    grads = backward(tape, loss)
"""

from __future__ import annotations

from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class Tensor:
    """Immutable n-dimensional float64 array.

    ``data`` is a read-only ndarray; ``flat`` gives the row-major flat view.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # trusted constructor for freshly computed arrays (no copy)
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Writable copy of the payload."""
        return np.array(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    # operator sugar, all routed through the recorded primitives
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


Operand = Union[Tensor, float, int]


def as_tensor(x: Operand) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape)))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape)))


class ParamSet(Mapping[str, Tensor]):
    """Named tensors iterated in lexicographic path order."""

    def __init__(self, items: Optional[Mapping[str, Tensor]] = None):
        self._items: Dict[str, Tensor] = {}
        for k, v in sorted((items or {}).items()):
            self._items[k] = as_tensor(v)

    def __getitem__(self, path: str) -> Tensor:
        return self._items[path]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def replace(self, updates: Mapping[str, Tensor]) -> "ParamSet":
        merged = dict(self._items)
        for k, v in updates.items():
            if k not in merged:
                raise KeyError(k)
            merged[k] = as_tensor(v)
        return ParamSet(merged)

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> "ParamSet":
        return ParamSet({k: fn(k, v) for k, v in self._items.items()})

    def num_scalars(self) -> int:
        return sum(v.data.size for v in self._items.values())

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._items.items())
        return f"ParamSet({inner})"


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active: List["Tape"] = []


class _Record:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: Tuple[int, ...], output: int, vjp: VJP):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.

    Node ids are assigned in creation order, so a record's inputs always
    precede its output.  A tensor is tracked only if it was watched or
    produced by a recorded op; operations on untracked tensors are not
    recorded at all.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self._ids: Dict[int, int] = {}
        self._keep: List[Tensor] = []  # pins id() of tracked tensors
        self._watched: Dict[str, int] = {}

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def _new_node(self, t: Tensor) -> int:
        node = len(self._keep)
        self._ids[id(t)] = node
        self._keep.append(t)
        return node

    def node_of(self, t: Tensor) -> Optional[int]:
        return self._ids.get(id(t))

    def watch(self, params: Union[ParamSet, Mapping[str, Tensor], Tensor], name: str = "x") -> None:
        if isinstance(params, Tensor):
            params = {name: params}
        for path, t in params.items():
            node = self.node_of(t)
            if node is None:
                node = self._new_node(t)
            self._watched[path] = node

    @property
    def num_nodes(self) -> int:
        return len(self._keep)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    result = Tensor._wrap(out)
    if not np.all(np.isfinite(result.data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    for tape in _active:
        ids = [tape.node_of(t) for t in inputs]
        if any(i is not None for i in ids):
            node = tape._new_node(result)
            tape.records.append(
                _Record(op, tuple(-1 if i is None else i for i in ids), node, vjp)
            )
    return result


def backward(tape: Tape, loss: Tensor) -> Dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every watched tensor.

    Watched tensors the loss does not depend on get an exact zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: List[Optional[np.ndarray]] = [None] * tape.num_nodes
    root = tape.node_of(loss)
    if root is not None:
        grads[root] = np.ones_like(loss.data)
        for rec in reversed(tape.records):
            g = grads[rec.output]
            if g is None:
                continue
            for node, gi in zip(rec.inputs, rec.vjp(g)):
                if node < 0 or gi is None:
                    continue
                if grads[node] is None:
                    grads[node] = gi
                else:
                    grads[node] = grads[node] + gi
    out = {}
    for path, node in tape._watched.items():
        g = grads[node]
        out[path] = np.zeros(tape._keep[node].shape) if g is None else np.asarray(g, dtype=np.float64)
    return dict(sorted(out.items()))


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is a scalar")


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # only rank-0 broadcast exists, so reducing means summing everything
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)))


def tensor_binary(op_kind: str, a: Operand, b: Operand) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op_kind]
    except KeyError:
        raise ValueError(f"unknown op_kind {op_kind!r}") from None
    return fn(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[m,k] @ [k,n] -> [m,n]``; dA = dC·Bᵀ, dB = Aᵀ·dC."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum_all", np.asarray(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    """Sum over ``axis`` keeping it as a size-1 dimension."""
    shape = a.shape
    return _record("sum_axis", a.data.sum(axis=axis, keepdims=True), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def expand(a: Tensor, axis: int, size: int) -> Tensor:
    """Repeat a size-1 ``axis`` ``size`` times (explicit broadcast)."""
    if a.shape[axis] != 1:
        raise ShapeError(f"expand: axis {axis} of {a.shape} is not 1")
    target = list(a.shape)
    target[axis] = size
    out = np.broadcast_to(a.data, tuple(target)).copy()
    return _record("expand", out, (a,), lambda g: (g.sum(axis=axis, keepdims=True),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _record("concat", out, parts, lambda g: tuple(np.split(g, splits, axis=axis)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _record("silu", x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record("softmax", s, (a,), vjp)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def mean_all(a: Tensor) -> Tensor:
    return mul(sum_all(a), 1.0 / a.data.size)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Row-batched affine map ``x @ w + b`` for ``x`` of shape [batch, in]."""
    y = matmul(x, w)
    if b is None:
        return y
    bias = expand(reshape(b, (1, b.shape[0])), 0, x.shape[0])
    return add(y, bias)


# --------------------------------------------------------------------------
# Finite-difference oracle
# --------------------------------------------------------------------------

class GradCheckReport:
    __slots__ = ("max_rel_error", "worst_path", "worst_index", "num_checked")

    def __init__(self, max_rel_error: float, worst_path: Optional[str], worst_index: int, num_checked: int):
        self.max_rel_error = max_rel_error
        self.worst_path = worst_path
        self.worst_index = worst_index
        self.num_checked = num_checked

    def __repr__(self) -> str:
        return (f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
                f"worst={self.worst_path}[{self.worst_index}], checked={self.num_checked})")


def finite_difference_check(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    eps: float = 1e-5,
    tol: Optional[float] = None,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare ``backward`` against central differences, coordinate by coordinate.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.  ``max_coords`` limits
    the number of probed coordinates per tensor (chosen with ``rng``); by
    default every coordinate is probed.  ``tol`` is accepted for symmetry with
    callers that want to assert; the report itself never raises.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = ParamSet(params)
    with Tape() as tape:
        tape.watch(params)
        loss = f(params)
    analytic = backward(tape, loss)

    worst, worst_path, worst_idx, count = 0.0, None, -1, 0
    for path, t in params.items():
        base = t.numpy().reshape(-1)
        idxs = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            idxs = (rng or np.random.default_rng(0)).choice(base.size, max_coords, replace=False)
        grad = analytic[path].reshape(-1)
        for i in idxs:
            plus, minus = base.copy(), base.copy()
            plus[i] += eps
            minus[i] -= eps
            fp = f(params.replace({path: Tensor(plus.reshape(t.shape))})).item()
            fm = f(params.replace({path: Tensor(minus.reshape(t.shape))})).item()
            numeric = (fp - fm) / (2.0 * eps)
            a = float(grad[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            count += 1
            if rel > worst or worst_path is None:
                worst, worst_path, worst_idx = rel, path, int(i)
    return GradCheckReport(worst, worst_path, worst_idx, count)


def is_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))


__all__ = [
    "Tensor", "ParamSet", "Tape", "ShapeError", "GradCheckReport",
    "as_tensor", "zeros", "ones", "add", "sub", "mul", "tensor_binary", "matmul",
    "sum_all", "sum_axis", "expand", "reshape", "transpose", "concat", "sigmoid",
    "silu", "softmax", "square", "mean_all", "linear", "backward",
    "finite_difference_check", "is_finite",
]
