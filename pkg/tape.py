"""
Reverse-mode automatic differentiation over dense numpy arrays.

Every trainable quantity and every loss in the project is a ``Value``: a node that
holds a float64 array and, for each parent, the rule that maps the upstream
gradient to the parent's gradient. ``backward`` walks the graph in reverse
creation order, which is a valid reverse topological order because a node is always
created after its parents.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# A Tensor is a float64 numpy array; shape and row-major data come with it.
Tensor = np.ndarray

CLAMP_EPS = 1e-12

UNARY_KINDS = ("neg", "exp", "log", "sqrt", "sigmoid", "relu", "square")
BINARY_KINDS = ("add", "sub", "mul", "div", "min", "max")
REDUCE_KINDS = ("sum", "mean", "max")

_node_ids = itertools.count()

GradRule = Callable[[np.ndarray], np.ndarray]
Operand = Union["Value", float, int, np.ndarray]


class TapeError(ValueError):
    """Raised for shape mismatches, non-finite results and invalid backward calls"""


class Value:
    """Node of the differentiation graph"""

    __slots__ = ("id", "data", "parents", "requires_grad", "op")

    def __init__(self,
                 data,
                 parents: Sequence[Tuple["Value", GradRule]] = (),
                 requires_grad: bool = False,
                 op: str = "leaf"):
        self.id = next(_node_ids)
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Value(id={self.id}, op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Operators
    def __add__(self, other: Operand) -> "Value":
        return binary("add", self, other)

    def __radd__(self, other: Operand) -> "Value":
        return binary("add", other, self)

    def __sub__(self, other: Operand) -> "Value":
        return binary("sub", self, other)

    def __rsub__(self, other: Operand) -> "Value":
        return binary("sub", other, self)

    def __mul__(self, other: Operand) -> "Value":
        return binary("mul", self, other)

    def __rmul__(self, other: Operand) -> "Value":
        return binary("mul", other, self)

    def __truediv__(self, other: Operand) -> "Value":
        return binary("div", self, other)

    def __rtruediv__(self, other: Operand) -> "Value":
        return binary("div", other, self)

    def __neg__(self) -> "Value":
        return unary("neg", self)

    def __matmul__(self, other: "Value") -> "Value":
        return matmul(self, other)

    def __getitem__(self, key) -> "Value":
        return index(self, key)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Value":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Value":
        return reduce("mean", self, axis, keepdims)

    def max(self, axis: Optional[int] = None, keepdims: bool = False) -> "Value":
        return reduce("max", self, axis, keepdims)

    def min(self, axis: Optional[int] = None, keepdims: bool = False) -> "Value":
        return -reduce("max", -self, axis, keepdims)

    def reshape(self, *shape: int) -> "Value":
        return reshape(self, shape)


def parameter(data) -> Value:
    """Create a trainable leaf; the array is copied so in-place updates stay private"""
    return Value(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Value:
    return Value(data, requires_grad=False, op="const")


def lift(x: Operand) -> Value:
    return x if isinstance(x, Value) else constant(x)


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise TapeError(f"Non-finite output from '{op}' at flat index {bad}")


def _node(data: np.ndarray, op: str, links: Iterable[Tuple[Value, GradRule]]) -> Value:
    """Build a node, keeping only the parents that need gradients"""
    _check_finite(op, data)
    kept = [(parent, rule) for parent, rule in links if parent.requires_grad]
    return Value(data, parents=kept, requires_grad=bool(kept), op=op)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def unary(op_kind: str, x: Value) -> Value:
    """
    Apply an elementwise op.

    Args:
        op_kind: one of neg, exp, log, sqrt, sigmoid, relu, square
        x: input Value

    Returns:
        Value with the elementwise result and its local gradient rule
    """
    x = lift(x)
    a = x.data
    if op_kind == "neg":
        return _node(-a, op_kind, [(x, lambda g: -g)])
    if op_kind == "exp":
        out = np.exp(a)
        return _node(out, op_kind, [(x, lambda g: g * out)])
    if op_kind == "log":
        clamped = np.maximum(a, CLAMP_EPS)
        live = a > CLAMP_EPS
        return _node(np.log(clamped), op_kind, [(x, lambda g: np.where(live, g / clamped, 0.0))])
    if op_kind == "sqrt":
        clamped = np.maximum(a, CLAMP_EPS)
        live = a > CLAMP_EPS
        out = np.sqrt(clamped)
        return _node(out, op_kind, [(x, lambda g: np.where(live, 0.5 * g / out, 0.0))])
    if op_kind == "sigmoid":
        out = _sigmoid(a)
        return _node(out, op_kind, [(x, lambda g: g * out * (1.0 - out))])
    if op_kind == "relu":
        live = a > 0.0
        return _node(np.where(live, a, 0.0), op_kind, [(x, lambda g: g * live)])
    if op_kind == "square":
        return _node(a * a, op_kind, [(x, lambda g: 2.0 * g * a)])
    raise TapeError(f"Unknown unary op '{op_kind}', expected one of {UNARY_KINDS}")


def binary(op_kind: str, a: Operand, b: Operand) -> Value:
    """
    Apply an elementwise binary op with numpy broadcasting.

    min/max route the gradient to the selected operand; ties go to the first one.
    The div denominator is pushed away from zero by CLAMP_EPS.
    """
    a, b = lift(a), lift(b)
    x, y = a.data, b.data
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise TapeError(f"Incompatible shapes {x.shape} and {y.shape} for '{op_kind}'")
    xs, ys = x.shape, y.shape

    if op_kind == "add":
        return _node(x + y, op_kind, [(a, lambda g: unbroadcast(g, xs)),
                                      (b, lambda g: unbroadcast(g, ys))])
    if op_kind == "sub":
        return _node(x - y, op_kind, [(a, lambda g: unbroadcast(g, xs)),
                                      (b, lambda g: unbroadcast(-g, ys))])
    if op_kind == "mul":
        return _node(x * y, op_kind, [(a, lambda g: unbroadcast(g * y, xs)),
                                      (b, lambda g: unbroadcast(g * x, ys))])
    if op_kind == "div":
        den = np.where(np.abs(y) < CLAMP_EPS, np.where(y < 0, -CLAMP_EPS, CLAMP_EPS), y)
        out = x / den
        return _node(out, op_kind, [(a, lambda g: unbroadcast(g / den, xs)),
                                    (b, lambda g: unbroadcast(-g * out / den, ys))])
    if op_kind in ("min", "max"):
        first = (x <= y) if op_kind == "min" else (x >= y)
        out = np.where(first, x, y)
        return _node(out, op_kind, [(a, lambda g: unbroadcast(np.where(first, g, 0.0), xs)),
                                    (b, lambda g: unbroadcast(np.where(first, 0.0, g), ys))])
    raise TapeError(f"Unknown binary op '{op_kind}', expected one of {BINARY_KINDS}")


def matmul(a: Value, b: Value) -> Value:
    """Matrix product of two 2-d Values"""
    a, b = lift(a), lift(b)
    x, y = a.data, b.data
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise TapeError(f"matmul dimension mismatch: {x.shape} @ {y.shape}")
    return _node(x @ y, "matmul", [(a, lambda g: g @ y.T), (b, lambda g: x.T @ g)])


def reduce(op_kind: str, x: Value, axis: Optional[int] = None, keepdims: bool = False) -> Value:
    """
    Reduce over one axis or over everything (axis=None).

    max routes the gradient to the first arg-max.
    """
    x = lift(x)
    a = x.data
    if a.size == 0 or (axis is not None and a.shape[axis] == 0):
        raise TapeError(f"Empty reduction '{op_kind}' over shape {a.shape}")
    shape = a.shape

    def spread(g: np.ndarray) -> np.ndarray:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    if op_kind == "sum":
        return _node(a.sum(axis=axis, keepdims=keepdims), op_kind,
                     [(x, lambda g: np.array(spread(g)))])
    if op_kind == "mean":
        count = a.size if axis is None else shape[axis]
        return _node(a.mean(axis=axis, keepdims=keepdims), op_kind,
                     [(x, lambda g: spread(g) / count)])
    if op_kind == "max":
        if axis is None:
            flat = int(np.argmax(a))
            out = a.reshape(-1)[flat]
            out = np.reshape(out, (1,) * a.ndim) if keepdims else np.asarray(out)

            def rule(g: np.ndarray) -> np.ndarray:
                grad = np.zeros(a.size)
                grad[flat] = float(np.sum(g))
                return grad.reshape(shape)
            return _node(out, op_kind, [(x, rule)])

        arg = np.expand_dims(np.argmax(a, axis=axis), axis)
        out = np.take_along_axis(a, arg, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def rule(g: np.ndarray) -> np.ndarray:
            grad = np.zeros(shape)
            np.put_along_axis(grad, arg, g if keepdims else np.expand_dims(g, axis), axis=axis)
            return grad
        return _node(out, op_kind, [(x, rule)])
    raise TapeError(f"Unknown reduction '{op_kind}', expected one of {REDUCE_KINDS}")


def detach(x: Value) -> Value:
    """Same data, cut from the graph: nothing flows back through it"""
    x = lift(x)
    return Value(x.data, requires_grad=False, op="detach")


def reshape(x: Value, shape: Sequence[int]) -> Value:
    x = lift(x)
    original = x.data.shape
    return _node(x.data.reshape(tuple(shape)), "reshape", [(x, lambda g: g.reshape(original))])


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def scatter_rows(shape: Tuple[int, ...], rows: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Sum g[i] into row rows[i] of a zero array of ``shape``; repeated rows accumulate in order"""
    n_rows = shape[0]
    width = int(np.prod(shape[1:], dtype=np.int64))
    rows = np.where(rows < 0, rows + n_rows, rows)
    flat = (rows.reshape(-1, 1) * width + np.arange(width)).reshape(-1)
    summed = np.bincount(flat, weights=np.asarray(g, dtype=np.float64).reshape(-1),
                         minlength=n_rows * width)
    return summed.reshape(shape)


def index(x: Value, key) -> Value:
    """Numpy indexing (basic or integer-array); repeated indices accumulate gradient"""
    x = lift(x)
    shape = x.data.shape
    basic = _is_basic(key)
    row_gather = (isinstance(key, np.ndarray) and key.ndim == 1
                  and np.issubdtype(key.dtype, np.integer) and x.data.ndim >= 1)

    def rule(g: np.ndarray) -> np.ndarray:
        if row_gather:
            return scatter_rows(shape, key, g)
        grad = np.zeros(shape)
        if basic:
            grad[key] = g
        else:
            np.add.at(grad, key, g)
        return grad
    return _node(np.array(x.data[key]), "index", [(x, rule)])


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    values = [lift(v) for v in values]
    arrays = [v.data for v in values]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([0] + [arr.shape[axis] for arr in arrays])
    links = []
    for i, v in enumerate(values):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        links.append((v, lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis)))
    return _node(out, "concat", links)


def stack(values: Sequence[Value], axis: int = -1) -> Value:
    """Stack equally shaped Values along a new axis"""
    values = [lift(v) for v in values]
    expanded = [reshape(v, _expanded_shape(v.shape, axis)) for v in values]
    return concat(expanded, axis=axis)


def _expanded_shape(shape: Tuple[int, ...], axis: int) -> Tuple[int, ...]:
    position = axis if axis >= 0 else len(shape) + 1 + axis
    return shape[:position] + (1,) + shape[position:]


def exp(x: Value) -> Value:
    return unary("exp", x)


def log(x: Value) -> Value:
    return unary("log", x)


def sqrt(x: Value) -> Value:
    return unary("sqrt", x)


def sigmoid(x: Value) -> Value:
    return unary("sigmoid", x)


def relu(x: Value) -> Value:
    return unary("relu", x)


def square(x: Value) -> Value:
    return unary("square", x)


def minimum(a: Operand, b: Operand) -> Value:
    return binary("min", a, b)


def maximum(a: Operand, b: Operand) -> Value:
    return binary("max", a, b)


def clip(x: Value, lo, hi) -> Value:
    """
    minimum(maximum(x, lo), hi) as one node.

    The gradient passes where lo <= x <= hi, the same tie rule as the two-op form.
    """
    x = lift(x)
    a = x.data
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    out = np.minimum(np.maximum(a, lo), hi)
    live = (a >= lo) & (a <= hi)
    shape = a.shape
    return _node(out, "clip", [(x, lambda g: unbroadcast(np.where(live, g, 0.0), shape))])


@dataclass
class GradientStore:
    """Gradients keyed by Value id"""
    grads: Dict[int, np.ndarray] = field(default_factory=dict)

    def __contains__(self, value: Value) -> bool:
        return value.id in self.grads

    def __len__(self) -> int:
        return len(self.grads)

    def of(self, value: Value) -> np.ndarray:
        """Gradient of ``value``; zeros when it was unreachable or detached"""
        grad = self.grads.get(value.id)
        return np.zeros_like(value.data) if grad is None else grad

    def global_norm(self, values: Iterable[Value]) -> float:
        return float(np.sqrt(sum(float(np.sum(self.of(v) ** 2)) for v in values)))


def backward(loss: Value) -> GradientStore:
    """
    Backpropagate from a scalar loss.

    Nodes are visited in descending id order, a valid reverse topological order. The
    contributions reaching a node are summed in ascending id of the consuming node
    (then parent-list order), so two runs over the same graph give bitwise-identical
    gradients.

    Raises:
        TapeError: if the loss is not a scalar
    """
    if loss.data.ndim != 0:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return GradientStore()

    reachable: Dict[int, Value] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in reachable:
            continue
        reachable[node.id] = node
        stack.extend(parent for parent, _ in node.parents)

    # node id -> [(consumer id, position in the consumer's parent list, contribution)]
    pending: Dict[int, List[Tuple[int, int, np.ndarray]]] = {loss.id: [(loss.id, 0, np.ones(()))]}
    grads: Dict[int, np.ndarray] = {}
    for node_id in sorted(reachable, reverse=True):
        parts = pending.pop(node_id, None)
        if parts is None:
            continue
        parts.sort(key=lambda part: (part[0], part[1]))
        upstream = np.array(parts[0][2], dtype=np.float64)
        for _, _, contribution in parts[1:]:
            upstream = upstream + contribution
        grads[node_id] = upstream
        for position, (parent, rule) in enumerate(reachable[node_id].parents):
            pending.setdefault(parent.id, []).append((node_id, position, rule(upstream)))
    return GradientStore(grads)


def grad_check(f: Callable[[], Value],
               params: List[Value],
               h: float = 1e-5,
               abs_tol: float = 0.0) -> float:
    """
    Compare backward gradients against central finite differences.

    Args:
        f: rebuilds the scalar loss from the current parameter data
        params: leaves to perturb, in place, one coordinate at a time
        h: finite-difference step
        abs_tol: differences at or below this are counted as agreement; 0 applies the
            plain relative error everywhere

    Returns:
        Maximum relative error |a - n| / max(|a|, |n|, 1e-8) over all coordinates
    """
    if h <= 0:
        raise ValueError(f"grad_check step must be positive, got {h}")

    def evaluate() -> float:
        value = float(f().data)
        if not np.isfinite(value):
            raise TapeError("grad_check objective returned a non-finite value")
        return value

    store = backward(f())
    worst = 0.0
    for param in params:
        analytic = store.of(param).reshape(-1)
        flat = param.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = evaluate()
            flat[i] = original - h
            f_minus = evaluate()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            diff = abs(analytic[i] - numeric)
            if diff <= abs_tol:
                continue
            worst = max(worst, diff / max(abs(analytic[i]), abs(numeric), 1e-8))
    logger.debug(f"grad_check over {len(params)} parameters: max relative error {worst:.3e}")
    return worst
