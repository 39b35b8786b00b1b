"""
Reverse-mode tape with forward-mode input tangents.

Every Var carries a value and a tangent, the directional derivative along the
seeded input (the time column). Backward propagates two adjoints per node, one
for the value and one for the tangent, so a tangent that is later consumed as a
value through ``tangent_of`` stays differentiable with respect to the
parameters (forward-over-reverse).

Values are floats or numpy arrays. Elementwise ops require equal shapes; the
only shape mixing accepted is a 0-d operand against an array and a row vector
added to a matrix (affine bias).
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import AutodiffDomainError, UsageError

Value = float | np.ndarray
Partial = Value | None
Backward = Callable[[Partial, Partial], Sequence[tuple[Partial, Partial]]]

OPS = (
    "add", "sub", "mul", "div", "tanh", "neg", "scale",
    "sigmoid", "softplus", "matmul", "sum", "column", "concat", "tangent_of",
)


def _as_value(x) -> Value:
    arr = np.asarray(x, dtype=float)
    return float(arr) if arr.ndim == 0 else arr


def _zeros_like(value: Value) -> Value:
    return 0.0 if np.ndim(value) == 0 else np.zeros_like(value)


def _plus(*terms: Partial) -> Partial:
    out = None
    for term in terms:
        if term is None:
            continue
        out = term if out is None else out + term
    return out


def _times(*factors) -> Partial:
    if any(f is None for f in factors):
        return None
    out = factors[0]
    for f in factors[1:]:
        out = out * f
    return out


def _mm(a: Partial, b: Partial) -> Partial:
    if a is None or b is None:
        return None
    return a @ b


def _t(a: Partial) -> Partial:
    return None if a is None else a.T


def _reduce_to(grad: Partial, shape: tuple) -> Partial:
    """Sum a broadcast gradient back onto an operand of ``shape``."""
    if grad is None:
        return None
    grad_shape = np.shape(grad)
    if grad_shape == shape:
        return grad
    if shape == ():
        return float(np.sum(grad))
    if len(shape) == 1 and len(grad_shape) == 2 and grad_shape[1] == shape[0]:
        return np.sum(grad, axis=0)
    if grad_shape == ():
        return np.full(shape, grad)
    raise UsageError(f"cannot reduce gradient of shape {grad_shape} to {shape}")


def _check_elementwise(op: str, a: "Var", b: "Var") -> None:
    sa, sb = np.shape(a.value), np.shape(b.value)
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
        return
    if len(sb) == 2 and len(sa) == 1 and sb[1] == sa[0]:
        return
    raise UsageError(f"{op}: incompatible operand shapes {sa} and {sb}")


def _unary_derivatives(op: str, av: Value) -> tuple[Value, Value, Value]:
    """Value, first and second derivative of a unary op at ``av``."""
    if op == "tanh":
        z = np.tanh(av)
        d1 = 1.0 - z * z
        return z, d1, -2.0 * z * d1
    if op == "sigmoid":
        z = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(av)))
        d1 = z * (1.0 - z)
        return z, d1, d1 * (1.0 - 2.0 * z)
    if op == "softplus":
        z = np.logaddexp(0.0, av)
        s = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(av)))
        return z, s, s * (1.0 - s)
    raise UsageError(f"unknown unary op {op!r}")


class Var:
    """A node of a Tape.

    Attributes:
        tape: Owning tape
        id: Position of the node on the tape
        value: Primal value
        adjoint: d(loss)/d(value) after the last backward pass, 0 before
        tangent_adjoint: d(loss)/d(tangent) after the last backward pass
    """

    __slots__ = ("tape", "id", "value", "_tangent", "adjoint", "tangent_adjoint")
    # numpy must defer to the reflected operators instead of broadcasting over a Var
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", node_id: int, value: Value, tangent: Partial) -> None:
        self.tape = tape
        self.id = node_id
        self.value = value
        self._tangent = tangent
        self.adjoint: Value = _zeros_like(value)
        self.tangent_adjoint: Value = _zeros_like(value)

    @property
    def tangent(self) -> Value:
        if self._tangent is None:
            return _zeros_like(self.value)
        return self._tangent

    @property
    def shape(self) -> tuple:
        return np.shape(self.value)

    def __repr__(self) -> str:
        return f"Var(id={self.id}, value={self.value!r}, tangent={self.tangent!r})"

    def __add__(self, other):
        return self.tape.apply("add", self, other)

    def __radd__(self, other):
        return self.tape.apply("add", other, self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, other)

    def __rsub__(self, other):
        return self.tape.apply("sub", other, self)

    def __mul__(self, other):
        return self.tape.apply("mul", self, other)

    def __rmul__(self, other):
        return self.tape.apply("mul", other, self)

    def __truediv__(self, other):
        return self.tape.apply("div", self, other)

    def __rtruediv__(self, other):
        return self.tape.apply("div", other, self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, other)

    def tanh(self) -> "Var":
        return self.tape.apply("tanh", self)

    def sigmoid(self) -> "Var":
        return self.tape.apply("sigmoid", self)

    def softplus(self) -> "Var":
        return self.tape.apply("softplus", self)

    def sum(self) -> "Var":
        return self.tape.apply("sum", self)

    def column(self, index: int) -> "Var":
        return self.tape.apply("column", self, constant=index)

    def scale(self, factor: float) -> "Var":
        return self.tape.apply("scale", self, constant=factor)

    def tangent_of(self) -> "Var":
        return self.tape.apply("tangent_of", self)


@dataclass(frozen=True)
class _Node:
    op: str
    parents: tuple[int, ...]
    backward: Backward | None


class Tape:
    """Append-only record of operations.

    Nodes are stored in creation order, so every operand precedes its result.
    ``checkpoint``/``truncate`` drop everything recorded after a marker; the
    training loop truncates after each optimizer step.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.vars: list[Var] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def checkpoint(self) -> int:
        return len(self.nodes)

    def truncate(self, mark: int) -> None:
        if mark < 0 or mark > len(self.nodes):
            raise UsageError(f"checkpoint {mark} outside tape of {len(self.nodes)} nodes")
        del self.nodes[mark:]
        del self.vars[mark:]

    def _record(self, op: str, value: Value, tangent: Partial,
                parents: tuple[int, ...], backward: Backward | None) -> Var:
        if tangent is not None:
            tangent = _as_value(tangent)
        var = Var(self, len(self.nodes), value, tangent)
        self.nodes.append(_Node(op, parents, backward))
        self.vars.append(var)
        return var

    def lift(self, value, tangent=None) -> Var:
        """Create a leaf with the given value and seeded tangent (default 0)."""
        value = _as_value(value)
        if tangent is not None:
            tangent = np.broadcast_to(np.asarray(tangent, dtype=float), np.shape(value))
            tangent = float(tangent) if tangent.ndim == 0 else tangent.copy()
            if not np.any(tangent):
                tangent = None
        return self._record("leaf", value, tangent, (), None)

    def _own(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise UsageError(f"operand node {x.id} belongs to a different tape")
            if x.id >= len(self.vars) or self.vars[x.id] is not x:
                raise UsageError(f"operand node {x.id} was truncated from the tape")
            return x
        return self.lift(x)

    def apply(self, op: str, *operands, constant=None) -> Var:
        """Record ``op`` applied to ``operands`` and return the result node.

        Non-Var operands are lifted as constants (zero tangent). ``constant``
        carries the factor for ``scale`` and the index for ``column``.
        """
        if op not in OPS:
            raise UsageError(f"unknown op {op!r}")
        args = [self._own(x) for x in operands]
        if op == "concat":
            value, tangent, backward = self._concat(args)
        elif op in ("add", "sub", "mul", "div", "matmul"):
            if len(args) != 2:
                raise UsageError(f"{op} takes 2 operands, got {len(args)}")
            value, tangent, backward = getattr(self, f"_{op}")(*args)
        else:
            if len(args) != 1:
                raise UsageError(f"{op} takes 1 operand, got {len(args)}")
            if op in ("tanh", "sigmoid", "softplus"):
                value, tangent, backward = self._unary(op, args[0])
            elif op in ("scale", "column"):
                if constant is None:
                    raise UsageError(f"{op} needs a constant")
                value, tangent, backward = getattr(self, f"_{op}")(args[0], constant)
            else:
                value, tangent, backward = getattr(self, f"_{op}")(args[0])
        return self._record(op, _as_value(value), tangent, tuple(a.id for a in args), backward)

    def _add(self, a: Var, b: Var):
        _check_elementwise("add", a, b)
        sa, sb = np.shape(a.value), np.shape(b.value)

        def backward(g, h):
            return [(_reduce_to(g, sa), _reduce_to(h, sa)),
                    (_reduce_to(g, sb), _reduce_to(h, sb))]
        return a.value + b.value, _plus(a._tangent, b._tangent), backward

    def _sub(self, a: Var, b: Var):
        _check_elementwise("sub", a, b)
        sa, sb = np.shape(a.value), np.shape(b.value)
        tangent = _plus(a._tangent, _times(-1.0, b._tangent))

        def backward(g, h):
            return [(_reduce_to(g, sa), _reduce_to(h, sa)),
                    (_reduce_to(_times(-1.0, g), sb), _reduce_to(_times(-1.0, h), sb))]
        return a.value - b.value, tangent, backward

    def _mul(self, a: Var, b: Var):
        _check_elementwise("mul", a, b)
        av, at, bv, bt = a.value, a._tangent, b.value, b._tangent
        sa, sb = np.shape(av), np.shape(bv)
        tangent = _plus(_times(at, bv), _times(av, bt))

        def backward(g, h):
            ga = _plus(_times(g, bv), _times(h, bt))
            gb = _plus(_times(g, av), _times(h, at))
            return [(_reduce_to(ga, sa), _reduce_to(_times(h, bv), sa)),
                    (_reduce_to(gb, sb), _reduce_to(_times(h, av), sb))]
        return av * bv, tangent, backward

    def _div(self, a: Var, b: Var):
        _check_elementwise("div", a, b)
        av, at, bv, bt = a.value, a._tangent, b.value, b._tangent
        if np.any(np.asarray(bv) == 0.0):
            raise AutodiffDomainError(
                f"division by zero at node {len(self.nodes)} (denominator node {b.id})")
        sa, sb = np.shape(av), np.shape(bv)
        inv = 1.0 / bv
        inv2 = inv * inv
        tangent = _plus(_times(at, inv), _times(-1.0, av, bt, inv2))

        def backward(g, h):
            ga = _plus(_times(g, inv), _times(-1.0, h, bt, inv2))
            gb = _plus(_times(-1.0, g, av, inv2),
                       _times(-1.0, h, at, inv2),
                       _times(2.0, h, av, bt, inv2, inv))
            return [(_reduce_to(ga, sa), _reduce_to(_times(h, inv), sa)),
                    (_reduce_to(gb, sb), _reduce_to(_times(-1.0, h, av, inv2), sb))]
        return av * inv, tangent, backward

    def _unary(self, op: str, a: Var):
        at = a._tangent
        z, d1, d2 = _unary_derivatives(op, a.value)

        def backward(g, h):
            return [(_plus(_times(g, d1), _times(h, d2, at)), _times(h, d1))]
        return z, _times(d1, at), backward

    def _neg(self, a: Var):
        def backward(g, h):
            return [(_times(-1.0, g), _times(-1.0, h))]
        return -a.value, _times(-1.0, a._tangent), backward

    def _scale(self, a: Var, factor: float):
        factor = float(factor)

        def backward(g, h):
            return [(_times(factor, g), _times(factor, h))]
        return factor * a.value, _times(factor, a._tangent), backward

    def _matmul(self, a: Var, b: Var):
        av, at, bv, bt = a.value, a._tangent, b.value, b._tangent
        if np.ndim(av) != 2 or np.ndim(bv) != 2 or av.shape[1] != bv.shape[0]:
            raise UsageError(f"matmul: incompatible shapes {np.shape(av)} and {np.shape(bv)}")
        tangent = _plus(_mm(at, bv), _mm(av, bt))

        def backward(g, h):
            ga = _plus(_mm(g, bv.T), _mm(h, _t(bt)))
            gb = _plus(_mm(av.T, g), _mm(_t(at), h))
            return [(ga, _mm(h, bv.T)), (gb, _mm(av.T, h))]
        return av @ bv, tangent, backward

    def _sum(self, a: Var):
        shape = np.shape(a.value)
        tangent = None if a._tangent is None else float(np.sum(a._tangent))

        def backward(g, h):
            spread = (lambda x: None if x is None else
                      (x if shape == () else np.full(shape, x)))
            return [(spread(g), spread(h))]
        return float(np.sum(a.value)), tangent, backward

    def _column(self, a: Var, index: int):
        if np.ndim(a.value) != 2:
            raise UsageError(f"column: operand node {a.id} is not a matrix")
        index = int(index)
        if not 0 <= index < a.value.shape[1]:
            raise UsageError(f"column {index} out of range for width {a.value.shape[1]}")
        shape = a.value.shape

        def scatter(x):
            if x is None:
                return None
            out = np.zeros(shape)
            out[:, index] = x
            return out

        def backward(g, h):
            return [(scatter(g), scatter(h))]
        tangent = None if a._tangent is None else a._tangent[:, index].copy()
        return a.value[:, index].copy(), tangent, backward

    def _concat(self, args: list[Var]):
        """Stack 1-d and 2-d operands side by side as columns."""
        if not args:
            raise UsageError("concat needs at least one operand")
        blocks = [np.reshape(a.value, (np.shape(a.value)[0], -1)) for a in args]
        rows = {b.shape[0] for b in blocks}
        if len(rows) != 1:
            raise UsageError(f"concat: operands have different row counts {sorted(rows)}")
        widths = [b.shape[1] for b in blocks]
        value = np.hstack(blocks)
        if all(a._tangent is None for a in args):
            tangent = None
        else:
            tangent = np.hstack([
                np.zeros_like(b) if a._tangent is None else np.reshape(a._tangent, b.shape)
                for a, b in zip(args, blocks)])
        shapes = [np.shape(a.value) for a in args]
        bounds = np.cumsum([0] + widths)

        def split(x):
            if x is None:
                return [None] * len(args)
            return [np.reshape(x[:, lo:hi], s) for lo, hi, s in zip(bounds[:-1], bounds[1:], shapes)]

        def backward(g, h):
            return list(zip(split(g), split(h)))
        return value, tangent, backward

    def _tangent_of(self, a: Var):
        def backward(g, h):
            return [(None, g)]
        return a.tangent, None, backward

    def backward(self, loss: Var) -> dict[int, Value]:
        """Accumulate adjoints of ``loss`` into every node.

        Returns:
            dict mapping each leaf id to d(loss)/d(leaf)
        """
        if not isinstance(loss, Var) or loss.tape is not self \
                or loss.id >= len(self.vars) or self.vars[loss.id] is not loss:
            raise UsageError("loss is not a node of this tape")
        if np.size(loss.value) != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")

        adj: dict[int, Value] = {loss.id: _as_value(np.ones_like(loss.value))}
        tadj: dict[int, Value] = {}
        for node_id in range(loss.id, -1, -1):
            g = adj.get(node_id)
            h = tadj.get(node_id)
            node = self.nodes[node_id]
            if (g is None and h is None) or node.backward is None:
                continue
            for parent, (gp, hp) in zip(node.parents, node.backward(g, h)):
                if gp is not None:
                    adj[parent] = gp if parent not in adj else adj[parent] + gp
                if hp is not None:
                    tadj[parent] = hp if parent not in tadj else tadj[parent] + hp

        for var in self.vars:
            var.adjoint = adj.get(var.id, _zeros_like(var.value))
            var.tangent_adjoint = tadj.get(var.id, _zeros_like(var.value))
        return {i: var.adjoint for i, var in enumerate(self.vars) if not self.nodes[i].parents}

    def gradients(self, loss: Var, wrt: Sequence[Var]) -> list[Value]:
        """Run backward and return adjoints aligned with ``wrt``."""
        self.backward(loss)
        return [var.adjoint for var in wrt]


def lift(tape: Tape, value, tangent=None) -> Var:
    return tape.lift(value, tangent)


def apply(op: str, *operands: Var, constant=None) -> Var:
    if not operands or not isinstance(operands[0], Var):
        raise UsageError("apply needs a Var as first operand to locate the tape")
    return operands[0].tape.apply(op, *operands, constant=constant)


def backward(loss: Var) -> dict[int, Value]:
    return loss.tape.backward(loss)
