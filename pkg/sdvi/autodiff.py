"""
Scalar reverse-mode automatic differentiation.

A Tape records every elementary operation applied to DualVars as a node
holding its value and the local partial derivatives with respect to its
(at most two) parents. backward() sweeps the tape once in reverse to get
exact gradients of a scalar output with respect to every node.

The module-level math functions (exp, log, ...) accept plain floats too, so
model and density code is written once and runs either on floats (fast
path, no tape) or on DualVars (gradient path).
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np


SQRT_PI = math.sqrt(math.pi)


class DomainError(ValueError):
    """Invalid argument for log/pow/div; aborts the current model evaluation."""


class OpKind(str, Enum):
    """Elementary operations a tape node can hold."""
    CONSTANT = "constant"
    ADD = "add"
    MUL = "mul"
    NEG = "neg"
    EXP = "exp"
    LOG = "log"
    POW = "pow"
    DIV = "div"
    ERF = "erf"
    TANH = "tanh"
    SOFTPLUS = "softplus"


@dataclass(frozen=True)
class TapeNode:
    op: OpKind
    parents: Tuple[int, ...]
    partials: Tuple[float, ...]
    value: float


Scalar = Union[float, "DualVar"]


def _exp(a: float) -> float:
    try:
        return math.exp(a)
    except OverflowError:
        return math.inf


def _log(a: float) -> float:
    if a < 0 or math.isnan(a):
        raise DomainError(f"log of negative argument {a}")
    if a == 0:
        return -math.inf
    return math.log(a)


def _softplus(a: float) -> float:
    return math.log1p(math.exp(-abs(a))) + max(a, 0.0)


def _sigmoid(a: float) -> float:
    if a >= 0:
        return 1.0 / (1.0 + math.exp(-a))
    e = math.exp(a)
    return e / (1.0 + e)


def _pow(a: float, b: float) -> float:
    if a < 0 and not float(b).is_integer():
        raise DomainError(f"pow of negative base {a} with non-integer exponent {b}")
    if a == 0 and b < 0:
        raise DomainError("pow of zero base with negative exponent")
    try:
        return a ** b
    except OverflowError:
        return math.inf


def _forward(op: OpKind, a: float, b: float) -> Tuple[float, Tuple[float, ...]]:
    """Value and local partials of one op applied to parent values."""
    if op is OpKind.ADD:
        return a + b, (1.0, 1.0)
    if op is OpKind.MUL:
        return a * b, (b, a)
    if op is OpKind.NEG:
        return -a, (-1.0,)
    if op is OpKind.EXP:
        v = _exp(a)
        return v, (v,)
    if op is OpKind.LOG:
        v = _log(a)
        return v, (math.inf if a == 0 else 1.0 / a,)
    if op is OpKind.POW:
        v = _pow(a, b)
        d_base = b * _pow(a, b - 1.0) if b != 0 else 0.0
        d_exp = v * math.log(a) if a > 0 else 0.0
        return v, (d_base, d_exp)
    if op is OpKind.DIV:
        if b == 0:
            raise DomainError("division by zero")
        v = a / b
        return v, (1.0 / b, -v / b)
    if op is OpKind.ERF:
        return math.erf(a), (2.0 / SQRT_PI * _exp(-a * a),)
    if op is OpKind.TANH:
        v = math.tanh(a)
        return v, (1.0 - v * v,)
    if op is OpKind.SOFTPLUS:
        return _softplus(a), (_sigmoid(a),)
    raise ValueError(f"unsupported op {op}")


_BINARY = {OpKind.ADD, OpKind.MUL, OpKind.POW, OpKind.DIV}


class Tape:
    """Arena of nodes for one evaluation; discard after backward."""

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op: OpKind, parents: Tuple[int, ...], partials: Tuple[float, ...], value: float) -> "DualVar":
        index = len(self.nodes)
        assert all(p < index for p in parents), "tape parents must precede the node"
        self.nodes.append(TapeNode(op, parents, partials, value))
        return DualVar(self, index)

    def variable(self, value: float) -> "DualVar":
        """New input leaf."""
        return self._push(OpKind.CONSTANT, (), (), float(value))

    constant = variable

    def lift(self, x: Scalar) -> "DualVar":
        if isinstance(x, DualVar):
            if x.tape is not self:
                raise ValueError("operands belong to different tapes")
            return x
        return self.variable(float(x))

    def record(self, op: OpKind, a: Scalar, b: Optional[Scalar] = None) -> "DualVar":
        """Apply one op to operands, lifting plain floats to constant nodes."""
        da = self.lift(a)
        if op in _BINARY:
            if b is None:
                raise ValueError(f"{op.value} needs two operands")
            db = self.lift(b)
            value, partials = _forward(op, da.value, db.value)
            return self._push(op, (da.index, db.index), partials, value)
        value, partials = _forward(op, da.value, 0.0)
        return self._push(op, (da.index,), partials, value)

    def backward(self, output: "DualVar") -> "Gradient":
        """Exact gradient of output with respect to every node recorded before it."""
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        adjoint = np.zeros(len(self.nodes))
        adjoint[output.index] = 1.0
        nodes = self.nodes
        for i in range(output.index, -1, -1):
            a = adjoint[i]
            if a == 0.0:
                continue
            node = nodes[i]
            for parent, partial in zip(node.parents, node.partials):
                adjoint[parent] += a * partial
        return Gradient(adjoint)


class Gradient:
    """Adjoints of one backward sweep, indexable by node index or DualVar."""

    def __init__(self, adjoint: np.ndarray):
        self.adjoint = adjoint

    def __getitem__(self, key: Union[int, "DualVar"]) -> float:
        index = key.index if isinstance(key, DualVar) else key
        return float(self.adjoint[index])

    def wrt(self, variables: Iterable["DualVar"]) -> np.ndarray:
        return np.array([self.adjoint[v.index] for v in variables])


class DualVar:
    """Handle to one node of a tape; arithmetic records new nodes."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> float:
        return self.tape.nodes[self.index].value

    def __float__(self) -> float:
        return self.value

    def __repr__(self) -> str:
        return f"DualVar({self.value!r}, node={self.index})"

    def __add__(self, other: Scalar) -> "DualVar":
        return self.tape.record(OpKind.ADD, self, other)

    def __radd__(self, other: Scalar) -> "DualVar":
        return self.tape.record(OpKind.ADD, other, self)

    def __sub__(self, other: Scalar) -> "DualVar":
        return self.tape.record(OpKind.ADD, self, -other)

    def __rsub__(self, other: Scalar) -> "DualVar":
        return self.tape.record(OpKind.ADD, other, -self)

    def __mul__(self, other: Scalar) -> "DualVar":
        return self.tape.record(OpKind.MUL, self, other)

    def __rmul__(self, other: Scalar) -> "DualVar":
        return self.tape.record(OpKind.MUL, other, self)

    def __truediv__(self, other: Scalar) -> "DualVar":
        return self.tape.record(OpKind.DIV, self, other)

    def __rtruediv__(self, other: Scalar) -> "DualVar":
        return self.tape.record(OpKind.DIV, other, self)

    def __pow__(self, other: Scalar) -> "DualVar":
        return self.tape.record(OpKind.POW, self, other)

    def __rpow__(self, other: Scalar) -> "DualVar":
        return self.tape.record(OpKind.POW, other, self)

    def __neg__(self) -> "DualVar":
        return self.tape.record(OpKind.NEG, self)

    def __abs__(self) -> "DualVar":
        return -self if self.value < 0 else self

    # comparisons look at values only: control flow never carries gradients
    def __lt__(self, other: Scalar) -> bool:
        return self.value < value_of(other)

    def __le__(self, other: Scalar) -> bool:
        return self.value <= value_of(other)

    def __gt__(self, other: Scalar) -> bool:
        return self.value > value_of(other)

    def __ge__(self, other: Scalar) -> bool:
        return self.value >= value_of(other)


def value_of(x: Scalar) -> float:
    return x.value if isinstance(x, DualVar) else float(x)


def tape_of(*xs: object) -> Optional[Tape]:
    for x in xs:
        if isinstance(x, DualVar):
            return x.tape
    return None


def exp(x: Scalar) -> Scalar:
    if isinstance(x, DualVar):
        return x.tape.record(OpKind.EXP, x)
    return _exp(x)


def log(x: Scalar) -> Scalar:
    if isinstance(x, DualVar):
        return x.tape.record(OpKind.LOG, x)
    return _log(x)


def erf(x: Scalar) -> Scalar:
    if isinstance(x, DualVar):
        return x.tape.record(OpKind.ERF, x)
    return math.erf(x)


def tanh(x: Scalar) -> Scalar:
    if isinstance(x, DualVar):
        return x.tape.record(OpKind.TANH, x)
    return math.tanh(x)


def softplus(x: Scalar) -> Scalar:
    if isinstance(x, DualVar):
        return x.tape.record(OpKind.SOFTPLUS, x)
    return _softplus(x)


def sqrt(x: Scalar) -> Scalar:
    if isinstance(x, DualVar):
        return x.tape.record(OpKind.POW, x, 0.5)
    if x < 0:
        raise DomainError(f"sqrt of negative argument {x}")
    return math.sqrt(x)


def linearized(value: float, inputs: Sequence[Scalar], partials: Sequence[float]) -> Scalar:
    """
    Splice a value computed off-tape (e.g. with numpy) into the tape.

    Records value + sum_j partials[j] * (x_j - x_j.value) using binary add/mul
    nodes only, so the output carries the given value and exactly the given
    first derivatives with respect to each DualVar input. Plain floats in
    inputs are treated as constants.
    """
    tape = tape_of(*inputs)
    if tape is None:
        return value
    offset = value - sum(p * value_of(x) for x, p in zip(inputs, partials) if isinstance(x, DualVar))
    out: Scalar = tape.constant(offset)
    for x, p in zip(inputs, partials):
        if isinstance(x, DualVar) and p != 0.0:
            out = out + x * p
    return out


def backward(output: DualVar) -> Gradient:
    return output.tape.backward(output)
