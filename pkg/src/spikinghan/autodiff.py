"""
Tape-based reverse-mode differentiation over dense numpy arrays (float64 unless
the tape is built for single-precision inference).

Every primitive computes its value eagerly and records a backward closure on
the tape. `Tape.backward` walks the records in reverse order and accumulates
gradients into the trainable leaves. The spike nonlinearity uses a surrogate
derivative in `spiking` mode; in `smooth` mode its forward is the logistic
curve itself and its backward the exact derivative, which is what the
finite-difference checks run against.

Broadcasting is deliberately narrow: elementwise ops need equal shapes, with
0-d scalars and row-bias vectors as the only exceptions.
"""

import logging
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from spikinghan.errors import ConfigError, ContractError, NumericError, ShapeError

logger = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class TapeMode(str, Enum):
    SPIKING = "spiking"
    SMOOTH = "smooth"


# region Tape
class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "requires_grad", "name")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray, requires_grad: bool, name: Optional[str]):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node#{self.index}{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """
    Ordered record of primitive applications.

    A tape supports one backward pass. Call `reset` to clear gradients before
    running backward again; a second backward without reset is an error.
    """

    def __init__(
        self,
        mode: TapeMode = TapeMode.SPIKING,
        *,
        surrogate_chain_alpha: bool = False,
        dtype: type = np.float64,
    ):
        self.mode = TapeMode(mode)
        self.surrogate_chain_alpha = surrogate_chain_alpha
        self.dtype = np.dtype(dtype)
        self._nodes: List[Node] = []
        self._parents: List[Tuple[Node, ...]] = []
        self._backward: List[Optional[Backward]] = []
        self._grads: Optional[List[Optional[np.ndarray]]] = None

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def smooth(self) -> bool:
        return self.mode is TapeMode.SMOOTH

    def _push(self, value: np.ndarray, parents: Tuple[Node, ...], backward: Optional[Backward],
              requires_grad: bool, name: Optional[str] = None) -> Node:
        node = Node(self, len(self._nodes), value, requires_grad, name)
        self._nodes.append(node)
        self._parents.append(parents)
        self._backward.append(backward if requires_grad else None)
        return node

    def leaf(self, value: ArrayLike, *, name: Optional[str] = None, requires_grad: bool = True) -> Node:
        array = np.array(value, dtype=self.dtype)
        return self._push(array, (), None, requires_grad, name)

    def constant(self, value: ArrayLike, name: Optional[str] = None) -> Node:
        return self.leaf(value, name=name, requires_grad=False)

    def lift(self, value: Union[Node, ArrayLike]) -> Node:
        if isinstance(value, Node):
            _same_tape(self, value)
            return value
        return self.constant(value)

    def record(self, value: np.ndarray, parents: Sequence[Node], backward: Backward) -> Node:
        for parent in parents:
            _same_tape(self, parent)
        requires_grad = any(p.requires_grad for p in parents)
        return self._push(value, tuple(parents), backward, requires_grad)

    def trainable_leaves(self) -> List[Node]:
        return [n for n, ps in zip(self._nodes, self._parents) if not ps and n.requires_grad]

    def backward(self, loss: Node) -> Dict[str, np.ndarray]:
        """
        Accumulate d(loss)/d(node) for every node in reverse recording order.

        Returns the gradient of each trainable leaf keyed by its name (unnamed
        leaves are keyed by tape index).

        Raises:
            ContractError: non-scalar loss, or a second backward without `reset`.
        """
        _same_tape(self, loss)
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._grads is not None:
            raise ContractError("backward already ran on this tape; call reset() first")

        grads: List[Optional[np.ndarray]] = [None] * len(self._nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for index in range(loss.index, -1, -1):
            grad = grads[index]
            backward = self._backward[index]
            if grad is None or backward is None:
                continue
            for parent, parent_grad in zip(self._parents[index], backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = parent_grad
                else:
                    grads[parent.index] = grads[parent.index] + parent_grad
        self._grads = grads

        return {
            (leaf.name if leaf.name is not None else str(leaf.index)): self.grad(leaf)
            for leaf in self.trainable_leaves()
        }

    def grad(self, node: Node) -> np.ndarray:
        if self._grads is None:
            raise ContractError("No gradients yet: run backward first")
        grad = self._grads[node.index]
        return np.zeros_like(node.value) if grad is None else grad

    def reset(self) -> None:
        """Drop gradients so backward may run again over the recorded operations."""
        self._grads = None


def _same_tape(tape: Tape, node: Node) -> None:
    if node.tape is not tape:
        raise ContractError(f"{node!r} belongs to a different tape")


def _check_same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch", a.shape, b.shape)


# endregion


# region Linear algebra
def linear(x: Node, w: Node) -> Node:
    """Matrix product x @ w."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear: inner dimensions differ", x.shape, w.shape)
    xv, wv = x.value, w.value

    def backward(g):
        return g @ wv.T, xv.T @ g

    return x.tape.record(xv @ wv, (x, w), backward)


def spmm(matrix: sp.spmatrix, x: Node) -> Node:
    """Sparse constant matrix times dense node."""
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError("spmm: inner dimensions differ", matrix.shape, x.shape)
    matrix = sp.csr_matrix(matrix, dtype=x.value.dtype)
    transposed = matrix.T.tocsr()

    def backward(g):
        return (np.asarray(transposed @ g),)

    return x.tape.record(np.asarray(matrix @ x.value), (x,), backward)


def matvec(x: Node, v: Node) -> Node:
    """x @ v for a matrix x and vector v."""
    if x.value.ndim != 2 or v.value.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError("matvec: inner dimensions differ", x.shape, v.shape)
    xv, vv = x.value, v.value

    def backward(g):
        return np.outer(g, vv), xv.T @ g

    return x.tape.record(xv @ vv, (x, v), backward)


# endregion


# region Elementwise
def add(a: Node, b: Node) -> Node:
    _check_same_shape("add", a, b)
    return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _check_same_shape("sub", a, b)
    return a.tape.record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    """Elementwise product; `b` may also be a 0-d scalar node."""
    av, bv = a.value, b.value
    if b.value.ndim == 0 and a.value.ndim > 0:

        def backward(g):
            return g * bv, np.sum(g * av)

    else:
        _check_same_shape("mul", a, b)

        def backward(g):
            return g * bv, g * av

    return a.tape.record(av * bv, (a, b), backward)


def scale(x: Node, factor: float) -> Node:
    factor = float(factor)
    return x.tape.record(x.value * factor, (x,), lambda g: (g * factor,))


def affine(x: Node, factor: float, shift: float) -> Node:
    """factor * x + shift."""
    factor, shift = float(factor), float(shift)
    return x.tape.record(x.value * factor + shift, (x,), lambda g: (g * factor,))


def add_bias(x: Node, bias: Node) -> Node:
    """Add a vector to every row of a matrix."""
    if x.value.ndim != 2 or bias.value.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError("add_bias: bias does not match row width", x.shape, bias.shape)
    return x.tape.record(x.value + bias.value, (x, bias), lambda g: (g, g.sum(axis=0)))


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)
    return x.tape.record(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.tape.record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def elu(x: Node) -> Node:
    xv = x.value
    negative = np.expm1(np.minimum(xv, 0.0))
    out = np.where(xv > 0, xv, negative)
    slope = np.where(xv > 0, 1.0, negative + 1.0)
    return x.tape.record(out, (x,), lambda g: (g * slope,))


def softplus(x: Node) -> Node:
    xv = x.value
    return x.tape.record(np.logaddexp(0.0, xv), (x,), lambda g: (g * expit(xv),))


def reciprocal(x: Node) -> Node:
    out = 1.0 / x.value
    return x.tape.record(out, (x,), lambda g: (-g * out * out,))


def log_clamped(x: Node, eps: float, grad_floor: Optional[float] = None) -> Node:
    """
    ln(max(x, eps)).

    The gradient is g / max(x, eps) everywhere, clamped entries included. A `grad_floor`
    divides by max(x, grad_floor) instead, leaving the value untouched.
    """
    clamped = np.maximum(x.value, eps)
    divisor = clamped if grad_floor is None else np.maximum(x.value, grad_floor)
    return x.tape.record(np.log(clamped), (x,), lambda g: (g / divisor,))


# endregion


# region Reductions
def total(x: Node) -> Node:
    return x.tape.record(np.sum(x.value), (x,), lambda g: (np.full_like(x.value, g),))


def mean(x: Node) -> Node:
    count = x.size
    return x.tape.record(np.sum(x.value) / count, (x,), lambda g: (np.full_like(x.value, g / count),))


def stack(scalars: Sequence[Node]) -> Node:
    """Collect 0-d nodes into a vector."""
    if not scalars:
        raise ShapeError("stack: nothing to stack")
    for s in scalars:
        if s.size != 1:
            raise ShapeError("stack: expected scalars", s.shape)
    tape = scalars[0].tape
    value = np.array([s.value.item() for s in scalars], dtype=tape.dtype)

    def backward(g):
        return tuple(np.asarray(g[k]).reshape(s.shape) for k, s in enumerate(scalars))

    return tape.record(value, tuple(scalars), backward)


def weighted_sum(weights: Node, terms: Sequence[Node]) -> Node:
    """sum_p weights[p] * terms[p], accumulated in order."""
    if weights.value.ndim != 1 or weights.shape[0] != len(terms):
        raise ShapeError("weighted_sum: one weight per term", weights.shape, (len(terms),))
    for term in terms[1:]:
        _check_same_shape("weighted_sum", terms[0], term)
    wv = weights.value
    out = wv[0] * terms[0].value
    for p in range(1, len(terms)):
        out = out + wv[p] * terms[p].value

    def backward(g):
        grad_w = np.array([np.sum(g * t.value) for t in terms])
        return (grad_w,) + tuple(wv[p] * g for p in range(len(terms)))

    return weights.tape.record(out, (weights,) + tuple(terms), backward)


def mean_of(nodes: Sequence[Node]) -> Node:
    """Elementwise average of same-shape nodes: summed in order, then divided by the count."""
    for node in nodes[1:]:
        _check_same_shape("mean_of", nodes[0], node)
    count = len(nodes)
    out = nodes[0].value.copy()
    for node in nodes[1:]:
        out = out + node.value

    def backward(g):
        share = g / count
        return tuple(share for _ in nodes)

    return nodes[0].tape.record(out / count, tuple(nodes), backward)


def row_normalize(x: Node) -> Node:
    """Divide each row by its sum; all-zero rows stay zero."""
    xv = x.value
    sums = xv.sum(axis=1, keepdims=True)
    safe = np.where(sums > 0, sums, 1.0)
    out = np.where(sums > 0, xv / safe, 0.0)

    def backward(g):
        inner = np.sum(g * out, axis=1, keepdims=True)
        return (np.where(sums > 0, (g - inner) / safe, 0.0),)

    return x.tape.record(out, (x,), backward)


def gather(x: Node, rows: np.ndarray, cols: np.ndarray) -> Node:
    """Pick entries x[rows[k], cols[k]] into a vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, (rows, cols), g)
        return (grad,)

    return x.tape.record(x.value[rows, cols], (x,), backward)


# endregion


# region Attention and spiking primitives
def softmax(v: Node) -> Node:
    """Softmax over a vector, computed with max-subtraction."""
    if v.value.ndim != 1:
        raise ShapeError("softmax: expected a vector", v.shape)
    if not np.all(np.isfinite(v.value)):
        raise NumericError(f"softmax: non-finite input {v.value}")
    shifted = v.value - np.max(v.value)
    exp = np.exp(shifted)
    out = exp / np.sum(exp)

    def backward(g):
        return (out * (g - np.dot(g, out)),)

    return v.tape.record(out, (v,), backward)


def dropout(x: Node, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Node:
    """
    Inverted dropout. In eval mode, or with rate 0, the input node is returned as is.

    Raises:
        ConfigError: rate outside [0, 1), or training without a generator.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x.tape.record(x.value * mask, (x,), lambda g: (g * mask,))


def heaviside_spike(x: Node, alpha: float) -> Node:
    """
    Fire where x >= 0.

    Spiking mode: binary forward; backward sigma'(alpha x), or
    alpha * sigma'(alpha x) when the tape has `surrogate_chain_alpha`.
    Smooth mode: forward sigma(alpha x), backward its exact derivative.
    """
    if alpha <= 0:
        raise ConfigError(f"surrogate alpha must be positive, got {alpha}")
    tape = x.tape
    sig = expit(alpha * x.value)
    slope = sig * (1.0 - sig)

    if tape.smooth:
        out = sig
        slope = alpha * slope
    else:
        out = (x.value >= 0).astype(x.value.dtype)
        if tape.surrogate_chain_alpha:
            slope = alpha * slope

    return tape.record(out, (x,), lambda g: (g * slope,))


def surrogate_gradient(x: np.ndarray, alpha: float, chain_alpha: bool = False) -> np.ndarray:
    """The surrogate derivative used for Heaviside's backward in spiking mode."""
    sig = expit(alpha * np.asarray(x, dtype=np.float64))
    slope = sig * (1.0 - sig)
    return alpha * slope if chain_alpha else slope


# endregion


# region Gradient checking
def finite_difference_check(
    f: Callable[[Tape, Dict[str, Node]], Node],
    params: Dict[str, np.ndarray],
    epsilon: float = 1e-5,
    *,
    tape_factory: Optional[Callable[[], Tape]] = None,
) -> float:
    """
    Compare tape gradients of `f` with central differences.

    `f` receives a fresh tape and one leaf per parameter and returns a scalar node.
    Returns max over all coordinates of |fd - g| / max(1, |g|).

    Raises:
        NumericError: a non-finite function value.
    """
    make_tape = tape_factory or (lambda: Tape(TapeMode.SMOOTH))

    def evaluate(values: Dict[str, np.ndarray]) -> Tuple[Tape, Dict[str, Node], Node]:
        tape = make_tape()
        leaves = {name: tape.leaf(value, name=name) for name, value in values.items()}
        out = f(tape, leaves)
        if not np.all(np.isfinite(out.value)):
            raise NumericError(f"finite_difference_check: non-finite value {out.value}")
        return tape, leaves, out

    tape, _, out = evaluate(params)
    grads = tape.backward(out)

    worst = 0.0
    for name, value in params.items():
        flat = np.asarray(value, dtype=np.float64).ravel()
        analytic = np.asarray(grads[name]).ravel()
        for k in range(flat.size):
            plus = {n: np.array(v, dtype=np.float64, copy=True) for n, v in params.items()}
            minus = {n: np.array(v, dtype=np.float64, copy=True) for n, v in params.items()}
            plus[name].reshape(-1)[k] += epsilon
            minus[name].reshape(-1)[k] -= epsilon
            f_plus = evaluate(plus)[2].value.item()
            f_minus = evaluate(minus)[2].value.item()
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            error = abs(numeric - analytic[k]) / max(1.0, abs(analytic[k]))
            worst = max(worst, error)
    logger.debug("finite difference check: max relative error %.3e", worst)
    return worst


# endregion
