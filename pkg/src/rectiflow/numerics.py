"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every differentiable operation returns a Tensor that remembers its parent
tensors, an op tag, and one vector-Jacobian closure per parent; that
per-result record is the dynamic tape. The backward sweep only invokes
the closures of parents that participate in gradients, so frozen
parameters cost nothing. Recording can be suspended with `no_grad()`
(used by samplers and evaluation passes).

Values are immutable by convention once built; only optimizers write to
parameter `.data` buffers, and they are the sole owner while training.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .rng import Rng

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording inside the context."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array, optionally carrying its tape record."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"


def parameter(data) -> Tensor:
    """A leaf tensor that participates in gradient computation."""
    return Tensor(data, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def _record(data: np.ndarray, parents: tuple[Tensor, ...], vjps, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._vjps = vjps
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# differentiable operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data
    return _record(
        a_data @ b_data, (a, b),
        (lambda g: g @ b_data.T, lambda g: a_data.T @ g),
        "matmul",
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d operand, got {a.shape}")
    # views, not copies: BLAS consumers handle strided operands directly
    return _record(a.data.T, (a,), (lambda g: g.T,), "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), (lambda g: g, lambda g: g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), (lambda g: g, lambda g: -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return _record(
        a_data * b_data, (a, b),
        (lambda g: g * b_data, lambda g: g * a_data),
        "mul",
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record(a.data * s, (a,), (lambda g: g * s,), "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _record(out_data, (a,), (lambda g: g * (1.0 - out_data * out_data),), "tanh")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; d/dx = sigmoid(x)."""
    out_data = np.logaddexp(0.0, a.data)
    x = a.data
    return _record(
        out_data, (a,),
        (lambda g: g * (0.5 * (1.0 + np.tanh(0.5 * x))),),
        "softplus",
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(d) for d in shape)
    orig = a.shape
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {orig} as {shape}")
    return _record(a.data.reshape(shape), (a,), (lambda g: g.reshape(orig),), "reshape")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(
        np.asarray(a.data.sum()), (a,),
        (lambda g: np.broadcast_to(g, shape).astype(np.float64, copy=True),),
        "sum_all",
    )


def add_bias(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of an n-by-d matrix."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"add_bias: need (n, d) and (d,), got {m.shape} and {v.shape}")
    return _record(
        m.data + v.data, (m, v),
        (lambda g: g, lambda g: g.sum(axis=0)),
        "add_bias",
    )


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-d tensors with equal row counts along columns."""
    if not parts:
        raise ContractError("concat_cols needs at least one operand")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: all operands must be 2-d with {rows} rows, got "
                f"{[p.shape for p in parts]}"
            )
    offsets = np.concatenate([[0], np.cumsum([p.shape[1] for p in parts])])

    def part_vjp(i):
        return lambda g: g[:, offsets[i]:offsets[i + 1]]

    return _record(
        np.concatenate([p.data for p in parts], axis=1),
        tuple(parts),
        tuple(part_vjp(i) for i in range(len(parts))),
        "concat_cols",
    )


# ---------------------------------------------------------------------------
# gradients


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar loss w.r.t. each parameter.

    Parameters that do not appear in the loss graph get zero gradients.
    """
    params = list(params)
    if loss.data.size != 1:
        raise ContractError(f"grad needs a scalar loss, got shape {loss.shape}")

    # Topological order by iterative post-order DFS over the tape.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    # Adjoints may alias vjp outputs (pass-through ops return g itself), so
    # accumulation always builds a fresh array instead of adding in place.
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = adjoint.get(id(node))
        if g is None or not node._parents:
            continue
        for p, vjp in zip(node._parents, node._vjps):
            if not p.requires_grad:
                continue
            pg = vjp(g)
            acc = adjoint.get(id(p))
            adjoint[id(p)] = pg if acc is None else acc + pg

    out = []
    for p in params:
        g = adjoint.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.ascontiguousarray(g))
    return out


# ---------------------------------------------------------------------------
# random tensors


def gaussian(rng: Rng, shape) -> Tensor:
    """Tensor of i.i.d. standard-normal draws from `rng`."""
    dims = [int(d) for d in (shape if isinstance(shape, (list, tuple)) else (shape,))]
    if any(d < 0 for d in dims):
        raise ShapeError(f"gaussian: dimensions must be >= 0, got {dims}")
    n = 1
    for d in dims:
        n *= d
    return Tensor(rng.normals(n).reshape(dims))
