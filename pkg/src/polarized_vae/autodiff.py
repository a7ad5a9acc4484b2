"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run tape in the micrograd style: every operation returns a
``Tensor`` that records its parent tensors and a closure that routes the
incoming gradient back to them.  Values are numpy arrays (row-major,
float64); a fresh tape is built per training step and discarded after
``backward``.  Tensors are immutable after creation as far as forward
values go, so sharing them across threads for reading is safe; a tape is
owned by a single thread.

Broadcasting is supported only to the extent the model needs it (bias
rows, column masks, scalars); gradients of broadcast operands are reduced
back to the operand shape by summing over the broadcast axes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    DomainError,
    NumericError,
    OptimizerError,
)

# Forward outputs are checked for NaN/Inf; a non-finite value is an error
# state, not a value.  Leave on by default: the check is cheap next to the
# matmuls it guards.
CHECK_FINITE = True


def _check_finite(data: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by op '{op}'")


class Tensor:
    """A node on the tape: a value, its accumulated gradient, and parents.

    Leaves created with ``requires_grad=True`` are trainable parameters;
    everything else is either a constant or an intermediate op result.
    Gradient accumulation is additive, so fan-out sums contributions.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        _parents: tuple = (),
        _backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse sweep from this (scalar) node.

        Runs a reverse topological walk of the tape; every reachable node
        with ``requires_grad`` or parents receives its total gradient.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar root, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in visited:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # Operator sugar; mirrors what the model code actually uses.
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
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (the operand was broadcast up)."""
    if grad.shape == shape:
        return grad
    # Sum away leading axes added by broadcasting.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, fwd, bwd_a, bwd_b, op: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(
            f"{op}: incompatible shapes {a.shape} and {b.shape}"
        ) from exc

    def backward_fn(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(bwd_a(g, a.data, b.data), a.data.shape))
        b.accumulate(_unbroadcast(bwd_b(g, a.data, b.data), b.data.shape))

    return Tensor(data, _parents=(a, b), _backward_fn=backward_fn, op=op)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(
        a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul"
    )


def div(a, b) -> Tensor:
    return _binary(
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
        "div",
    )


def _unary(a, fwd_data, bwd, op: str) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g: np.ndarray) -> None:
        a.accumulate(bwd(g, a.data, out.data))

    out = Tensor(fwd_data, _parents=(a,), _backward_fn=backward_fn, op=op)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _unary(a, data, lambda g, x, y: g * y, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    return _unary(a, np.log(a.data), lambda g, x, y: g / x, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt requires non-negative input")
    out_data = np.sqrt(a.data)
    # Subgradient 0 at exactly 0 keeps the op total (used under norms).
    def bwd(g, x, y):
        denom = np.where(y > 0.0, y, np.inf)
        return g * 0.5 / denom

    return _unary(a, out_data, bwd, "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form is overflow-free and exact at 0.
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _unary(a, out_data, lambda g, x, y: g * y * (1.0 - y), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.tanh(a.data), lambda g, x, y: g * (1.0 - y * y), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    # max(0, x) with subgradient 0 at the kink (x == 0 treated as inactive).
    return _unary(a, np.maximum(a.data, 0.0), lambda g, x, y: g * (x > 0.0), "relu")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward_fn(g: np.ndarray) -> None:
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    return Tensor(a.data @ b.data, _parents=(a, b), _backward_fn=backward_fn, op="matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _unary(a, a.data.T.copy(), lambda g, x, y: g.T, "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat: incompatible shapes {[p.shape for p in parts]}"
        ) from exc
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p.accumulate(g[tuple(idx)])

    return Tensor(data, _parents=tuple(parts), _backward_fn=backward_fn, op="concat")


def columns(a, start: int, stop: int) -> Tensor:
    """Slice of columns [start, stop) of a matrix (or elements of a vector)."""
    a = as_tensor(a)
    axis = a.data.ndim - 1
    if not (0 <= start <= stop <= a.data.shape[axis]):
        raise DimensionError(
            f"slice [{start}:{stop}] out of range for shape {a.shape}"
        )
    idx = (slice(None),) * axis + (slice(start, stop),)
    data = a.data[idx].copy()

    def backward_fn(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        full[idx] = g
        a.accumulate(full)

    return Tensor(data, _parents=(a,), _backward_fn=backward_fn, op="slice")


def gather_rows(a, indices) -> Tensor:
    """Select rows of a matrix by integer index; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for shape {a.shape}")

    def backward_fn(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a.accumulate(full)

    return Tensor(a.data[idx].copy(), _parents=(a,), _backward_fn=backward_fn, op="gather")


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g: np.ndarray) -> None:
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return Tensor(data, _parents=(a,), _backward_fn=backward_fn, op="sum")


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    return tsum(mul(a, b))


def l2norm(a) -> Tensor:
    """Euclidean norm of a flattened tensor; gradient 0 at the origin."""
    a = as_tensor(a)
    return sqrt(tsum(mul(a, a)))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax of a plain array (helper for sampling / inspection)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy_rows(logits, targets) -> Tensor:
    """Per-row cross entropy: logits [B x V], integer targets [B] -> [B].

    Max-subtraction keeps the log-sum-exp finite for any finite logits.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2:
        raise DimensionError(f"expected logits matrix, got shape {logits.shape}")
    n, v = logits.data.shape
    if t.shape != (n,):
        raise DimensionError(f"targets shape {t.shape} does not match batch {n}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target out of range for vocabulary of size {v}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(n), t]

    def backward_fn(g: np.ndarray) -> None:
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        logits.accumulate(p * g[:, None])

    return Tensor(losses, _parents=(logits,), _backward_fn=backward_fn, op="xent")


def softmax_cross_entropy(logits, target: int) -> Tensor:
    """Negative log softmax probability of `target` under 1-D `logits`."""
    logits = as_tensor(logits)
    if logits.data.ndim != 1:
        raise DimensionError(f"expected a logits vector, got shape {logits.shape}")
    return tsum(softmax_cross_entropy_rows(_reshape_row(logits), [int(target)]))


def _reshape_row(a: Tensor) -> Tensor:
    def backward_fn(g: np.ndarray) -> None:
        a.accumulate(g.reshape(a.data.shape))

    return Tensor(
        a.data.reshape(1, -1), _parents=(a,), _backward_fn=backward_fn, op="reshape"
    )


def backward(root: Tensor) -> None:
    root.backward()


def gradients(root: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Zero, backprop, and collect gradients for `params`.

    Parameters unreachable from `root` get zero gradients.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    root.backward()
    return [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between backprop and central finite differences.

    `f` must rebuild its tape on every call and return a scalar Tensor.
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if h <= 0:
        raise ContractError("grad_check requires h > 0")
    base = f()
    if not np.isfinite(base.data).all():
        raise NumericError("grad_check: objective evaluated to a non-finite value")
    analytic = gradients(base, params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("grad_check: objective evaluated to a non-finite value")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = ga.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


class AdamState:
    """First/second moment accumulators for one parameter list."""

    def __init__(
        self,
        params: Sequence[Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[Sequence[Tensor], AdamState]:
    """One bias-corrected ADAM update, in place on `params`.

    Rejects non-finite gradients before touching any state, so a bad step
    leaves parameters and moments untouched.
    """
    if lr <= 0:
        raise ContractError("adam_step requires lr > 0")
    if len(params) != len(grads):
        raise DimensionError("params and grads must align")
    for p, g in zip(params, grads):
        if p.data.shape != g.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise OptimizerError("non-finite gradient; state not updated")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / corr1
        v_hat = state.v[i] / corr2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
