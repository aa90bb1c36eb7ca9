"""Dense tensors with reverse-mode automatic differentiation.

The engine records every differentiable primitive on an implicit tape (the
operation graph held through parent references).  ``Tensor.backward`` walks
that tape once, in reverse topological order, and accumulates gradients into
every reachable tensor created with ``requires_grad=True``.

All values are stored as float64.  Broadcasting is supported for the cases
the model needs: scalars, trailing feature vectors (biases), and stacked
leading batch dimensions for matmul.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, TableLookupError

# Additive penalty applied to attention logits at masked positions.  Large
# enough that exp(logit - max) underflows to exactly 0.0 in float64.
MASK_PENALTY = -1e9

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """A dense n-dimensional value, optionally participating in the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: tuple = (),
        _op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction helpers ------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other: ArrayLike | "Tensor") -> "Tensor":
        other = _as_tensor(other)
        out = _node(self.data + other.data, (self, other), "add")
        if out.requires_grad:

            def bw(g: np.ndarray) -> None:
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.shape))

            out._backward = bw
        return out

    __radd__ = __add__

    def __mul__(self, other: ArrayLike | "Tensor") -> "Tensor":
        other = _as_tensor(other)
        out = _node(self.data * other.data, (self, other), "mul")
        if out.requires_grad:

            def bw(g: np.ndarray) -> None:
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.shape))

            out._backward = bw
        return out

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other: ArrayLike | "Tensor") -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return _as_tensor(other) + (-self)

    def matmul(self, other: "Tensor") -> "Tensor":
        """Matrix product over the last two axes, broadcasting leading dims."""
        other = _as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise DimensionError(
                f"matmul requires >=2-d operands, got {self.shape} and {other.shape}"
            )
        if self.shape[-1] != other.shape[-2]:
            raise DimensionError(
                f"matmul inner dimensions disagree: {self.shape} x {other.shape}"
            )
        out = _node(np.matmul(self.data, other.data), (self, other), "matmul")
        if out.requires_grad:

            def bw(g: np.ndarray) -> None:
                if self.requires_grad:
                    ga = np.matmul(g, _swap_last2(other.data))
                    self._accumulate(_unbroadcast(ga, self.shape))
                if other.requires_grad:
                    gb = np.matmul(_swap_last2(self.data), g)
                    other._accumulate(_unbroadcast(gb, other.shape))

            out._backward = bw
        return out

    __matmul__ = matmul

    # -- unary primitives -------------------------------------------------------

    def relu(self) -> "Tensor":
        out = _node(np.maximum(self.data, 0.0), (self,), "relu")
        if out.requires_grad:

            def bw(g: np.ndarray) -> None:
                self._accumulate(g * (self.data > 0.0))

            out._backward = bw
        return out

    def sigmoid(self) -> "Tensor":
        s = _sigmoid(self.data)
        out = _node(s, (self,), "sigmoid")
        if out.requires_grad:

            def bw(g: np.ndarray) -> None:
                self._accumulate(g * s * (1.0 - s))

            out._backward = bw
        return out

    def log_sigmoid(self) -> "Tensor":
        """log(sigmoid(x)) computed without overflow for large |x|."""
        x = self.data
        val = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))
        out = _node(val, (self,), "log_sigmoid")
        if out.requires_grad:

            def bw(g: np.ndarray) -> None:
                self._accumulate(g * _sigmoid(-x))

            out._backward = bw
        return out

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = _node(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:

            def bw(g: np.ndarray) -> None:
                self._accumulate(g.reshape(old))

            out._backward = bw
        return out

    def transpose_last2(self) -> "Tensor":
        if self.ndim < 2:
            raise DimensionError(f"transpose_last2 requires >=2-d input, got {self.shape}")
        out = _node(_swap_last2(self.data), (self,), "transpose")
        if out.requires_grad:

            def bw(g: np.ndarray) -> None:
                self._accumulate(_swap_last2(g))

            out._backward = bw
        return out

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:

            def bw(g: np.ndarray) -> None:
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.shape).copy())

            out._backward = bw
        return out

    def __getitem__(self, key) -> "Tensor":
        out = _node(self.data[key], (self,), "slice")
        if out.requires_grad:

            def bw(g: np.ndarray) -> None:
                full = np.zeros_like(self.data)
                np.add.at(full, key, g)
                self._accumulate(full)

            out._backward = bw
        return out

    # -- backward -----------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad.

        The loss must be a scalar connected to the tape.  Each recorded
        operation is visited exactly once, in reverse topological order.
        """
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# -- module-level primitives -----------------------------------------------------


def _as_tensor(value: ArrayLike | Tensor) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: tuple, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=parents if requires else (), _op=op)


def _swap_last2(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max-subtraction.

    Masked entries are expected to carry the additive ``MASK_PENALTY``
    sentinel; their normalized weight underflows to exactly zero.
    """
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _node(s, (x,), "softmax")
    if out.requires_grad:

        def bw(g: np.ndarray) -> None:
            dot = (g * s).sum(axis=-1, keepdims=True)
            x._accumulate(s * (g - dot))

        out._backward = bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each last-axis slice to mean 0 / unit variance, then affine.

    Uses biased variance and epsilon 1e-8 inside the square root, so a
    constant slice maps to the bias.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs a feature axis of extent >= 2, got {d}")
    eps = 1e-8
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = centered * inv
    out = _node(norm * gain.data + bias.data, (x, gain, bias), "layer_norm")
    if out.requires_grad:

        def bw(g: np.ndarray) -> None:
            if x.requires_grad:
                gg = g * gain.data
                term = gg - gg.mean(axis=-1, keepdims=True) - norm * (gg * norm).mean(axis=-1, keepdims=True)
                x._accumulate(term * inv)
            if gain.requires_grad:
                gain._accumulate(_unbroadcast(g * norm, gain.shape))
            if bias.requires_grad:
                bias._accumulate(_unbroadcast(g, bias.shape))

        out._backward = bw
    return out


def concat_last(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate tensors along the last (feature) axis."""
    parts = [_as_tensor(p) for p in parts]
    widths = [p.shape[-1] for p in parts]
    out = _node(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), "concat_last")
    if out.requires_grad:

        def bw(g: np.ndarray) -> None:
            offset = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    p._accumulate(g[..., offset : offset + w])
                offset += w

        out._backward = bw
    return out


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate tensors along the second-to-last (row) axis."""
    parts = [_as_tensor(p) for p in parts]
    heights = [p.shape[-2] for p in parts]
    out = _node(np.concatenate([p.data for p in parts], axis=-2), tuple(parts), "concat_rows")
    if out.requires_grad:

        def bw(g: np.ndarray) -> None:
            offset = 0
            for p, h in zip(parts, heights):
                if p.requires_grad:
                    p._accumulate(g[..., offset : offset + h, :])
                offset += h

        out._backward = bw
    return out


def gather_rows(table: Tensor, indices: ArrayLike) -> Tensor:
    """Look up ``table[indices]`` rows; backward accumulates into the rows.

    ``indices`` may have any shape; the result appends the table's feature
    axis.  Duplicate indices sum their gradients.
    """
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx.flat[np.argmax((idx < 0) | (idx >= n))]
        raise TableLookupError(f"index {int(bad)} outside table with {n} rows")
    out = _node(table.data[idx], (table,), "gather_rows")
    if out.requires_grad:

        def bw(g: np.ndarray) -> None:
            full = np.zeros_like(table.data)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
            table._accumulate(full)

        out._backward = bw
    return out


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: scales survivors by 1/(1-p) during training.

    Identity at evaluation time or when p == 0.  The caller supplies the
    generator; reproducibility comes from the run-level stream-splitting
    rule (see ``training.DropoutStream``).
    """
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must satisfy 0 <= p < 1, got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = _node(x.data * keep, (x,), "dropout")
    if out.requires_grad:

        def bw(g: np.ndarray) -> None:
            x._accumulate(g * keep)

        out._backward = bw
    return out


def zeros(shape: tuple, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
