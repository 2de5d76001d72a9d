"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable value lives in a :class:`Node` wrapping a float64
ndarray. Operations build the graph eagerly (define-by-run); calling
``backward()`` on a scalar Node replays the tape in reverse topological
order and accumulates gradients into every reachable Node that requires
them. Graphs are rebuilt from scratch for every batch.

The op set is exactly what the neighborhood-transform convolution stack
needs: affine maps, stacked matrix products, ELU, batch normalization,
column concatenation, depthwise matrix filtering, dropout, softmax
cross-entropy, and scalar reductions. Trainable leaves are
:class:`Parameter` Nodes carrying ADAM moment state.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class StateError(RuntimeError):
    """Graph or optimizer state does not allow the requested step."""


_STRICT_FINITE = False


def set_strict_finite(enabled: bool) -> None:
    """Toggle debug mode that rejects NaN/Inf in every created Node."""
    global _STRICT_FINITE
    _STRICT_FINITE = bool(enabled)


def as_tensor(data) -> np.ndarray:
    """Coerce input to a float64 ndarray (the universal numeric payload)."""
    return np.asarray(data, dtype=np.float64)


class Node:
    """One value in the computation graph.

    Attributes:
        value: float64 ndarray holding the forward result.
        grad: gradient of the downstream scalar w.r.t. ``value``; None until
            a backward pass reaches this Node.
        parents: input Nodes of the producing op.
        op: short tag naming the producing primitive (for debugging).
        requires_grad: whether a backward pass should reach this Node.
    """

    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, value, parents=(), op="leaf", requires_grad=False,
                 backward_fn=None):
        self.value = as_tensor(value)
        if _STRICT_FINITE and not np.all(np.isfinite(self.value)):
            raise FloatingPointError(f"non-finite values in '{op}' output")
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def item(self) -> float:
        return float(self.value.reshape(()))

    def backward(self) -> None:
        """Accumulate gradients of this scalar into all reachable Nodes."""
        if self.value.size != 1:
            raise StateError(f"backward() requires a scalar, got shape {self.value.shape}")
        self.grad = np.ones_like(self.value)
        for node in reversed(_toposort(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Small operator sugar used mainly by tests.
    def __add__(self, other):
        return add(self, other if isinstance(other, Node) else constant(other))

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Node) else constant(other))

    def __mul__(self, other):
        return mul(self, other if isinstance(other, Node) else constant(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _toposort(root: Node) -> list[Node]:
    """Iterative post-order over the requires_grad subgraph of ``root``."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(node: Node, delta: np.ndarray) -> None:
    if not node.requires_grad:
        return
    node.grad = delta if node.grad is None else node.grad + delta


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def constant(data) -> Node:
    """Leaf Node that never receives gradient."""
    return Node(data, op="const")


def leaf(data, requires_grad: bool = True) -> Node:
    """Leaf Node, by default participating in backward passes."""
    return Node(data, op="leaf", requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    out_value = a.value + b.value

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return Node(out_value, (a, b), "add", backward_fn=backward)


def sub(a: Node, b: Node) -> Node:
    out_value = a.value - b.value

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(-g, b.value.shape))

    return Node(out_value, (a, b), "sub", backward_fn=backward)


def mul(a: Node, b: Node) -> Node:
    out_value = a.value * b.value

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return Node(out_value, (a, b), "mul", backward_fn=backward)


def scale(a: Node, factor: float) -> Node:
    def backward(g):
        _accumulate(a, g * factor)

    return Node(a.value * factor, (a,), "scale", backward_fn=backward)


def reshape(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    original = a.value.shape

    def backward(g):
        _accumulate(a, g.reshape(original))

    return Node(a.value.reshape(shape), (a,), "reshape", backward_fn=backward)


def elu(x: Node) -> Node:
    """Elementwise x if x > 0 else exp(x) - 1 (unit alpha)."""
    positive = x.value > 0
    out_value = np.where(positive, x.value, np.expm1(np.minimum(x.value, 0.0)))
    slope = np.where(positive, 1.0, out_value + 1.0)

    def backward(g):
        _accumulate(x, g * slope)

    return Node(out_value, (x,), "elu", backward_fn=backward)


def concat(a: Node, b: Node) -> Node:
    """Concatenate along the last axis; leading shapes must match exactly."""
    if a.value.shape[:-1] != b.value.shape[:-1]:
        raise ShapeError(
            f"concat needs equal leading dims, got {a.value.shape} and {b.value.shape}")
    split = a.value.shape[-1]

    def backward(g):
        _accumulate(a, g[..., :split])
        _accumulate(b, g[..., split:])

    return Node(np.concatenate([a.value, b.value], axis=-1), (a, b), "concat",
                backward_fn=backward)


def gather_rows(x: Node, indices: np.ndarray) -> Node:
    """Select rows of ``x`` (axis 0) by an integer index array.

    Output shape is ``indices.shape + x.shape[1:]``; backward scatter-adds.
    """
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= x.value.shape[0]):
        raise ShapeError(
            f"gather index out of range for {x.value.shape[0]} rows")

    def backward(g):
        if not x.requires_grad:
            return
        buf = np.zeros_like(x.value)
        np.add.at(buf, indices.reshape(-1),
                  g.reshape((-1,) + x.value.shape[1:]))
        _accumulate(x, buf)

    return Node(x.value[indices], (x,), "gather", backward_fn=backward)


def sum_(x: Node) -> Node:
    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.value.shape).copy())

    return Node(x.value.sum(), (x,), "sum", backward_fn=backward)


def mean(x: Node) -> Node:
    n = x.value.size

    def backward(g):
        _accumulate(x, np.broadcast_to(g / n, x.value.shape).copy())

    return Node(x.value.mean(), (x,), "mean", backward_fn=backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    """Matrix product with numpy stacking semantics (last two axes).

    For 2-D operands this is the plain product; backward is dA = G Bᵀ and
    dB = Aᵀ G, with broadcast leading axes summed out.
    """
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(
            f"matmul needs ndim >= 2 operands, got {a.value.shape} and {b.value.shape}")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(
            f"matmul inner dims disagree: {a.value.shape} x {b.value.shape}")

    def backward(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape))

    return Node(a.value @ b.value, (a, b), "matmul", backward_fn=backward)


def affine(x: Node, w: Node, b: Optional[Node] = None) -> Node:
    """Fully connected map on the last axis: ``y[..., o] = x[..., i] w[i, o] + b[o]``."""
    if w.value.ndim != 2 or x.value.shape[-1] != w.value.shape[0]:
        raise ShapeError(
            f"affine weight {w.value.shape} does not match input {x.value.shape}")
    out_value = np.einsum("...i,io->...o", x.value, w.value)
    if b is not None:
        if b.value.shape != (w.value.shape[1],):
            raise ShapeError(
                f"affine bias {b.value.shape} does not match width {w.value.shape[1]}")
        out_value = out_value + b.value

    def backward(g):
        _accumulate(x, np.einsum("...o,io->...i", g, w.value))
        _accumulate(w, np.einsum("...i,...o->io", x.value, g))
        if b is not None:
            _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return Node(out_value, parents, "affine", backward_fn=backward)


def depthwise_matrix_conv(x: Node, w: Node) -> Node:
    """Per-column filtering of an R x C matrix into a C*F vector.

    ``out[c*F + f] = sum_r x[r, c] * w[r, c, f]``; leading batch axes on
    ``x`` are carried through. Weight holds R*C*F scalars.
    """
    if w.value.ndim != 3:
        raise ShapeError(f"depthwise weight must be rank 3, got {w.value.shape}")
    if x.value.ndim < 2 or x.value.shape[-2:] != w.value.shape[:2]:
        raise ShapeError(
            f"depthwise input {x.value.shape} does not match weight {w.value.shape}")
    rows, cols, filters = w.value.shape
    lead = x.value.shape[:-2]
    out_value = np.einsum("...rc,rcf->...cf", x.value, w.value)
    out_value = out_value.reshape(lead + (cols * filters,))

    def backward(g):
        g3 = g.reshape(lead + (cols, filters))
        _accumulate(x, np.einsum("...cf,rcf->...rc", g3, w.value))
        _accumulate(w, np.einsum("...rc,...cf->rcf", x.value, g3))

    return Node(out_value, (x, w), "depthwise", backward_fn=backward)


def separable_conv(f: Node, depthwise_w: Node, pointwise_w: Node,
                   bias: Optional[Node] = None) -> Node:
    """Depthwise stage over the neighbor axis, then a dense channel mix.

    ``f`` is [..., K, Cin]; depthwise weight [K, Cin, DM] produces
    [..., Cin*DM], which the pointwise weight maps to the output width.
    """
    mixed = depthwise_matrix_conv(f, depthwise_w)
    if pointwise_w.value.shape[0] != mixed.value.shape[-1]:
        raise ShapeError(
            f"pointwise weight {pointwise_w.value.shape} does not match "
            f"depthwise output width {mixed.value.shape[-1]}")
    return affine(mixed, pointwise_w, bias)


# ---------------------------------------------------------------------------
# Stochastic / normalization / loss primitives
# ---------------------------------------------------------------------------

def dropout(x: Node, rate: float, training: bool, rng: np.random.Generator) -> Node:
    """Zero entries with probability ``rate`` and rescale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.value.shape) >= rate) / (1.0 - rate)

    def backward(g):
        _accumulate(x, g * mask)

    return Node(x.value * mask, (x,), "dropout", backward_fn=backward)


class BatchNormState:
    """Learnable scale/shift plus running statistics for one channel axis."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 name: str = "bn"):
        self.scale = Parameter(np.ones(channels), name=f"{name}.scale")
        self.shift = Parameter(np.zeros(channels), name=f"{name}.shift")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.name = name

    @property
    def channels(self) -> int:
        return self.scale.value.shape[0]


def batchnorm(x: Node, state: BatchNormState, training: bool) -> Node:
    """Normalize over all leading axes, treating the last axis as channels.

    Training mode uses batch statistics and folds them into the running
    estimates; inference mode is a deterministic function of the running
    statistics.
    """
    if x.value.shape[-1] != state.channels:
        raise ShapeError(
            f"batchnorm expects {state.channels} channels, got input {x.value.shape}")
    axes = tuple(range(x.value.ndim - 1))
    eps = state.eps
    scale, shift = state.scale, state.shift

    if training:
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mu
        state.running_var = m * state.running_var + (1.0 - m) * var
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.value - mu) * inv_std
        count = max(x.value.size // state.channels, 1)

        def backward(g):
            g_hat = g * scale.value
            d_var = np.sum(g_hat * (x.value - mu), axis=axes) * (-0.5) * inv_std**3
            d_mu = (np.sum(g_hat * -inv_std, axis=axes)
                    + d_var * np.mean(-2.0 * (x.value - mu), axis=axes))
            _accumulate(x, g_hat * inv_std
                        + d_var * 2.0 * (x.value - mu) / count
                        + d_mu / count)
            _accumulate(scale, np.sum(g * x_hat, axis=axes))
            _accumulate(shift, np.sum(g, axis=axes))
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        x_hat = (x.value - state.running_mean) * inv_std

        def backward(g):
            _accumulate(x, g * scale.value * inv_std)
            _accumulate(scale, np.sum(g * x_hat, axis=axes))
            _accumulate(shift, np.sum(g, axis=axes))

    out_value = x_hat * scale.value + shift.value
    return Node(out_value, (x, scale, shift), "batchnorm", backward_fn=backward)


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log softmax probability of the true class.

    ``logits`` is [B, C]; ``labels`` is an integer vector of length B with
    entries in [0, C). Stabilized by per-row max subtraction.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2:
        raise ShapeError(f"cross entropy expects [B, C] logits, got {logits.value.shape}")
    batch, classes = logits.value.shape
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")

    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(batch), labels].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(batch), labels] -= 1.0
        _accumulate(logits, grad * (float(g) / batch))

    return Node(loss, (logits,), "softmax_ce", backward_fn=backward)


# ---------------------------------------------------------------------------
# Trainable parameters and the ADAM update
# ---------------------------------------------------------------------------

class Parameter(Node):
    """Named trainable leaf carrying first/second ADAM moments and a step count."""

    __slots__ = ("name", "m", "v", "t")

    def __init__(self, value, name: str):
        super().__init__(value, op="param", requires_grad=True)
        self.value = self.value.copy()
        self.name = name
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.t = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def glorot_uniform(shape: Sequence[int], fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def adam_step(params: Iterable[Parameter], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected ADAM update; consumes and clears gradients."""
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {p.name!r} has no gradient; run backward() first")
        p.t += 1
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.t)
        v_hat = p.v / (1.0 - beta2 ** p.t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None


def zero_gradients(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None
