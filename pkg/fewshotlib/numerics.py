"""Dense tensor algebra with reverse-mode automatic differentiation.

This module holds every differentiable operation the rest of fewshotlib needs: affine maps,
same-padded 1D convolutions, time pooling, gating nonlinearities, dropout, the
straight-through Heaviside gate, the gradient reversal layer, softmax cross-entropy and
row normalization. Tensors are 64-bit ``numpy`` arrays; a :class:`Value` wraps one array
and records how it was produced so :meth:`Value.backward` can walk the graph in reverse.

The module also provides the Adam optimizer used both for meta-training and for
fine-tuning at meta-test time, and a central finite-difference checker used by the tests.

Classes:
    Value: Array node participating in a gradient tape.
    AdamState: Adam hyperparameters, step counter and per-parameter moments.
    DimensionError: Raised when operand shapes do not agree.
    ParameterError: Raised on invalid operation parameters (dropout rate, lambda, labels).
    NonFiniteError: Raised when an operation produces NaN or Inf.

Example:
    Differentiate a small composite::

        import numpy as np
        from fewshotlib.numerics import Value, matmul, sum_all

        a = Value(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        b = Value(np.ones((4, 2)))
        loss = sum_all(matmul(a, b))
        loss.backward()
        print(a.grad)  # every entry equals 2.0

Note:
    One gradient tape is single-threaded. Distinct graphs built from distinct parameter
    sets may be differentiated on different threads.

.. versionadded:: 0.1.0
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from fewshotlib.exceptions import ConfigurationError, NumericalError

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class DimensionError(NumericalError):
    """Raised when operand shapes are incompatible with an operation."""


class ParameterError(ConfigurationError):
    """Raised when an operation parameter is outside its valid range."""


class NonFiniteError(NumericalError):
    """Raised when an operation produces NaN or Inf values."""


class Value:
    """A tensor node in a reverse-mode gradient tape.

    :ivar data: Forward value, a float64 array (0-d for scalars).
    :ivar grad: Gradient of the last :meth:`backward` output with respect to this node,
        same shape as ``data``; ``None`` until a backward pass reaches the node.
    :ivar requires_grad: Whether gradients are tracked through this node.
    :ivar name: Optional label, used for parameters.

    .. versionadded:: 0.1.0
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(
        self,
        data: np.ndarray | float | Sequence,
        requires_grad: bool = False,
        name: str = "",
        *,
        _parents: tuple[Value, ...] = (),
        _backward: BackwardFn | None = None,
        _op: str = "leaf",
    ) -> None:
        array = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"{_op} value contains NaN or Inf")
        self.data = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}, op={self._op}{label})"

    def _topological_order(self) -> list[Value]:
        order: list[Value] = []
        visited: set[int] = set()
        stack: list[tuple[Value, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``grad`` on every tracked node this value depends on.

        Gradients accumulate across fan-out inside the graph; each call overwrites the
        ``grad`` of every reached node exactly once.

        :param grad: Upstream gradient; defaults to 1 for scalar outputs.
        :raises DimensionError: If ``grad`` is omitted for a non-scalar output or mis-shaped.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() on shape {self.shape} needs an explicit gradient")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=DTYPE)
            if seed.shape != self.shape:
                raise DimensionError(
                    f"gradient shape {seed.shape} does not match value shape {self.shape}"
                )
        if not self.requires_grad:
            return

        pending: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(self._topological_order()):
            upstream = pending.pop(id(node), None)
            node.grad = upstream if upstream is not None else np.zeros_like(node.data)
            if upstream is None or node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(upstream)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def parameter(data: np.ndarray, name: str = "") -> Value:
    """Create a trainable leaf holding a private copy of ``data``."""
    return Value(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def constant(data: np.ndarray | float | Sequence) -> Value:
    """Wrap ``data`` as a non-trainable leaf."""
    return Value(data)


def _lift(x: Value | np.ndarray | float) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _result(data: np.ndarray, parents: Sequence[Value], backward: BackwardFn, op: str) -> Value:
    tracked = any(p.requires_grad for p in parents)
    return Value(
        data,
        requires_grad=tracked,
        _parents=tuple(parents) if tracked else (),
        _backward=backward if tracked else None,
        _op=op,
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Value, b: Value, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a: Value | np.ndarray | float, b: Value | np.ndarray | float) -> Value:
    """Elementwise sum with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Value | np.ndarray | float, b: Value | np.ndarray | float) -> Value:
    """Elementwise difference with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "sub")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def elementwise_mul(a: Value | np.ndarray | float, b: Value | np.ndarray | float) -> Value:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(x: Value, factor: float) -> Value:
    """Multiply by a constant scalar."""

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * factor,)

    return _result(x.data * factor, (x,), backward, "scale")


def sum_all(x: Value) -> Value:
    """Sum every element into a scalar."""

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), backward, "sum")


def matmul(a: Value, b: Value) -> Value:
    """Matrix product of ``a`` (M×K, or a K-vector) and ``b`` (K×N).

    :raises DimensionError: If the inner dimensions disagree or ranks are unsupported.
    """
    if a.data.ndim not in (1, 2) or b.data.ndim != 2:
        raise DimensionError(f"matmul expects (M×K or K)·(K×N), got {a.shape}·{b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape}·{b.shape}")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a = g @ b.data.T
        grad_b = np.outer(a.data, g) if a.data.ndim == 1 else a.data.T @ g
        return grad_a, grad_b

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x: Value) -> Value:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.T,)

    return _result(x.data.T.copy(), (x,), backward, "transpose")


def zero_diagonal(x: Value) -> Value:
    """Copy of a square matrix with its main diagonal set to zero."""
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"zero_diagonal expects a square matrix, got shape {x.shape}")
    mask = 1.0 - np.eye(x.shape[0], dtype=DTYPE)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * mask,)

    return _result(x.data * mask, (x,), backward, "zero_diagonal")


def stack(rows: Sequence[Value]) -> Value:
    """Stack equally shaped vectors into the rows of a matrix."""
    if not rows:
        raise DimensionError("stack needs at least one row")
    shape = rows[0].shape
    if len(shape) != 1 or any(r.shape != shape for r in rows):
        raise DimensionError("stack expects vectors of one common length")

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return [g[i] for i in range(len(rows))]

    return _result(np.stack([r.data for r in rows]), tuple(rows), backward, "stack")


def relu(x: Value) -> Value:
    mask = (x.data > 0).astype(DTYPE)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * mask,)

    return _result(x.data * mask, (x,), backward, "relu")


def sigmoid(x: Value) -> Value:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward, "sigmoid")


def conv1d(x: Value, kernel: Value, bias: Value) -> Value:
    """Same-padded cross-correlation along the time axis.

    ``x`` is T×C_in, ``kernel`` is W×C_in×C_out and ``bias`` is C_out. The input is zero
    padded with ``(W - 1) // 2`` frames on the left and the remainder on the right, so the
    output keeps length T for any kernel width, including widths longer than T.

    :raises DimensionError: On an empty sequence or mismatched channel counts.
    """
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"conv1d expects a non-empty T×C sequence, got shape {x.shape}")
    if kernel.data.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv1d kernel {kernel.shape} does not match input channels {x.shape[1]}"
        )
    if bias.shape != (kernel.shape[2],):
        raise DimensionError(
            f"conv1d bias {bias.shape} does not match output channels {kernel.shape[2]}"
        )

    frames, channels = x.shape
    width = kernel.shape[0]
    left = (width - 1) // 2
    padded = np.zeros((frames + width - 1, channels), dtype=DTYPE)
    padded[left:left + frames] = x.data
    # (T, C_in, W) view of every receptive field
    windows = np.lib.stride_tricks.sliding_window_view(padded, width, axis=0)
    out = np.einsum("tcw,wco->to", windows, kernel.data) + bias.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_kernel = np.einsum("tcw,to->wco", windows, g)
        grad_padded = np.zeros_like(padded)
        for w in range(width):
            grad_padded[w:w + frames] += g @ kernel.data[w].T
        return grad_padded[left:left + frames], grad_kernel, g.sum(axis=0)

    return _result(out, (x, kernel, bias), backward, "conv1d")


def _require_sequence(x: Value, op: str) -> None:
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"{op} expects a T×C sequence with T ≥ 1, got shape {x.shape}")


def mean_over_time(x: Value) -> Value:
    """Per-channel mean over the time axis of a T×C sequence."""
    _require_sequence(x, "mean_over_time")
    frames = x.shape[0]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(g / frames, x.shape).copy(),)

    return _result(x.data.mean(axis=0), (x,), backward, "mean_over_time")


def max_over_time(x: Value) -> Value:
    """Per-channel max over the time axis; ties go to the lowest time index."""
    _require_sequence(x, "max_over_time")
    channels = np.arange(x.shape[1])
    argmax = np.argmax(x.data, axis=0)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        grad[argmax, channels] = g
        return (grad,)

    return _result(x.data[argmax, channels], (x,), backward, "max_over_time")


def dropout(
    x: Value,
    p: float,
    rng: np.random.Generator,
    training: bool,
    channelwise: bool = False,
) -> Value:
    """Inverted dropout.

    In training mode entries are zeroed with probability ``p`` and survivors scaled by
    ``1 / (1 - p)``. With ``channelwise`` set, whole channels of a T×C sequence are dropped
    across every frame. In eval mode the input is returned unchanged.

    :raises ParameterError: If ``p`` is outside ``[0, 1)``.
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if channelwise:
        _require_sequence(x, "channel dropout")
        mask_shape: tuple[int, ...] = (1, x.shape[1])
    else:
        mask_shape = x.shape
    keep = (rng.random(mask_shape) >= p).astype(DTYPE) / (1.0 - p)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * keep,)

    return _result(x.data * keep, (x,), backward, "dropout")


def heaviside_ste(x: Value) -> Value:
    """Heaviside step (1 for x ≥ 0, else 0) with a straight-through gradient."""

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g,)

    return _result((x.data >= 0).astype(DTYPE), (x,), backward, "heaviside_ste")


def grad_reverse(x: Value, lam: float) -> Value:
    """Identity forward; multiplies the upstream gradient by ``-lam`` on the way back.

    :raises ParameterError: If ``lam`` is not strictly positive.
    """
    if not lam > 0:
        raise ParameterError(f"gradient reversal lambda must be positive, got {lam}")

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (-lam * g,)

    return _result(x.data.copy(), (x,), backward, "grad_reverse")


def l2_normalize(x: Value, eps: float = 1e-8) -> Value:
    """Divide each row of a matrix by ``max(‖row‖, eps)``."""
    if x.data.ndim != 2:
        raise DimensionError(f"l2_normalize expects a matrix, got shape {x.shape}")
    norms = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True))
    floored = norms <= eps
    denom = np.maximum(norms, eps)
    out = x.data / denom

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        radial = out * (g * out).sum(axis=1, keepdims=True)
        grad = np.where(floored, g, g - radial) / denom
        return (grad,)

    return _result(out, (x,), backward, "l2_normalize")


def cross_entropy(logits: Value, labels: Sequence[int] | np.ndarray) -> Value:
    """Mean softmax cross-entropy of a B×N logit matrix against integer labels.

    :raises DimensionError: If logits are not B×N with B ≥ 1 or label count differs.
    :raises ParameterError: If a label is outside ``[0, N)``.
    """
    if logits.data.ndim != 2 or logits.shape[0] < 1:
        raise DimensionError(f"cross_entropy expects B×N logits with B ≥ 1, got {logits.shape}")
    targets = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if targets.shape != (batch,):
        raise DimensionError(
            f"cross_entropy got {targets.shape[0] if targets.ndim else 0} labels for {batch} rows"
        )
    if np.any(targets < 0) or np.any(targets >= classes):
        raise ParameterError(f"cross_entropy labels must lie in [0, {classes})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = -log_probs[rows, targets].mean()

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (g / batch),)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


@dataclass
class AdamState:
    """Adam hyperparameters plus per-parameter first and second moments.

    :ivar step_count: Number of updates applied so far.
    :ivar m: First-moment estimates keyed by parameter name.
    :ivar v: Second-moment estimates keyed by parameter name.

    .. versionadded:: 0.1.0
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ParameterError(f"Adam learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ParameterError(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")


def adam_step(
    params: Mapping[str, Value],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> AdamState:
    """Apply one bias-corrected Adam update in place.

    :param params: Parameters to update, keyed by name.
    :param grads: Gradients keyed like ``params``.
    :param state: Optimizer state; its moments and step counter are advanced.
    :return: The same ``state`` object.
    :raises DimensionError: If gradient names or shapes do not mirror the parameters.
    :raises NonFiniteError: If the update would write NaN or Inf into a parameter. Nothing
        is modified in that case.
    """
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise DimensionError(f"gradients do not mirror parameters: {missing}")
    for name, param in params.items():
        if np.shape(grads[name]) != param.shape:
            raise DimensionError(
                f"gradient for {name} has shape {np.shape(grads[name])}, expected {param.shape}"
            )

    t = state.step_count + 1
    updates: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for name, param in params.items():
            g = np.asarray(grads[name], dtype=DTYPE)
            m = state.beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - state.beta1) * g
            v = state.beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            updated = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
            if not np.all(np.isfinite(updated)):
                raise NonFiniteError(f"Adam update of {name} produced NaN or Inf")
            updates[name] = (updated, m, v)

    for name, (updated, m, v) in updates.items():
        params[name].data = updated
        state.m[name] = m
        state.v[name] = v
    state.step_count = t
    return state


def check_gradients(
    fn: Callable[[], Value],
    inputs: Sequence[Value],
    eps: float = 1e-6,
    floor: float = 1e-2,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``fn`` must rebuild a scalar output from the current ``inputs`` on every call and be
    deterministic (no training-mode dropout).

    :return: Largest elementwise ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    out = fn()
    out.backward()
    analytic = [np.array(v.grad) for v in inputs]
    worst = 0.0
    for value, grad in zip(inputs, analytic):
        numeric = numeric_gradient(fn, value, eps)
        scale_ = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(grad - numeric) / scale_, initial=0.0)))
    return worst


def numeric_gradient(fn: Callable[[], Value], value: Value, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of the scalar ``fn()`` with respect to ``value``.

    ``value.data`` is perturbed in place and restored entry by entry.
    """
    grad = np.zeros_like(value.data)
    for index in np.ndindex(value.shape):
        original = value.data[index]
        value.data[index] = original + eps
        plus = fn().item()
        value.data[index] = original - eps
        minus = fn().item()
        value.data[index] = original
        grad[index] = (plus - minus) / (2.0 * eps)
    return grad


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named stream of ``seed`` (``init``, ``sampling`` ...).

    Streams with different names never share state, so one component's draws can change
    without shifting another's.
    """
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([seed, key])
