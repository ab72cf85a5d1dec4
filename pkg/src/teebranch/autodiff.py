"""Minimal reverse-mode automatic differentiation on numpy arrays.

Just enough surface for the models in this package: broadcast-aware
elementwise ops, matmul against 2-D weight matrices, tanh, shape ops, mean
reduction, and fused classification losses.  Keeping the op set this small
is what makes the finite-difference gradient oracle cheap to run against
every op.  Training uses float32; gradient-check tests may build float64
tensors, since ops preserve the input dtype.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Reverse-mode pass from this (scalar or any-shape) tensor."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            if node.requires_grad and node.grad is not None \
                    and not np.all(np.isfinite(node.grad)):
                raise FloatingPointError("non-finite gradient after backward pass")

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction helpers -----------------------------------------

    def _make(self, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other, dtype=self.data.dtype)

        def backward(grad):
            if self.requires_grad:
                self._accumulate(_unbroadcast(grad, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(grad, other.shape))

        return self._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other, dtype=self.data.dtype)

        def backward(grad):
            if self.requires_grad:
                self._accumulate(_unbroadcast(grad * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(grad * self.data, other.shape))

        return self._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        def backward(grad):
            if self.requires_grad:
                self._accumulate(-grad)

        return self._make(-self.data, (self,), backward)

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other, dtype=self.data.dtype)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return Tensor(other, dtype=self.data.dtype) + (-self)

    def matmul(self, weight: "Tensor") -> "Tensor":
        """Batched-left matmul against a 2-D matrix on the right."""
        if weight.ndim != 2:
            raise ValueError("matmul expects a 2-D matrix on the right")

        def backward(grad):
            if self.requires_grad:
                self._accumulate(grad @ weight.data.T)
            if weight.requires_grad:
                lhs = self.data.reshape(-1, self.data.shape[-1])
                weight._accumulate(lhs.T @ grad.reshape(-1, grad.shape[-1]))

        return self._make(self.data @ weight.data, (self, weight), backward)

    def __matmul__(self, other) -> "Tensor":
        return self.matmul(other)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def backward(grad):
            if self.requires_grad:
                self._accumulate(grad * (1.0 - out_data * out_data))

        return self._make(out_data, (self,), backward)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape

        def backward(grad):
            if self.requires_grad:
                self._accumulate(grad.reshape(old_shape))

        return self._make(self.data.reshape(shape), (self,), backward)

    def transpose(self, axes: tuple[int, ...]) -> "Tensor":
        inverse = tuple(np.argsort(axes))

        def backward(grad):
            if self.requires_grad:
                self._accumulate(grad.transpose(inverse))

        return self._make(self.data.transpose(axes), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = tuple(range(self.ndim)) if axis is None else (
            (axis,) if isinstance(axis, int) else tuple(axis))
        count = int(np.prod([self.shape[a] for a in axes]))

        def backward(grad):
            if not self.requires_grad:
                return
            g = grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, self.shape) / count)

        return self._make(self.data.mean(axis=axes, keepdims=keepdims), (self,), backward)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = tuple(range(self.ndim)) if axis is None else (
            (axis,) if isinstance(axis, int) else tuple(axis))

        def backward(grad):
            if not self.requires_grad:
                return
            g = grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, self.shape).astype(self.data.dtype))

        return self._make(self.data.sum(axis=axes, keepdims=keepdims), (self,), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch; fused analytic gradient."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    log_p = log_softmax(logits.data)
    value = -log_p[np.arange(n), labels].mean()

    def backward(grad):
        if not logits.requires_grad:
            return
        p = np.exp(log_p)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(grad * p / n)

    out = logits._make(np.asarray(value, dtype=logits.data.dtype), (logits,), backward)
    return out


def distillation_loss(student_logits: Tensor, teacher_logits: np.ndarray,
                      temperature: float) -> Tensor:
    """Temperature-softened KL from teacher to student, scaled by tau^2.

    Mean over the batch; the teacher side is a constant.  Zero when the
    student logits equal the teacher logits, and always >= 0.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    tau = float(temperature)
    n = student_logits.shape[0]
    log_q = log_softmax(student_logits.data / tau)
    log_p = log_softmax(np.asarray(teacher_logits) / tau)
    p = np.exp(log_p)
    value = tau * tau * (p * (log_p - log_q)).sum(axis=-1).mean()

    def backward(grad):
        if not student_logits.requires_grad:
            return
        q = np.exp(log_q)
        student_logits._accumulate(grad * tau * (q - p) / n)

    return student_logits._make(
        np.asarray(value, dtype=student_logits.data.dtype), (student_logits,), backward)
