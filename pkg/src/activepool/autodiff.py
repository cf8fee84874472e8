"""Minimal reverse-mode autodiff over dense float64 arrays.

Just enough surface for the models in this package: affine maps,
elementwise nonlinearities, reductions, and a fused softmax
cross-entropy. Everything is float64 and single-threaded numpy, so
training trajectories replay bit-exactly on one platform.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over broadcast axes so it matches ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the tape entry that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        self.grad = grad if self.grad is None else self.grad + grad

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"<{tag} shape={self.data.shape} grad={'yes' if self.requires_grad else 'no'}>"

    # -- graph construction --------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def _make(self, data, parents, backward) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=needs,
                      _parents=tuple(p for p in parents if p.requires_grad),
                      _backward=backward if needs else None)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar node."""
        if self.data.size != 1:
            raise ContractViolation("backward requires a scalar loss node")
        if not self.requires_grad:
            raise ContractViolation("loss node is detached from every parameter")
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        out_data = self.data + other.data

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad)
            if other.requires_grad:
                other._accumulate(out.grad)

        return self._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def backward(out):
            self._accumulate(-out.grad)

        return self._make(-self.data, (self,), backward)

    def __sub__(self, other) -> "Tensor":
        return self.__add__(self._lift(other).__neg__())

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        out_data = self.data * other.data

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad * other.data)
            if other.requires_grad:
                other._accumulate(out.grad * self.data)

        return self._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._lift(other)
        out_data = self.data / other.data

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad / other.data)
            if other.requires_grad:
                other._accumulate(-out.grad * self.data / (other.data * other.data))

        return self._make(out_data, (self, other), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return self._lift(other).__truediv__(self)

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise ContractViolation("only constant exponents are supported")
        out_data = self.data ** exponent

        def backward(out):
            self._accumulate(out.grad * exponent * self.data ** (exponent - 1))

        return self._make(out_data, (self,), backward)

    def __matmul__(self, other) -> "Tensor":
        other = self._lift(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ContractViolation("matmul expects 2-D operands")
        out_data = self.data @ other.data

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ out.grad)

        return self._make(out_data, (self, other), backward)

    # -- elementwise -----------------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def backward(out):
            self._accumulate(out.grad * out_data)

        return self._make(out_data, (self,), backward)

    def log(self) -> "Tensor":
        def backward(out):
            self._accumulate(out.grad / self.data)

        return self._make(np.log(self.data), (self,), backward)

    def relu(self) -> "Tensor":
        mask = self.data > 0

        def backward(out):
            self._accumulate(out.grad * mask)

        return self._make(self.data * mask, (self,), backward)

    def sigmoid(self) -> "Tensor":
        x = self.data
        out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                            np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def backward(out):
            self._accumulate(out.grad * out_data * (1.0 - out_data))

        return self._make(out_data, (self,), backward)

    def clip(self, low: float, high: float) -> "Tensor":
        """Clamp values; gradient passes through only inside the window."""
        mask = (self.data >= low) & (self.data <= high)

        def backward(out):
            self._accumulate(out.grad * mask)

        return self._make(np.clip(self.data, low, high), (self,), backward)

    # -- reductions --------------------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        shape = self.data.shape

        def backward(out):
            grad = out.grad
            if axis is not None:
                grad = np.expand_dims(grad, axis)
            self._accumulate(np.broadcast_to(grad, shape))

        return self._make(self.data.sum(axis=axis), (self,), backward)

    def mean(self, axis: int | None = None) -> "Tensor":
        shape = self.data.shape
        count = self.data.size if axis is None else shape[axis]

        def backward(out):
            grad = out.grad
            if axis is not None:
                grad = np.expand_dims(grad, axis)
            self._accumulate(np.broadcast_to(grad, shape) / count)

        return self._make(self.data.mean(axis=axis), (self,), backward)


def parameter(data, name: str) -> Tensor:
    """A named leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True, name=name)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-probability of the true class (fused softmax)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ContractViolation("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractViolation("class index out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss_value = -log_probs[np.arange(n), labels].mean()

    def backward(out):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        logits._accumulate(out.grad * grad / n)

    return logits._make(np.float64(loss_value), (logits,), backward)


def gradients(loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
    """Gradient of a scalar loss for each parameter (zeros if unreached)."""
    for p in params:
        p.zero_grad()
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
