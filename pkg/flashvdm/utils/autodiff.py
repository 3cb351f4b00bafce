"""
Minimal reverse-mode differentiation over numpy arrays

A `Tensor` wraps a float64 array and remembers the `Function` that
produced it; `Tensor.backward` walks the graph in reverse topological
order and accumulates `.grad` on every tensor that requires it.
Broadcasting is supported: gradients are summed back to the shape of
the operand they belong to
"""

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import LOG_MANAGER

log = LOG_MANAGER.get_logger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

__all__ = ["Tensor", "Function", "DivergenceError", "grad_check", "as_tensor"]


class DivergenceError(RuntimeError):
    """
    A loss became non-finite

    Carries the training `stage` and the `step` it happened at
    """

    def __init__(self, stage: str, step: int, value: float = float("nan")) -> None:
        super().__init__(f"{stage}: non-finite loss {value} at step {step}")
        self.stage = stage
        self.step = step


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # sum over the axes numpy added or stretched when broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        ctx: Optional["Function"] = None,
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.ctx = ctx
        self.requires_grad = requires_grad or (
            ctx is not None and any(p.requires_grad for p in ctx.parents)
        )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """
        Same values, cut from the graph (stop-gradient)
        """
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(other, self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return MatMul.apply(self, other)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis, keepdims) / count

    def relu(self) -> "Tensor":
        return Relu.apply(self)

    def silu(self) -> "Tensor":
        return Silu.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=shape)

    def take(self, rows: np.ndarray) -> "Tensor":
        """
        Rows of a 2-d tensor (embedding lookup)
        """
        return Take.apply(self, rows=np.asarray(rows, dtype=np.int64))

    def _toposort(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.ctx is not None:
                for parent in node.ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self) -> None:
        """
        Accumulate d(self)/d(leaf) into `.grad` of every tensor that
        requires it; `self` must hold a single value
        """
        if self.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
        self.grad = np.ones_like(self.data)
        for node in reversed(self._toposort()):
            if node.ctx is None or node.grad is None:
                continue
            grads = node.ctx.backward(node.grad)
            for parent, grad in zip(node.ctx.parents, grads):
                if not parent.requires_grad or grad is None:
                    continue
                grad = _unbroadcast(grad, parent.shape)
                parent.grad = grad if parent.grad is None else parent.grad + grad
            if node is not self:
                # interior gradients are not needed once propagated
                node.grad = None


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Function:
    """
    One differentiable operation; `forward` sees raw arrays, `backward`
    maps the output gradient to one gradient per parent
    """

    def __init__(self, *parents: Tensor, **kwds) -> None:
        self.parents = parents
        self.kwds = kwds

    @classmethod
    def apply(cls, *args: ArrayLike, **kwds) -> Tensor:
        parents = tuple(as_tensor(a) for a in args)
        ctx = cls(*parents, **kwds)
        return Tensor(ctx.forward(*(p.data for p in parents)), ctx=ctx)

    def forward(self, *args: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Add(Function):
    def forward(self, x, y):
        return x + y

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, x, y):
        return x - y

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return grad * self.y, grad * self.x


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        return grad / self.y, -grad * self.x / self.y**2


class Pow(Function):
    def forward(self, x):
        self.x = x
        return x ** self.kwds["exponent"]

    def backward(self, grad):
        p = self.kwds["exponent"]
        return (grad * p * self.x ** (p - 1),)


class MatMul(Function):
    def forward(self, x, y):
        if x.ndim != 2 or y.ndim != 2:
            raise ValueError(f"matmul needs 2-d operands, got {x.shape} @ {y.shape}")
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        return grad @ self.y.T, self.x.T @ grad


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.sum(axis=self.kwds["axis"], keepdims=self.kwds["keepdims"])

    def backward(self, grad):
        axis = self.kwds["axis"]
        if axis is not None and not self.kwds["keepdims"]:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Silu(Function):
    def forward(self, x):
        self.x = x
        self.sig = 1.0 / (1.0 + np.exp(-x))
        return x * self.sig

    def backward(self, grad):
        return (grad * self.sig * (1.0 + self.x * (1.0 - self.sig)),)


class Sqrt(Function):
    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        return (grad / (2.0 * self.out),)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Reshape(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.reshape(self.kwds["shape"])

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Take(Function):
    def forward(self, x):
        self.shape = x.shape
        return x[self.kwds["rows"]]

    def backward(self, grad):
        out = np.zeros(self.shape)
        np.add.at(out, self.kwds["rows"], grad)
        return (out,)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Union[Dict[str, Tensor], Iterable[Tensor]],
    eps: float = 1e-6,
    samples: Optional[int] = 64,
    seed: int = 0,
) -> float:
    """
    Compare reverse-mode gradients with central finite differences

    `loss_fn` rebuilds the scalar loss from the current parameter
    values. At most `samples` entries per parameter (all of them when
    None) are perturbed by `eps`; returns the largest
    `|g_ad - g_fd| / (|g_fd| + 1e-8)`

    Raises `DivergenceError` on a non-finite loss
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    rng = np.random.default_rng(seed)

    def evaluate() -> float:
        value = float(loss_fn().data.reshape(-1)[0])
        if not np.isfinite(value):
            raise DivergenceError("grad_check", 0, value)
        return value

    for p in tensors:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise DivergenceError("grad_check", 0, float(loss.data.reshape(-1)[0]))
    loss.backward()

    worst = 0.0
    for p in tensors:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        picks = np.arange(p.size)
        if samples is not None and p.size > samples:
            picks = np.sort(rng.choice(p.size, samples, replace=False))
        for i in picks:
            at = np.unravel_index(i, p.shape)
            original = p.data[at]
            p.data[at] = original + eps
            up = evaluate()
            p.data[at] = original - eps
            down = evaluate()
            p.data[at] = original
            numeric = (up - down) / (2 * eps)
            error = abs(analytic[at] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, error)
    log.debug(f"grad_check over {len(tensors)} tensors: max relative error {worst:.3e}")
    return worst
