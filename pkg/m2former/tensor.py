"""
Minimal n-dimensional array engine with reverse-mode automatic differentiation.

Every op returns a new Tensor holding 64-bit floats. When gradient recording is enabled and any
operand requires a gradient, the result keeps references to its operands and a closure that maps
the output gradient to operand gradients. backward() replays those closures in reverse
topological order and then drops them.
"""
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Sequence, Tuple, Union
import attr
import numpy as np
from config import Config
from m2former.exc import ShapeError, NonFiniteError
from m2former.utils import make_rng

Number = Union[int, float]
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def no_grad():
    """
    Disable gradient recording in the current thread.

    Example:

        >>> with no_grad():
        >>>     y = model(x)  # y has no tape attachment
    """
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """ Sum a broadcast gradient back to the operand shape. """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, length in enumerate(shape):
        if length == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """ n-dimensional float64 array with optional gradient tape participation. """

    # Make numpy defer to Tensor operators when a numpy array is on the left
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = ''

    def __repr__(self):
        return f'{type(self).__name__}(shape={self.shape}, requires_grad={self.requires_grad})'

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return self.shape[0]

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """ Return a copy of the values. """
        return self.data.copy()

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # Arithmetic ---------------------------------------------------------------------------------

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

    def __pow__(self, exponent: Number):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # Shape and reductions -----------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, axis1: int, axis2: int) -> 'Tensor':
        axes = list(range(self.ndim))
        axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
        return transpose(self, tuple(axes))

    @property
    def T(self) -> 'Tensor':
        return transpose(self, None)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)

    def relu(self) -> 'Tensor':
        return relu(self)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """ Learnable tensor. The name is the dotted attribute path inside its model. """

    def __init__(self, data, name: str = ''):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f'Parameter(name="{self.name}", shape={self.shape})'

    def assign(self, values: np.ndarray):
        """
        Overwrite the values in place. The shape is fixed after initialization.

        :raises ShapeError: if the shape differs
        """
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.shape:
            raise ShapeError(
                f'Cannot assign shape {values.shape} to parameter {self.name} of shape {self.shape}'
            )
        self.data[...] = values


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor_from_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray]],
    op: str,
) -> Tensor:
    """
    Wrap the result of a forward computation and record it on the tape when needed.

    :param data: Forward result
    :param parents: Operand tensors
    :param backward_fn: Maps the output gradient to one gradient (or None) per parent
    :param op: Op name used in error messages
    :return: Result tensor
    :raises NonFiniteError: if the result holds NaN/Inf
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out._op = op
    if Config.CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f'{op} produced non-finite values')
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topological_order(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """
    Populate .grad of every leaf tensor that requires a gradient and is reachable from loss.
    Leaf gradients accumulate; the tape is cleared afterwards.

    :param loss: Scalar tensor
    :raises ShapeError: if loss is not a scalar
    """
    if loss.size != 1:
        raise ShapeError(f'backward() requires a scalar loss, got shape {loss.shape}')
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# Elementwise ------------------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return tensor_from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        'add',
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return tensor_from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        'sub',
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return tensor_from_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
        'mul',
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return tensor_from_op(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / b.data ** 2, b.shape),
        ),
        'div',
    )


def power(a: Tensor, exponent: Number) -> Tensor:
    a = as_tensor(a)
    return tensor_from_op(
        a.data ** exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
        'power',
    )


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return tensor_from_op(out_data, (a,), lambda g: (g * out_data,), 'exp')


def log(a: Tensor) -> Tensor:
    return tensor_from_op(np.log(a.data), (a,), lambda g: (g / a.data,), 'log')


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return tensor_from_op(a.data * mask, (a,), lambda g: (g * mask,), 'relu')


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """ Replace entries where mask is True with a constant (no gradient flows there). """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return tensor_from_op(
        np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),), 'masked_fill'
    )


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """ Inverted dropout. rate = 0 returns the input unchanged. """
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return tensor_from_op(a.data * keep, (a,), lambda g: (g * keep,), 'dropout')


# Linear algebra ---------------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """
    Matrix product with numpy broadcasting over leading axes.

    :raises ShapeError: if inner dimensions disagree
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'matmul dimension mismatch: {a.shape} @ {b.shape}')

    def backward_fn(g):
        return (
            _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
            _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape),
        )

    return tensor_from_op(a.data @ b.data, (a, b), backward_fn, 'matmul')


# Shape ------------------------------------------------------------------------------------------


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return tensor_from_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), 'reshape'
    )


def transpose(a: Tensor, axes: Tuple[int, ...] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return tensor_from_op(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), 'transpose'
    )


def _has_advanced_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    advanced = _has_advanced_index(index)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return tensor_from_op(a.data[index], (a,), backward_fn, 'getitem')


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return tensor_from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        'concatenate',
    )


# Reductions -------------------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return tensor_from_op(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),),
        'sum',
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size // max(a.data.sum(axis=axis, keepdims=True).size, 1)
    return tensor_from_op(
        a.data.mean(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,),
        'mean',
    )


# Normalization ----------------------------------------------------------------------------------


def _check_axis(a: Tensor, axis: int, op: str):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f'{op}: axis {axis} out of range for shape {a.shape}')
    if a.shape[axis] == 0:
        raise ShapeError(f'{op}: empty axis {axis} in shape {a.shape}')


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """ Softmax along an axis, computed with max-subtraction. """
    _check_axis(a, axis, 'softmax')
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return tensor_from_op(y, (a,), backward_fn, 'softmax')


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis, 'log_softmax')
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out_data) * g.sum(axis=axis, keepdims=True),)

    return tensor_from_op(out_data, (a,), backward_fn, 'log_softmax')


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize each vector along the last axis to zero mean and unit variance, then apply gain and bias.
    """
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError(
            f'layer_norm: gain {gain.shape} / bias {bias.shape} do not match input {a.shape}'
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    n = a.shape[-1]
    lead = tuple(range(a.ndim - 1))

    def backward_fn(g):
        d_hat = g * gain.data
        dx = (
            inv_std
            / n
            * (
                n * d_hat
                - d_hat.sum(axis=-1, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
            )
        )
        return dx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return tensor_from_op(x_hat * gain.data + bias.data, (a, gain, bias), backward_fn, 'layer_norm')


# Convolution ------------------------------------------------------------------------------------


def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    kernels: Tensor,
    stride: Tuple[int, int] = (1, 1),
    padding: Tuple[int, int] = (0, 0),
) -> Tensor:
    """
    2D cross-correlation of a Cin x H x W input with Cout x Cin x kh x kw kernels.

    :raises ShapeError: on non-positive stride, channel mismatch or a kernel larger than the padded input
    """
    sh, sw = stride
    ph, pw = padding
    if sh <= 0 or sw <= 0:
        raise ShapeError(f'conv2d stride must be positive, got {stride}')
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise ShapeError(f'conv2d shape mismatch: input {x.shape}, kernels {kernels.shape}')
    c_out, c_in, kh, kw = kernels.shape
    _, h, w = x.shape
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(
            f'conv2d kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}'
        )
    h_out = conv_output_length(h, kh, sh, ph)
    w_out = conv_output_length(w, kw, sw, pw)
    padded = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))

    def window(i, j):
        return (
            slice(None),
            slice(i, i + sh * (h_out - 1) + 1, sh),
            slice(j, j + sw * (w_out - 1) + 1, sw),
        )

    out = np.zeros((c_out, h_out, w_out))
    for i in range(kh):
        for j in range(kw):
            out += np.einsum('oc,chw->ohw', kernels.data[:, :, i, j], padded[window(i, j)])

    def backward_fn(g):
        d_padded = np.zeros_like(padded)
        d_kernels = np.zeros_like(kernels.data)
        for i in range(kh):
            for j in range(kw):
                d_kernels[:, :, i, j] = np.einsum('ohw,chw->oc', g, padded[window(i, j)])
                d_padded[window(i, j)] += np.einsum('oc,ohw->chw', kernels.data[:, :, i, j], g)
        return d_padded[:, ph : ph + h, pw : pw + w], d_kernels

    return tensor_from_op(out, (x, kernels), backward_fn, 'conv2d')


# Gradient checking ------------------------------------------------------------------------------


@attr.s(auto_attribs=True)
class GradCheckReport:
    """ Per-parameter maximum relative error between autodiff and central differences. """

    rtol: float
    max_rel_error: dict = attr.Factory(dict)
    checked_entries: int = 0

    @property
    def failures(self) -> List[str]:
        return [name for name, err in self.max_rel_error.items() if err > self.rtol]

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-6,
    max_entries: int = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare autodiff gradients of a scalar function with central finite differences.

    :param f: Deterministic zero-argument function returning a scalar tensor built from params
    :param params: Tensors to check (modified in place during the check and restored)
    :param step: Finite-difference step
    :param rtol: Pass threshold on the relative error
    :param atol: Denominator floor of the relative error
    :param max_entries: Number of entries sampled per parameter (None checks all)
    :param seed: Sampling seed
    :return: GradCheckReport
    """
    params = list(params)
    rng = make_rng(seed)
    for p in params:
        p.zero_grad()
    backward(f())
    report = GradCheckReport(rtol=rtol)
    for position, p in enumerate(params):
        name = getattr(p, 'name', '') or f'param{position}'
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        worst = 0.0
        for k in flat:
            idx = np.unravel_index(k, p.shape)
            original = p.data[idx]
            with no_grad():
                p.data[idx] = original + step
                f_plus = f().item()
                p.data[idx] = original - step
                f_minus = f().item()
            p.data[idx] = original
            numeric = (f_plus - f_minus) / (2 * step)
            a = analytic[idx]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), atol))
        report.max_rel_error[name] = worst
        report.checked_entries += len(flat)
    return report
