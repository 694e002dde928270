"""
Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a float64 numpy array. Operations on tensors that require
gradients record their parents and a closure that pushes the output gradient
back to them; `Tensor.backward` walks the recorded graph in reverse
topological order.
"""

import contextlib
import json
import logging
import math
import struct
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .exceptions import CheckpointFormatError, GradientError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CFW1"
LAYER_NORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: "Tensor", b: "Tensor") -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("operands cannot be broadcast together", op, (a.shape, b.shape))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


class Tensor:
    """An n-dimensional float64 array that participates in a differentiation graph."""

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple["Tensor", ...] = (), _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._op = _op
        self._backward: Optional[Callable[[], None]] = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        return cls(data, requires_grad=requires_grad, _parents=tuple(parents) if requires_grad else (), _op=op)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # *** properties ***

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("only single-element tensors convert to a float", "item", (self.shape,))
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # *** backward pass ***

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if grad.shape != self.shape:
            grad = np.broadcast_to(grad, self.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def _topological_order(self) -> List["Tensor"]:
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
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf that requires grad."""
        if self.data.size != 1:
            raise GradientError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("loss does not depend on any tensor that requires grad")
        order = self._topological_order()
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # *** elementwise arithmetic ***

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def __add__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        _broadcast_shape("add", self, other)
        out = Tensor._result(self.data + other.data, (self, other), "add")
        if out.requires_grad:
            def _backward():
                self._accumulate(_unbroadcast(out.grad, self.shape))
                other._accumulate(_unbroadcast(out.grad, other.shape))
            out._backward = _backward
        return out

    def __radd__(self, other) -> "Tensor":
        return self + other

    def __neg__(self) -> "Tensor":
        out = Tensor._result(-self.data, (self,), "neg")
        if out.requires_grad:
            def _backward():
                self._accumulate(-out.grad)
            out._backward = _backward
        return out

    def __sub__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        _broadcast_shape("sub", self, other)
        out = Tensor._result(self.data - other.data, (self, other), "sub")
        if out.requires_grad:
            def _backward():
                self._accumulate(_unbroadcast(out.grad, self.shape))
                other._accumulate(_unbroadcast(-out.grad, other.shape))
            out._backward = _backward
        return out

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        _broadcast_shape("mul", self, other)
        out = Tensor._result(self.data * other.data, (self, other), "mul")
        if out.requires_grad:
            def _backward():
                self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
                other._accumulate(_unbroadcast(out.grad * self.data, other.shape))
            out._backward = _backward
        return out

    def __rmul__(self, other) -> "Tensor":
        return self * other

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        _broadcast_shape("div", self, other)
        out = Tensor._result(self.data / other.data, (self, other), "div")
        if out.requires_grad:
            def _backward():
                self._accumulate(_unbroadcast(out.grad / other.data, self.shape))
                other._accumulate(_unbroadcast(-out.grad * self.data / (other.data ** 2), other.shape))
            out._backward = _backward
        return out

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise ShapeError("tensor exponents are not supported", "pow", (self.shape, exponent.shape))
        out = Tensor._result(self.data ** exponent, (self,), "pow")
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad * exponent * self.data ** (exponent - 1))
            out._backward = _backward
        return out

    def scale(self, factor: float) -> "Tensor":
        return self * float(factor)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # *** unary functions ***

    def exp(self) -> "Tensor":
        value = np.exp(self.data)
        out = Tensor._result(value, (self,), "exp")
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad * value)
            out._backward = _backward
        return out

    def log(self) -> "Tensor":
        out = Tensor._result(np.log(self.data), (self,), "log")
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad / self.data)
            out._backward = _backward
        return out

    def sigmoid(self) -> "Tensor":
        value = special.expit(self.data)
        out = Tensor._result(value, (self,), "sigmoid")
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad * value * (1.0 - value))
            out._backward = _backward
        return out

    def gelu(self) -> "Tensor":
        return gelu(self)

    def softmax(self) -> "Tensor":
        return softmax(self)

    # *** reductions ***

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            def _backward():
                grad = out.grad
                if axis is not None and not keepdims:
                    axes = (axis,) if isinstance(axis, int) else tuple(axis)
                    for ax in sorted(a % self.ndim for a in axes):
                        grad = np.expand_dims(grad, ax)
                self._accumulate(np.broadcast_to(grad, self.shape))
            out._backward = _backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # *** movement ***

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            value = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape to {shape}", "reshape", (self.shape,))
        original = self.shape
        out = Tensor._result(value, (self,), "reshape")
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad.reshape(original))
            out._backward = _backward
        return out

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        if sorted(axes) != list(range(self.ndim)):
            raise ShapeError(f"invalid permutation {axes}", "transpose", (self.shape,))
        inverse = tuple(np.argsort(axes))
        out = Tensor._result(self.data.transpose(axes), (self,), "transpose")
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad.transpose(inverse))
            out._backward = _backward
        return out

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            index = index.data.astype(np.int64)
        out = Tensor._result(self.data[index], (self,), "slice")
        basic = _is_basic_index(index)
        if out.requires_grad:
            def _backward():
                grad = np.zeros_like(self.data)
                if basic:
                    grad[index] += out.grad
                else:
                    np.add.at(grad, index, out.grad)
                self._accumulate(grad)
            out._backward = _backward
        return out


class Parameter(Tensor):
    """A trainable leaf tensor with a hierarchical name."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


# *** free functions over tensors ***

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("inner dimensions differ", "matmul", (a.shape, b.shape))
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("batch dimensions cannot be broadcast", "matmul", (a.shape, b.shape))
    out = Tensor._result(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        def _backward():
            a._accumulate(_unbroadcast(np.matmul(out.grad, np.swapaxes(b.data, -1, -2)), a.shape))
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), out.grad), b.shape))
        out._backward = _backward
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    out = Tensor._result(x.data * cdf, (x,), "gelu")
    if out.requires_grad:
        def _backward():
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            x._accumulate(out.grad * (cdf + x.data * pdf))
        out._backward = _backward
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._result(value, (x,), "softmax")
    if out.requires_grad:
        def _backward():
            g = out.grad
            x._accumulate(value * (g - (g * value).sum(axis=-1, keepdims=True)))
        out._backward = _backward
    return out


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis to zero mean and unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = Tensor._result(normed, (x,), "layer_norm")
    if out.requires_grad:
        def _backward():
            g = out.grad
            x._accumulate(inv_std * (g - g.mean(axis=-1, keepdims=True)
                                     - normed * (g * normed).mean(axis=-1, keepdims=True)))
        out._backward = _backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("nothing to concatenate", "concat", ())
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError("shapes differ outside the concatenation axis", "concat", [t.shape for t in tensors])
    value = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor._result(value, tensors, "concat")
    if out.requires_grad:
        bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
        def _backward():
            for t, g in zip(tensors, np.split(out.grad, bounds, axis=axis)):
                t._accumulate(g)
        out._backward = _backward
    return out


def pad2d(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the last two axes at the bottom and right."""
    if pad_h == 0 and pad_w == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, pad_h), (0, pad_w)]
    height, width = x.shape[-2:]
    out = Tensor._result(np.pad(x.data, widths), (x,), "pad2d")
    if out.requires_grad:
        def _backward():
            x._accumulate(out.grad[..., :height, :width])
        out._backward = _backward
    return out


def upsample_nearest2d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    if factor == 1:
        return x
    value = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    lead = x.shape[:-2]
    height, width = x.shape[-2:]
    out = Tensor._result(value, (x,), "upsample")
    if out.requires_grad:
        def _backward():
            g = out.grad.reshape(lead + (height, factor, width, factor))
            x._accumulate(g.sum(axis=(-3, -1)))
        out._backward = _backward
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x [N, C, H, W] with weight [O, C, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("expected x [N, C, H, W] and weight [O, C, kh, kw]", "conv2d", (x.shape, weight.shape))
    n, _, height, width = x.shape
    out_channels, in_channels, kh, kw = weight.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("kernel larger than padded input", "conv2d", (x.shape, weight.shape))

    def window(i: int, j: int) -> Tuple[slice, slice, slice, slice]:
        return (slice(None), slice(None), slice(i, i + stride * out_h, stride), slice(j, j + stride * out_w, stride))

    value = np.zeros((n, out_channels, out_h, out_w))
    for i in range(kh):
        for j in range(kw):
            patch = padded[window(i, j)]
            value += np.tensordot(weight.data[:, :, i, j], patch, axes=([1], [1])).transpose(1, 0, 2, 3)
    parents = [x, weight]
    if bias is not None:
        value += bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)

    out = Tensor._result(value, parents, "conv2d")
    if out.requires_grad:
        def _backward():
            g = out.grad
            grad_padded = np.zeros_like(padded) if x.requires_grad else None
            grad_weight = np.zeros_like(weight.data) if weight.requires_grad else None
            for i in range(kh):
                for j in range(kw):
                    idx = window(i, j)
                    if grad_weight is not None:
                        grad_weight[:, :, i, j] = np.tensordot(g, padded[idx], axes=([0, 2, 3], [0, 2, 3]))
                    if grad_padded is not None:
                        grad_padded[idx] += np.tensordot(weight.data[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
            if grad_padded is not None:
                x._accumulate(grad_padded[:, :, padding:padding + height, padding:padding + width])
            if grad_weight is not None:
                weight._accumulate(grad_weight)
            if bias is not None:
                bias._accumulate(g.sum(axis=(0, 2, 3)))
        out._backward = _backward
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of logits [N, K] against integer targets [N]."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("expected logits [N, K] and targets [N]", "cross_entropy", (logits.shape, targets.shape))
    num_classes = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= num_classes):
        bad = int(targets.max() if targets.max() >= num_classes else targets.min())
        raise ValidationError(f"class id {bad} outside [0, {num_classes})", field="targets", value=bad)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(targets.size)
    count = max(targets.size, 1)
    out = Tensor._result(np.array(-log_probs[rows, targets].sum() / count), (logits,), "cross_entropy")
    if out.requires_grad:
        def _backward():
            grad = np.exp(log_probs)
            grad[rows, targets] -= 1.0
            logits._accumulate(grad * (out.grad / count))
        out._backward = _backward
    return out


# *** finite-difference oracle ***

def _as_float(value) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def finite_difference_gradient(f: Callable[[Tensor], Union[Tensor, float]], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function with respect to every element of x."""
    if h <= 0:
        raise ValidationError("finite-difference step must be positive", field="h", value=h)
    original = x.data.copy()
    grad = np.zeros_like(original)
    try:
        with no_grad():
            for index in np.ndindex(original.shape):
                x.data[index] = original[index] + h
                forward = _as_float(f(x))
                x.data[index] = original[index] - h
                backward = _as_float(f(x))
                x.data[index] = original[index]
                if not (math.isfinite(forward) and math.isfinite(backward)):
                    raise GradientError(f"non-finite function value at index {index}", index=index)
                grad[index] = (forward - backward) / (2.0 * h)
    finally:
        x.data[...] = original
    return Tensor(grad)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Largest absolute deviation scaled by the larger gradient magnitude (never below `floor`)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare backward() against finite differences for each input; returns the worst relative error."""
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    worst = 0.0
    for t, grad in zip(inputs, analytic):
        numeric = finite_difference_gradient(lambda _x: fn(), t, h)
        worst = max(worst, max_relative_error(grad, numeric.data))
    return worst


# *** checkpoint codec ***

def save_checkpoint(path: Union[str, Path], named_arrays: Union[Mapping[str, np.ndarray], Iterable[Tuple[str, np.ndarray]]]) -> None:
    """Write arrays as a CFW1 checkpoint: magic, u32-length JSON manifest, little-endian float64 payloads."""
    items = list(named_arrays.items()) if isinstance(named_arrays, Mapping) else list(named_arrays)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        raise ValidationError("parameter names must be unique", field="names")
    manifest = json.dumps([{"name": name, "shape": list(np.shape(array))} for name, array in items]).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for _, array in items:
            fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    logger.debug(f"Wrote checkpoint {path} with {len(items)} arrays")


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read a CFW1 checkpoint into an ordered name -> array mapping."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic", offset=0)
    if len(raw) < 8:
        raise CheckpointFormatError("truncated manifest length", offset=4)
    (manifest_length,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    if offset + manifest_length > len(raw):
        raise CheckpointFormatError("truncated manifest", offset=offset)
    try:
        manifest = json.loads(raw[offset:offset + manifest_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}", offset=offset)
    offset += manifest_length

    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CheckpointFormatError(f"truncated payload for {entry['name']}", offset=offset)
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointFormatError("trailing bytes after payload", offset=offset)
    return arrays
