"""
Dense tensors with tape-based reverse-mode automatic differentiation.

Every `Tensor` records the tape position at which it was created. `backward`
walks the tensors reachable from a scalar loss in reverse tape order, so each
node's gradient is complete before it is pushed to its inputs.

Broadcasting is limited to leading batch dimensions: a binary operation
accepts operands whose shapes agree on the trailing dimensions of the
shorter one (e.g. `[B, T, d] + [d]`).
"""

import itertools
import logging
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
CHECKPOINT_MAGIC = b"CSFTCKPT"
CHECKPOINT_VERSION = 1

_tape_counter = itertools.count()
_grad_state = threading.local()

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward_fn: Optional[BackwardFn] = None,
    ):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._tape_index = next(_tape_counter)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward_fn=backward_fn)


def _trailing_compatible(a: Tuple[int, ...], b: Tuple[int, ...]) -> bool:
    shorter, longer = (a, b) if len(a) <= len(b) else (b, a)
    return len(shorter) == 0 or longer[len(longer) - len(shorter):] == shorter


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


def _binary_shape_check(a: Tensor, b: Tensor, op: str) -> None:
    if not _trailing_compatible(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ beyond leading batch dims")


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shape_check(a, b, "add")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shape_check(a, b, "sub")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shape_check(a, b, "mul")

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if not _trailing_compatible(a.shape[:-2], b.shape[:-2]):
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")

    def backward_fn(g):
        grad_a = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        grad_b = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return grad_a, grad_b

    return _make(a.data @ b.data, (a, b), backward_fn)


def transpose(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(x.data, -1, -2), (x,), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(tuple(shape)), (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward_fn)


def take(x: Tensor, index: Union[int, Sequence[int], np.ndarray], axis: int) -> Tensor:
    """Gathers along one axis; an integer index drops the axis."""
    axis = axis % x.ndim
    scalar = isinstance(index, (int, np.integer))
    indices = int(index) if scalar else np.asarray(index, dtype=np.int64)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        target = np.moveaxis(grad, axis, 0)
        if scalar:
            target[indices] += g
        else:
            np.add.at(target, indices, np.moveaxis(g, axis, 0))
        return (grad,)

    return _make(np.take(x.data, indices, axis=axis), (x,), backward_fn)


def permute_rows(x: Tensor, perm: np.ndarray) -> Tensor:
    """out[..., t, :] = x[..., perm[..., t], :] for per-row permutations."""
    perm = np.asarray(perm, dtype=np.int64)
    rows = x.shape[-2]
    if perm.shape[-1] != rows:
        raise ShapeError(f"permutation length {perm.shape[-1]} does not match {rows} rows")
    if not np.array_equal(np.sort(perm, axis=-1), np.broadcast_to(np.arange(rows), perm.shape)):
        raise ContractError("permute_rows expects a permutation of the row indices")
    index = np.broadcast_to(perm, x.shape[:-1])[..., None]
    inverse = np.broadcast_to(np.argsort(perm, axis=-1), x.shape[:-1])[..., None]

    def backward_fn(g):
        return (np.take_along_axis(g, inverse, axis=-2),)

    return _make(np.take_along_axis(x.data, index, axis=-2), (x,), backward_fn)


def expand(x: Tensor, batch: int) -> Tensor:
    """Repeats `x` along a new leading axis of size `batch`."""

    def backward_fn(g):
        return (g.sum(axis=0),)

    return _make(np.broadcast_to(x.data, (batch,) + x.shape).copy(), (x,), backward_fn)


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward_fn)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward_fn(g):
        return (g * out,)

    return _make(out, (x,), backward_fn)


def log(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), backward_fn)


def xlogx(x: Tensor) -> Tensor:
    """x log x with 0 log 0 := 0."""
    positive = x.data > 0
    safe = np.where(positive, x.data, 1.0)
    out = np.where(positive, x.data * np.log(safe), 0.0)

    def backward_fn(g):
        return (np.where(positive, g * (np.log(safe) + 1.0), 0.0),)

    return _make(out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward_fn(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * d_inner),)

    return _make(out, (x,), backward_fn)


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward_fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def backward_fn(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm affine {gain.shape}/{bias.shape} does not match width {width}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gain.data + bias.data

    def backward_fn(g):
        d_hat = g * gain.data
        grad_x = (inv_std / width) * (
            width * d_hat
            - d_hat.sum(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        return grad_x, _unbroadcast(g * x_hat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), backward_fn)


def cross_entropy(logits: Tensor, labels: Sequence[int], smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed negative log-likelihood over the batch."""
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"label smoothing must lie in [0, 1), got {smoothing}")
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError(f"label out of range [0, {classes}): {labels.min()}..{labels.max()}")
    target = np.full((batch, classes), smoothing / classes, dtype=logits.dtype)
    target[np.arange(batch), labels] += 1.0 - smoothing
    nll = mul(log_softmax_rows(logits), Tensor(target))
    return mul(sum(nll), -1.0 / batch)


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")

    reachable: Dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in reachable or not node.requires_grad:
            continue
        reachable[id(node)] = node
        stack.extend(node._parents)

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in sorted(reachable.values(), key=lambda t: t._tape_index, reverse=True):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        node.grad = grad.copy() if node.grad is None else node.grad + grad
        if node._backward_fn is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be nonnegative, got {self.weight_decay}")


def sgd_step(params: Mapping[str, Tensor], state: SgdState, lr_scale: float = 1.0) -> None:
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"sgd_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    lr = state.learning_rate * lr_scale
    for name, p in params.items():
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(p.data)
        elif velocity.shape != p.shape:
            raise ShapeError(f"velocity for {name} has shape {velocity.shape}, parameter {p.shape}")
        velocity = state.momentum * velocity + p.grad + state.weight_decay * p.data
        state.velocity[name] = velocity
        p.data -= lr * velocity
        p.grad = np.zeros_like(p.data)


def checkpoint_bytes(arrays: Mapping[str, Union[Tensor, np.ndarray]]) -> bytes:
    """
    Serializes named arrays.

    Layout (little-endian): magic `CSFTCKPT`, u32 version, u32 entry count,
    then per entry: u16 name length, UTF-8 name, u8 ndim, ndim x u32 extents,
    float32 data in C order.
    """
    chunks: List[bytes] = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, value in arrays.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return b"".join(chunks)


def parse_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ContractError("not a checkpoint: bad magic")
    offset = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", blob, offset)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    offset += 8
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape).copy()
        offset += 4 * size
    return arrays


def save_checkpoint(path: Union[str, Path], arrays: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    payload = checkpoint_bytes(arrays)
    Path(path).write_bytes(payload)
    logger.debug("wrote %d arrays (%d bytes) to %s", len(arrays), len(payload), path)


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    arrays = parse_checkpoint(Path(path).read_bytes())
    logger.debug("read %d arrays from %s", len(arrays), path)
    return arrays
