"""Dense tensor arithmetic with reverse-mode differentiation on an explicit tape.

Design points:
  - numpy arrays as storage, float32 by default, float64 for verification runs.
  - No implicit broadcasting anywhere: binary elementwise ops demand identical
    shapes, matmul is strictly 2-D. Shape bugs surface as errors, not as
    silently broadcast results.
  - Operations record onto the innermost active ``Tape``; with no tape open
    they just compute values. A frozen model forwarded outside a tape costs
    nothing in bookkeeping.
  - A tape is single-use: calling ``backward`` twice on the same tape raises,
    which is the documented alternative to silently doubling gradients.
"""

from __future__ import annotations

import math
import struct
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError

_ACTIVE_TAPES: list["Tape"] = []

# tanh-approximation GELU constants, fixed so external oracles can reproduce
# the exact curve
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

LAYERNORM_EPS = 1e-5


class Tensor:
    """A dense row-major array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut from any graph, never requiring grad."""
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations for one backward pass.

    Usage::

        with Tape() as tape:
            loss = ...ops...
        tape.backward(loss)
    """

    def __init__(self):
        self._records = []  # (output, inputs, backward_fn)
        self.consumed = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        self._records.append((output, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(x) to every recorded tensor, in reverse order."""
        if self.consumed:
            raise ConfigError("tape already consumed by a previous backward()")
        if loss.data.ndim != 0:
            raise ConfigError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        loss._accumulate(np.ones((), dtype=loss.data.dtype))
        for output, inputs, backward_fn in reversed(self._records):
            if output.grad is None:
                continue  # branch never reached the loss
            backward_fn(output.grad)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _result(value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording it when grads are wanted and a tape is open."""
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=track, dtype=value.dtype)
    if track:
        tape.record(out, inputs, backward_fn)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ConfigError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# op set


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    value = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(value, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    value = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(value, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    value = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(value, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product, identical shapes only."""
    _check_same_shape(a, b, "mul")
    value = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(value, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = float(s)
    value = a.data * a.data.dtype.type(s)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * a.data.dtype.type(s))

    return _result(value, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    value = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return _result(value, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * value).sum(axis=-1, keepdims=True)
            a._accumulate(value * (g - dot))

    return _result(value, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply per-position gain and bias.

    gain and bias have shape (d,) where d is the last axis of ``a``; applying
    them across the leading axes is part of this op's semantics, not implicit
    broadcasting by the caller.
    """
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ConfigError(
            f"layer_norm: gain/bias must be shape ({d},), got {gain.shape} and {bias.shape}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    value = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=lead))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=lead))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - m1 - xhat * m2))

    return _result(value, (a, gain, bias), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ConfigError(f"reshape: cannot view {a.shape} as {shape}")
    old_shape = a.shape
    value = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old_shape))

    return _result(value, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ConfigError(f"transpose: axes {axes} invalid for rank {a.data.ndim}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    value = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return _result(value, (a,), backward)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate over the last axis; leading axes must match exactly."""
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ConfigError(
                f"concat: leading shape mismatch {tensors[0].shape} vs {t.shape}"
            )
    value = np.concatenate([t.data for t in tensors], axis=-1)
    widths = [t.shape[-1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[..., lo:hi])

    return _result(value, tuple(tensors), backward)


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of the rows selected by a boolean mask over the leading axes.

    ``mask`` covers the first ``mask.ndim`` axes of ``a``; the result keeps the
    remaining trailing axes. The mask must select at least one element.
    """
    mask = np.asarray(mask, dtype=bool)
    if a.shape[: mask.ndim] != mask.shape:
        raise ConfigError(f"masked_mean: mask shape {mask.shape} vs tensor {a.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ConfigError("masked_mean: empty mask")
    value = a.data[mask].mean(axis=0)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[mask] = g / count
            a._accumulate(full)

    return _result(value, (a,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    _check_same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    value = np.asarray((diff * diff).mean(), dtype=a.data.dtype)

    def backward(g):
        coeff = g * (2.0 / n)
        if a.requires_grad:
            a._accumulate(coeff * diff)
        if b.requires_grad:
            b._accumulate(-coeff * diff)

    return _result(value, (a, b), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ignored.

    ``logits`` is (rows, classes); ``targets`` is an int array of shape (rows,).
    Rows with target == ignore_index contribute zero loss and zero gradient.
    If every row is ignored the loss is exactly 0.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ConfigError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    keep = targets != ignore_index
    count = int(keep.sum())
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    if count == 0:
        value = np.asarray(0.0, dtype=x.dtype)
    else:
        rows = np.flatnonzero(keep)
        picked = shifted[rows, targets[rows]]
        value = np.asarray(-(picked - lse[rows]).mean(), dtype=x.dtype)

    def backward(g):
        if logits.requires_grad and count > 0:
            probs = np.exp(shifted - lse[..., None])
            grad = probs
            rows = np.flatnonzero(keep)
            grad[rows, targets[rows]] -= 1.0
            grad[~keep] = 0.0
            logits._accumulate(g * grad / count)

    return _result(value, (logits,), backward)


def log(a: Tensor) -> Tensor:
    value = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _result(value, (a,), backward)


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * value)

    return _result(value, (a,), backward)


def tensor_sum(a: Tensor) -> Tensor:
    value = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g))

    return _result(value, (a,), backward)


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size
    value = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g / n))

    return _result(value, (a,), backward)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params, grads, velocities, lr: float, momentum: float) -> None:
    """v <- momentum*v + g; theta <- theta - lr*v, all in place."""
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ConfigError(
                f"sgd_step: shape mismatch param {p.shape}, grad {g.shape}, velocity {v.shape}"
            )
        v *= momentum
        v += g
        p.data -= lr * v


class SGD:
    """Momentum SGD holding one velocity buffer per named parameter."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self._velocity = {}

    def step(self, named_params: dict, lr: float) -> None:
        for name, p in named_params.items():
            if p.grad is None:
                continue
            v = self._velocity.get(name)
            if v is None or v.shape != p.shape:
                v = np.zeros_like(p.data)
                self._velocity[name] = v
            sgd_step([p], [p.grad], [v], lr, self.momentum)

    def zero_grad(self, named_params: dict) -> None:
        for p in named_params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# parameter snapshot file format
#
# header:  magic b"SLABPAR1" | u32 version | u32 tensor count
# record:  u32 name length | name bytes (utf-8) | u32 rank | u32 dims...
#          | float32 little-endian values (row-major)

_SNAP_MAGIC = b"SLABPAR1"
_SNAP_VERSION = 1


def save_parameters(path, named: dict) -> None:
    """Write named arrays as 32-bit little-endian records. Bit-exact for float32."""
    with open(path, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(struct.pack("<II", _SNAP_VERSION, len(named)))
        for name, tensor in named.items():
            arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_parameters(path) -> dict:
    """Read a snapshot file back into an ordered name -> float32 array dict."""
    from .errors import DataError

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _SNAP_MAGIC:
        raise DataError(f"{path}: not a parameter snapshot (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != _SNAP_VERSION:
        raise DataError(f"{path}: unsupported snapshot version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            out[name] = arr.copy()
    except (struct.error, ValueError) as err:
        raise DataError(f"{path}: truncated or corrupt snapshot ({err})") from err
    if pos != len(blob):
        raise DataError(f"{path}: trailing bytes after last record")
    return out
