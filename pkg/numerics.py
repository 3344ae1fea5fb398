import contextlib
import contextvars
import logging
import math
import zlib
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar('grad_enabled', default=True)


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class DegenerateRowError(ValueError):
    """Raised when a softmax row has no unmasked entry."""


class RankError(ValueError):
    """Raised when backward is started from a non-scalar tensor."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """
    Disable graph recording for the enclosed block.

    The switch is context-local: other threads and asyncio tasks keep
    recording while one of them runs under no_grad.
    """
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    """Whether operations in the current context record the graph."""
    return _GRAD_ENABLED.get()


def _as_array(data: Any, dtype: Optional[np.dtype] = None) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype.kind == 'f' and dtype is None:
        return data
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    """
    Dense real array with optional reverse-mode gradient tracking.

    Every operation records its parents and a backward closure on the result;
    `backward()` replays the recorded tape in reverse topological order.
    Data is never mutated by operations, only `grad` accumulates.
    """

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Optional[np.dtype] = None):
        self.data: np.ndarray = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = 'leaf'

    # --- introspection -------------------------------------------------

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # --- operators -----------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        return transpose(self, axes if axes else None)

    @property
    def T(self) -> 'Tensor':
        return transpose(self, None)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a unique dotted name inside its model."""

    def __init__(self, data: Any, name: str, dtype: Optional[np.dtype] = None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def as_tensor(value: Any, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


def _record(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise ---------------------------------------------------------

def add(a: Any, b: Any) -> Tensor:
    """Broadcasting sum; each gradient is summed back to its operand's shape."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), 'add')


def sub(a: Any, b: Any) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), 'sub')


def mul(a: Any, b: Any) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), 'mul')


def div(a: Any, b: Any) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)), 'div')


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), 'neg')


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _record(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), 'pow')


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), 'exp')


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), 'log')


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _record(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), 'silu')


# --- reductions and shape ops -------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), backward_fn, 'sum')


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}")
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), 'transpose')


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    return _record(np.swapaxes(a.data, axis1, axis2), (a,),
                   lambda g: (np.swapaxes(g, axis1, axis2),), 'swapaxes')


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]} along axis {axis}")
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, offsets, axis=axis)), 'concat')


def getitem(a: Tensor, index) -> Tensor:
    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), backward_fn, 'slice')


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along one axis; the backward pass scatter-adds into the source."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        target = np.moveaxis(full, axis, 0)
        moved = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(target, indices, moved)
        return (full,)

    return _record(out, (a,), backward_fn, 'take')


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    return take(weight, ids, axis=0)


def cumsum(a: Tensor, axis: int) -> Tensor:
    def backward_fn(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _record(np.cumsum(a.data, axis=axis), (a,), backward_fn, 'cumsum')


# --- products ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Batched matrix product over the last two axes.

    Args:
        a: (..., m, k) operand
        b: (..., k, n) operand; leading axes broadcast against `a`

    Returns:
        (..., m, n) product whose gradient flows to both operands

    Raises:
        ShapeError: If either operand is below rank 2 or the inner extents differ
    """
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward_fn, 'matmul')


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """
    Two-operand einsum. Every index of an operand must appear in the other
    operand or the output, so each gradient is itself a single einsum.
    """
    lhs, out_sub = subscripts.replace(' ', '').split('->')
    sub_a, sub_b = lhs.split(',')
    for mine, other in ((sub_a, sub_b), (sub_b, sub_a)):
        orphans = set(mine.replace('...', '')) - set(other) - set(out_sub)
        if orphans:
            raise ShapeError(f"einsum index {sorted(orphans)} is summed inside a single operand")
    try:
        out = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError as e:
        raise ShapeError(f"einsum '{subscripts}' cannot combine {a.shape} and {b.shape}: {e}")

    def backward_fn(g):
        ga = np.einsum(f"{out_sub},{sub_b}->{sub_a}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_sub},{sub_a}->{sub_b}", g, a.data, optimize=True)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward_fn, 'einsum')


# --- attention and loss primitives ----------------------------------------

def softmax_rows(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis. `mask` is True where an entry may receive
    weight; excluded entries are dropped from the sum and come out exactly 0.

    Raises:
        DegenerateRowError: If some row has every entry excluded
    """
    x = a.data
    if mask is None:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        counts = keep.sum(axis=-1)
        if (counts == 0).any():
            bad = np.argwhere(counts == 0)[0]
            row = int(bad[-1]) if bad.size else 0
            raise DegenerateRowError(f"softmax row {row} (index {tuple(int(i) for i in bad)}) is fully masked")
        row_max = np.max(np.where(keep, x, -np.inf), axis=-1, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, x - row_max, 0.0)), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), backward_fn, 'softmax')


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray, reduction: str = 'mean') -> Tensor:
    """Token NLL of integer targets under row-softmax of the logits."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    flat = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    row_max = flat.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(flat - row_max).sum(axis=1))
    nll = lse - flat[np.arange(t.size), t]
    scale = 1.0 / t.size if reduction == 'mean' else 1.0
    total = nll.sum() * scale

    def backward_fn(g):
        probs = np.exp(flat - lse[:, None])
        probs[np.arange(t.size), t] -= 1.0
        return ((probs * (g * scale)).reshape(logits.shape),)

    return _record(np.asarray(total, dtype=logits.dtype), (logits,), backward_fn, 'cross_entropy')


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * (ms + eps) ** -0.5 * gain


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    return matmul(silu(matmul(x, w_gate)) * matmul(x, w_up), w_down)


def rotary_tables(positions: np.ndarray, dim: int, base: float = 10000.0,
                  dtype: np.dtype = DEFAULT_DTYPE) -> Tuple[np.ndarray, np.ndarray]:
    if dim % 2:
        raise ShapeError(f"rotary dimension must be even, got {dim}")
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def apply_rotary(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate (..., n, d) rows by their absolute positions (half-split pairing)."""
    cos, sin = rotary_tables(positions, x.shape[-1], base, x.dtype)
    out = x.data * cos + _rotate_half(x.data) * sin

    def backward_fn(g):
        return (g * cos - _rotate_half(g * sin),)

    return _record(out, (x,), backward_fn, 'rotary')


# --- backward ------------------------------------------------------------

def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(t) into `t.grad` for every tensor reachable from loss.

    Raises:
        RankError: If loss is not a scalar
    """
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# --- randomness and initialization -----------------------------------------

def make_rng(seed: int, stream: str = '') -> np.random.Generator:
    """
    PCG64 generator for `seed`. A named stream is split off by using the
    CRC-32 of its UTF-8 name as the SeedSequence spawn key, so every
    parameter draws from its own reproducible stream.
    """
    spawn_key = (zlib.crc32(stream.encode('utf-8')),) if stream else ()
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn_key)))


def truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float,
                     bound: float = 2.0) -> np.ndarray:
    values = rng.standard_normal(shape)
    outside = np.abs(values) > bound
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > bound
    return values * std


# --- optimization ------------------------------------------------------------

def cosine_lr(step: int, max_lr: float, min_lr: float, warmup_steps: int, total_steps: int) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return max_lr * (step + 1) / warmup_steps
    if step >= total_steps:
        return min_lr
    span = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / span
    return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class AdamW:
    """
    Decoupled weight-decay Adam. Decay applies to matrices only; gains and
    other vectors are left undecayed.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.98), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.exp_avg = {p.name: np.zeros_like(p.data) for p in self.params}
        self.exp_avg_sq = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        beta1, beta2 = self.betas
        self.t += 1
        bias1 = 1.0 - beta1 ** self.t
        bias2 = 1.0 - beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            m = self.exp_avg[p.name]
            v = self.exp_avg_sq[p.name]
            m *= beta1
            m += (1.0 - beta1) * p.grad
            v *= beta2
            v += (1.0 - beta2) * p.grad * p.grad
            if self.weight_decay and p.ndim >= 2:
                p.data *= (1.0 - lr * self.weight_decay)
            denom = np.sqrt(v) / math.sqrt(bias2) + self.eps
            p.data -= (lr / bias1) * m / denom

    def state_dict(self) -> Dict[str, Any]:
        return {'t': self.t, 'exp_avg': self.exp_avg, 'exp_avg_sq': self.exp_avg_sq}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.t = int(state['t'])
        for name in self.exp_avg:
            self.exp_avg[name] = np.asarray(state['exp_avg'][name], dtype=self.exp_avg[name].dtype).copy()
            self.exp_avg_sq[name] = np.asarray(state['exp_avg_sq'][name], dtype=self.exp_avg_sq[name].dtype).copy()


# --- finite differences ----------------------------------------------------------

def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                   max_entries: Optional[int] = None, seed: int = 0, per_entry: bool = False,
                   floor: float = 1e-6) -> float:
    """
    Compare analytic gradients with central differences.

    Args:
        loss_fn: Rebuilds the scalar loss from the current parameter data
        params: Leaf tensors to perturb
        eps: Finite-difference step
        max_entries: Number of entries sampled per tensor (None for all)
        per_entry: Report the largest entry-wise error instead of the norm-wise one
        floor: Smallest denominator for entry-wise errors, so entries whose true
            gradient is zero are judged by absolute difference

    Returns:
        Norm-wise: largest ||g_a - g_n|| / (||g_a|| + ||g_n||) over tensors.
        Entry-wise: largest |g_a - g_n| / max(|g_a|, |g_n|, floor) over sampled entries.
    """
    for p in params:
        p.grad = None
    backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat_size = p.data.size
        if max_entries is None or max_entries >= flat_size:
            picks = np.arange(flat_size)
        else:
            picks = rng.choice(flat_size, size=max_entries, replace=False)
        got, want = [], []
        flat = p.data.reshape(-1)
        for idx in picks:
            original = flat[idx]
            with no_grad():
                flat[idx] = original + eps
                plus = loss_fn().item()
                flat[idx] = original - eps
                minus = loss_fn().item()
            flat[idx] = original
            want.append((plus - minus) / (2.0 * eps))
            got.append(analytic.reshape(-1)[idx])
        got_arr, want_arr = np.asarray(got), np.asarray(want)
        if per_entry:
            scale = np.maximum(np.maximum(np.abs(got_arr), np.abs(want_arr)), floor)
            if got_arr.size:
                worst = max(worst, float((np.abs(got_arr - want_arr) / scale).max()))
            continue
        denom = np.linalg.norm(got_arr) + np.linalg.norm(want_arr)
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(got_arr - want_arr) / denom))
    return worst
