"""Dense float64 tensors with tape-based reverse-mode differentiation.

The op set is deliberately narrow: exactly what the toy dual encoder, the
retrieval losses and the training objective need. Broadcasting is limited to
adding or multiplying a vector along the last axis.

Usage::

    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    backward(loss, tape)
    x.grad  # array([6.])
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DeterminismError, DimensionError, ReplayError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("attriprompt_tape", default=None)

LAYER_NORM_EPS = 1e-5


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64, order="C", copy=True)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by a scalar constant")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed operations for one forward pass.

    Entering the context starts a fresh recording; a tape can be replayed in
    reverse exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()
        self.consumed = False
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self.nodes = []
        self._outputs = set()
        self.consumed = False
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def _record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        if self.consumed:
            raise ReplayError("tape was already replayed; open a new Tape for a new forward pass")
        self.nodes.append(_Node(out, parents, backward))
        self._outputs.add(id(out))

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording, even inside an active tape."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                tape._record(out, parents, backward)
                break
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Reverse-accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor.

    Leaf gradients accumulate (``+=``) so that repeated use of one parameter, or
    several backward passes before an optimizer step, sum correctly.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = _ACTIVE_TAPE.get()
    if tape is None:
        raise ContractError("backward needs the tape that recorded the loss")
    if tape.consumed:
        raise ReplayError("tape was already replayed; run a new forward pass first")
    if not tape.owns(loss):
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = tape._outputs
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            node.out.grad = np.zeros_like(node.out.data)
            continue
        node.out.grad = g
        for p, pg in zip(node.parents, node.backward(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            if key not in produced:
                leaves[key] = p
            if pg is None:
                continue
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for key, leaf in leaves.items():
        g = grads.get(key)
        g = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape.consumed = True
    tape.nodes = []


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None), (ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product of [B, m, k] and [B, k, n]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            g @ bd.transpose(0, 2, 1) if a.requires_grad else None,
            ad.transpose(0, 2, 1) @ g if b.requires_grad else None,
        )

    return _result(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise


def _check_pair(a: Tensor, b: Tensor, op: str) -> bool:
    """Returns True when b broadcasts as a vector along a's last axis."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise DimensionError(f"{op} shape mismatch: {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    vec = _check_pair(a, b, "add")

    def bw(g):
        if not b.requires_grad:
            return g, None
        return g, (g.reshape(-1, b.shape[0]).sum(axis=0) if vec else g)

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    vec = _check_pair(a, b, "sub")

    def bw(g):
        return g, -(g.reshape(-1, b.shape[0]).sum(axis=0) if vec else g)

    return _result(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    vec = _check_pair(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        gb = g * ad
        return g * bd, (gb.reshape(-1, bd.shape[0]).sum(axis=0) if vec else gb)

    return _result(ad * bd, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _result(x.data + c, (x,), lambda g: (g,))


def tabs(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def quick_gelu(x: Tensor) -> Tensor:
    """x * sigmoid(1.702 x), the activation used in CLIP's transformer MLPs."""
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-1.702 * xd))

    def bw(g):
        return (g * (s + 1.702 * xd * s * (1.0 - s)),)

    return _result(xd * s, (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    xd = x.data
    if axis is None:
        return _result(np.asarray(xd.sum()), (x,), lambda g: (np.broadcast_to(g, xd.shape).copy(),))
    ax = axis % xd.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), xd.shape).copy(),)

    return _result(xd.sum(axis=ax), (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.size
    return scale(tsum(x), 1.0 / n)


# ---------------------------------------------------------------------------
# shape manipulation (every result owns its buffer; nothing aliases)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape).copy()
    return _result(out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (g.transpose(inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat shape mismatch on axis {ax}: {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    src = x.shape

    def bw(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _result(x.data[index].copy(), (x,), bw)


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather along axis 0; repeated indices accumulate in the reverse pass."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"take_rows index out of range for shape {x.shape}: {idx.tolist()}")
    src = x.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), bw)


def expand(x: Tensor, n: int) -> Tensor:
    """Repeat x along a new leading axis of length n."""
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return _result(out, (x,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# normalisation and probability


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x)


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"log_softmax needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if not (gamma.requires_grad or beta.requires_grad):
            return dx, None, None
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _result(xhat * gd + beta.data, (x, gamma, beta), bw)


def _unit_rows(m: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((m * m).sum(axis=-1, keepdims=True))
    zero = np.flatnonzero(norms.reshape(-1) == 0.0)
    if zero.size:
        raise DegenerateInputError(f"zero-norm row {int(zero[0])} in {label}")
    return m / norms, norms


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity: entry (i, j) = cos(a_i, b_j)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_rows shape mismatch: {a.shape} vs {b.shape}")
    an, na = _unit_rows(a.data, "first operand")
    bn, nb = _unit_rows(b.data, "second operand")
    out = an @ bn.T

    def bw(g):
        dan = g @ bn
        dbn = g.T @ an
        da = (dan - an * (dan * an).sum(axis=-1, keepdims=True)) / na
        db = (dbn - bn * (dbn * bn).sum(axis=-1, keepdims=True)) / nb
        return da, db

    return _result(np.clip(out, -1.0, 1.0), (a, b), bw)


def cosine_pairs(a: Tensor, b: Tensor) -> Tensor:
    """Row-aligned cosine similarity: entry i = cos(a_i, b_i)."""
    if a.ndim != 2 or a.shape != b.shape:
        raise DimensionError(f"cosine_pairs shape mismatch: {a.shape} vs {b.shape}")
    an, na = _unit_rows(a.data, "first operand")
    bn, nb = _unit_rows(b.data, "second operand")
    out = (an * bn).sum(axis=-1)

    def bw(g):
        g = g[:, None]
        dan = g * bn
        dbn = g * an
        da = (dan - an * (dan * an).sum(axis=-1, keepdims=True)) / na
        db = (dbn - bn * (dbn * bn).sum(axis=-1, keepdims=True)) / nb
        return da, db

    return _result(np.clip(out, -1.0, 1.0), (a, b), bw)


# ---------------------------------------------------------------------------
# verification harness


def _evaluate(fn: Callable[[], Tensor]) -> float:
    with no_grad():
        out = fn()
    return out.item() if isinstance(out, Tensor) else float(out)


def finite_diff_errors(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
) -> dict[str, float]:
    """Worst relative error between reverse-mode and central-difference gradients, per parameter.

    The relative error of one entry is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``.
    Parameter data is perturbed in place and restored bit-exactly.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    saved = {name: p.grad for name, p in params.items()}
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = fn()
    if not isinstance(loss, Tensor):
        raise ContractError("fn must return a Tensor")
    if tape.owns(loss):
        backward(loss, tape)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    for name, p in params.items():
        p.grad = saved[name]

    first, second = _evaluate(fn), _evaluate(fn)
    if first != second and not (np.isnan(first) and np.isnan(second)):
        raise DeterminismError(f"fn is not deterministic: {first!r} then {second!r}")

    errors: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ad = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _evaluate(fn)
            flat[i] = orig - step
            down = _evaluate(fn)
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            denom = max(abs(ad[i]), abs(fd), 1e-8)
            worst = max(worst, abs(ad[i] - fd) / denom)
        errors[name] = worst
    return errors


def finite_diff_check(fn: Callable[[], Tensor], params: Iterable[Tensor] | Mapping[str, Tensor], step: float = 1e-5) -> float:
    if not isinstance(params, Mapping):
        params = {f"param{i}": p for i, p in enumerate(params)}
    errors = finite_diff_errors(fn, params, step)
    return max(errors.values(), default=0.0)
