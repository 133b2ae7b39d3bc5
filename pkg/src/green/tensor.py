"""Dense float64 tensors with an explicit reverse-mode tape.

Every op is a plain function taking its operands plus an optional ``tape``.
With ``tape=None`` the op just computes; with a :class:`Tape` it also records
the backward rule whenever at least one operand is tracked (a leaf with
``requires_grad`` or the output of an earlier recorded op).

    >>> tape = Tape()
    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> loss = total(hadamard(x, x, tape=tape), tape=tape)
    >>> tape.backward(loss)[x]
    array([[2., 4.]])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "GradCheckReport",
    "matmul",
    "transpose",
    "reshape",
    "elementwise",
    "add",
    "hadamard",
    "relu",
    "sigmoid",
    "scale",
    "total",
    "softmax_rows",
    "log_softmax_rows",
    "nll_from_logits",
    "global_avg_pool",
    "conv2d",
    "grad_check",
]


class Tensor:
    """Immutable row-major float64 array.

    The tensor never owns a graph handle itself; the tape that recorded it
    keeps the mapping, so one tensor can safely be reused across tapes.
    """

    __slots__ = ("_data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.array(arr, dtype=np.float64, order="C")
        arr.setflags(write=False)
        t._data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self._data, precision=6)}{flag})"


@dataclass
class _Node:
    value: Tensor
    parents: tuple  # node indices (or None for untracked operands)
    backward: Optional[Callable]  # None marks a leaf


class Gradients:
    """Result of :meth:`Tape.backward`: leaf tensor -> gradient array.

    Leaves that never reached the loss report zeros of their own shape.
    """

    def __init__(self, entries: dict):
        self._entries = entries  # id(tensor) -> (tensor, grad)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        hit = self._entries.get(id(t))
        if hit is None or hit[0] is not t:
            return np.zeros(t.shape)
        return hit[1]

    def __contains__(self, t: Tensor) -> bool:
        hit = self._entries.get(id(t))
        return hit is not None and hit[0] is t

    def __len__(self):
        return len(self._entries)


class Tape:
    """Ordered record of one forward pass.

    Nodes are appended as ops run, so insertion order is a topological order.
    A tape supports one :meth:`backward`; call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.reset()

    def reset(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._index: dict[int, int] = {}
        self._consumed = False

    def __len__(self):
        return len(self.nodes)

    def node_id(self, t: Tensor) -> Optional[int]:
        idx = self._index.get(id(t))
        if idx is not None and self.nodes[idx].value is t:
            return idx
        return None

    def _track(self, t) -> Optional[int]:
        if not isinstance(t, Tensor):
            return None
        idx = self.node_id(t)
        if idx is None and t.requires_grad:
            idx = self._append(_Node(t, (), None))
        return idx

    def _append(self, node: _Node) -> int:
        if self._consumed:
            raise ContractError("tape already consumed by backward(); call reset() first")
        self.nodes.append(node)
        idx = len(self.nodes) - 1
        self._index[id(node.value)] = idx
        return idx

    def record(self, out: Tensor, operands: Sequence, backward: Callable) -> Tensor:
        parents = tuple(self._track(t) for t in operands)
        if all(p is None for p in parents):
            return out
        out.requires_grad = True
        self._append(_Node(out, parents, backward))
        return out

    def backward(self, loss: Tensor) -> Gradients:
        """Accumulate d(loss)/d(node) for every ancestor of ``loss``."""
        if self._consumed:
            raise ContractError("backward() already called on this tape; call reset() first")
        if loss.shape != ():
            raise ContractError(f"loss must be a scalar tensor, got shape {loss.shape}")
        root = self.node_id(loss)
        if root is None:
            raise ContractError("loss was not recorded on this tape (stale or foreign tape)")
        grads: dict[int, np.ndarray] = {root: np.ones(())}
        for idx in range(root, -1, -1):
            g = grads.get(idx)
            node = self.nodes[idx]
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if parent is None or pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
        self._consumed = True
        self.gradients = grads
        leaves = {}
        for idx, node in enumerate(self.nodes):
            if node.backward is None:
                leaves[id(node.value)] = (node.value, grads.get(idx, np.zeros(node.value.shape)))
        return Gradients(leaves)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, data: np.ndarray, operands, backward, tape: Optional[Tape]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{name} produced non-finite values")
    out = Tensor._wrap(data)
    if tape is not None:
        tape.record(out, operands, backward)
    return out


# linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", A @ B, (a, b), backward, tape)


def transpose(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,), tape)


def reshape(a: Tensor, shape, tape: Optional[Tape] = None) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),), tape)


def total(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    a = _as_tensor(a)
    shape = a.shape
    return _emit("total", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), tape)


# elementwise ------------------------------------------------------------------

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    # row vector over batch: (m, n) with (n,) or (1, n)
    if a.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        return "row"
    raise ShapeError(f"cannot broadcast {b.shape} against {a.shape}")


def elementwise(kind: str, a: Tensor, b=None, tape: Optional[Tape] = None) -> Tensor:
    """Apply one of ``add``, ``hadamard``, ``relu``, ``sigmoid``, ``scale``.

    Binary kinds accept ``b`` of the same shape or a row vector that is
    broadcast over the rows of a 2-D ``a``. ``scale`` takes a python number.
    """
    a = _as_tensor(a)
    x = a.data
    if kind == "relu":
        mask = x > 0
        return _emit("relu", np.where(mask, x, 0.0), (a,), lambda g: (g * mask,), tape)
    if kind == "sigmoid":
        s = _stable_sigmoid(x)
        return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),), tape)
    if kind == "scale":
        if isinstance(b, Tensor) or not np.isscalar(b):
            raise ContractError("scale expects a python scalar factor")
        c = float(b)
        return _emit("scale", x * c, (a,), lambda g: (g * c,), tape)
    if kind not in ("add", "hadamard"):
        raise ContractError(f"unknown elementwise kind {kind!r}")
    if b is None:
        raise ContractError(f"{kind} needs a second operand")
    b = _as_tensor(b)
    mode = _broadcast_kind(a, b)
    y = b.data if mode == "same" else b.data.reshape(1, -1)
    bshape = b.shape

    def fold(gb):
        return gb if mode == "same" else gb.sum(axis=0).reshape(bshape)

    if kind == "add":
        return _emit("add", x + y, (a, b), lambda g: (g, fold(g)), tape)
    return _emit("hadamard", x * y, (a, b), lambda g: (g * y, fold(g * x)), tape)


def add(a, b, tape: Optional[Tape] = None) -> Tensor:
    return elementwise("add", a, b, tape=tape)


def hadamard(a, b, tape: Optional[Tape] = None) -> Tensor:
    return elementwise("hadamard", a, b, tape=tape)


def relu(a, tape: Optional[Tape] = None) -> Tensor:
    return elementwise("relu", a, tape=tape)


def sigmoid(a, tape: Optional[Tape] = None) -> Tensor:
    return elementwise("sigmoid", a, tape=tape)


def scale(a, factor: float, tape: Optional[Tape] = None) -> Tensor:
    return elementwise("scale", a, factor, tape=tape)


# softmax / loss -----------------------------------------------------------------

def _softmax_parts(x: np.ndarray):
    # one shared max-subtracted path for probabilities and log-probabilities
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    return e / z, shifted - np.log(z)


def _check_2d(name, a):
    if a.ndim != 2:
        raise ShapeError(f"{name} expects a 2-D tensor, got {a.shape}")


def softmax_rows(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    x = _as_tensor(x)
    _check_2d("softmax_rows", x)
    p, _ = _softmax_parts(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", p, (x,), backward, tape)


def log_softmax_rows(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    x = _as_tensor(x)
    _check_2d("log_softmax_rows", x)
    p, logp = _softmax_parts(x.data)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax_rows", logp, (x,), backward, tape)


def _check_labels(labels, b: int, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or len(y) != b:
        raise ContractError(f"expected {b} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ContractError("labels must be integer class indices")
        y = y.astype(np.int64)
    bad = (y < 0) | (y >= n)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IndexError(f"label {int(y[i])} at position {i} outside [0, {n})")
    return y


def nll_from_logits(logits: Tensor, labels, tape: Optional[Tape] = None) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax_rows(logits)``."""
    logits = _as_tensor(logits)
    _check_2d("nll_from_logits", logits)
    b, n = logits.shape
    y = _check_labels(labels, b, n)
    p, logp = _softmax_parts(logits.data)
    rows = np.arange(b)
    loss = -logp[rows, y].mean()

    def backward(g):
        d = p.copy()
        d[rows, y] -= 1.0
        return (d * (float(g) / b),)

    return _emit("nll_from_logits", np.array(loss), (logits,), backward, tape)


# spatial ops -----------------------------------------------------------------------

def global_avg_pool(maps: Tensor, tape: Optional[Tape] = None) -> Tensor:
    maps = _as_tensor(maps)
    if maps.ndim != 4:
        raise ShapeError(f"global_avg_pool expects b x c x h x w, got {maps.shape}")
    b, c, h, w = maps.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w)).copy(),)

    return _emit("global_avg_pool", maps.data.mean(axis=(2, 3)), (maps,), backward, tape)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           tape: Optional[Tape] = None) -> Tensor:
    """2-D cross-correlation (no kernel flip), NCHW layout."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: kernel {kernel.shape} expects {kcin} channels, input {x.shape} has {cin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    K = kernel.data
    out = np.einsum("bchwij,ocij->bohw", win, K, optimize=True)

    def backward(g):
        gk = np.einsum("bchwij,bohw->ocij", win, g, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += np.einsum(
                    "bohw,oc->bchw", g, K[:, :, i, j])
        return gxp[:, :, padding:padding + h, padding:padding + w], gk

    return _emit("conv2d", out, (x, kernel), backward, tape)


# verification ---------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    skipped: list = field(default_factory=list)  # (input index, flat coordinate)


def grad_check(f: Callable, points: Sequence, eps: float = 1e-5, tol: float = 1e-5,
               kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central finite differences.

    ``f(tensors, tape)`` must return a scalar tensor and accept ``tape=None``.
    A coordinate whose one-sided slopes disagree by more than ``kink_tol``
    (relative) straddles a non-differentiable point and is skipped.
    """
    arrays = [np.array(p, dtype=np.float64) for p in points]
    tape = Tape()
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(leaves, tape)
    f0 = out.item()
    if not np.isfinite(f0):
        raise NumericalError("grad_check: f is not finite at the base point")
    grads = tape.backward(out)

    def evaluate(k, flat_idx, delta):
        probe = [a for a in arrays]
        moved = arrays[k].copy()
        moved.reshape(-1)[flat_idx] += delta
        probe[k] = moved
        val = f([Tensor(a) for a in probe], None).item()
        if not np.isfinite(val):
            raise NumericalError(f"grad_check: f not finite near input {k}, coordinate {flat_idx}")
        return val

    worst, checked, skipped = 0.0, 0, []
    for k, a in enumerate(arrays):
        analytic = grads[leaves[k]].reshape(-1)
        for i in range(a.size):
            fp, fm = evaluate(k, i, eps), evaluate(k, i, -eps)
            fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                skipped.append((k, i))
                continue
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
            worst = max(worst, err)
            checked += 1
    return GradCheckReport(max_rel_err=worst, passed=worst < tol, checked=checked, skipped=skipped)
