"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation computes its forward result eagerly with numpy and, when any
input carries ``requires_grad``, records a node on a :class:`Tape`. Calling
``backward`` on a scalar result walks the tape in exact reverse order of
recording and accumulates gradients into the ``grad`` buffer of every tensor
that requested them.

Design constraints, all load-bearing for the test suite:

* float64 everywhere, no broadcasting: elementwise ops demand equal shapes.
* Forward ops on finite inputs must yield finite outputs; a NaN/Inf result
  raises :class:`~minircnn.errors.NumericError` instead of propagating.
* Identical seeds and inputs give bit-identical outputs and gradients.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_ids = itertools.count()
_state = threading.local()


@contextmanager
def no_grad():
    """Suppress tape recording inside the block (thread local)."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    Tensors are immutable after creation except through the optimizer's
    explicit update step (`optim.sgd_step`), which rewrites ``data`` in
    place. ``grad`` stays ``None`` until a backward pass deposits into it.
    """

    __slots__ = ("data", "grad", "requires_grad", "tid", "_tape")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tid = next(_ids)
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        """Copy of the underlying buffer, detached from the graph."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded operation: kind, operand ids and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], None]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        ins = ",".join(str(t.tid) for t in self.inputs)
        return f"TapeNode({self.op}: [{ins}] -> {self.output.tid})"


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)


# ---------------------------------------------------------------------------
# creation


def _check_dims(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dimensions must be >= 1, got {dims}")
    return dims


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap array-like data (copied) as a float64 tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_dims(shape)), requires_grad)


def full(shape: Sequence[int], value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_dims(shape), float(value)), requires_grad)


def uniform(shape: Sequence[int], lo: float, hi: float, seed: int,
            requires_grad: bool = False) -> Tensor:
    """Seeded uniform fill; bit-identical across runs for the same seed.

    All randomness in the package flows through numpy's PCG64 generator,
    so one (shape, lo, hi, seed) quadruple always yields the same buffer.
    """
    dims = _check_dims(shape)
    if not lo < hi:
        raise ContractError(f"uniform needs lo < hi, got [{lo}, {hi})")
    rng = np.random.Generator(np.random.PCG64(seed))
    return Tensor(rng.uniform(lo, hi, size=dims), requires_grad)


# ---------------------------------------------------------------------------
# recording machinery


def _join_tape(inputs: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t._tape is None:
            continue
        if tape is None:
            tape = t._tape
        elif tape is not t._tape:
            raise ContractError("operands were recorded on different tapes")
    return tape


def _finish(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, check finiteness and record it if grads are needed."""
    if not np.isfinite(out_data).all():
        raise NumericError(f"{op} produced a non-finite value")
    recording = not getattr(_state, "no_grad", False)
    out = Tensor(out_data,
                 requires_grad=recording and any(t.requires_grad for t in inputs))
    if out.requires_grad:
        tape = _join_tape(inputs) or Tape()
        out._tape = tape
        tape.nodes.append(TapeNode(op, inputs, out, backward_fn))
    return out


def custom_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Extension point: record an externally computed op on the tape.

    ``backward_fn`` receives the output gradient and must deposit into the
    inputs' ``grad`` buffers itself (see :func:`accumulate_grad`).
    """
    return _finish(op, tuple(inputs), out_data, backward_fn)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` if the tensor wants gradients."""
    _accumulate(t, g)


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add ``g`` into the grad slot; ``own=True`` promises ``g`` is a fresh
    buffer this op will not touch again, letting the first deposit skip a copy."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own and g.flags.owndata else g.astype(np.float64, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate gradients of everything the scalar ``loss`` depends on.

    Visits tape nodes in exact reverse order of recording; gradients
    accumulate, so callers reusing leaf tensors across steps must clear
    ``grad`` themselves (see `optim.zero_grads`).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss is not recorded on a tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(loss._tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        node.backward_fn(g)


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _finish("add", (a, b), a.data + b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")

    def bwd(g):
        _accumulate(a, g * b.data, own=True)
        _accumulate(b, g * a.data, own=True)

    return _finish("mul", (a, b), a.data * b.data, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no broadcasting needed for loss weights)."""
    c = float(c)

    def bwd(g):
        _accumulate(a, g * c, own=True)

    return _finish("scale", (a,), a.data * c, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")

    def bwd(g):
        _accumulate(a, g @ b.data.T, own=True)
        _accumulate(b, a.data.T @ g, own=True)

    return _finish("matmul", (a, b), a.data @ b.data, bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, np.full_like(a.data, g.reshape(())), own=True)

    return _finish("sum", (a,), np.array(a.data.sum()), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b with the (M,) bias added to every row."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(f"linear expects (N,D), (D,M), (M,), got "
                         f"{x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"linear dims disagree: {x.shape} @ {w.shape} + {b.shape}")

    def bwd(g):
        _accumulate(x, g @ w.data.T, own=True)
        _accumulate(w, x.data.T @ g, own=True)
        _accumulate(b, g.sum(axis=0), own=True)

    return _finish("linear", (x, w, b), x.data @ w.data + b.data, bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _accumulate(a, g * mask, own=True)

    return _finish("relu", (a,), np.where(mask, a.data, 0.0), bwd)


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction for stability."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(logits, y * (g - dot), own=True)

    return _finish("softmax", (logits,), y, bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    dims = tuple(int(d) for d in shape)
    if int(np.prod(dims, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {dims}")
    old = a.shape

    def bwd(g):
        _accumulate(a, g.reshape(old))

    return _finish("reshape", (a,), a.data.reshape(dims).copy(), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation for shape {a.shape}")
    inverse = np.argsort(axes)

    def bwd(g):
        _accumulate(a, g.transpose(inverse))

    return _finish("transpose", (a,), a.data.transpose(axes).copy(), bwd)


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows along axis 0; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("indices must be one-dimensional")
    if a.data.ndim < 1:
        raise ShapeError("cannot gather rows of a scalar")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range [0, {n})")

    def bwd(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _finish("gather_rows", (a,), a.data[idx].copy(), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; all trailing dimensions must agree."""
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.data.ndim < 1 or p.shape[1:] != tail:
            raise ShapeError("concat_rows operands have mismatched trailing dims")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi])

    return _finish("concat_rows", tuple(parts),
                   np.concatenate([p.data for p in parts], axis=0), bwd)


# ---------------------------------------------------------------------------
# conv / pooling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    sw = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    sw = sw[:, ::stride, ::stride]  # (C, ho, wo, kh, kw)
    return sw.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * kh * kw, ho * wo)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    Args:
        x: input of shape (C_in, H, W).
        kernels: filter bank of shape (C_out, C_in, kh, kw).
        bias: per-output-channel offset of shape (C_out,).
        stride: positive step between windows.
        padding: zero-padding added on every spatial side.

    Output spatial size follows floor((H + 2*padding - kh) / stride) + 1.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) and (Co,Ci,kh,kw), got {x.shape}, {kernels.shape}")
    co, ci, kh, kw = kernels.shape
    c, h, w = x.shape
    if ci != c:
        raise ShapeError(f"kernel input channels {ci} != input channels {c}")
    if bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} != ({co},)")
    if stride < 1 or padding < 0:
        raise ContractError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = kernels.data.reshape(co, ci * kh * kw)
    out = (wm @ cols).reshape(co, ho, wo) + bias.data[:, None, None]

    def bwd(g):
        gm = g.reshape(co, ho * wo)
        _accumulate(kernels, (gm @ cols.T).reshape(kernels.shape), own=True)
        _accumulate(bias, gm.sum(axis=1), own=True)
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape(ci, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            if padding:
                gxp = gxp[:, padding:-padding, padding:-padding]
            _accumulate(x, gxp, own=True)

    return _finish("conv2d", (x, kernels, bias), out, bwd)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Channel-wise max pooling; gradient routes to the argmax of each window.

    Ties go to the lowest linear index of the input, which keeps the
    backward pass deterministic.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2d expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"window {window} exceeds input extent {h}x{w}")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1

    sw = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(1, 2))
    sw = sw[:, ::stride, ::stride]
    flat = sw.reshape(c, ho, wo, window * window)
    argmax = flat.argmax(axis=3)  # first occurrence = lowest linear index
    out = np.take_along_axis(flat, argmax[..., None], axis=3)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        di, dj = np.divmod(argmax, window)
        ci = np.broadcast_to(np.arange(c)[:, None, None], argmax.shape)
        ii = np.arange(ho)[None, :, None] * stride + di
        jj = np.arange(wo)[None, None, :] * stride + dj
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        if stride >= window:
            # non-overlapping windows: target cells are unique
            x.grad[ci, ii, jj] += g
        else:
            np.add.at(x.grad, (ci, ii, jj), g)

    return _finish("maxpool2d", (x,), out, bwd)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over rows of -ln(probs[i, labels[i]]).

    Takes probabilities (typically a softmax output), not logits.
    """
    if probs.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N,K) probabilities, got {probs.shape}")
    n, k = probs.shape
    idx = np.asarray(labels, dtype=np.int64)
    if idx.shape != (n,):
        raise ShapeError(f"labels shape {idx.shape} != ({n},)")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    picked = probs.data[np.arange(n), idx]
    with np.errstate(divide="ignore"):
        out = np.array(-np.log(picked).mean())

    def bwd(g):
        gp = np.zeros_like(probs.data)
        gp[np.arange(n), idx] = -1.0 / (picked * n)
        _accumulate(probs, g.reshape(()) * gp, own=True)

    return _finish("cross_entropy", (probs,), out, bwd)


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Huber-style loss: 0.5*x^2 below |x|=1, |x|-0.5 above, summed then
    divided by the leading dimension (the row count the caller averaged over).
    """
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}")
    n = pred.shape[0] if pred.data.ndim >= 1 else 1
    diff = pred.data - target.data
    absd = np.abs(diff)
    quad = absd < 1.0
    per_elem = np.where(quad, 0.5 * diff * diff, absd - 0.5)
    out = np.array(per_elem.sum() / n)

    def bwd(g):
        slope = np.where(quad, diff, np.sign(diff)) / n
        gs = g.reshape(()) * slope
        _accumulate(pred, gs, own=True)
        _accumulate(target, -gs, own=True)

    return _finish("smooth_l1", (pred, target), out, bwd)
