"""Dense float tensors with reverse-mode automatic differentiation.

A `Tape` records every differentiable operation executed while it is active;
`Tape.backward` replays the records in reverse to accumulate gradients.
Tensors created with `requires_grad=True` are leaves; everything reachable
from the loss receives an accumulated gradient (fan-out sums). Tapes are
per-forward-pass and consumed by a single backward call. With no active
tape, all ops run eagerly with zero recording overhead.

Float32 is the training dtype; float64 exists for gradient checking.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float array, optionally linked to a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node", "_tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_node: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def sum(self, axes: tuple[int, ...] | None = None) -> "Tensor":
        return tsum(self, axes)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)


def tensor(data, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


class TapeConsumedError(RuntimeError):
    pass


class _Node:
    """One recorded op: input node ids plus a closure computing input grads."""

    __slots__ = ("inputs", "backward_fn", "shape", "dtype")

    def __init__(self, inputs, backward_fn, shape, dtype):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.shape = shape
        self.dtype = dtype


class Tape:
    """Append-only op record; node inputs always precede the node itself."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def _register_leaf(self, t: Tensor) -> int:
        node_id = len(self.nodes)
        self.nodes.append(_Node((), None, t.shape, t.data.dtype))
        t.tape_node = node_id
        t._tape = self
        self._leaves[node_id] = t
        return node_id

    def _node_id(self, t: Tensor) -> int | None:
        """Node id of `t` on this tape, registering leaves lazily."""
        if t._tape is self and t.tape_node is not None:
            return t.tape_node
        if t.requires_grad:
            return self._register_leaf(t)
        return None

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        ids = tuple(self._node_id(t) for t in inputs)
        if all(i is None for i in ids):
            return
        node_id = len(self.nodes)
        self.nodes.append(_Node(ids, backward_fn, out.shape, out.data.dtype))
        out.tape_node = node_id
        out._tape = self

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate gradients of `loss` w.r.t. every reachable leaf.

        Visits each recorded node exactly once, in reverse topological
        order. Returns a map {leaf tensor: gradient array}; the same
        arrays are stored on `tensor.grad`.
        """
        if self.consumed:
            raise TapeConsumedError("tape already consumed by a previous backward call")
        if loss._tape is not self or loss.tape_node is None:
            raise ValueError("loss tensor is not recorded on this tape")
        if loss.data.ndim != 0:
            raise ValueError(f"backward requires a 0-dim loss, got shape {loss.shape}")
        self.consumed = True

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.tape_node] = np.ones((), dtype=loss.data.dtype)

        for node_id in range(len(self.nodes) - 1, -1, -1):
            g = grads[node_id]
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.backward_fn is None:
                continue
            input_grads = node.backward_fn(g)
            for in_id, in_g in zip(node.inputs, input_grads):
                if in_id is None or in_g is None:
                    continue
                if grads[in_id] is None:
                    grads[in_id] = in_g
                else:
                    grads[in_id] = grads[in_id] + in_g
            grads[node_id] = None  # free intermediate memory early

        out: dict[Tensor, np.ndarray] = {}
        for node_id, leaf in self._leaves.items():
            g = grads[node_id]
            if g is None:
                g = np.zeros(leaf.shape, dtype=leaf.data.dtype)
            leaf.grad = g
            out[leaf] = g
        return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run backward on the tape that recorded `loss`."""
    if loss._tape is None:
        raise ValueError("loss is not attached to any tape")
    return loss._tape.backward(loss)


def _make(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and not tape.consumed:
        tape.record(out, inputs, backward_fn)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Dispatch by name; kept for symmetry with config-driven call sites."""
    try:
        return {"add": add, "sub": sub, "mul": mul, "div": div}[kind](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(x.data * s, (x,), lambda g: (g * s,))


def add_scalar(x: Tensor, s: float) -> Tensor:
    return _make(x.data + float(s), (x,), lambda g: (g,))


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation: 0.5*x*(1 + tanh(c0*(x + c1*x^3)))."""
    xd = x.data
    t = np.tanh(_GELU_C0 * (xd + _GELU_C1 * xd * xd * xd))

    def bwd(g):
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * xd * xd)
        return (g * local,)

    return _make(0.5 * xd * (1.0 + t), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# shape ops


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate [B,Ca,H,W] and [B,Cb,H,W] along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4-d tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError("slice_channels expects a 4-d tensor")
    if not (0 <= start < stop <= x.shape[1]):
        raise ValueError(f"bad channel slice [{start}:{stop}] for {x.shape[1]} channels")

    def bwd(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def expand_first(x: Tensor, n: int) -> Tensor:
    """Replicate x along a new leading axis: [...]->[n, ...]; grad sums over it."""
    if n < 1:
        raise ValueError("expand_first requires n >= 1")
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=0),))


def tsum(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Sum over the given axes (all axes when None -> 0-dim output)."""
    shape = x.shape
    if axes is None:
        out = x.data.sum()

        def bwd(g):
            return (np.broadcast_to(g, shape).astype(x.data.dtype, copy=True),)

        return _make(np.asarray(out), (x,), bwd)

    axes = tuple(sorted(a % len(shape) for a in axes))
    out = x.data.sum(axis=axes)

    def bwd_axes(g):
        expanded = np.expand_dims(g, axes)
        return (np.broadcast_to(expanded, shape).astype(x.data.dtype, copy=True),)

    return _make(out, (x,), bwd_axes)


def mean_over_set(x: Tensor) -> Tensor:
    """Mean along the leading (context member) axis of [N,B,C,H,W].

    Accumulates in float64 so the result is insensitive to member order
    (permutation/duplication invariance of the aggregation).
    """
    if x.data.ndim != 5:
        raise ValueError("mean_over_set expects a 5-d [N,B,C,H,W] tensor")
    n = x.shape[0]
    if n < 1:
        raise ValueError("mean_over_set requires N >= 1")

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.data.dtype, copy=True),)

    out = x.data.mean(axis=0, dtype=np.float64).astype(x.data.dtype)
    return _make(out, (x,), bwd)


def resize2(x: Tensor, direction: str) -> Tensor:
    """Down: 2x2 average pooling. Up: nearest-neighbor x2. 4-d input only."""
    if x.data.ndim != 4:
        raise ValueError("resize2 expects a 4-d tensor")
    b, c, h, w = x.shape
    if direction == "down":
        if h % 2 or w % 2:
            raise ValueError(f"resize2 down requires even extents, got {h}x{w}")
        out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

        def bwd_down(g):
            gi = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
            return (gi * 0.25,)

        return _make(out, (x,), bwd_down)
    if direction == "up":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def bwd_up(g):
            return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return _make(out, (x,), bwd_up)
    raise ValueError(f"resize2 direction must be 'down' or 'up', got {direction!r}")


# ---------------------------------------------------------------------------
# convolution


def _pad2(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _patches(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Sliding [B,C,H,W,kh,kw] view over a padded [B,C,Hp,Wp] array."""
    b, c, hp, wp = xp.shape
    h, w = hp - kh + 1, wp - kw + 1
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (b, c, h, w, kh, kw), (s[0], s[1], s[2], s[3], s[2], s[3]), writeable=False
    )


def _corr2d(x: np.ndarray, k: np.ndarray, pad: int) -> np.ndarray:
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw], zero padding."""
    kh, kw = k.shape[2], k.shape[3]
    if kh == 1 and kw == 1 and pad == 0:
        out = np.tensordot(k[:, :, 0, 0], x, axes=([1], [1]))
        return np.ascontiguousarray(np.moveaxis(out, 0, 1))
    pt = _patches(_pad2(x, pad), kh, kw)
    out = np.tensordot(pt, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(out, 3, 1))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Same-padding cross-correlation with per-output-channel bias.

    Kernels are 1x1 (padding 0) or 3x3 (padding 1) so spatial extents are
    preserved; gradients are defined w.r.t. input, kernel and bias.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    cout, cin, kh, kw = kernel.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if padding != (kh - 1) // 2:
        raise ValueError(f"padding {padding} does not preserve extents for {kh}x{kw}")
    if x.shape[1] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {cin}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"non-positive spatial dims {x.shape[2:]}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")

    xd, kd = x.data, kernel.data
    out = _corr2d(xd, kd, padding)
    out += bias.data.reshape(1, cout, 1, 1)

    def bwd(g):
        g = np.ascontiguousarray(g)
        grad_b = g.sum(axis=(0, 2, 3))
        pt = _patches(_pad2(xd, padding), kh, kw)
        grad_k = np.tensordot(g, pt, axes=([0, 2, 3], [0, 2, 3]))
        k_t = np.ascontiguousarray(kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_x = _corr2d(g, k_t, kh - 1 - padding)
        return (grad_x, grad_k, grad_b)

    return _make(out, (x, kernel, bias), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` must map the given tensors to a scalar. All inputs must be float64;
    the relative error is |analytic - fd| / max(1, |fd|) maximized over
    every coordinate of every input.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 tensors")
        t.requires_grad = True

    with Tape() as tape:
        out = f(*inputs)
    if out.data.ndim != 0:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data):
        raise FloatingPointError("non-finite value in forward pass")
    grads = tape.backward(out)

    worst = 0.0
    for t in inputs:
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = float(f(*inputs).data)
            flat[i] = orig - eps
            f_lo = float(f(*inputs).data)
            flat[i] = orig
            if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
                raise FloatingPointError("non-finite value encountered during finite differences")
            fd = (f_hi - f_lo) / (2.0 * eps)
            rel = abs(a_flat[i] - fd) / max(1.0, abs(fd))
            if rel > worst:
                worst = rel
    return worst
