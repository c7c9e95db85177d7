"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations append a node to the active :class:`Recording` whenever one of
their inputs is tracked (requires a gradient or was itself recorded).
:func:`backward` walks the tape in exact reverse append order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ContractError",
    "DimensionError",
    "GradMap",
    "NonFiniteError",
    "Recording",
    "Tensor",
    "activation",
    "add",
    "add_scalar",
    "backward",
    "channel_scale",
    "constant",
    "conv2d",
    "cross_entropy",
    "elementwise_mul",
    "global_avg_pool",
    "l2_normalize",
    "linear",
    "maxpool2d",
    "mean",
    "no_record",
    "recording",
    "relu",
    "reshape",
    "row_distance",
    "row_sq_distance",
    "scale",
    "sigmoid",
    "sub",
    "sum",
]

DTYPE = np.float64

# Strict open-interval bounds for the sigmoid; float64 rounds 1/(1+e^-x) to
# exactly 1.0 for x > ~36.7.
_SIG_LO = np.finfo(DTYPE).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class ContractError(RuntimeError):
    """A precondition of the autodiff machinery was violated."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    """An n-dimensional float64 array that can take part in a recording."""

    __slots__ = ("data", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# Recording
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn", "index", "tape")

    def __init__(self, kind, inputs, output, backward_fn, index, tape):
        self.tape = tape
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.index = index


class Recording:
    """Append-only tape of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def append(self, kind, inputs, output, backward_fn) -> _Node:
        node = _Node(kind, tuple(inputs), output, backward_fn, len(self.nodes), self)
        self.nodes.append(node)
        return node


_active: Recording | None = None


@contextlib.contextmanager
def recording() -> Iterator[Recording]:
    """Activate a fresh recording for the duration of the block."""
    global _active
    if _active is not None:
        raise ContractError("a recording is already active")
    rec = Recording()
    _active = rec
    try:
        yield rec
    finally:
        _active = None


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Suspend the active recording (forward-only evaluation)."""
    global _active
    saved = _active
    _active = None
    try:
        yield
    finally:
        _active = saved


def _check_finite(arr: np.ndarray, kind: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{kind} produced a non-finite value")


def _emit(kind: str, out: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    _check_finite(out, kind)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.requires_grad = False
    t.node = None
    t.name = None
    if _active is not None and any(x.tracked for x in inputs):
        t.node = _active.append(kind, inputs, t, backward_fn)
    return t


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


class GradMap:
    """Gradients keyed by tensor identity.

    Looking up a tensor the loss never reached yields a zero tensor of the
    same shape.
    """

    def __init__(self):
        self._grads: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._grads:
            self._grads[key] = (t, self._grads[key][1] + g)
        else:
            self._grads[key] = (t, g)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        hit = self._grads.get(id(t))
        if hit is None:
            return np.zeros(t.shape, dtype=DTYPE)
        return hit[1]

    def get(self, t: Tensor) -> np.ndarray:
        return self[t]

    def tensors(self) -> list[Tensor]:
        return [t for t, _ in self._grads.values()]

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: Tensor) -> GradMap:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns gradients for every ``requires_grad`` tensor reachable from
    ``loss``. Intermediate gradients are discarded.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    out = GradMap()
    if loss.node is None:
        return out
    node_grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    tape = loss.node.tape.nodes
    for node in reversed(tape[: loss.node.index + 1]):
        g = node_grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or not x.tracked:
                continue
            if x.node is not None:
                prev = node_grads.get(id(x))
                node_grads[id(x)] = gx if prev is None else prev + gx
            if x.requires_grad:
                out._accumulate(x, gx)
    return out


# ---------------------------------------------------------------------------
# Elementwise and reductions
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "elementwise_mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("add_scalar", a.data + c, (a,), lambda g: (g,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _emit("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(shape, float(g) / n),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """``max(a, lo)``; gradient passes only where ``a > lo``."""
    keep = a.data > lo
    return _emit("clamp_min", np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    s = np.clip(s, _SIG_LO, _SIG_HI)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``out[n, m] = sum_d x[n, d] * weight[m, d] + bias[m]``."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError("linear expects x[N,D], weight[M,D], bias[M]")
    if x.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise DimensionError(
            f"linear: x{x.shape} weight{weight.shape} bias{bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def bw(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _emit("linear", out, (x, weight, bias), bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding."""
    if x.ndim != 4 or kernel.ndim != 4 or bias.ndim != 1:
        raise DimensionError("conv2d expects x[N,C,H,W], kernel[O,C,kh,kw], bias[O]")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if bias.shape[0] != o:
        raise DimensionError(f"conv2d: bias length {bias.shape[0]} != {o}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: stride={stride} pad={pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # windows: [N, C, Ho, Wo, kh, kw]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gmat.T @ cols).reshape(kernel.shape)
        gb = g.sum(axis=(0, 2, 3))
        gcols = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk, gb

    return _emit("conv2d", out, (x, kernel, bias), bw)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max over ``k x k`` windows; gradient goes to the first maximum in row-major order."""
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise DimensionError("maxpool2d expects x[N,C,H,W]")
    n, c, h, w = x.shape
    if k > h or k > w or k < 1 or stride < 1:
        raise DimensionError(f"maxpool2d: window {k} on {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros((n, c, h, w), dtype=DTYPE)
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (np.broadcast_to(nn_, arg.shape), np.broadcast_to(cc, arg.shape), rows, cols), g)
        return (gx,)

    return _emit("maxpool2d", np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: ``[N,C,H,W] -> [N,C]``."""
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects x[N,C,H,W]")
    n, c, h, w = x.shape
    hw = h * w

    def bw(g):
        return (np.broadcast_to((g / hw)[:, :, None, None], (n, c, h, w)).copy(),)

    return _emit("global_avg_pool", x.data.sum(axis=(2, 3)) / hw, (x,), bw)


def channel_scale(x: Tensor, mask: Tensor) -> Tensor:
    """``out[n,c,u,v] = mask[n,c] * x[n,c,u,v]``."""
    if x.ndim != 4 or mask.ndim != 2 or x.shape[:2] != mask.shape:
        raise DimensionError(f"channel_scale: x{x.shape} mask{mask.shape}")
    xd, md = x.data, mask.data

    def bw(g):
        return g * md[:, :, None, None], (g * xd).sum(axis=(2, 3))

    return _emit("channel_scale", xd * md[:, :, None, None], (x, mask), bw)


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``max(||row||, eps)``."""
    if v.ndim != 2:
        raise DimensionError("l2_normalize expects v[N,D]")
    norm = np.sqrt((v.data * v.data).sum(axis=1, keepdims=True))
    clamped = norm <= eps
    denom = np.where(clamped, eps, norm)
    y = v.data / denom

    def bw(g):
        radial = (y * g).sum(axis=1, keepdims=True)
        gv = np.where(clamped, g / eps, (g - y * radial) / denom)
        return (gv,)

    return _emit("l2_normalize", y, (v,), bw)


# ---------------------------------------------------------------------------
# Loss primitives
# ---------------------------------------------------------------------------


def row_sq_distance(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance between matching rows: ``[N,D] x [N,D] -> [N]``."""
    _same_shape(a, b, "row_sq_distance")
    if a.ndim != 2:
        raise DimensionError("row_sq_distance expects [N,D] inputs")
    diff = a.data - b.data

    def bw(g):
        gd = 2.0 * diff * g[:, None]
        return gd, -gd

    return _emit("row_sq_distance", (diff * diff).sum(axis=1), (a, b), bw)


def row_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between matching rows; subgradient 0 where rows coincide."""
    _same_shape(a, b, "row_distance")
    if a.ndim != 2:
        raise DimensionError("row_distance expects [N,D] inputs")
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=1))

    def bw(g):
        safe = np.where(d > 0, d, 1.0)
        unit = np.where((d > 0)[:, None], diff / safe[:, None], 0.0)
        gd = unit * g[:, None]
        return gd, -gd

    return _emit("row_distance", d, (a, b), bw)


def cross_entropy(logits: Tensor, onehot: Tensor) -> Tensor:
    """Batch-mean softmax cross-entropy via the log-sum-exp form."""
    if logits.ndim != 2 or logits.shape != onehot.shape:
        raise DimensionError(f"cross_entropy: logits{logits.shape} labels{onehot.shape}")
    y = onehot.data
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=1) == 1).all()):
        raise ValueError("cross_entropy: every label row must be one-hot")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = z.shape[0]
    loss = -(y * logp).sum() / n

    def bw(g):
        p = np.exp(logp)
        return (p - y) * (float(g) / n), None

    return _emit("cross_entropy", np.asarray(loss), (logits, onehot), bw)
