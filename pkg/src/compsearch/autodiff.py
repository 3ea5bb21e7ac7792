"""Dense-tensor reverse-mode differentiation on numpy arrays.

Deliberately minimal: only the operations the embedding head, the query
encoder, and the training losses need. Tensors store float32 by default;
float64 is available for gradient-check tests. Every operation validates
that its output is finite so NaN/Inf surfaces at the op that produced it
instead of three layers later.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_NDIM = 4

# 3x3 binomial low-pass kernel, outer([1,2,1],[1,2,1])/16.
BLUR_KERNEL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


class GraphError(ValueError):
    """Structural misuse of the graph (shapes, dtypes, non-scalar loss)."""


def _ensure_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)


class Tensor:
    """A node in the computation graph: value plus backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > MAX_NDIM:
            raise GraphError(f"tensor has {arr.ndim} axes, limit is {MAX_NDIM}")
        _ensure_finite(arr, op)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.grad is not None})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def backward(self):
        backward(self)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.dtype, copy=True)
    else:
        t.grad += g


def _node(data, op, parents, backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op, parents=parents if needs else (),
                  backward=backward_fn if needs else None)


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise GraphError(f"mixed dtypes {dt} vs {t.dtype}")
    return dt


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_dtype(a, b)
    if a.shape != b.shape and b.data.ndim != 0:
        raise GraphError(f"add shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g if b.data.ndim else g.sum())

    return _node(a.data + b.data, "add", (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_dtype(a, b)
    if a.shape != b.shape and b.data.ndim != 0:
        raise GraphError(f"sub shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, -g if b.data.ndim else -g.sum())

    return _node(a.data - b.data, "sub", (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_dtype(a, b)
    if a.shape != b.shape and b.data.ndim != 0:
        raise GraphError(f"mul shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        _accumulate(a, g * b.data)
        gb = g * a.data
        _accumulate(b, gb if b.data.ndim else gb.sum())

    return _node(a.data * b.data, "mul", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, -g)

    return _node(-a.data, "neg", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):       # overflow becomes NonFiniteError
        out_data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out_data)

    return _node(out_data, "exp", (a,), bwd)


def log1p(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, g / (1.0 + a.data))

    return _node(np.log1p(a.data), "log1p", (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, g * np.sign(a.data))

    return _node(np.abs(a.data), "abs", (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # computed via the stable branch-free form exp(-|x|)/(1+exp(-|x|))
    e = np.exp(-np.abs(a.data))
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _node(out_data, "sigmoid", (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """max(v, slope*v); the subgradient at exactly 0 is slope."""

    def bwd(g):
        _accumulate(a, g * np.where(a.data > 0, 1.0, slope).astype(a.dtype))

    return _node(np.where(a.data > 0, a.data, slope * a.data), "leaky_relu", (a,), bwd)


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        _accumulate(a, np.full_like(a.data, g / n))

    return _node(a.data.mean(), "mean", (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, np.full_like(a.data, g))

    return _node(a.data.sum(), "sum", (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), "reshape", (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise GraphError("matmul expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul inner dims {a.shape} @ {b.shape}")

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, "matmul", (a, b), bwd)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise GraphError("transpose2d expects a 2-D tensor")

    def bwd(g):
        _accumulate(a, np.ascontiguousarray(g.T))

    return _node(np.ascontiguousarray(a.data.T), "transpose", (a,), bwd)


# ---------------------------------------------------------------------------
# spatial ops; all accept [H,W,C] or [B,H,W,C] (channels-last)

def _spatial(x: Tensor):
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise GraphError(f"expected 3 or 4 axes, got {x.data.ndim}")


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 zero-padded convolution preserving spatial dims.

    x: [H,W,Cin] or [B,H,W,Cin]; w: [kh,kw,Cin,Cout] with odd kh,kw;
    b: [Cout].
    """
    _same_dtype(x, w, b)
    xd, squeeze = _spatial(x)
    if w.data.ndim != 4:
        raise GraphError("kernel must be [kh,kw,Cin,Cout]")
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise GraphError(f"kernel dims must be odd, got {kh}x{kw}")
    if xd.shape[3] != cin:
        raise GraphError(f"channel mismatch: input {xd.shape[3]}, kernel {cin}")
    if b.shape != (cout,):
        raise GraphError(f"bias shape {b.shape} != ({cout},)")
    bsz, h, wd_, _ = xd.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2

    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))       # [B,H,W,C,kh,kw]
    col = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    col = col.reshape(bsz * h * wd_, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (col @ wmat + b.data).reshape(bsz, h, wd_, cout)

    def bwd(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(bsz * h * wd_, cout)
        _accumulate(w, (col.T @ g2).reshape(w.shape))
        _accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            dcol = (g2 @ wmat.T).reshape(bsz, h, wd_, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, di:di + h, dj:dj + wd_, :] += dcol[:, :, :, di, dj, :]
            gx = gxp[:, ph:ph + h, pw:pw + wd_, :]
            _accumulate(x, gx[0] if squeeze else gx)

    return _node(out[0] if squeeze else out, "conv2d", (x, w, b), bwd)


def gaussian_blur(x: Tensor) -> Tensor:
    """Depthwise 3x3 binomial blur, zero padded, dims preserved.

    Implemented as nine shifted slice-adds in a fixed order so that the
    response commutes exactly with integer translation away from borders.
    """
    xd, squeeze = _spatial(x)
    bsz, h, wd_, c = xd.shape
    xp = np.pad(xd, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(xd)
    for i in range(3):
        for j in range(3):
            out += BLUR_KERNEL[i, j] * xp[:, i:i + h, j:j + wd_, :]

    def bwd(g):
        g4 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, i:i + h, j:j + wd_, :] += BLUR_KERNEL[i, j] * g4
        gx = gxp[:, 1:1 + h, 1:1 + wd_, :]
        _accumulate(x, gx[0] if squeeze else gx)

    return _node(out[0] if squeeze else out, "gaussian_blur", (x,), bwd)


def avg_pool2x2(x: Tensor) -> Tensor:
    xd, squeeze = _spatial(x)
    bsz, h, wd_, c = xd.shape
    if h % 2 or wd_ % 2:
        raise GraphError(f"avg_pool2x2 needs even dims, got {h}x{wd_}")
    out = xd.reshape(bsz, h // 2, 2, wd_ // 2, 2, c).mean(axis=(2, 4))

    def bwd(g):
        g4 = g[None] if squeeze else g
        gx = np.broadcast_to(
            g4[:, :, None, :, None, :] / 4.0, (bsz, h // 2, 2, wd_ // 2, 2, c)
        ).reshape(bsz, h, wd_, c)
        _accumulate(x, gx[0] if squeeze else gx)

    return _node(out[0] if squeeze else out, "avg_pool2x2", (x,), bwd)


def pool_bounds(in_size: int, out_size: int) -> list[tuple[int, int]]:
    """Adaptive-pool window [start, end) per output index."""
    return [((i * in_size) // out_size, -((-(i + 1) * in_size) // out_size))
            for i in range(out_size)]


def adaptive_avg_pool_array(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Plain-numpy adaptive average pool over axes (-3,-2) of [...,H,W,C]."""
    oh, ow = out_hw
    h, w = arr.shape[-3], arr.shape[-2]
    rows = pool_bounds(h, oh)
    cols = pool_bounds(w, ow)
    out = np.empty(arr.shape[:-3] + (oh, ow, arr.shape[-1]), dtype=arr.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[..., i, j, :] = arr[..., r0:r1, c0:c1, :].mean(axis=(-3, -2))
    return out


def adaptive_avg_pool(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    xd, squeeze = _spatial(x)
    bsz, h, wd_, c = xd.shape
    oh, ow = out_hw
    rows = pool_bounds(h, oh)
    cols = pool_bounds(wd_, ow)
    out = adaptive_avg_pool_array(xd, out_hw)

    def bwd(g):
        g4 = g[None] if squeeze else g
        gx = np.zeros_like(xd)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, r0:r1, c0:c1, :] += g4[:, i:i + 1, j:j + 1, :] / area
        _accumulate(x, gx[0] if squeeze else gx)

    return _node(out[0] if squeeze else out, "adaptive_avg_pool", (x,), bwd)


# ---------------------------------------------------------------------------
# stateful training ops

def dropout(x: Tensor, p: float, seed: int, mode: str) -> Tensor:
    """Inverted dropout: eval is identity, train scales survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise GraphError(f"dropout p must be in [0,1), got {p}")
    if mode == "eval" or p == 0.0:
        def bwd_id(g):
            _accumulate(x, g)

        return _node(x.data.copy(), "dropout", (x,), bwd_id)
    if mode != "train":
        raise GraphError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale_ = keep / np.asarray(1.0 - p, dtype=x.dtype)

    def bwd(g):
        _accumulate(x, g * scale_)

    return _node(x.data * scale_, "dropout", (x,), bwd)


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one channel axis."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    initialized: bool = False
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, op="param"),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, op="param"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batch_norm(x: Tensor, state: BatchNormState, mode: str,
               update_running: bool = True) -> Tensor:
    """Channel-wise normalization over B*H*W with learnable scale/shift.

    Train mode uses batch statistics (biased variance) and, unless
    update_running is off, folds them into the running statistics with
    momentum 0.1. Eval mode requires initialized running statistics.
    """
    if x.data.ndim != 4:
        raise GraphError("batch_norm expects [B,H,W,C]")
    bsz, h, w, c = x.shape
    if c != state.gamma.data.size:
        raise GraphError(f"channel mismatch: input {c}, state {state.gamma.data.size}")
    gamma, beta = state.gamma, state.beta
    eps = x.dtype.type(state.eps)

    if mode == "train":
        if bsz < 2:
            raise GraphError("batch_norm train mode needs batch size >= 2")
        n = bsz * h * w
        mu = x.data.mean(axis=(0, 1, 2))
        var = x.data.var(axis=(0, 1, 2))
        if update_running:
            m = state.momentum
            state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(x.dtype)
            state.running_var = ((1 - m) * state.running_var + m * var).astype(x.dtype)
            state.initialized = True
        ivar = 1.0 / np.sqrt(var + eps)
        xc = x.data - mu
        xhat = xc * ivar
        out = gamma.data * xhat + beta.data

        def bwd(g):
            _accumulate(gamma, (g * xhat).sum(axis=(0, 1, 2)))
            _accumulate(beta, g.sum(axis=(0, 1, 2)))
            if x.requires_grad:
                dxhat = g * gamma.data
                dvar = (dxhat * xc).sum(axis=(0, 1, 2)) * (-0.5) * ivar ** 3
                dmu = (-dxhat * ivar).sum(axis=(0, 1, 2)) + dvar * (-2.0 / n) * xc.sum(axis=(0, 1, 2))
                _accumulate(x, dxhat * ivar + dvar * 2.0 * xc / n + dmu / n)

        return _node(out, "batch_norm", (x, gamma, beta), bwd)

    if mode != "eval":
        raise GraphError(f"unknown mode {mode!r}")
    if not state.initialized:
        raise GraphError("batch_norm eval before any train step: running stats uninitialized")
    ivar = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (x.data - state.running_mean) * ivar
    out = gamma.data * xhat + beta.data

    def bwd_eval(g):
        _accumulate(gamma, (g * xhat).sum(axis=(0, 1, 2)))
        _accumulate(beta, g.sum(axis=(0, 1, 2)))
        _accumulate(x, g * gamma.data * ivar)

    return _node(out, "batch_norm", (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# backward pass

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dT into .grad for every tensor reachable from loss."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def parameter(data: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, op="param")
