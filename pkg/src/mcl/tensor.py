"""Dense tensors with tape-based reverse-mode autodiff on numpy buffers.

Values are C-contiguous float32 or float64 arrays. Differentiable ops
record nodes onto the active Tape; backward() replays the tape in strict
reverse append order and accumulates gradients on every tensor that
requires them. Float32 is the training dtype; float64 is used when
checking gradients against finite differences.

Broadcasting is deliberately narrow: adding a rank-1 bias to the last
axis is the only shape-mismatched combination ops accept. Everything
else must match exactly, so shape bugs fail loudly instead of being
silently stretched.
"""
from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# The tape currently recording, or None when running without gradients.
_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """N-d numeric value with an optional gradient buffer of equal shape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep them 0-d
        self.data: Array = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        # Index of the node that produced this tensor on the active tape,
        # or None for leaves and untraced results.
        self.node_id: int | None = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same buffer, no gradient tracking."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        return t

    def accumulate_grad(self, g: Array) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # Operator sugar; the actual math lives in module-level functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{grad_flag})"


class _Node:
    """One recorded op: output, inputs, and the function that maps the
    output gradient to per-input gradients (None for non-tensor inputs)."""

    __slots__ = ("tag", "out", "inputs", "backward_fn")

    def __init__(self, tag: str, out: Tensor, inputs: tuple[Tensor, ...],
                 backward_fn: Callable[[Array], Sequence[Array | None]]):
        self.tag = tag
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of differentiable ops.

    Inputs of every node were created before the node itself, so walking
    the list in reverse append order is a valid reverse topological
    order. The tape is a context manager; ops executed inside the block
    whose inputs require gradients are recorded.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; nesting is not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def append(self, tag: str, out: Tensor, inputs: tuple[Tensor, ...],
               backward_fn: Callable[[Array], Sequence[Array | None]]) -> None:
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(tag, out, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self.nodes)


def _trace(tag: str, out: Tensor, inputs: tuple[Tensor, ...],
           backward_fn: Callable[[Array], Sequence[Array | None]]) -> Tensor:
    """Record `out` on the active tape if any input participates in autodiff."""
    tape = _ACTIVE_TAPE
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.append(tag, out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every tensor on the tape
    that requires gradients. Visits nodes in strict reverse append order."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        gout = node.out.grad
        if gout is None:
            continue  # this branch does not reach the loss
        grads = node.backward_fn(gout)
        for inp, g in zip(node.inputs, grads):
            if g is not None and inp.requires_grad:
                inp.accumulate_grad(g)
        # Intermediate grads are only needed while walking; free them so
        # a long tape does not hold every activation gradient at once.
        if node.out is not loss:
            node.out.grad = None


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_dtype(*ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed dtypes {dt} and {t.dtype}; cast explicitly")


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b) -> Tensor:
    """a + b for equal shapes, or rank-1 b added along a's last axis (bias)."""
    if not isinstance(b, Tensor):
        return add_scalar(a, float(b))
    _check_same_dtype(a, b)
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)
        return _trace("add", out, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = Tensor(a.data + b.data)
        axes = tuple(range(a.ndim - 1))
        return _trace("add_bias", out, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise ValueError(f"add shapes {a.shape} and {b.shape} are incompatible")


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + a.dtype.type(c))
    return _trace("add_scalar", out, (a,), lambda g: (g,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"sub shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data - b.data)
    return _trace("sub", out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product for equal shapes, or tensor * python scalar."""
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)
    return _trace("mul", out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * a.dtype.type(c))
    return _trace("scale", out, (a,), lambda g: (g * a.dtype.type(c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _trace("matmul", out, (a, b),
                  lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T))
    return _trace("transpose", out, (a,), lambda g: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    orig = a.shape
    return _trace("reshape", out, (a,), lambda g: (g.reshape(orig),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return _trace("relu", out, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _trace("exp", out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _trace("log", out, (a,), lambda g: (g / a.data,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def bw(g: Array):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _trace("sum", out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for i in ax:
            n *= a.shape[i]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2-d tensor: out[i] = a[idx[i]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1:
        raise ValueError(f"gather_rows expects 2-d data and 1-d index, got {a.shape}, {idx.shape}")
    out = Tensor(a.data[idx])

    def bw(g: Array):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _trace("gather_rows", out, (a,), bw)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation in NCHW layout, lowered to one GEMM per batch.

    x: [B, Cin, H, W], w: [Cout, Cin, kh, kw], optional bias [Cout].
    Output spatial size is (H + 2*pad - kh) // stride + 1 per axis.
    """
    _check_same_dtype(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d x and w, got {x.shape}, {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if Cin != Cin_w:
        raise ValueError(f"conv2d channel mismatch: x has {Cin}, w expects {Cin_w}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise ValueError(f"kernel {kh}x{kw} exceeds padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    sB, sC, sH, sW = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (B, Ho, Wo, Cin, kh, kw),
        (sB, sH * stride, sW * stride, sC, sH, sW))
    cols = win.reshape(B * Ho * Wo, Cin * kh * kw)  # copies into GEMM layout
    wmat = w.data.reshape(Cout, Cin * kh * kw)
    flat = cols @ wmat.T
    if b is not None:
        _check_same_dtype(x, b)
        if b.shape != (Cout,):
            raise ValueError(f"conv2d bias shape {b.shape} != ({Cout},)")
        flat += b.data
    out = Tensor(np.ascontiguousarray(flat.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)))

    def bw(g: Array):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cout)
        gw = (gflat.T @ cols).reshape(w.shape)
        gb = gflat.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(B, Ho, Wo, Cin, kh, kw)
            gxp = np.zeros((B, Cin, Hp, Wp), dtype=x.dtype)
            # scatter each kernel offset back as one strided add
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + Ho * stride:stride, j:j + Wo * stride:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _trace("conv2d", out, inputs, bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by a factor of 2 on both spatial axes."""
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest2x expects [B,C,H,W], got {x.shape}")
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))
    B, C, H, W = x.shape

    def bw(g: Array):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _trace("upsample_nearest2x", out, (x,), bw)


# ---------------------------------------------------------------------------
# resizing and pooling


def _linear_resize_matrix(n_out: int, n_in: int, dtype) -> Array:
    """Row-stochastic [n_out, n_in] matrix for 1-d linear interpolation with
    half-pixel centers and edge clamping (the align_corners=False convention)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scl = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scl - 0.5
        lo = int(np.floor(src))
        t = src - lo
        i0 = min(max(lo, 0), n_in - 1)
        i1 = min(max(lo + 1, 0), n_in - 1)
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


def bilinear_resize_array(x: Array, out_h: int, out_w: int) -> Array:
    """Non-differentiating bilinear resize of [..., H, W] numpy data."""
    *lead, H, W = x.shape
    if out_h == H and out_w == W:
        return x.copy()
    ry = _linear_resize_matrix(out_h, H, x.dtype)
    rx = _linear_resize_matrix(out_w, W, x.dtype)
    tmp = (x.reshape(-1, W) @ rx.T).reshape(-1, H, out_w)
    res = np.matmul(ry, tmp)
    return np.ascontiguousarray(res.reshape(*lead, out_h, out_w))


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of [B, C, H, W] with half-pixel sample centers.

    Resizing to the identical size returns a bit-exact copy. The map is
    linear, so the backward pass is the transposed interpolation.
    """
    if x.ndim != 4:
        raise ValueError(f"bilinear_resize expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size {out_h}x{out_w} must be positive")
    if out_h == H and out_w == W:
        out = Tensor(x.data.copy())
        return _trace("bilinear_resize", out, (x,), lambda g: (g,))
    ry = _linear_resize_matrix(out_h, H, x.dtype)
    rx = _linear_resize_matrix(out_w, W, x.dtype)
    tmp = (x.data.reshape(B * C * H, W) @ rx.T).reshape(B * C, H, out_w)
    res = np.matmul(ry, tmp)  # [B*C, out_h, out_w] via broadcasted GEMM
    out = Tensor(np.ascontiguousarray(res.reshape(B, C, out_h, out_w)))

    def bw(g: Array):
        gt = np.matmul(ry.T, g.reshape(B * C, out_h, out_w))
        gx = (gt.reshape(B * C * H, out_w) @ rx).reshape(B, C, H, W)
        return (gx,)

    return _trace("bilinear_resize", out, (x,), bw)


def region_avg_pool(fmap: Tensor, box: tuple[int, int, int, int]) -> Tensor:
    """Mean of fmap[..., y0:y1, x0:x1] over the spatial window -> [..., C].

    fmap is [C, H, W] or [B, C, H, W]; box is (x0, y0, x1, y1) in pixels
    with exclusive upper edges. Empty windows are rejected.
    """
    x0, y0, x1, y1 = box
    if fmap.ndim not in (3, 4):
        raise ValueError(f"region_avg_pool expects [C,H,W] or [B,C,H,W], got {fmap.shape}")
    H, W = fmap.shape[-2], fmap.shape[-1]
    if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H):
        raise ValueError(f"box {box} is empty or outside a {H}x{W} map")
    area = (y1 - y0) * (x1 - x0)
    out = Tensor(fmap.data[..., y0:y1, x0:x1].mean(axis=(-2, -1)))

    def bw(g: Array):
        gx = np.zeros_like(fmap.data)
        gx[..., y0:y1, x0:x1] = (g / area)[..., None, None]
        return (gx,)

    return _trace("region_avg_pool", out, (fmap,), bw)


def grid_avg_pool(x: Tensor, grid: int) -> Tensor:
    """Average-pool [N, C, H, W] over an even grid x grid partition.

    Returns [N * grid * grid, C]; rows are ordered image-major, then
    grid row, then grid column, matching raster tile order.
    """
    N, C, H, W = x.shape
    if H % grid or W % grid:
        raise ValueError(f"map {H}x{W} not divisible into a {grid}x{grid} grid")
    hb, wb = H // grid, W // grid
    blocks = x.data.reshape(N, C, grid, hb, grid, wb).mean(axis=(3, 5))
    out = Tensor(np.ascontiguousarray(blocks.transpose(0, 2, 3, 1)).reshape(N * grid * grid, C))

    def bw(g: Array):
        gb = g.reshape(N, grid, grid, C).transpose(0, 3, 1, 2) / (hb * wb)
        gx = np.broadcast_to(gb[:, :, :, None, :, None],
                             (N, C, grid, hb, grid, wb)).reshape(N, C, H, W)
        return (np.ascontiguousarray(gx),)

    return _trace("grid_avg_pool", out, (x,), bw)


# ---------------------------------------------------------------------------
# normalization


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows of [..., D] to unit L2 norm along the last axis.

    Rows with norm below eps are divided by eps instead (and flagged),
    so zero rows stay zero rather than producing NaN.
    """
    norms = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    clamped = norms < eps
    if clamped.any():
        warnings.warn(f"l2_normalize: {int(clamped.sum())} row(s) below eps norm",
                      RuntimeWarning, stacklevel=2)
    denom = np.maximum(norms, x.dtype.type(eps))
    y = x.data / denom
    out = Tensor(y)

    def bw(g: Array):
        dot = (g * y).sum(axis=-1, keepdims=True)
        gx = (g - y * dot) / denom
        if clamped.any():
            # below the clamp the denominator is a constant
            gx = np.where(clamped, g / denom, gx)
        return (gx,)

    return _trace("l2_normalize", out, (x,), bw)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
                    ) -> tuple[Tensor, Array, Array]:
    """Batch normalization over all axes except the channel axis.

    x is [B, C] (axis 1 is channels) or [B, C, H, W]. Uses biased batch
    variance. Returns (out, batch_mean, batch_var) so callers can update
    running statistics.
    """
    if x.ndim == 2:
        axes: tuple[int, ...] = (0,)
        cshape = (1, -1)
    elif x.ndim == 4:
        axes = (0, 2, 3)
        cshape = (1, -1, 1, 1)
    else:
        raise ValueError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"affine shape mismatch: {gamma.shape}, {beta.shape} vs C={C}")
    n = x.size // C
    if n < 2:
        raise ValueError("batchnorm needs at least 2 samples per channel in train mode")
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    invstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mean.reshape(cshape)) * invstd.reshape(cshape)
    out = Tensor(xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape))

    def bw(g: Array):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(cshape)
        m1 = gxhat.mean(axis=axes).reshape(cshape)
        m2 = (gxhat * xhat).mean(axis=axes).reshape(cshape)
        gx = (gxhat - m1 - xhat * m2) * invstd.reshape(cshape)
        return (gx, ggamma, gbeta)

    return _trace("batchnorm_train", out, (x, gamma, beta), bw), mean, var


def batchnorm_eval(x: Tensor, gamma: Tensor, beta: Tensor,
                   mean: Array, var: Array, eps: float = 1e-5) -> Tensor:
    """Normalize with fixed statistics; a per-channel affine map."""
    if x.ndim == 2:
        cshape = (1, -1)
        axes: tuple[int, ...] = (0,)
    elif x.ndim == 4:
        cshape = (1, -1, 1, 1)
        axes = (0, 2, 3)
    else:
        raise ValueError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype.type)
    shift = (mean * invstd).astype(x.dtype.type)
    xhat = x.data * invstd.reshape(cshape) - shift.reshape(cshape)
    out = Tensor(xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape))

    def bw(g: Array):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = g * (gamma.data * invstd).reshape(cshape)
        return (gx, ggamma, gbeta)

    return _trace("batchnorm_eval", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross entropy of row-wise softmax against integer labels.

    Computed via the log-sum-exp identity with the row max subtracted, so
    large logits cannot overflow. reduction is 'mean' or 'sum'.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(f"bad shapes: logits {logits.shape}, labels {labels.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    N, C = logits.shape
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError("label out of range")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(sez)
    picked = logp[np.arange(N), labels]
    total = -picked.sum()
    if reduction == "mean":
        total /= N
    out = Tensor(np.asarray(total, dtype=logits.dtype))

    def bw(g: Array):
        p = ez / sez
        p[np.arange(N), labels] -= 1.0
        if reduction == "mean":
            p /= N
        return (p * g,)

    return _trace("softmax_cross_entropy", out, (logits,), bw)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-5) -> float:
    """Max relative error between tape gradients of f() and central
    finite differences over every element of every parameter.

    f must rebuild its computation from the current parameter values on
    each call. Use float64 parameters; float32 drowns in roundoff.
    """
    with Tape() as tape:
        loss = f()
    for p in params:
        p.zero_grad()
    backward(loss, tape)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    def eval_loss() -> float:
        return f().item()

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = eval_loss()
            flat[i] = orig - eps
            lo = eval_loss()
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            denom = max(abs(num), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(num - gflat[i]) / denom)
    return worst
