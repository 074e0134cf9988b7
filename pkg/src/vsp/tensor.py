"""Dense tensors with reverse-mode automatic differentiation.

Everything numeric in this package flows through the ops defined here: the
classifier forward pass, the training loop, and the attention-map backward
pass. Arrays are numpy (float32 by default, float64 for gradient-check
suites); gradients are recorded on an explicit Tape and replayed in reverse.
All ops are single-threaded, deterministic, and reject non-finite outputs.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class TapeError(RuntimeError):
    """Raised on invalid use of a Tape (e.g. backward through a foreign tensor)."""


class Tensor:
    """Dense n-dimensional array plus an optional gradient buffer.

    `data` is always a contiguous numpy array. `grad`, once populated by a
    backward pass, has the same shape and dtype as `data`.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self):
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class _Node:
    """One recorded op: inputs, output, and the rule mapping d(out) to d(inputs)."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of ops for one forward pass.

    Use as a context manager around the forward computation; ops executed
    inside record themselves when any input requires a gradient. `backward`
    walks the record once, in reverse, accumulating gradients across fan-out.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor, into_tensors: bool = True):
        """Reverse traversal from `loss`; returns {id(tensor): grad array}.

        With `into_tensors` (the training path) gradients are also
        accumulated into `.grad` of every requires_grad tensor touched.
        The returned map is keyed by tensor identity so callers holding a
        reference to an intermediate (e.g. a conv activation) can read its
        gradient without mutating shared state.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(n.output) for n in self.nodes}
        if id(loss) not in produced:
            raise TapeError("backward through a tensor that is not on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            gout = grads.get(id(node.output))
            if gout is None:
                continue
            gins = node.backward_fn(gout)
            for t, g in zip(node.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + g
                else:
                    grads[k] = g
                tensors[k] = t
        if into_tensors:
            for k, g in grads.items():
                t = tensors[k]
                if t.requires_grad:
                    t.accumulate_grad(g)
        return grads


def backward(loss: Tensor, tape: Tape):
    """Populate `.grad` on every requires_grad tensor reachable from `loss`."""
    return tape.backward(loss, into_tensors=True)


def _record(inputs, output, backward_fn):
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _ACTIVE_TAPES[-1].nodes.append(_Node(list(inputs), output, backward_fn))
    return output


def _same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(
                f"mixed dtypes {dt.name} vs {t.data.dtype.name}; cast inputs explicitly"
            )
    return dt


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the residual skip connection. Gradient fans out unchanged."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    out = Tensor(a.data + b.data)

    def bw(g):
        return g, g

    return _record([a, b], out, bw)


def relu(x: Tensor) -> Tensor:
    """max(0, x). The subgradient at exactly 0 is 0."""
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _record([x], out, bw)


def tsum(x: Tensor) -> Tensor:
    """Total sum reduced to a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def bw(g):
        return (np.full_like(x.data, g),)

    return _record([x], out, bw)


def pick(x: Tensor, row: int, col: int) -> Tensor:
    """Select one entry of a 2-d tensor as a scalar (used for logit objectives)."""
    if x.data.ndim != 2:
        raise ShapeError(f"pick expects a 2-d tensor, got shape {x.shape}")
    n, k = x.shape
    if not (0 <= row < n and 0 <= col < k):
        raise ShapeError(f"pick index ({row},{col}) out of range for shape {x.shape}")
    out = Tensor(np.asarray(x.data[row, col], dtype=x.data.dtype))

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[row, col] = g
        return (gx,)

    return _record([x], out, bw)


def space_to_depth(x: Tensor) -> Tensor:
    """Lossless 2x2 space-to-depth: (N,C,H,W) -> (N,4C,H/2,W/2).

    Output channel blocks are ordered top-left, top-right, bottom-left,
    bottom-right within each input channel.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"space_to_depth expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"space_to_depth needs even spatial dims, got {h}x{w}")
    d = x.data
    out_arr = np.empty((n, 4 * c, h // 2, w // 2), dtype=d.dtype)
    out_arr[:, 0::4] = d[:, :, 0::2, 0::2]
    out_arr[:, 1::4] = d[:, :, 0::2, 1::2]
    out_arr[:, 2::4] = d[:, :, 1::2, 0::2]
    out_arr[:, 3::4] = d[:, :, 1::2, 1::2]
    out = Tensor(out_arr)

    def bw(g):
        gx = np.empty_like(d)
        gx[:, :, 0::2, 0::2] = g[:, 0::4]
        gx[:, :, 0::2, 1::2] = g[:, 1::4]
        gx[:, :, 1::2, 0::2] = g[:, 2::4]
        gx[:, :, 1::2, 1::2] = g[:, 3::4]
        return (gx,)

    return _record([x], out, bw)


def depth_to_space(x: Tensor) -> Tensor:
    """Inverse of space_to_depth: (N,4C,H,W) -> (N,C,2H,2W)."""
    if x.data.ndim != 4 or x.shape[1] % 4:
        raise ShapeError(f"depth_to_space expects NCHW with 4k channels, got {x.shape}")
    n, c4, h, w = x.shape
    d = x.data
    out_arr = np.empty((n, c4 // 4, 2 * h, 2 * w), dtype=d.dtype)
    out_arr[:, :, 0::2, 0::2] = d[:, 0::4]
    out_arr[:, :, 0::2, 1::2] = d[:, 1::4]
    out_arr[:, :, 1::2, 0::2] = d[:, 2::4]
    out_arr[:, :, 1::2, 1::2] = d[:, 3::4]
    out = Tensor(out_arr)

    def bw(g):
        gx = np.empty_like(d)
        gx[:, 0::4] = g[:, :, 0::2, 0::2]
        gx[:, 1::4] = g[:, :, 0::2, 1::2]
        gx[:, 2::4] = g[:, :, 1::2, 0::2]
        gx[:, 3::4] = g[:, :, 1::2, 1::2]
        return (gx,)

    return _record([x], out, bw)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp, kh, kw, stride, hout, wout):
    # xp is the already-padded input (N,C,Hp,Wp); returns (N, C*kh*kw, hout*wout)
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, hout, wout),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, hout * wout)


def _col2im(cols, xp_shape, kh, kw, stride, hout, wout):
    n, c, hp, wp = xp_shape
    grad = np.zeros(xp_shape, dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, hout, wout)
    for i in range(kh):
        for j in range(kw):
            grad[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += cols6[
                :, :, i, j
            ]
    return grad


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation (no kernel flip) with zero padding.

    x (N,C,H,W) * kernel (F,C,kh,kw) + bias (F) -> (N,F,H',W') with
    H' = floor((H + 2*padding - kh)/stride) + 1, analogously W'.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and FCkhkw kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    if bias.data.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    _same_dtype(x, kernel, bias)

    hout = (h + 2 * padding - kh) // stride + 1
    wout = (w + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, hout, wout)  # (N, CKK, L)
    wmat = kernel.data.reshape(f, c * kh * kw)
    # one GEMM over the whole batch: (N*L, CKK) @ (CKK, F)
    lin = cols.transpose(0, 2, 1).reshape(n * hout * wout, -1) @ wmat.T
    lin += bias.data
    out_arr = lin.reshape(n, hout, wout, f).transpose(0, 3, 1, 2)
    out = Tensor(np.ascontiguousarray(out_arr))

    xp_shape = xp.shape

    def bw(g):
        gr = g.transpose(0, 2, 3, 1).reshape(n * hout * wout, f)  # (N*L, F)
        gb = gr.sum(axis=0)
        cols_flat = cols.transpose(0, 2, 1).reshape(n * hout * wout, -1)
        gw = (gr.T @ cols_flat).reshape(kernel.shape)
        gcols = (gr @ wmat).reshape(n, hout * wout, -1).transpose(0, 2, 1)
        gxp = _col2im(gcols, xp_shape, kh, kw, stride, hout, wout)
        if padding:
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        else:
            gx = gxp
        return gx, gw, gb

    return _record([x, kernel, bias], out, bw)


# ---------------------------------------------------------------------------
# batch normalization


class RunningStats:
    """Per-channel running mean/variance updated by exponential moving average."""

    __slots__ = ("mean", "var")

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self):
        rs = RunningStats(len(self.mean), dtype=self.mean.dtype)
        rs.mean = self.mean.copy()
        rs.var = self.var.copy()
        return rs


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over the (N,H,W) axes.

    Train mode normalizes with biased batch statistics and updates `running`
    in place: stat <- (1 - momentum)*stat + momentum*batch_stat. Eval mode
    reads `running` and never mutates it. Both modes are differentiable
    w.r.t. x, gamma and beta (eval-mode gradients are needed by the
    attention-map backward pass).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm affine params must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    _same_dtype(x, gamma, beta)

    g_col = gamma.data.reshape(1, c, 1, 1)
    b_col = beta.data.reshape(1, c, 1, 1)

    if mode == "train":
        cnt = n * h * w
        if cnt < 2:
            raise ShapeError(f"batch_norm train mode needs >= 2 elements per channel, got {cnt}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running.mean = ((1.0 - momentum) * running.mean + momentum * mean).astype(running.mean.dtype)
        running.var = ((1.0 - momentum) * running.var + momentum * var).astype(running.var.dtype)
    else:
        mean = running.mean.astype(x.data.dtype)
        var = running.var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = Tensor(g_col * xhat + b_col)

    if mode == "train":

        def bw(g):
            cnt = n * h * w
            gxhat = g * g_col
            iv = inv_std.reshape(1, c, 1, 1)
            sum_gxhat = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_gxhat_xhat = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = iv / cnt * (cnt * gxhat - sum_gxhat - xhat * sum_gxhat_xhat)
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            return gx.astype(x.data.dtype), ggamma, gbeta

    else:

        def bw(g):
            gx = g * g_col * inv_std.reshape(1, c, 1, 1)
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            return gx.astype(x.data.dtype), ggamma, gbeta

    return _record([x, gamma, beta], out, bw)


# ---------------------------------------------------------------------------
# pooling / linear / loss


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over spatial positions: (N,C,H,W) -> (N,C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bw(g):
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.data.dtype)
        return (gx,)

    return _record([x], out, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight.T + bias: (N,D) x (K,D) -> (N,K)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d operands, got {x.shape} and {weight.shape}")
    n, d = x.shape
    k, d2 = weight.shape
    if d != d2:
        raise ShapeError(f"linear inner dims disagree: input {d} vs weight {d2}")
    if bias.data.shape != (k,):
        raise ShapeError(f"linear bias must have shape ({k},), got {bias.shape}")
    _same_dtype(x, weight, bias)
    out = Tensor(x.data @ weight.data.T + bias.data)

    def bw(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        gb = g.sum(axis=0)
        return gx, gw, gb

    return _record([x, weight, bias], out, bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-d array, stabilized by max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Stabilized by max subtraction; stays finite for logit magnitudes up to
    1e4. `labels` is a length-N sequence of class indices in [0, K).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N,K) logits, got {logits.shape}")
    n, k = logits.shape
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {lab.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"label out of range [0,{k}): found {lab[(lab < 0) | (lab >= k)][0]}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), lab]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.data.dtype))

    def bw(g):
        p = softmax(logits.data)
        p[np.arange(n), lab] -= 1.0
        return (p * (g / n),)

    return _record([logits], out, bw)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: dict, lr: float, momentum: float, velocity: dict):
    """One SGD-with-momentum update, in place.

    v <- momentum*v + grad;  p <- p - lr*v. `params` maps names to Tensors
    whose `.grad` is populated; `velocity` maps the same names to arrays and
    is created lazily on first use.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not (0.0 <= momentum < 1.0):
        raise ValueError(f"momentum must be in [0,1), got {momentum}")
    for name, p in params.items():
        if p.grad is None:
            continue
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + p.grad
        velocity[name] = v
        p.data -= lr * v
        _check_finite(p.data, f"sgd_step({name})")
