"""Dense 4-D tensors with reverse-mode automatic differentiation.

Every value flowing through a network is a ``Tensor`` of shape
``(n, c, h, w)`` holding float64 data.  Vectors (biases, logit rows) are
stored as degenerate 4-D shapes such as ``(1, k, 1, 1)`` so that one layout
rule covers everything.  Ops build a tape of parent links and backward
closures; ``Tensor.backward()`` walks it in reverse topological order.

All randomness is taken from an explicit ``numpy.random.Generator`` (or an
integer seed), so a fixed seed plus a fixed op sequence reproduces results
bit for bit in single-threaded execution.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError, DimensionError, NumericError, ParameterError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / oracles)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_rng(seed) -> np.random.Generator:
    """Normalize an int seed or an existing Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(int(seed)))


class Tensor:
    """A dense (n, c, h, w) float64 array with an optional gradient buffer.

    ``parents`` and ``backward_fn`` wire the tensor into the autodiff tape:
    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    parent.  Values are treated as immutable once produced by an op.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False,
                 parents: Sequence["Tensor"] = (),
                 backward_fn: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise DimensionError(
                f"Tensor requires a 4-D (n, c, h, w) array, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        if _GRAD_ENABLED and (requires_grad or any(p.requires_grad for p in parents)):
            self.requires_grad = True
            self.parents = tuple(parents)
            self.backward_fn = backward_fn
        else:
            self.parents = ()
            self.backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        """Reverse-mode sweep seeding this (scalar) tensor's gradient with 1."""
        if self.data.size != 1:
            raise DimensionError(
                f"backward() requires a scalar tensor, got shape {self.shape}")
        order: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise DimensionError(
                        f"backward produced gradient of shape {g.shape} for "
                        f"parent of shape {parent.data.shape}")
                if parent.grad is None:
                    parent.grad = g.copy() if grads is not None else g
                else:
                    parent.grad = parent.grad + g

    # Scalar arithmetic is only needed to combine losses.
    def __add__(self, other: "Tensor") -> "Tensor":
        if self.shape != other.shape:
            raise DimensionError(f"add: shapes {self.shape} and {other.shape} differ")
        return Tensor(self.data + other.data, parents=(self, other),
                      backward_fn=lambda g: (g, g))

    def __mul__(self, scalar: float) -> "Tensor":
        s = float(scalar)
        return Tensor(self.data * s, parents=(self,),
                      backward_fn=lambda g: (g * s,))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named weight tensor plus its SGD momentum buffer."""

    __slots__ = ("name", "value", "momentum")

    def __init__(self, name: str, value: Tensor):
        self.name = name
        self.value = value
        self.value.requires_grad = True
        self.momentum = np.zeros_like(value.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------

def _out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_window(name, h, w, kh, kw, stride, pad):
    if stride < 1:
        raise ParameterError(f"{name}: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ParameterError(f"{name}: pad must be >= 0, got {pad}")
    oh = _out_dim(h, kh, stride, pad)
    ow = _out_dim(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"{name}: window {kh}x{kw} stride {stride} pad {pad} yields empty "
            f"output on {h}x{w} input")
    return oh, ow


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
            pad_value: float = 0.0) -> np.ndarray:
    """Unfold (n, c, h, w) into (n, c, kh, kw, oh, ow) window views."""
    n, c, h, w = x.shape
    oh = _out_dim(h, kh, stride, pad)
    ow = _out_dim(w, kw, stride, pad)
    if pad > 0:
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), pad_value, dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def _col2im(cols: np.ndarray, h: int, w: int, stride: int, pad: int) -> np.ndarray:
    """Fold (n, c, kh, kw, oh, ow) windows back by summation (im2col adjoint)."""
    n, c, kh, kw, oh, ow = cols.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad > 0:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           pad: int = 0) -> Tensor:
    """Cross-correlation of (n,c,h,w) input with (k,c,fh,fw) filters.

    1x1 kernels run as plain batched matmuls on reshaped views; larger
    kernels go through im2col plus one batched matmul.  In both cases the
    result must agree with ``conv2d_reference`` (the direct-summation
    oracle) to 1e-12.
    """
    n, c, h, w = x.shape
    k, wc, fh, fw = weight.shape
    if wc != c:
        raise DimensionError(
            f"conv2d: input has {c} channels (shape {x.shape}) but weight "
            f"expects {wc} (shape {weight.shape})")
    if bias.shape != (1, k, 1, 1):
        raise DimensionError(
            f"conv2d: bias shape {bias.shape} != (1, {k}, 1, 1)")
    oh, ow = _check_window("conv2d", h, w, fh, fw, stride, pad)
    w2 = weight.data.reshape(k, c * fh * fw)

    if fh == 1 and fw == 1 and pad == 0:
        if stride == 1:
            x2 = x.data.reshape(n, c, h * w)
        else:
            x2 = np.ascontiguousarray(
                x.data[:, :, ::stride, ::stride][:, :, :oh, :ow]
            ).reshape(n, c, oh * ow)
        out = np.matmul(w2[None, :, :], x2).reshape(n, k, oh, ow) + bias.data

        def backward_1x1(grad):
            g2 = grad.reshape(n, k, oh * ow)
            gw = gx = gb = None
            if weight.requires_grad:
                gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)
                gw = gw.reshape(weight.shape)
            if bias.requires_grad:
                gb = grad.sum(axis=(0, 2, 3)).reshape(1, k, 1, 1)
            if x.requires_grad:
                gx2 = np.matmul(w2.T[None, :, :], g2).reshape(n, c, oh, ow)
                if stride == 1:
                    gx = gx2.reshape(x.shape)
                else:
                    gx = np.zeros(x.shape)
                    gx[:, :, ::stride, ::stride][:, :, :oh, :ow] = gx2
            return gx, gw, gb

        return Tensor(out, parents=(x, weight, bias), backward_fn=backward_1x1)

    cols2 = _im2col(x.data, fh, fw, stride, pad).reshape(n, c * fh * fw, oh * ow)
    out = np.matmul(w2[None, :, :], cols2).reshape(n, k, oh, ow) + bias.data

    def backward(grad):
        g2 = grad.reshape(n, k, oh * ow)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(weight.shape)
        if bias.requires_grad:
            gb = grad.sum(axis=(0, 2, 3)).reshape(1, k, 1, 1)
        if x.requires_grad:
            gcols = np.matmul(w2.T[None, :, :], g2)      # (n, c*fh*fw, oh*ow)
            gcols = gcols.reshape(n, c, fh, fw, oh, ow)
            gx = _col2im(gcols, h, w, stride, pad)
        return gx, gw, gb

    return Tensor(out, parents=(x, weight, bias), backward_fn=backward)


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                     stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct-loop convolution used as the agreement oracle for conv2d."""
    n, c, h, w = x.shape
    k, _, fh, fw = weight.shape
    oh = _out_dim(h, fh, stride, pad)
    ow = _out_dim(w, fw, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    out = np.zeros((n, k, oh, ow), dtype=np.float64)
    bias_v = bias.reshape(k)
    for ni in range(n):
        for ki in range(k):
            for oi in range(oh):
                for oj in range(ow):
                    patch = xp[ni, :, oi * stride:oi * stride + fh,
                               oj * stride:oj * stride + fw]
                    out[ni, ki, oi, oj] = np.sum(patch * weight[ki]) + bias_v[ki]
    return out


def maxpool2d(x: Tensor, k: int, stride: int | None = None, pad: int = 0) -> Tensor:
    """Per-window maxima; gradient routes to the first (row-major) argmax.

    Forward is a separable max (rows, then columns).  Backward rescans the
    k*k shifts in row-major order and routes each window's gradient to the
    first position that attains the maximum.
    """
    if k < 1:
        raise ParameterError(f"maxpool2d: window must be >= 1, got {k}")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    oh, ow = _check_window("maxpool2d", h, w, k, k, stride, pad)
    if pad > 0:
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf)
        xp[:, :, pad:pad + h, pad:pad + w] = x.data
    else:
        xp = x.data
    rows = xp[:, :, :, 0:stride * ow:stride][:, :, :, :ow].copy()
    for j in range(1, k):
        np.maximum(rows, xp[:, :, :, j:j + stride * ow:stride], out=rows)
    out = rows[:, :, 0:stride * oh:stride][:, :, :oh].copy()
    for i in range(1, k):
        np.maximum(out, rows[:, :, i:i + stride * oh:stride], out=out)

    def backward(grad):
        gxp = np.zeros_like(xp)
        claimed = np.zeros(grad.shape, dtype=bool)
        for i in range(k):
            for j in range(k):
                view = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
                take = (view == out) & ~claimed
                claimed |= take
                sl = gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
                np.add(sl, grad, out=sl, where=take)
        if pad > 0:
            return (gxp[:, :, pad:pad + h, pad:pad + w],)
        return (gxp,)

    return Tensor(out, parents=(x,), backward_fn=backward)


def avgpool2d(x: Tensor, k: int, stride: int | None = None, pad: int = 0) -> Tensor:
    """Window means (padding counts toward the denominator when pad > 0)."""
    if k < 1:
        raise ParameterError(f"avgpool2d: window must be >= 1, got {k}")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    oh, ow = _check_window("avgpool2d", h, w, k, k, stride, pad)
    cols = _im2col(x.data, k, k, stride, pad)
    out = cols.mean(axis=(2, 3))

    def backward(grad):
        g = np.broadcast_to(grad[:, :, None, None] / (k * k),
                            (n, c, k, k, oh, ow))
        return (_col2im(np.ascontiguousarray(g), h, w, stride, pad),)

    return Tensor(out, parents=(x,), backward_fn=backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over each (h, w) plane: (n, c, h, w) -> (n, c, 1, 1)."""
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise DimensionError(f"global_avg_pool: empty spatial dims in {x.shape}")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(grad):
        return (np.broadcast_to(grad / (h * w), x.shape).copy(),)

    return Tensor(out, parents=(x,), backward_fn=backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(grad):
        return (grad * mask,)

    return Tensor(np.where(mask, x.data, 0.0), parents=(x,), backward_fn=backward)


def flatten(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c*h*w, 1, 1)."""
    n = x.shape[0]
    out = x.data.reshape(n, -1, 1, 1)

    def backward(grad):
        return (grad.reshape(x.shape),)

    return Tensor(out, parents=(x,), backward_fn=backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map on flattened features: (n,f,1,1) @ (out,f,1,1)^T + bias."""
    n, f, h, w = x.shape
    if h != 1 or w != 1:
        raise DimensionError(
            f"linear: input must be flattened to (n, f, 1, 1), got {x.shape}")
    out_f, in_f = weight.shape[0], weight.shape[1]
    if weight.shape[2:] != (1, 1) or in_f != f:
        raise DimensionError(
            f"linear: weight shape {weight.shape} incompatible with input "
            f"shape {x.shape}")
    if bias.shape != (1, out_f, 1, 1):
        raise DimensionError(f"linear: bias shape {bias.shape} != (1, {out_f}, 1, 1)")
    x2 = x.data.reshape(n, f)
    w2 = weight.data.reshape(out_f, in_f)
    out = (x2 @ w2.T + bias.data.reshape(out_f)).reshape(n, out_f, 1, 1)

    def backward(grad):
        g2 = grad.reshape(n, out_f)
        gx = (g2 @ w2).reshape(x.shape) if x.requires_grad else None
        gw = (g2.T @ x2).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0).reshape(bias.shape) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor(out, parents=(x, weight, bias), backward_fn=backward)


def concat_channels(inputs: Iterable[Tensor]) -> Tensor:
    """Stack tensors along the channel axis in argument order."""
    inputs = list(inputs)
    if not inputs:
        raise ParameterError("concat_channels: need at least one input")
    n, _, h, w = inputs[0].shape
    for idx, t in enumerate(inputs[1:], start=1):
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise DimensionError(
                f"concat_channels: input {idx} has shape {t.shape}, expected "
                f"(n={n}, *, h={h}, w={w}) to match input 0 {inputs[0].shape}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    splits = np.cumsum([t.shape[1] for t in inputs])[:-1]

    def backward(grad):
        return tuple(np.ascontiguousarray(g) for g in np.split(grad, splits, axis=1))

    return Tensor(out, parents=tuple(inputs), backward_fn=backward)


def dropout(x: Tensor, p: float, mode: str = "train", seed=0) -> Tensor:
    """Inverted dropout: train survivors scaled by 1/(1-p); test is identity."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout: p must be in [0, 1), got {p}")
    if mode not in ("train", "test"):
        raise ParameterError(f"dropout: mode must be train|test, got {mode!r}")
    if mode == "test" or p == 0.0:
        def backward_id(grad):
            return (grad,)
        return Tensor(x.data, parents=(x,), backward_fn=backward_id)
    rng = make_rng(seed)
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(grad):
        return (grad * mask,)

    return Tensor(x.data * mask, parents=(x,), backward_fn=backward)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Numerically stable row softmax for (n, k) arrays."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood over a batch of (n, k, 1, 1) logits.

    Returns the scalar loss tensor and detached (n, k) probabilities.
    The gradient w.r.t. logits is (probs - onehot) / n.
    """
    n, k = logits.shape[0], logits.shape[1]
    if logits.shape[2:] != (1, 1):
        raise DimensionError(
            f"softmax_cross_entropy: logits must be (n, k, 1, 1), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DataError(
            f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    bad = np.nonzero((labels < 0) | (labels >= k))[0]
    if bad.size:
        raise DataError(
            f"softmax_cross_entropy: label {labels[bad[0]]} out of range "
            f"[0, {k}) at record index {bad[0]}")
    l2 = logits.data.reshape(n, k)
    m = l2.max(axis=1, keepdims=True)
    z = l2 - m
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    loss_val = -logp[np.arange(n), labels].mean()

    def backward(grad):
        g = probs.copy()
        g[np.arange(n), labels] -= 1.0
        g *= float(grad.reshape(())) / n
        return (g.reshape(logits.shape),)

    loss = Tensor(loss_val.reshape(1, 1, 1, 1), parents=(logits,), backward_fn=backward)
    return loss, probs


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor (handy for gradient checks)."""
    out = x.data.sum().reshape(1, 1, 1, 1)

    def backward(grad):
        return (np.broadcast_to(grad.reshape(()), x.shape).copy(),)

    return Tensor(out, parents=(x,), backward_fn=backward)


def bilinear_resize(x: Tensor | np.ndarray, new_h: int, new_w: int) -> Tensor:
    """Align-corners bilinear interpolation per channel (no gradient).

    Same-size resize reproduces the input bit-exactly, which the filter
    warping path relies on.
    """
    if new_h < 1 or new_w < 1:
        raise ParameterError(f"bilinear_resize: target {new_h}x{new_w} invalid")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    n, c, h, w = data.shape
    if (new_h, new_w) == (h, w):
        return Tensor(data.copy())
    ys = np.arange(new_h, dtype=np.float64) * ((h - 1) / (new_h - 1) if new_h > 1 else 0.0)
    xs = np.arange(new_w, dtype=np.float64) * ((w - 1) / (new_w - 1) if new_w > 1 else 0.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).reshape(1, 1, new_h, 1)
    fx = (xs - x0).reshape(1, 1, 1, new_w)
    tl = data[:, :, y0[:, None], x0[None, :]]
    tr = data[:, :, y0[:, None], x1[None, :]]
    bl = data[:, :, y1[:, None], x0[None, :]]
    br = data[:, :, y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return Tensor(top + (bot - top) * fy)


# ---------------------------------------------------------------------------
# optimizer and gradient verification
# ---------------------------------------------------------------------------

def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0):
    """SGD with momentum: v <- m*v + g + wd*w ; w <- w - lr*v.

    Parameters with no accumulated gradient are treated as zero-gradient.
    Momentum buffers persist on the Parameter objects across calls.
    """
    if lr <= 0:
        raise ParameterError(f"sgd_step: lr must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ParameterError(f"sgd_step: momentum must be in [0, 1), got {momentum}")
    for p in params:
        g = p.value.grad
        if g is None:
            g = np.zeros_like(p.value.data)
        elif g.shape != p.value.data.shape:
            raise DimensionError(
                f"sgd_step: gradient shape {g.shape} != parameter "
                f"{p.name!r} shape {p.value.data.shape}")
        if weight_decay != 0.0:
            g = g + weight_decay * p.value.data
        p.momentum *= momentum
        p.momentum += g
        p.value.data -= lr * p.momentum


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.value.grad = None


def finite_difference_check(fn: Callable[[Tensor], Tensor], x: Tensor,
                            step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must map the input tensor to a scalar tensor and be deterministic
    across calls (fix any dropout seed).  Error per coordinate is
    |analytic - fd| / max(1, |analytic|).
    """
    if step <= 0:
        raise ParameterError(f"finite_difference_check: step must be > 0, got {step}")
    x.requires_grad = True
    x.grad = None
    out = fn(x)
    if not np.isfinite(out.data).all():
        raise NumericError("finite_difference_check: non-finite forward value")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(x).item()
            flat[i] = orig - step
            fm = fn(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(
                    f"finite_difference_check: non-finite probe at coordinate {i}")
            fd = (fp - fm) / (2.0 * step)
            err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    return worst
