"""Dense float64 kernels: forward/backward math for every layer of the expression CNN.

All functions are pure given explicit inputs. Activations are [B, C, H, W],
conv kernels [Cout, Cin, kh, kw], dense weights [Fout, Fin]. Convolution is
cross-correlation with stride 1 and no padding; pooling is 2x2 stride 2 with
odd trailing rows/columns dropped.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation receives tensors with incompatible axes."""


class NumericsError(FloatingPointError):
    """Raised when a computation produces non-finite values."""


def require_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.sum(~np.isfinite(arr)))
        raise NumericsError(f"{context}: {bad} non-finite value(s)")


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Sliding windows flattened to [B, C*kh*kw, OH*OW].

    Channel-major layout: the copy out of the strided window view moves whole
    output rows at a time, which is what makes the conv kernels fast on CPU.
    """
    b, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        b, c * kh * kw, oh * ow)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   cols: np.ndarray | None = None) -> np.ndarray:
    """Valid cross-correlation, stride 1: out[b,o,i,j] = b[o] + sum x[b,c,i+u,j+v] w[o,c,u,v].

    ``cols`` may carry a precomputed im2col(x) to share with the backward pass.
    """
    _check(x.ndim == 4, f"conv2d: input must be 4-D [B,Cin,H,W], got shape {x.shape}")
    _check(w.ndim == 4, f"conv2d: weight must be 4-D [Cout,Cin,kh,kw], got shape {w.shape}")
    _check(b.ndim == 1, f"conv2d: bias must be 1-D [Cout], got shape {b.shape}")
    bs, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    _check(cin == cin_w,
           f"conv2d: input channel axis {cin} != weight channel axis {cin_w}")
    _check(b.shape[0] == cout,
           f"conv2d: bias axis {b.shape[0]} != weight out-channel axis {cout}")
    _check(h >= kh and wd >= kw,
           f"conv2d: spatial axes {h}x{wd} smaller than kernel {kh}x{kw}")
    oh, ow = h - kh + 1, wd - kw + 1
    if cols is None:
        cols = im2col(x, kh, kw)                  # [B, Cin*kh*kw, OH*OW]
    out = np.matmul(w.reshape(cout, cin * kh * kw), cols)
    out += b[:, None]
    return out.reshape(bs, cout, oh, ow)


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray,
    cols: np.ndarray | None = None, need_input_grad: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoints of conv2d_forward w.r.t. input, weight and bias.

    ``cols`` may carry the im2col matrix of x from the forward pass to avoid
    recomputing it; ``need_input_grad=False`` skips the (expensive) grad_x and
    returns zeros in its place, for layers with nothing trainable below them.
    """
    bs, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = h - kh + 1, wd - kw + 1
    _check(grad_out.shape == (bs, cout, oh, ow),
           f"conv2d backward: grad shape {grad_out.shape} != output shape {(bs, cout, oh, ow)}")

    grad_b = grad_out.sum(axis=(0, 2, 3))

    gmat = grad_out.reshape(bs, cout, oh * ow)
    if cols is None:
        cols = im2col(x, kh, kw)
    grad_w = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0) \
        .reshape(cout, cin, kh, kw)

    if not need_input_grad:
        return np.zeros_like(x), grad_w, grad_b
    # grad_x is a full correlation of grad_out with the spatially flipped
    # kernel, channel roles swapped; implemented as one more im2col matmul.
    gpad = np.zeros((bs, cout, h + kh - 1, wd + kw - 1), dtype=grad_out.dtype)
    gpad[:, :, kh - 1:kh - 1 + oh, kw - 1:kw - 1 + ow] = grad_out
    gcols = im2col(gpad, kh, kw)                  # [B, Cout*kh*kw, H*W]
    wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * kh * kw)
    grad_x = np.matmul(wflip, gcols).reshape(bs, cin, h, wd)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Max pooling (2x2, stride 2)
# ---------------------------------------------------------------------------

class PoolIndex(NamedTuple):
    """Winner map of a pooling forward: window-local argmax plus input extent."""
    argmax: np.ndarray          # [B, C, OH, OW] values in {0,1,2,3}, row-major within window
    input_hw: tuple[int, int]


# window cells in row-major scan order; earlier entries win ties
_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, PoolIndex]:
    """Max over disjoint 2x2 windows; odd trailing row/column dropped."""
    _check(x.ndim == 4, f"maxpool: input must be 4-D, got shape {x.shape}")
    b, c, h, w = x.shape
    _check(h >= 2 and w >= 2, f"maxpool: spatial axes {h}x{w} must be >= 2x2")
    oh, ow = h // 2, w // 2
    cells = [x[:, :, sy: oh * 2: 2, sx: ow * 2: 2] for sy, sx in _POOL_OFFSETS]
    out = np.maximum(np.maximum(cells[0], cells[1]), np.maximum(cells[2], cells[3]))
    idx = np.full(out.shape, 3, dtype=np.uint8)
    for k in (2, 1, 0):                           # later writes win: scan-order tie-break
        idx[cells[k] == out] = k
    return out, PoolIndex(idx, (h, w))


def maxpool2x2_backward(index: PoolIndex, grad_out: np.ndarray) -> np.ndarray:
    """Route each output gradient to its recorded winner; everything else gets 0."""
    idx = index.argmax
    _check(grad_out.shape == idx.shape,
           f"maxpool backward: grad shape {grad_out.shape} != index map shape {idx.shape}")
    b, c, oh, ow = idx.shape
    h, w = index.input_hw
    _check(h // 2 == oh and w // 2 == ow,
           f"maxpool backward: index map {oh}x{ow} inconsistent with input {h}x{w}")
    grad_x = np.zeros((b, c, h, w), dtype=grad_out.dtype)
    # windows are disjoint, so plain assignment (no scatter-add) is exact
    for k, (sy, sx) in enumerate(_POOL_OFFSETS):
        grad_x[:, :, sy: oh * 2: 2, sx: ow * 2: 2] = grad_out * (idx == k)
    return grad_x


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

class BNCache(NamedTuple):
    x: np.ndarray
    mean: np.ndarray            # per channel
    inv_std: np.ndarray         # per channel
    gamma: np.ndarray
    axes: tuple[int, ...]
    bshape: tuple
    n: int


def _bn_axes(x: np.ndarray) -> tuple[tuple[int, ...], tuple]:
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm: input must be 2-D or 4-D, got shape {x.shape}")


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mode: str,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> tuple[np.ndarray, BNCache | None]:
    """Normalize per channel; train mode uses batch statistics and updates the
    running ones in place, eval mode uses the running statistics."""
    axes, bshape = _bn_axes(x)
    c = x.shape[1]
    _check(gamma.shape == (c,) and beta.shape == (c,),
           f"batchnorm: gamma/beta axes {gamma.shape}/{beta.shape} != channel axis ({c},)")
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        scale = gamma * inv_std
        out = x * scale.reshape(bshape)
        out += (beta - running_mean * scale).reshape(bshape)
        return out, None
    if mode != "train":
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    _check(x.shape[0] >= 2, f"batchnorm: train mode needs batch >= 2, got {x.shape[0]}")
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)                        # population variance
    inv_std = 1.0 / np.sqrt(var + eps)
    scale = gamma * inv_std
    out = x * scale.reshape(bshape)
    out += (beta - mean * scale).reshape(bshape)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * var
    return out, BNCache(x, mean, inv_std, gamma, axes, bshape, x.size // c)


def batchnorm_backward(
    cache: BNCache | None, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train-mode adjoint including the dependence of batch statistics on x.

    grad_x is a per-channel affine combination of grad_out and x, so the whole
    pass costs three full-size traversals and no normalized-input temporary.
    """
    if cache is None:
        raise ValueError("batchnorm backward requires the cache of a train-mode forward")
    x, mean, inv_std, gamma, axes, bshape, n = cache
    spec = "bc,bc->c" if x.ndim == 2 else "bchw,bchw->c"
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (np.einsum(spec, grad_out, x) - mean * grad_beta) * inv_std
    a = gamma * inv_std
    b = -a * inv_std * grad_gamma / n
    const = -(a * grad_beta / n) - b * mean
    grad_x = grad_out * a.reshape(bshape)
    grad_x += x * b.reshape(bshape)
    grad_x += const.reshape(bshape)
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# ReLU / dropout / dense
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    _check(x.shape == grad_out.shape,
           f"relu backward: grad shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0.0, grad_out, 0.0)      # subgradient 0 at exactly 0


def dropout_forward(
    x: np.ndarray, rate: float, mode: str, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: survivors scaled by 1/(1-rate) so eval is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x, None
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


def dropout_backward(
    mask: np.ndarray | None, rate: float, grad_out: np.ndarray
) -> np.ndarray:
    if mask is None:
        return grad_out
    return grad_out * mask / (1.0 - rate)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out = x @ w.T + b for x [B,Fin], w [Fout,Fin], b [Fout]."""
    _check(x.ndim == 2, f"dense: input must be 2-D [B,Fin], got shape {x.shape}")
    _check(w.ndim == 2, f"dense: weight must be 2-D [Fout,Fin], got shape {w.shape}")
    _check(x.shape[1] == w.shape[1],
           f"dense: input feature axis {x.shape[1]} != weight feature axis {w.shape[1]}")
    _check(b.shape == (w.shape[0],),
           f"dense: bias axis {b.shape} != weight out axis ({w.shape[0]},)")
    return x @ w.T + b


def dense_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check(grad_out.shape == (x.shape[0], w.shape[0]),
           f"dense backward: grad shape {grad_out.shape} != output shape {(x.shape[0], w.shape[0])}")
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# Softmax cross-entropy head
# ---------------------------------------------------------------------------

def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean NLL of a max-stabilized softmax; returns (loss, grad_logits, probs)."""
    _check(logits.ndim == 2, f"softmax: logits must be 2-D [B,C], got shape {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels)
    _check(labels.shape == (b,),
           f"softmax: labels axis {labels.shape} != batch axis ({b},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax: label out of range 0..{c - 1}: {labels[(labels < 0) | (labels >= c)][0]}")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    loss = float(-logp[np.arange(b), labels].mean())
    grad = probs.copy()
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    require_finite(grad, "softmax_cross_entropy gradient")
    return loss, grad, probs
