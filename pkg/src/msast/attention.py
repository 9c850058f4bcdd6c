"""Single-head sliding-window attention in causal and acausal forms.

The window grows with depth on a per-kernel schedule: width 1 in the first
layer, then (k-1) * 2^(l-2) in layer l, which doubles per layer and lands
on 512 (k=3), 1024 (k=5) and 4096 (k=17) at layer 10.

`sliding_window_attention` picks between a banded gather kernel (narrow
windows) and a dense masked kernel (wide windows). Both are numerically
interchangeable with `dense_masked_attention_reference`, the literal O(T^2)
oracle kept for tests.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, ShapeError
from .numerics import Tensor, _accumulate, _tracking

NEG_INF = float("-inf")


def window_schedule(kernel_size: int, layer_index: int) -> int:
    """Attention window width for a conv kernel size at a 1-based layer index."""
    if layer_index < 1:
        raise ConfigError(f"layer_index must be >= 1, got {layer_index}")
    if kernel_size < 2:
        raise ConfigError(f"no window schedule for kernel size {kernel_size}")
    if layer_index == 1:
        return 1
    return (kernel_size - 1) * (1 << (layer_index - 2))


@dataclass(frozen=True)
class WindowSpec:
    """Window geometry for one attention call.

    kernel_size/layer_index document where the window came from; when both
    are set the width must agree with `window_schedule`. Tests may pin
    `window_size` directly and leave them None.
    """

    window_size: int
    causal: bool
    kernel_size: int | None = None
    layer_index: int | None = None

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.kernel_size is not None and self.layer_index is not None:
            expect = window_schedule(self.kernel_size, self.layer_index)
            if self.window_size != expect:
                raise ConfigError(
                    f"window_size {self.window_size} does not match schedule "
                    f"{expect} for kernel {self.kernel_size} layer {self.layer_index}"
                )

    @classmethod
    def from_schedule(cls, kernel_size: int, layer_index: int, causal: bool) -> "WindowSpec":
        return cls(
            window_size=window_schedule(kernel_size, layer_index),
            causal=causal,
            kernel_size=kernel_size,
            layer_index=layer_index,
        )


def attention_mask(T: int, window: int, causal: bool) -> np.ndarray:
    """Boolean T x T mask; row t marks the positions t may attend to."""
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    pos = np.arange(T)
    rel = pos[None, :] - pos[:, None]
    if causal:
        return (rel <= 0) & (rel > -window)
    half = window // 2
    return np.abs(rel) <= half


def _band_extent(T: int, window: int, causal: bool) -> tuple[int, int]:
    """(left, right) reach of the band, clipped to the sequence."""
    if causal:
        return min(window - 1, T - 1), 0
    half = window // 2
    return min(half, T - 1), min(half, T - 1)


def _softmax_rows_masked(scores: np.ndarray) -> np.ndarray:
    """Stable row softmax where masked entries are already -inf."""
    z = scores - scores.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def sliding_window_attention(q: Tensor, k: Tensor, v: Tensor, spec: WindowSpec) -> Tensor:
    """Scaled dot-product attention restricted to a sliding window.

    out_t = sum over admissible t' of softmax(q_t . k_t' / sqrt(C)) v_t'.
    Causal windows cover [t-w+1, t]; acausal windows are centered, covering
    |t - t'| <= w // 2.
    """
    if q.data.shape != k.data.shape or q.data.shape != v.data.shape:
        raise ShapeError(
            f"attention operands must share a shape: q {q.data.shape}, "
            f"k {k.data.shape}, v {v.data.shape}"
        )
    if q.data.ndim != 2 or q.data.shape[1] < 1:
        raise ShapeError(f"attention needs a T x C matrix, got {q.data.shape}")
    T, C = q.data.shape
    left, right = _band_extent(T, spec.window_size, spec.causal)
    width = left + right + 1
    if 2 * width >= T:
        return _dense_attention(q, k, v, left, right)
    return _banded_attention(q, k, v, left, right)


def _dense_attention(q: Tensor, k: Tensor, v: Tensor, left: int, right: int) -> Tensor:
    T, C = q.data.shape
    inv_sqrt = q.data.dtype.type(1.0 / math.sqrt(C))
    pos = np.arange(T)
    rel = pos[None, :] - pos[:, None]
    admissible = (rel <= right) & (rel >= -left)
    scores = (q.data @ k.data.T) * inv_sqrt
    scores[~admissible] = NEG_INF
    probs = _softmax_rows_masked(scores)
    out_data = probs @ v.data
    if not _tracking(q, k, v):
        return Tensor(out_data)

    def backward(g):
        dp = g @ v.data.T
        _accumulate(v, probs.T @ g)
        ds = probs * (dp - (dp * probs).sum(axis=1, keepdims=True))
        _accumulate(q, (ds @ k.data) * inv_sqrt)
        _accumulate(k, (ds.T @ q.data) * inv_sqrt)

    return Tensor(out_data, True, (q, k, v), backward)


def _banded_attention(q: Tensor, k: Tensor, v: Tensor, left: int, right: int) -> Tensor:
    """Gather kernel: O(T * width * C) instead of O(T^2 * C).

    Keys/values are zero-padded by the band reach so that column j of the
    band addresses source position t + j - left; out-of-range positions are
    masked to -inf before the softmax and their scatter contributions land
    in the padding, which is sliced away.
    """
    T, C = q.data.shape
    width = left + right + 1
    inv_sqrt = q.data.dtype.type(1.0 / math.sqrt(C))
    kp = np.zeros((T + left + right, C), dtype=k.data.dtype)
    kp[left:left + T] = k.data
    vp = np.zeros_like(kp)
    vp[left:left + T] = v.data
    row, col = kp.strides
    kband = as_strided(kp, shape=(T, width, C), strides=(row, row, col))
    vband = as_strided(vp, shape=(T, width, C), strides=(row, row, col))
    src = np.arange(T)[:, None] + np.arange(width)[None, :] - left
    valid = (src >= 0) & (src < T)
    scores = np.matmul(kband, q.data[:, :, None])[:, :, 0] * inv_sqrt
    scores[~valid] = NEG_INF
    probs = _softmax_rows_masked(scores)
    out_data = np.matmul(probs[:, None, :], vband)[:, 0, :]
    if not _tracking(q, k, v):
        return Tensor(out_data)

    def backward(g):
        dp = np.matmul(vband, g[:, :, None])[:, :, 0]
        ds = probs * (dp - (dp * probs).sum(axis=1, keepdims=True))
        _accumulate(q, np.matmul(ds[:, None, :], kband)[:, 0, :] * inv_sqrt)
        dkp = np.zeros_like(kp)
        dvp = np.zeros_like(vp)
        # one big outer product each, then width strided adds into the pads
        qs = q.data * inv_sqrt
        dkband = ds[:, :, None] * qs[:, None, :]
        dvband = probs[:, :, None] * g[:, None, :]
        for j in range(width):
            dkp[j:j + T] += dkband[:, j]
            dvp[j:j + T] += dvband[:, j]
        _accumulate(k, dkp[left:left + T].copy())
        _accumulate(v, dvp[left:left + T].copy())

    return Tensor(out_data, True, (q, k, v), backward)


def dense_masked_attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                                     mask: np.ndarray) -> np.ndarray:
    """Literal masked attention over an explicit boolean mask. Test oracle only."""
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    mask = np.asarray(mask, dtype=bool)
    T, C = q.shape
    if mask.shape != (T, T):
        raise ShapeError(f"mask shape {mask.shape} does not match T={T}")
    empty = ~mask.any(axis=1)
    if empty.any():
        raise ValueError(f"mask row {int(np.flatnonzero(empty)[0])} has no admissible positions")
    scores = (q @ k.T) / math.sqrt(C)
    scores = np.where(mask, scores, NEG_INF)
    probs = _softmax_rows_masked(scores.astype(q.dtype))
    return probs @ v
