"""Dense-matrix kernels with exact analytic backward passes.

Everything is built on 2-D (or 1-D for biases, 0-D for scalars) numpy
arrays wrapped in a minimal reverse-mode tape. Production paths run in
float32; gradient verification re-runs the same ops in float64 (ops are
dtype-generic and never upcast silently). All ops are pure given explicit
RNG state, so concurrent read-only use is safe.
"""

import contextlib
import math

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / numeric evals)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Array node on the autodiff tape.

    `data` is the forward value, `grad` the accumulated adjoint (allocated
    lazily). Backward closures receive the node's output adjoint and add
    into each parent's grad via `_accumulate`; they always hand over freshly
    allocated arrays, so first assignment needs no defensive copy.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.item())

    def backward(self):
        """Reverse-mode sweep from this scalar node."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Named learnable leaf; `grad` is zeroed between optimizer steps."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(np.asarray(value), requires_grad=True)
        self.name = name

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _tracking(*tensors) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g).reshape(shape)


def as_tensor(data, dtype=None) -> Tensor:
    """Wrap raw data as a non-learnable leaf."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """out = a @ b; backward: da = g @ b.T, db = a.T @ g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data
    if not _tracking(a, b):
        return Tensor(out_data)
    ad, bd = a.data, b.data

    def backward(g):
        _accumulate(a, g @ bd.T)
        _accumulate(b, ad.T @ g)

    return Tensor(out_data, True, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (bias rows, scalars)."""
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add shapes incompatible: {a.data.shape} + {b.data.shape}") from exc
    if not _tracking(a, b):
        return Tensor(out_data)

    def backward(g):
        da = _unbroadcast(g, a.data.shape)
        db = _unbroadcast(g, b.data.shape)
        if db is g and da is g:
            db = g.copy()  # never alias one buffer into two parents
        _accumulate(a, da)
        _accumulate(b, db)

    return Tensor(out_data, True, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting (scalar fusion weights)."""
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul shapes incompatible: {a.data.shape} * {b.data.shape}") from exc
    if not _tracking(a, b):
        return Tensor(out_data)
    ad, bd = a.data, b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * bd, ad.shape))
        _accumulate(b, _unbroadcast(g * ad, bd.shape))

    return Tensor(out_data, True, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """out = c * a for a plain python constant c."""
    out_data = a.data * a.data.dtype.type(c)
    if not _tracking(a):
        return Tensor(out_data)

    def backward(g):
        _accumulate(a, g * a.data.dtype.type(c))

    return Tensor(out_data, True, (a,), backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)
    if not _tracking(x):
        return Tensor(out_data)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return Tensor(out_data, True, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate).

    Inference (or rate 0) is the exact identity: the input tensor is
    returned unchanged with mask None.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ConfigError("dropout in training mode needs an RNG")
    keep = rng.random(x.data.shape) >= rate
    mask = keep.astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)
    out_data = x.data * mask
    if not _tracking(x):
        return Tensor(out_data), mask

    def backward(g):
        _accumulate(x, g * mask)

    return Tensor(out_data, True, (x,), backward), mask


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stable under row-max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)
    if not _tracking(x):
        return Tensor(out_data)

    def backward(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(x, out_data * (g - inner))

    return Tensor(out_data, True, (x,), backward)


def temporal_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel with mean/variance taken over the full time axis.

    Only valid on acausal paths: the statistics read the whole sequence.
    Population variance; eps fixed at 1e-5.
    """
    T, C = x.data.shape
    if T < 2:
        raise ShapeError(f"temporal_norm needs T >= 2, got T={T}")
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data
    if not _tracking(x, gain, bias):
        return Tensor(out_data)
    gd = gain.data

    def backward(g):
        _accumulate(gain, (g * xhat).sum(axis=0))
        _accumulate(bias, g.sum(axis=0))
        dxhat = g * gd
        term = dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)
        _accumulate(x, inv * term)

    return Tensor(out_data, True, (x, gain, bias), backward)


def _conv_padding(kernel: int, dilation: int, mode: str) -> tuple[int, int]:
    if dilation < 1 or kernel < 1:
        raise ConfigError(f"conv needs kernel >= 1 and dilation >= 1, got K={kernel}, d={dilation}")
    if mode == "causal":
        return (kernel - 1) * dilation, 0
    if mode == "symmetric":
        if kernel % 2 == 0:
            raise ConfigError(f"symmetric conv needs odd kernel, got K={kernel}")
        half = (kernel // 2) * dilation
        return half, half
    raise ConfigError(f"unknown conv mode {mode!r}")


def dilated_conv1d(x: Tensor, w: Tensor, b: Tensor, dilation: int, mode: str) -> Tensor:
    """1-D dilated convolution over the time axis with zero padding.

    x: (T, Cin), w: (K, Cin, Cout), b: (Cout,).
    causal:     y_t = b + sum_k w_k . x[t - (K-1-k)*d]   (taps at or before t)
    symmetric:  y_t = b + sum_k w_k . x[t + (k - K//2)*d]
    Realized as an im2col gather plus one GEMM.
    """
    if x.data.ndim != 2 or w.data.ndim != 3 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv shapes incompatible: x {x.data.shape}, w {w.data.shape}")
    T, cin = x.data.shape
    K, _, cout = w.data.shape
    pad_top, pad_bot = _conv_padding(K, dilation, mode)
    xp = np.zeros((T + pad_top + pad_bot, cin), dtype=x.data.dtype)
    xp[pad_top:pad_top + T] = x.data
    patches = np.empty((T, K, cin), dtype=x.data.dtype)
    for k in range(K):
        patches[:, k, :] = xp[k * dilation:k * dilation + T]
    pmat = patches.reshape(T, K * cin)
    wmat = w.data.reshape(K * cin, cout)
    out_data = pmat @ wmat + b.data
    if not _tracking(x, w, b):
        return Tensor(out_data)

    def backward(g):
        _accumulate(b, g.sum(axis=0))
        _accumulate(w, (pmat.T @ g).reshape(K, cin, cout))
        if x.requires_grad:
            dpatches = (g @ wmat.T).reshape(T, K, cin)
            dxp = np.zeros_like(xp)
            for k in range(K):
                dxp[k * dilation:k * dilation + T] += dpatches[:, k, :]
            _accumulate(x, dxp[pad_top:pad_top + T].copy())

    return Tensor(out_data, True, (x, w, b), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """[a | b] along the channel axis."""
    if a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat row mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = np.concatenate([a.data, b.data], axis=1)
    if not _tracking(a, b):
        return Tensor(out_data)
    ca = a.data.shape[1]

    def backward(g):
        _accumulate(a, g[:, :ca].copy())
        _accumulate(b, g[:, ca:].copy())

    return Tensor(out_data, True, (a, b), backward)


def finite_diff_check(f, params, eps: float = 1e-4) -> float:
    """Worst relative error between analytic gradients and central differences.

    `f` must be a deterministic closure returning a scalar Tensor (dropout
    off or frozen); run it in float64. Every element of every parameter is
    perturbed by +-eps. Relative error uses |a - n| / (|a| + |n| + 1e-4) so
    near-zero gradients are judged on absolute error.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_diff_check: loss is non-finite at the base point")
    loss.backward()
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            ga = analytic[p.name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = f().item()
                flat[i] = orig - eps
                f_minus = f().item()
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(f"finite_diff_check: non-finite loss perturbing {p.name}[{i}]")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                rel = abs(ga[i] - numeric) / (abs(ga[i]) + abs(numeric) + 1e-4)
                if rel > worst:
                    worst = rel
    return worst
