"""Dense float32 tensor kernels with analytic backpropagation.

Implements the small set of primitives the spectral networks need:

* ``conv1d`` / ``tconv1d`` along the spectral axis (channels-first,
  ``(batch, channels, length)``),
* ``conv2d`` for the spatial merge stage (``(batch, channels, h, w)``),
* ``relu``, ``residual-add``, ``concat`` (channel axis) and
  ``elementwise-product`` (with numpy broadcasting),
* mean-squared-error loss and the Adam optimizer.

Every forward call returns a cache that the matching backward call
consumes; gradients are exact (they are checked against central finite
differences in the test suite).  All functions are pure: arrays are
never mutated in place, so concurrent use on shared inputs is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .errors import NonFiniteGradientError, ShapeError

LAYER_KINDS = (
    "conv1d",
    "tconv1d",
    "conv2d",
    "relu",
    "residual-add",
    "concat",
    "elementwise-product",
)

#: Layer kinds that carry a weight (and optionally bias) tensor.
PARAMETRIC_KINDS = ("conv1d", "tconv1d", "conv2d")

ArrayOrPair = Union[np.ndarray, tuple]


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer.

    ``padding`` is symmetric zero padding.  For ``tconv1d`` the raw output
    length is ``stride*(L-1) + kernel_size - 2*padding``; ``crop`` then
    removes ``(left, right)`` trailing samples explicitly, because odd
    length adjustments cannot be expressed by symmetric padding alone.
    """

    kind: str
    kernel_size: int = 1
    stride: int = 1
    in_channels: int = 0
    out_channels: int = 0
    padding: int = 0
    has_bias: bool = True
    crop: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.kernel_size < 1:
            raise ShapeError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.kind == "tconv1d" and self.padding > self.kernel_size - 1:
            raise ShapeError(
                f"tconv1d padding must be <= kernel_size-1, got padding={self.padding} k={self.kernel_size}"
            )
        if min(self.crop) < 0:
            raise ShapeError(f"crop must be nonnegative, got {self.crop}")

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC_KINDS

    def out_length(self, in_length: int) -> int:
        """Output length of a 1D layer applied to ``in_length`` samples."""
        if self.kind == "conv1d":
            n = in_length + 2 * self.padding - self.kernel_size
            if n < 0:
                raise ShapeError(
                    f"conv1d kernel {self.kernel_size} does not fit input length {in_length} "
                    f"with padding {self.padding}"
                )
            return n // self.stride + 1
        if self.kind == "tconv1d":
            raw = self.stride * (in_length - 1) + self.kernel_size - 2 * self.padding
            out = raw - self.crop[0] - self.crop[1]
            if out < 1:
                raise ShapeError(f"tconv1d crop {self.crop} leaves no output (raw length {raw})")
            return out
        return in_length

    def weight_shape(self) -> tuple:
        if self.kind == "conv1d":
            return (self.out_channels, self.in_channels, self.kernel_size)
        if self.kind == "tconv1d":
            return (self.in_channels, self.out_channels, self.kernel_size)
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        raise ShapeError(f"{self.kind} has no parameters")


@dataclass
class FwdCache:
    """Opaque forward cache consumed by :func:`backward`."""

    layer: LayerSpec
    out_shape: tuple
    data: tuple = field(repr=False, default=())


def _f32(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float32))


def _check_axis(name: str, got, expected, shape):
    if got != expected:
        raise ShapeError(f"{name}: expected {expected} on channel axis 1, got {got} (input shape {tuple(shape)})")


# ---------------------------------------------------------------------------
# 1D convolution core (also drives tconv1d through dilation + kernel flip)
# ---------------------------------------------------------------------------

def _gather1d(xp: np.ndarray, k_size: int, stride: int, l_out: int) -> np.ndarray:
    """Stack sliding windows of a padded input into (B, C, L_out, K)."""
    b, c, _ = xp.shape
    cols = np.empty((b, c, l_out, k_size), dtype=xp.dtype)
    for k in range(k_size):
        cols[:, :, :, k] = xp[:, :, k : k + stride * l_out : stride]
    return cols


def _scatter1d(dcols: np.ndarray, padded_len: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_gather1d`: accumulate window gradients."""
    b, c, l_out, k_size = dcols.shape
    dxp = np.zeros((b, c, padded_len), dtype=dcols.dtype)
    for k in range(k_size):
        dxp[:, :, k : k + stride * l_out : stride] += dcols[:, :, :, k]
    return dxp


def _conv1d_fwd(x, w, b, stride, padding):
    # Contractions use explicit 2D matmuls with the (batch, position) axis on
    # rows: identical rows then produce bit-identical outputs, which einsum's
    # optimized paths do not guarantee for skinny shapes.
    batch, c_in, length = x.shape
    c_out, _, k = w.shape
    l_out = (length + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    cols = _gather1d(xp, k, stride, l_out)
    cols_mat = cols.transpose(0, 2, 1, 3).reshape(batch * l_out, c_in * k)
    y = (cols_mat @ w.reshape(c_out, c_in * k).T).reshape(batch, l_out, c_out)
    y = np.ascontiguousarray(y.transpose(0, 2, 1))
    if b is not None:
        y += b[None, :, None]
    return y, (cols_mat, xp.shape[2], length, l_out)


def _conv1d_bwd(gy, w, cols_mat, padded_len, length, l_out, stride, padding, want_bias):
    batch, c_out, _ = gy.shape
    c_in_k = cols_mat.shape[1]
    gy_mat = gy.transpose(0, 2, 1).reshape(batch * l_out, c_out)
    dw = (gy_mat.T @ cols_mat).reshape(w.shape)
    db = gy.sum(axis=(0, 2)) if want_bias else None
    dcols = (gy_mat @ w.reshape(c_out, c_in_k)).reshape(batch, l_out, w.shape[1], w.shape[2])
    dxp = _scatter1d(dcols.transpose(0, 2, 1, 3), padded_len, stride)
    dx = dxp[:, :, padding : padding + length] if padding else dxp
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# 2D convolution core
# ---------------------------------------------------------------------------

def _gather2d(xp, k, stride, h_out, w_out):
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, h_out, w_out, k, k), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, :, i, j] = xp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    return cols


def _scatter2d(dcols, padded_h, padded_w, stride):
    b, c, h_out, w_out, k, _ = dcols.shape
    dxp = np.zeros((b, c, padded_h, padded_w), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += dcols[:, :, :, :, i, j]
    return dxp


# ---------------------------------------------------------------------------
# Public forward / backward dispatch
# ---------------------------------------------------------------------------

def forward(layer: LayerSpec, x: ArrayOrPair, params: tuple | None = None):
    """Run one layer forward.

    ``x`` is a single array, or a pair of arrays for the binary kinds
    (``residual-add``, ``concat``, ``elementwise-product``).  ``params``
    is ``(weight, bias)`` for parametric kinds (bias ``None`` when
    ``has_bias`` is false) and must be ``None`` otherwise.

    Returns ``(output, cache)``.
    """
    if layer.parametric:
        if params is None:
            raise ShapeError(f"{layer.kind} requires (weight, bias) params")
        w = _f32(params[0])
        bias = _f32(params[1]) if (layer.has_bias and params[1] is not None) else None
        if w.shape != layer.weight_shape():
            raise ShapeError(f"{layer.kind}: weight shape {w.shape} != expected {layer.weight_shape()}")
        if layer.has_bias and bias is not None and bias.shape != (layer.out_channels,):
            raise ShapeError(f"{layer.kind}: bias shape {bias.shape} != ({layer.out_channels},)")
    elif params is not None:
        raise ShapeError(f"{layer.kind} takes no params")

    if layer.kind == "conv1d":
        x = _f32(x)
        if x.ndim != 3:
            raise ShapeError(f"conv1d expects (batch, channels, length), got shape {x.shape}")
        _check_axis("conv1d", x.shape[1], layer.in_channels, x.shape)
        layer.out_length(x.shape[2])  # validates fit
        y, (cols_mat, padded_len, length, l_out) = _conv1d_fwd(x, w, bias, layer.stride, layer.padding)
        cache = FwdCache(layer, y.shape, (cols_mat, padded_len, length, l_out, w))
        return y, cache

    if layer.kind == "tconv1d":
        x = _f32(x)
        if x.ndim != 3:
            raise ShapeError(f"tconv1d expects (batch, channels, length), got shape {x.shape}")
        _check_axis("tconv1d", x.shape[1], layer.in_channels, x.shape)
        batch, _, length = x.shape
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        dilated_len = s * (length - 1) + 1
        xd = np.zeros((batch, layer.in_channels, dilated_len), dtype=np.float32)
        xd[:, :, ::s] = x
        w_flip = np.ascontiguousarray(w[:, :, ::-1].transpose(1, 0, 2))
        y_full, (cols_mat, padded_len, _, raw_len) = _conv1d_fwd(xd, w_flip, None, 1, k - 1 - p)
        cl, cr = layer.crop
        if cl + cr >= raw_len:
            raise ShapeError(f"tconv1d crop {layer.crop} leaves no output (raw length {raw_len})")
        y = y_full[:, :, cl : raw_len - cr]
        if bias is not None:
            y = y + bias[None, :, None]
        cache = FwdCache(layer, y.shape, (cols_mat, padded_len, dilated_len, w_flip, raw_len, length))
        return np.ascontiguousarray(y), cache

    if layer.kind == "conv2d":
        x = _f32(x)
        if x.ndim != 4:
            raise ShapeError(f"conv2d expects (batch, channels, h, w), got shape {x.shape}")
        _check_axis("conv2d", x.shape[1], layer.in_channels, x.shape)
        batch, _, h, wd = x.shape
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        if h + 2 * p < k or wd + 2 * p < k:
            raise ShapeError(f"conv2d kernel {k} does not fit input {h}x{wd} with padding {p}")
        h_out = (h + 2 * p - k) // s + 1
        w_out = (wd + 2 * p - k) // s + 1
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = _gather2d(xp, k, s, h_out, w_out)
        c_in = layer.in_channels
        cols_mat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(batch * h_out * w_out, c_in * k * k)
        y = (cols_mat @ w.reshape(layer.out_channels, -1).T).reshape(batch, h_out, w_out, -1)
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
        if bias is not None:
            y += bias[None, :, None, None]
        cache = FwdCache(layer, y.shape, (cols_mat, xp.shape[2], xp.shape[3], (h, wd), (h_out, w_out), w))
        return y, cache

    if layer.kind == "relu":
        x = _f32(x)
        y = np.maximum(x, 0.0)
        return y, FwdCache(layer, y.shape, (x > 0,))

    if layer.kind in ("residual-add", "concat", "elementwise-product"):
        if not (isinstance(x, tuple) and len(x) == 2):
            raise ShapeError(f"{layer.kind} expects a pair of inputs")
        a, b = _f32(x[0]), _f32(x[1])
        if layer.kind == "residual-add":
            if a.shape != b.shape:
                raise ShapeError(f"residual-add: shapes {a.shape} and {b.shape} differ")
            y = a + b
            return y, FwdCache(layer, y.shape, ())
        if layer.kind == "concat":
            if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
                raise ShapeError(f"concat: shapes {a.shape} and {b.shape} differ outside channel axis")
            y = np.concatenate([a, b], axis=1)
            return y, FwdCache(layer, y.shape, (a.shape[1],))
        try:
            y = a * b
        except ValueError as exc:
            raise ShapeError(f"elementwise-product: shapes {a.shape} and {b.shape} do not broadcast") from exc
        return y, FwdCache(layer, y.shape, (a, b))

    raise ShapeError(f"unknown layer kind {layer.kind!r}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(layer: LayerSpec, grad_out: np.ndarray, cache: FwdCache):
    """Backpropagate through one layer.

    Returns ``(grad_in, grad_params)`` where ``grad_in`` mirrors the
    forward input structure and ``grad_params`` is ``(grad_w, grad_b)``
    for parametric kinds, ``None`` otherwise.
    """
    if not isinstance(cache, FwdCache) or cache.layer != layer:
        raise ShapeError(f"cache does not belong to this {layer.kind} layer (stale or mismatched cache)")
    gy = _f32(grad_out)
    if gy.shape != cache.out_shape:
        raise ShapeError(f"grad_out shape {gy.shape} != forward output shape {cache.out_shape}")

    if layer.kind == "conv1d":
        cols_mat, padded_len, length, l_out, w = cache.data
        dx, dw, db = _conv1d_bwd(gy, w, cols_mat, padded_len, length, l_out,
                                 layer.stride, layer.padding, layer.has_bias)
        return dx, (dw, db)

    if layer.kind == "tconv1d":
        cols_mat, padded_len, dilated_len, w_flip, raw_len, length = cache.data
        cl, cr = layer.crop
        gy_full = np.zeros((gy.shape[0], gy.shape[1], raw_len), dtype=np.float32)
        gy_full[:, :, cl : raw_len - cr] = gy
        dxd, dwf, _ = _conv1d_bwd(
            gy_full, w_flip, cols_mat, padded_len, dilated_len, raw_len, 1,
            layer.kernel_size - 1 - layer.padding, False
        )
        dx = np.ascontiguousarray(dxd[:, :, :: layer.stride])
        dw = np.ascontiguousarray(dwf[:, :, ::-1].transpose(1, 0, 2))
        db = gy.sum(axis=(0, 2)) if layer.has_bias else None
        return dx, (dw, db)

    if layer.kind == "conv2d":
        cols_mat, padded_h, padded_w, (h, wd), (h_out, w_out), w = cache.data
        batch, c_out = gy.shape[0], gy.shape[1]
        k, c_in = layer.kernel_size, layer.in_channels
        gy_mat = gy.transpose(0, 2, 3, 1).reshape(batch * h_out * w_out, c_out)
        dw = (gy_mat.T @ cols_mat).reshape(w.shape)
        db = gy.sum(axis=(0, 2, 3)) if layer.has_bias else None
        dcols = (gy_mat @ w.reshape(c_out, -1)).reshape(batch, h_out, w_out, c_in, k, k)
        dxp = _scatter2d(dcols.transpose(0, 3, 1, 2, 4, 5), padded_h, padded_w, layer.stride)
        p = layer.padding
        dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        return np.ascontiguousarray(dx), (dw, db)

    if layer.kind == "relu":
        (mask,) = cache.data
        return gy * mask, None

    if layer.kind == "residual-add":
        return (gy, gy.copy()), None

    if layer.kind == "concat":
        (split,) = cache.data
        return (np.ascontiguousarray(gy[:, :split]), np.ascontiguousarray(gy[:, split:])), None

    if layer.kind == "elementwise-product":
        a, b = cache.data
        ga = _unbroadcast(gy * b, a.shape).astype(np.float32)
        gb = _unbroadcast(gy * a, b.shape).astype(np.float32)
        return (ga, gb), None

    raise ShapeError(f"unknown layer kind {layer.kind!r}")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def l2_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``.

    ``loss = mean((pred - target)**2)``, ``grad = 2*(pred - target)/N``.
    """
    pred = _f32(pred)
    target = _f32(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l2_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(np.float32)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments keyed by parameter name.  One training loop owns it."""

    step: int
    m: dict
    v: dict
    lr: float
    beta1: float
    beta2: float
    epsilon: float


def init_adam(values: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    if lr <= 0:
        raise ShapeError(f"learning rate must be positive, got {lr}")
    zeros = {k: np.zeros_like(np.asarray(v, dtype=np.float32)) for k, v in values.items()}
    return AdamState(step=0, m=zeros, v={k: z.copy() for k, z in zeros.items()},
                     lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(values: dict, grads: dict, state: AdamState, frozen: frozenset | set = frozenset()):
    """One bias-corrected Adam update.

    Entries named in ``frozen`` are skipped entirely (values and moments
    untouched).  Non-finite gradients reject the whole step: the inputs
    are never mutated and no partially-updated state can escape.

    Returns ``(new_values, new_state)``.
    """
    for name in values:
        if name in frozen:
            continue
        if name not in grads:
            raise ShapeError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != values[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {values[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}; step rejected")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    new_values, new_m, new_v = {}, {}, {}
    for name, theta in values.items():
        if name in frozen:
            new_values[name] = theta.copy()
            new_m[name] = state.m[name].copy()
            new_v[name] = state.v[name].copy()
            continue
        g = np.asarray(grads[name], dtype=np.float32)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / np.float32(bias1)
        v_hat = v / np.float32(bias2)
        new_values[name] = (theta - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(np.float32)
        new_m[name] = m
        new_v[name] = v
    return new_values, replace(state, step=t, m=new_m, v=new_v)
