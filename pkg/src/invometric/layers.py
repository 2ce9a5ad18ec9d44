"""Layers with explicit forward and backward passes.

Each operation exists twice: as a pure function (``*_forward`` /
``*_backward``) and wrapped in a small stateful :class:`Layer` that caches
what its backward pass needs. Arrays keep the dtype they were built with, so
a float64 model is the finite-difference mirror of the float32 one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .exceptions import ConfigError, ShapeError
from .tensor import fold_patches, patch_grid

_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


# --------------------------------------------------------------------- GELU


def gelu_forward(x):
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    x = np.asarray(x)
    # ndtr(x) == (1 + erf(x / sqrt 2)) / 2, without cancellation for x << 0
    return x * special.ndtr(x)


def gelu_backward(x, upstream):
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if x.shape != upstream.shape:
        raise ShapeError(f"gelu_backward: {x.shape} vs upstream {upstream.shape}")
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return upstream * (special.ndtr(x) + x * pdf)


# --------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Per-channel affine parameters and tracked statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


def running_stat_weight(momentum: float, step: int | None) -> float:
    """Weight of the current batch in the running-statistics update.

    With a step count the update is the bias-corrected exponential average
    ``(1 - m) / (1 - m**step)``: the first batch replaces the initial values
    and later batches converge to the plain ``1 - m`` average. Without one
    (``None``) the plain weight is used.
    """
    if step is None:
        return 1.0 - momentum
    return (1.0 - momentum) / (1.0 - momentum**step)


def batchnorm_forward(x, state: BatchNormState, train: bool, update: bool = True,
                      step: int | None = None):
    """Normalize over every axis but the last.

    In train mode batch statistics are used (biased variance) and, when
    ``update`` is set, folded into the running averages; ``step`` is the
    1-based update count (see :func:`running_stat_weight`). Returns
    ``(y, cache)``.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update:
            w = running_stat_weight(state.momentum, step)
            state.running_mean[...] += w * (mean - state.running_mean)
            state.running_var[...] += w * (var - state.running_var)
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean) * inv_std
    y = state.gamma * xhat + state.beta
    return y, (xhat, inv_std, train)


def batchnorm_backward(upstream, state: BatchNormState, cache):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, train = cache
    axes = tuple(range(upstream.ndim - 1))
    grad_gamma = (upstream * xhat).sum(axis=axes)
    grad_beta = upstream.sum(axis=axes)
    g = upstream * state.gamma
    if not train:
        return g * inv_std, grad_gamma, grad_beta
    count = xhat.size // xhat.shape[-1]
    grad_x = (inv_std / count) * (
        count * g - g.sum(axis=axes) - xhat * (g * xhat).sum(axis=axes)
    )
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------- involution


@dataclass(frozen=True)
class InvolutionConfig:
    channels: int
    kernel_size: int = 3
    groups: int = 1
    bottleneck_channels: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.groups < 1 or self.channels % self.groups:
            raise ConfigError(
                f"channels ({self.channels}) must be divisible by groups ({self.groups})"
            )
        if self.bottleneck_channels < 1:
            raise ConfigError("bottleneck_channels must be >= 1")
        if self.stride != 1:
            raise ConfigError("only stride 1 is supported")

    @property
    def span_width(self):
        return self.kernel_size * self.kernel_size * self.groups


@dataclass
class InvolutionParams:
    """Meta-weights of the kernel generator: 1x1 reduce, batch norm, 1x1 span."""

    reduce_weights: np.ndarray  # (C, bottleneck)
    reduce_bias: np.ndarray  # (bottleneck,)
    norm: BatchNormState
    span_weights: np.ndarray  # (bottleneck, K*K*G)
    span_bias: np.ndarray  # (K*K*G,)


def involution_generate_kernels(x, cfg: InvolutionConfig, p: InvolutionParams, train=False,
                                update_stats=True, step=None):
    """Per-pixel kernels ``span(GELU(norm(reduce(x[i, j]))))``.

    ``x`` is ``(N, H, W, C)``; returns ``(kernels, cache)`` with kernels of
    shape ``(N, H, W, K, K, G)``.
    """
    if x.shape[-1] != cfg.channels:
        raise ShapeError(f"involution expects {cfg.channels} channels, got {x.shape[-1]}")
    reduced = x @ p.reduce_weights + p.reduce_bias
    normed, bn_cache = batchnorm_forward(reduced, p.norm, train, update=update_stats, step=step)
    act = gelu_forward(normed)
    flat = act @ p.span_weights + p.span_bias
    k = cfg.kernel_size
    kernels = flat.reshape(*x.shape[:-1], k, k, cfg.groups)
    return kernels, (x, bn_cache, normed, act)


def involution_generate_kernels_backward(grad_kernels, cfg: InvolutionConfig,
                                         p: InvolutionParams, cache):
    """Chain kernel gradients back to the input and every meta-weight.

    Returns ``(grad_x, grads)`` where ``grads`` maps parameter names to arrays.
    """
    x, bn_cache, normed, act = cache
    gflat = grad_kernels.reshape(*grad_kernels.shape[:3], cfg.span_width)
    c, b = p.reduce_weights.shape
    grads = {
        "span_weights": act.reshape(-1, b).T @ gflat.reshape(-1, cfg.span_width),
        "span_bias": gflat.reshape(-1, cfg.span_width).sum(axis=0),
    }
    g_act = gflat @ p.span_weights.T
    g_norm = gelu_backward(normed, g_act)
    g_red, grads["bn_gamma"], grads["bn_beta"] = batchnorm_backward(g_norm, p.norm, bn_cache)
    grads["reduce_weights"] = x.reshape(-1, c).T @ g_red.reshape(-1, b)
    grads["reduce_bias"] = g_red.reshape(-1, b).sum(axis=0)
    grad_x = g_red @ p.reduce_weights.T
    return grad_x, grads


def _check_involution_shapes(x, h, cfg):
    if x.ndim != 4 or h.ndim != 6:
        raise ShapeError(f"involution expects (N,H,W,C) and (N,H,W,K,K,G), got {x.shape}, {h.shape}")
    k, g = cfg.kernel_size, cfg.groups
    if x.shape[-1] != cfg.channels or h.shape != (*x.shape[:3], k, k, g):
        raise ShapeError(f"kernel shape {h.shape} inconsistent with input {x.shape} and {cfg}")


def involution_forward(x, h, cfg: InvolutionConfig, patches=None):
    """Apply per-pixel kernels: ``y[n,i,j,c] = sum_ab h[n,i,j,a,b,g(c)] * x[n,i+a-r,j+b-r,c]``.

    Channel ``c`` uses kernel group ``c // (C // G)``. Output spatial size
    matches the input (zero padding, stride 1).
    """
    x = np.asarray(x)
    h = np.asarray(h)
    single = x.ndim == 3
    if single:
        x, h = x[None], h[None]
    _check_involution_shapes(x, h, cfg)
    n, hh, ww, c = x.shape
    k, g = cfg.kernel_size, cfg.groups
    if patches is None:
        patches = patch_grid(x, k)
    pg = patches.reshape(n, hh, ww, k * k, g, c // g)
    y = np.einsum("nijtgc,nijtg->nijgc", pg, h.reshape(n, hh, ww, k * k, g), optimize=True)
    y = y.reshape(n, hh, ww, c)
    return y[0] if single else y


def involution_backward(x, h, cfg: InvolutionConfig, upstream, patches=None):
    """Return ``(grad_x, grad_h)`` of the bilinear involution map."""
    x = np.asarray(x)
    h = np.asarray(h)
    upstream = np.asarray(upstream)
    single = x.ndim == 3
    if single:
        x, h, upstream = x[None], h[None], upstream[None]
    _check_involution_shapes(x, h, cfg)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match input {x.shape}")
    n, hh, ww, c = x.shape
    k, g = cfg.kernel_size, cfg.groups
    if patches is None:
        patches = patch_grid(x, k)
    pg = patches.reshape(n, hh, ww, k * k, g, c // g)
    ug = upstream.reshape(n, hh, ww, g, c // g)
    grad_h = np.einsum("nijtgc,nijgc->nijtg", pg, ug, optimize=True).reshape(h.shape)
    hg = h.reshape(n, hh, ww, k * k, g)
    grad_p = hg[..., None] * ug[:, :, :, None, :, :]
    grad_x = fold_patches(grad_p, x.shape, k)
    if single:
        return grad_x[0], grad_h[0]
    return grad_x, grad_h


# -------------------------------------------------------------- convolution


def conv2d_forward(x, weights, bias, patches=None):
    """3-d cross-correlation with 'same' zero padding and stride 1.

    ``weights`` has shape ``(K, K, C_in, C_out)``.
    """
    x = np.asarray(x)
    k, _, cin, cout = weights.shape
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ShapeError(f"conv2d expects (N,H,W,{cin}) input, got {x.shape}")
    if patches is None:
        patches = patch_grid(x, k)
    rows = patches.reshape(-1, k * k * cin)
    y = rows @ weights.reshape(-1, cout) + bias
    return y.reshape(*x.shape[:3], cout)


def conv2d_backward(x, weights, upstream, patches=None, need_input_grad=True):
    """Return ``(grad_x, grad_weights, grad_bias)``; ``grad_x`` is None when skipped."""
    k, _, cin, cout = weights.shape
    if upstream.shape != (*x.shape[:3], cout):
        raise ShapeError(f"upstream {upstream.shape} inconsistent with input {x.shape}")
    if patches is None:
        patches = patch_grid(x, k)
    rows = patches.reshape(-1, k * k * cin)
    up = upstream.reshape(-1, cout)
    grad_w = (rows.T @ up).reshape(weights.shape)
    grad_b = up.sum(axis=0)
    grad_x = None
    if need_input_grad:
        grad_x = fold_patches(up @ weights.reshape(-1, cout).T, x.shape, k)
    return grad_x, grad_w, grad_b


# ----------------------------------------------------- pooling, dense, norm


def gap_forward(x):
    """Global average over the spatial axes: ``(N, H, W, C) -> (N, C)``."""
    return np.asarray(x).mean(axis=(-3, -2))


def gap_backward(shape, upstream):
    hh, ww = shape[-3], shape[-2]
    grad = upstream[..., None, None, :] / (hh * ww)
    return np.broadcast_to(grad, shape).copy()


def dense_forward(x, weights, bias):
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense expects {weights.shape[0]} features, got {x.shape[-1]}")
    return x @ weights + bias


def dense_backward(x, weights, upstream):
    """Return ``(grad_x, grad_weights, grad_bias)``."""
    x2 = x.reshape(-1, weights.shape[0])
    up2 = upstream.reshape(-1, weights.shape[1])
    return upstream @ weights.T, x2.T @ up2, up2.sum(axis=0)


def l2normalize_forward(x, eps=1e-12):
    norms = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)
    return x / norms, norms


def l2normalize_backward(y, norms, upstream):
    return (upstream - y * (y * upstream).sum(axis=-1, keepdims=True)) / norms


# ------------------------------------------------------------------ layers


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class. ``params`` are trainable; ``buffers`` are tracked state."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, upstream):
        raise NotImplementedError

    def state_arrays(self):
        """Every array that is counted and serialized, in a fixed order."""
        return list(self.params.items()) + list(self.buffers.items())

    def num_parameters(self):
        return sum(a.size for _, a in self.state_arrays())

    def output_shape(self, input_shape):
        return input_shape

    def zero_grad(self):
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}


class GELU(Layer):
    kind = "gelu"

    def forward(self, x, train=False):
        self._cache = x
        return gelu_forward(x)

    def backward(self, upstream):
        return gelu_backward(self._cache, upstream)


class Involution(Layer):
    """Involution with a reduce -> batch norm -> GELU -> span kernel generator."""

    kind = "involution"

    def __init__(self, cfg: InvolutionConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        c, b, s = cfg.channels, cfg.bottleneck_channels, cfg.span_width
        self.params = {
            "reduce_weights": glorot_uniform(rng, (c, b), c, b, dtype),
            "reduce_bias": np.zeros(b, dtype),
            "bn_gamma": np.ones(b, dtype),
            "bn_beta": np.zeros(b, dtype),
            "span_weights": glorot_uniform(rng, (b, s), b, s, dtype),
            "span_bias": np.zeros(s, dtype),
        }
        self.buffers = {
            "bn_running_mean": np.zeros(b, dtype),
            "bn_running_var": np.ones(b, dtype),
        }
        self.update_stats = True
        # running-statistics updates so far; None means plain EMA (e.g. after loading)
        self.stat_updates: int | None = 0
        self.last_kernels = None

    @property
    def meta(self) -> InvolutionParams:
        p, bf = self.params, self.buffers
        # BatchNormState shares storage with params/buffers, so running-stat
        # updates land in self.buffers.
        norm = BatchNormState(p["bn_gamma"], p["bn_beta"], bf["bn_running_mean"], bf["bn_running_var"])
        return InvolutionParams(p["reduce_weights"], p["reduce_bias"], norm,
                                p["span_weights"], p["span_bias"])

    def forward(self, x, train=False):
        meta = self.meta
        update = train and self.update_stats
        step = None
        if update and self.stat_updates is not None:
            self.stat_updates += 1
            step = self.stat_updates
        kernels, gen_cache = involution_generate_kernels(
            x, self.cfg, meta, train=train, update_stats=update, step=step
        )
        patches = patch_grid(x, self.cfg.kernel_size)
        self._cache = (x, kernels, patches, gen_cache, meta)
        self.last_kernels = kernels
        return involution_forward(x, kernels, self.cfg, patches=patches)

    def backward(self, upstream):
        x, kernels, patches, gen_cache, meta = self._cache
        gx_direct, gk = involution_backward(x, kernels, self.cfg, upstream, patches=patches)
        gx_gen, grads = involution_generate_kernels_backward(gk, self.cfg, meta, gen_cache)
        self.grads = grads
        return gx_direct + gx_gen


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_channels, filters, rng, kernel_size=3, dtype=np.float32,
                 need_input_grad=True):
        super().__init__()
        k = kernel_size
        self.params = {
            "weights": glorot_uniform(rng, (k, k, in_channels, filters),
                                      k * k * in_channels, k * k * filters, dtype),
            "bias": np.zeros(filters, dtype),
        }
        self.need_input_grad = need_input_grad

    def output_shape(self, input_shape):
        return (*input_shape[:-1], self.params["weights"].shape[-1])

    def forward(self, x, train=False):
        w = self.params["weights"]
        patches = patch_grid(x, w.shape[0])
        self._cache = (x, patches) if train else None
        return conv2d_forward(x, w, self.params["bias"], patches=patches)

    def backward(self, upstream):
        x, patches = self._cache
        gx, gw, gb = conv2d_backward(x, self.params["weights"], upstream, patches=patches,
                                     need_input_grad=self.need_input_grad)
        self.grads = {"weights": gw, "bias": gb}
        return gx


class GlobalAveragePool(Layer):
    kind = "gap"

    def output_shape(self, input_shape):
        return (input_shape[-1],)

    def forward(self, x, train=False):
        self._cache = x.shape
        return gap_forward(x)

    def backward(self, upstream):
        return gap_backward(self._cache, upstream)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        super().__init__()
        self.params = {
            "weights": glorot_uniform(rng, (in_features, out_features), in_features, out_features, dtype),
            "bias": np.zeros(out_features, dtype),
        }

    def output_shape(self, input_shape):
        return (self.params["weights"].shape[1],)

    def forward(self, x, train=False):
        self._cache = x
        return dense_forward(x, self.params["weights"], self.params["bias"])

    def backward(self, upstream):
        gx, gw, gb = dense_backward(self._cache, self.params["weights"], upstream)
        self.grads = {"weights": gw, "bias": gb}
        return gx


class L2Normalize(Layer):
    kind = "l2normalize"

    def forward(self, x, train=False):
        y, norms = l2normalize_forward(x)
        self._cache = (y, norms)
        return y

    def backward(self, upstream):
        y, norms = self._cache
        return l2normalize_backward(y, norms, upstream)
