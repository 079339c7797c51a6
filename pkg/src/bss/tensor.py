"""NCHW primitives the attention and fusion operators are assembled from.

Tensors are plain numpy arrays of shape (N, C, H, W). Storage is float32;
every reduction is carried out in float64 and the result is cast back to the
input dtype, so float64 inputs (used by the gradient checks) stay float64
end to end.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError

__all__ = [
    "as_tensor",
    "global_avg_pool",
    "group_norm",
    "group_norm_backward",
    "shuffle_permutation",
    "channel_shuffle",
    "channel_shuffle_backward",
    "resample",
    "pointwise_conv",
    "pointwise_conv_backward",
    "sigmoid",
    "sigmoid_map",
    "silu_map",
]


def as_tensor(x, name="x"):
    """Validate a rank-4 finite feature map and return it as an ndarray."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (N, C, H, W), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: all dims must be >= 1, got {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise ShapeError(f"{name}: contains NaN or Inf")
    return x


def _out(y, like):
    return y.astype(like.dtype, copy=False)


def _f64(x):
    return np.asarray(x, dtype=np.float64)


def global_avg_pool(x):
    """Spatial mean of every channel plane: (N, C, H, W) -> (N, C, 1, 1)."""
    x = as_tensor(x)
    g = _f64(x).mean(axis=(2, 3), keepdims=True)
    return _out(g, x)


def _check_groups(c, groups):
    if not isinstance(groups, (int, np.integer)) or groups < 1:
        raise ConfigError(f"groups must be a positive integer, got {groups!r}")
    if c % groups:
        raise ConfigError(f"groups={groups} does not divide C={c}")


def _group_stats(x64, groups, delta):
    n, c, h, w = x64.shape
    xg = x64.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + delta)
    return xg, mu, inv


def group_norm(x, groups, delta=1e-5):
    """Group normalisation without affine parameters.

    Mean and biased variance are taken over each group's channels and the
    full spatial extent, per sample.
    """
    x = as_tensor(x)
    _check_groups(x.shape[1], groups)
    if not delta > 0:
        raise ConfigError(f"delta must be positive, got {delta}")
    xg, mu, inv = _group_stats(_f64(x), groups, delta)
    return _out(((xg - mu) * inv).reshape(x.shape), x)


def group_norm_backward(x, groups, delta, upstream):
    """Gradient of <upstream, group_norm(x)> with respect to x."""
    x = as_tensor(x)
    _check_groups(x.shape[1], groups)
    xg, mu, inv = _group_stats(_f64(x), groups, delta)
    xhat = (xg - mu) * inv
    dy = _f64(upstream).reshape(xg.shape)
    mean_dy = dy.mean(axis=2, keepdims=True)
    mean_dy_xhat = (dy * xhat).mean(axis=2, keepdims=True)
    dx = inv * (dy - mean_dy - xhat * mean_dy_xhat)
    return _out(dx.reshape(x.shape), x)


def shuffle_permutation(c, groups):
    """Source channel index for every output channel of a channel shuffle.

    >>> shuffle_permutation(6, 2).tolist()
    [0, 3, 1, 4, 2, 5]
    """
    _check_groups(c, groups)
    return np.arange(c).reshape(groups, c // groups).T.reshape(-1)


def channel_shuffle(x, groups):
    x = as_tensor(x)
    return x[:, shuffle_permutation(x.shape[1], groups)]


def channel_shuffle_backward(upstream, groups):
    """Scatter the upstream gradient back through the shuffle permutation."""
    upstream = as_tensor(upstream, "upstream")
    perm = shuffle_permutation(upstream.shape[1], groups)
    grad = np.empty_like(upstream)
    grad[:, perm] = upstream
    return grad


def resample(x, mode):
    """Nearest-neighbour x2 upsampling ("up2") or 2x2/stride-2 max pooling ("down2")."""
    x = as_tensor(x)
    if mode == "none":
        return x
    if mode == "up2":
        return x.repeat(2, axis=2).repeat(2, axis=3)
    if mode == "down2":
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"down2 needs even H and W, got {h}x{w}")
        return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
    raise ConfigError(f"unknown resample mode {mode!r}")


def _check_conv(x, weight, bias):
    weight = _f64(weight)
    bias = _f64(bias).reshape(-1)
    if weight.ndim != 2:
        raise ShapeError(f"conv weight must be a Cout x Cin matrix, got shape {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv weight has {weight.shape[1]} columns but input has C={x.shape[1]}")
    if bias.shape[0] != weight.shape[0]:
        raise ShapeError(f"conv bias length {bias.shape[0]} != Cout={weight.shape[0]}")
    return weight, bias


def pointwise_conv(x, weight, bias):
    """1x1 convolution: per pixel, weight @ channels + bias."""
    x = as_tensor(x)
    weight, bias = _check_conv(x, weight, bias)
    # einsum without optimize never dispatches to BLAS, so the summation
    # order does not depend on the BLAS thread count.
    y = np.einsum("oc,nchw->nohw", weight, _f64(x)) + bias[None, :, None, None]
    return _out(y, x)


def pointwise_conv_backward(x, weight, bias, upstream):
    """Return (dx, dweight, dbias) for L = <upstream, pointwise_conv(x, weight, bias)>."""
    x = as_tensor(x)
    weight, bias = _check_conv(x, weight, bias)
    u = _f64(upstream)
    dx = np.einsum("oc,nohw->nchw", weight, u)
    dw = np.einsum("nohw,nchw->oc", u, _f64(x))
    db = u.sum(axis=(0, 2, 3))
    return _out(dx, x), dw, db


def sigmoid(z):
    """Numerically stable logistic function on float64 arrays or scalars."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def sigmoid_map(x):
    x = as_tensor(x)
    return _out(sigmoid(_f64(x)), x)


def silu_map(x):
    x = as_tensor(x)
    x64 = _f64(x)
    return _out(x64 * sigmoid(x64), x)
