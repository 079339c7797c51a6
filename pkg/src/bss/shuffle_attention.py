"""Shuffle Attention: grouped channel/spatial gating followed by a channel shuffle.

The input is cut into K contiguous channel groups, each group is halved, the
first half gated by sigmoid(w1 * GAP + b1) and the second by
sigmoid(w2 * GN(x) + b2), halves and groups are concatenated back in order
and the result is channel-shuffled.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .io import read_bst
from .tensor import (
    as_tensor,
    channel_shuffle,
    channel_shuffle_backward,
    group_norm_backward,
    sigmoid,
)


@dataclass(frozen=True)
class SAConfig:
    groups: int = 1
    gn_delta: float = 1e-5
    shuffle_groups: int = 2

    def __post_init__(self):
        if self.groups < 1 or self.shuffle_groups < 1:
            raise ConfigError("groups and shuffle_groups must be positive")
        if not self.gn_delta > 0:
            raise ConfigError(f"gn_delta must be positive, got {self.gn_delta}")

    def check(self, c):
        if c % (2 * self.groups):
            raise ConfigError(f"2K = {2 * self.groups} does not divide C = {c}")
        if c % self.shuffle_groups:
            raise ConfigError(f"shuffle_groups = {self.shuffle_groups} does not divide C = {c}")
        return c // (2 * self.groups)


@dataclass(frozen=True)
class SAWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(v)):
                raise ConfigError(f"{name} has non-finite values")
            object.__setattr__(self, name, v)
        if len({self.w1.size, self.b1.size, self.w2.size, self.b2.size}) != 1:
            raise ConfigError("w1, b1, w2, b2 must have equal length")

    @property
    def size(self):
        return self.w1.size

    @classmethod
    def default(cls, half):
        return cls(np.ones(half), np.zeros(half), np.ones(half), np.zeros(half))

    @classmethod
    def zeros(cls, half):
        z = np.zeros(half)
        return cls(z, z, z, z)

    @classmethod
    def load(cls, directory):
        """Load from a directory holding manifest.json that names four BST1 vectors."""
        directory = Path(directory)
        manifest = directory / "manifest.json"
        try:
            spec = json.loads(manifest.read_text())
        except OSError as exc:
            raise FormatError(f"cannot read: {exc.strerror}", manifest) from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", manifest, exc.lineno) from exc
        try:
            return cls(**{k: read_bst(directory / spec[k]) for k in ("w1", "b1", "w2", "b2")})
        except (KeyError, TypeError) as exc:
            raise FormatError(f"manifest must name w1, b1, w2, b2: {exc}", manifest) from exc

    def as_dict(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def _weights(wts, half):
    if wts is None:
        return SAWeights.default(half)
    if wts.size != half:
        raise ConfigError(f"weights have length {wts.size}, tensor needs C/2K = {half}")
    return wts


def sa_split(x, cfg):
    """[(x_k1, x_k2) for each of the K groups], as views into x."""
    x = as_tensor(x)
    half = cfg.check(x.shape[1])
    pairs = []
    for k in range(cfg.groups):
        base = 2 * half * k
        pairs.append((x[:, base:base + half], x[:, base + half:base + 2 * half]))
    return pairs


def _vec(v, c, name):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != c:
        raise ConfigError(f"{name} has length {v.size}, expected {c}")
    return v[None, :, None, None]


def sa_channel_branch(x_k1, w1, b1):
    x = np.asarray(x_k1)
    c = x.shape[1]
    x64 = x.astype(np.float64)
    g = x64.mean(axis=(2, 3), keepdims=True)
    gate = sigmoid(_vec(w1, c, "w1") * g + _vec(b1, c, "b1"))
    return (gate * x64).astype(x.dtype, copy=False)


def _per_channel_norm(x64, delta):
    mu = x64.mean(axis=(2, 3), keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=(2, 3), keepdims=True)
    return (x64 - mu) / np.sqrt(var + delta)


def sa_spatial_branch(x_k2, w2, b2, gn_delta=1e-5):
    x = np.asarray(x_k2)
    c = x.shape[1]
    x64 = x.astype(np.float64)
    gate = sigmoid(_vec(w2, c, "w2") * _per_channel_norm(x64, gn_delta) + _vec(b2, c, "b2"))
    return (gate * x64).astype(x.dtype, copy=False)


def sa_unshuffled(x, cfg, wts=None):
    """Everything in the forward pass except the final channel shuffle."""
    x = as_tensor(x)
    wts = _weights(wts, cfg.check(x.shape[1]))
    parts = []
    for x1, x2 in sa_split(x, cfg):
        parts.append(sa_channel_branch(x1, wts.w1, wts.b1))
        parts.append(sa_spatial_branch(x2, wts.w2, wts.b2, cfg.gn_delta))
    return np.concatenate(parts, axis=1)


def sa_forward(x, cfg, wts=None):
    return channel_shuffle(sa_unshuffled(x, cfg, wts), cfg.shuffle_groups)


def sa_backward(x, cfg, wts, upstream):
    """Return (dx, dweights) for L = <upstream, sa_forward(x)>.

    dweights is an SAWeights holding the parameter gradients, summed over
    batch and groups since the vectors are shared by every group.
    """
    x = as_tensor(x)
    half = cfg.check(x.shape[1])
    wts = _weights(wts, half)
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != x.shape:
        raise ConfigError(f"upstream dims {u.shape} != input dims {x.shape}")
    u = channel_shuffle_backward(u, cfg.shuffle_groups)

    x64 = x.astype(np.float64)
    hw = x.shape[2] * x.shape[3]
    dx = np.empty_like(x64)
    grads = {k: np.zeros(half) for k in ("w1", "b1", "w2", "b2")}
    w1, b1 = wts.w1[None, :, None, None], wts.b1[None, :, None, None]
    w2, b2 = wts.w2[None, :, None, None], wts.b2[None, :, None, None]
    for k in range(cfg.groups):
        c1 = slice(2 * half * k, 2 * half * k + half)
        c2 = slice(2 * half * k + half, 2 * half * (k + 1))

        xa, ua = x64[:, c1], u[:, c1]
        g = xa.mean(axis=(2, 3), keepdims=True)
        s = sigmoid(w1 * g + b1)
        da = (ua * xa).sum(axis=(2, 3), keepdims=True) * s * (1.0 - s)
        dx[:, c1] = ua * s + da * w1 / hw
        grads["w1"] += (da * g).sum(axis=(0, 2, 3))
        grads["b1"] += da.sum(axis=(0, 2, 3))

        xb, ub = x64[:, c2], u[:, c2]
        xhat = _per_channel_norm(xb, cfg.gn_delta)
        s = sigmoid(w2 * xhat + b2)
        da = ub * xb * s * (1.0 - s)
        dxhat = da * w2
        dx[:, c2] = ub * s + group_norm_backward(xb, half, cfg.gn_delta, dxhat)
        grads["w2"] += (da * xhat).sum(axis=(0, 2, 3))
        grads["b2"] += da.sum(axis=(0, 2, 3))
    return dx.astype(x.dtype, copy=False), SAWeights(**grads)
