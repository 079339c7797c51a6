"""Central finite differences and a uniform driver for every backward pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import bifpn, shuffle_attention as sa, simam, tensor
from ._parallel import pmap
from .errors import ConfigError, OracleError

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
DENOM_FLOOR = 1e-8


def numeric_grad(f, x, h=DEFAULT_H, relative=True):
    """Central-difference gradient of a scalar function f at x, in float64.

    With `relative` the step for element i is h * max(1, |x_i|).
    """
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig)) if relative else h
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value near element {i}")
        g[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), DENOM_FLOOR)


@dataclass
class GradCheckReport:
    op: str
    shapes: list = field(default_factory=list)
    max_rel_error: float = 0.0
    max_abs_error: float = 0.0
    worst: tuple | None = None  # (trial, param name, flat index)
    tol: float = DEFAULT_TOL
    trials: int = 0

    @property
    def passed(self):
        return self.max_rel_error <= self.tol

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        d["worst"] = list(self.worst) if self.worst else None
        return d


@dataclass(frozen=True)
class GradOp:
    """A differentiable op: sample(rng) -> params, forward(**params), backward(params, u) -> grads."""

    name: str
    sample: Callable
    forward: Callable
    backward: Callable


REGISTRY: dict[str, GradOp] = {}


def register(op):
    REGISTRY[op.name] = op
    return op


def _check_trial(op, seed, trial, h):
    rng = np.random.default_rng([seed, trial])
    params = op.sample(rng)
    out = np.asarray(op.forward(**params), dtype=np.float64)
    u = rng.standard_normal(out.shape)
    analytic = op.backward(params, u)
    shape = {k: list(np.shape(v)) for k, v in params.items() if isinstance(v, np.ndarray)}
    worst_rel, worst_abs, worst = 0.0, 0.0, None
    for name, ga in analytic.items():

        def loss(v, name=name):
            return float((u * np.asarray(op.forward(**{**params, name: v}), dtype=np.float64)).sum())

        gn = numeric_grad(loss, params[name], h)
        rel = relative_error(ga, gn).reshape(-1)
        ab = np.abs(np.asarray(ga, dtype=np.float64) - gn).reshape(-1)
        if rel.size:
            i = int(np.argmax(rel))
            if rel[i] > worst_rel or worst is None:
                worst_rel, worst = float(rel[i]), (trial, name, i)
            worst_abs = max(worst_abs, float(ab.max()))
    return shape, worst_rel, worst_abs, worst


def check_op(op, trials=20, tol=DEFAULT_TOL, seed=0, h=DEFAULT_H, threads=1):
    """Compare analytic and numeric gradients on `trials` seeded random cases."""
    if isinstance(op, str):
        if op not in REGISTRY:
            raise ConfigError(f"unregistered op {op!r}; known: {sorted(REGISTRY)}")
        op = REGISTRY[op]
    results = pmap(lambda t: _check_trial(op, seed, t, h), range(trials), threads)
    rep = GradCheckReport(op=op.name, tol=tol, trials=trials)
    for shape, rel, ab, worst in results:
        rep.shapes.append(shape)
        if rep.worst is None or rel > rep.max_rel_error:
            rep.max_rel_error, rep.worst = rel, worst
        rep.max_abs_error = max(rep.max_abs_error, ab)
    return rep


# --------------------------------------------------------------------------
# registered ops


def _shape(rng, cmax=3, smin=2, smax=4):
    return (int(rng.integers(1, 3)), int(rng.integers(1, cmax + 1)),
            int(rng.integers(smin, smax + 1)), int(rng.integers(smin, smax + 1)))


def _divisor(rng, c):
    return int(rng.choice([d for d in range(1, c + 1) if c % d == 0]))


register(GradOp(
    "identity",
    lambda rng: {"x": rng.standard_normal(_shape(rng))},
    lambda x: x,
    lambda p, u: {"x": u},
))

register(GradOp(
    "sigmoid_map",
    lambda rng: {"x": rng.standard_normal(_shape(rng))},
    tensor.sigmoid_map,
    lambda p, u: {"x": u * tensor.sigmoid(p["x"]) * (1 - tensor.sigmoid(p["x"]))},
))


def _simam_sample(rng):
    return {"x": rng.standard_normal(_shape(rng)), "lam": float(rng.choice([1e-4, 1e-2, 0.1]))}


register(GradOp(
    "simam_forward",
    _simam_sample,
    lambda x, lam: simam.simam_forward(x, simam.SimAMConfig(lam)),
    lambda p, u: {"x": simam.simam_backward(p["x"], simam.SimAMConfig(p["lam"]), u)},
))


def _sa_sample(rng):
    k = int(rng.integers(1, 3))
    half = int(rng.integers(1, 3))
    c = 2 * k * half
    n, _, h, w = _shape(rng)
    return {
        "x": rng.standard_normal((n, c, h, w)),
        "w1": rng.standard_normal(half), "b1": rng.standard_normal(half),
        "w2": rng.standard_normal(half), "b2": rng.standard_normal(half),
        "groups": k, "shuffle_groups": _divisor(rng, c),
    }


def _sa_fwd(x, w1, b1, w2, b2, groups, shuffle_groups):
    cfg = sa.SAConfig(groups=groups, shuffle_groups=shuffle_groups)
    return sa.sa_forward(x, cfg, sa.SAWeights(w1, b1, w2, b2))


def _sa_bwd(p, u):
    cfg = sa.SAConfig(groups=p["groups"], shuffle_groups=p["shuffle_groups"])
    dx, dw = sa.sa_backward(p["x"], cfg, sa.SAWeights(p["w1"], p["b1"], p["w2"], p["b2"]), u)
    return {"x": dx, **dw.as_dict()}


register(GradOp("sa_forward", _sa_sample, _sa_fwd, _sa_bwd))


def _fuse_sample(rng):
    k = int(rng.integers(1, 5))
    shape = _shape(rng)
    p = {f"in{i}": rng.standard_normal(shape) for i in range(k)}
    p["weights"] = rng.uniform(0.1, 2.0, k)
    p["epsilon"] = float(rng.choice([1e-4, 1e-2]))
    return p


def _fuse_inputs(p):
    return [p[k] for k in sorted(p) if k.startswith("in")]


def _fuse_fwd(**p):
    return bifpn.fuse_weighted(_fuse_inputs(p), p["weights"], p["epsilon"])


def _fuse_bwd(p, u):
    names = [k for k in sorted(p) if k.startswith("in")]
    d_in, d_w = bifpn.fuse_weighted_backward(_fuse_inputs(p), p["weights"], p["epsilon"], u)
    return {**dict(zip(names, d_in)), "weights": d_w}


register(GradOp("fuse_weighted", _fuse_sample, _fuse_fwd, _fuse_bwd))


def _gn_sample(rng):
    x = rng.standard_normal(_shape(rng, cmax=4))
    return {"x": x, "groups": _divisor(rng, x.shape[1])}


register(GradOp(
    "group_norm",
    _gn_sample,
    lambda x, groups: tensor.group_norm(x, groups, 1e-5),
    lambda p, u: {"x": tensor.group_norm_backward(p["x"], p["groups"], 1e-5, u)},
))


def _conv_sample(rng):
    x = rng.standard_normal(_shape(rng, cmax=4))
    cout = int(rng.integers(1, 5))
    return {"x": x, "weight": rng.standard_normal((cout, x.shape[1])), "bias": rng.standard_normal(cout)}


def _conv_bwd(p, u):
    dx, dw, db = tensor.pointwise_conv_backward(p["x"], p["weight"], p["bias"], u)
    return {"x": dx, "weight": dw, "bias": db}


register(GradOp("pointwise_conv", _conv_sample, tensor.pointwise_conv, _conv_bwd))


def _shuffle_sample(rng):
    x = rng.standard_normal(_shape(rng, cmax=6))
    return {"x": x, "groups": _divisor(rng, x.shape[1])}


register(GradOp(
    "channel_shuffle",
    _shuffle_sample,
    tensor.channel_shuffle,
    lambda p, u: {"x": tensor.channel_shuffle_backward(u, p["groups"])},
))

# the ops named by the acceptance gate, in report order
CORE_OPS = ("simam_forward", "sa_forward", "fuse_weighted", "group_norm", "pointwise_conv")
