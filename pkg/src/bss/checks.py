"""Invariant, oracle and gradient suites run by `bss check`."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import bifpn, gradcheck, metrics, shuffle_attention as sa, simam, tensor
from .io import decode_bst, encode_bst

SUITES = ("invariants", "oracle", "grad")


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def to_dict(self):
        return {"suite": self.suite, "name": self.name, "passed": bool(self.passed), "detail": self.detail}


_INVARIANTS = []
_ORACLES = []


def _invariant(fn):
    _INVARIANTS.append(fn)
    return fn


def _oracle(fn):
    _ORACLES.append(fn)
    return fn


@_invariant
def simam_constant_law(rng):
    worst = 0.0
    for _ in range(10):
        shape = tuple(int(v) for v in rng.integers(1, 6, 4))
        x = np.full(shape, rng.uniform(-10, 10))
        for lam in (1e-4, 1e-2, 0.1):
            worst = max(worst, float(np.abs(simam.simam_weights(x, lam) - tensor.sigmoid(0.5)).max()))
    return worst <= 1e-6, f"max |weight - sigmoid(0.5)| = {worst:.3g}"


@_invariant
def simam_weight_range_and_order(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = simam.simam_weights(x, 1e-4)
    in_range = bool(np.all((w > 0.5) & (w < 1)))
    d2 = (x - x.mean(axis=(2, 3), keepdims=True)) ** 2
    ordered = True
    for n in range(2):
        for c in range(3):
            o = np.argsort(d2[n, c].ravel(), kind="stable")
            ordered &= bool(np.all(np.diff(w[n, c].ravel()[o]) >= 0))
    return in_range and ordered, f"weights in (0.5, 1): {in_range}; monotone in deviation: {ordered}"


@_invariant
def sa_structure(rng):
    x = rng.standard_normal((2, 8, 4, 4))
    cfg = sa.SAConfig(groups=2, shuffle_groups=1)
    y = sa.sa_forward(x, cfg, sa.SAWeights.zeros(2))
    half = bool(np.array_equal(y, 0.5 * x))
    y2 = sa.sa_forward(x, sa.SAConfig(groups=2, shuffle_groups=2))
    return half and y2.shape == x.shape, f"zero weights give 0.5x: {half}; dims kept: {y2.shape == x.shape}"


@_invariant
def shuffle_inverse(rng):
    x = rng.standard_normal((1, 12, 2, 2))
    ok = True
    for g in (1, 2, 3, 4, 6):
        y = tensor.channel_shuffle(tensor.channel_shuffle(x, g), 12 // g)
        ok &= bool(np.array_equal(y, x))
    return ok, "shuffle(g) then shuffle(C/g) is the identity"


@_invariant
def group_norm_stats(rng):
    x = rng.standard_normal((2, 6, 5, 5)) * 3 + 1
    y = tensor.group_norm(x, 3, 1e-5).reshape(2, 3, -1)
    xg = x.reshape(2, 3, -1)
    var = xg.var(axis=2)
    mu_err = float(np.abs(y.mean(axis=2)).max())
    var_err = float(np.abs(y.var(axis=2) - var / (var + 1e-5)).max())
    return mu_err <= 1e-6 and var_err <= 1e-4, f"|mean| {mu_err:.3g}, variance error {var_err:.3g}"


@_invariant
def gap_linearity(rng):
    x, y = rng.standard_normal((2, 2, 3, 4, 4))
    lhs = tensor.global_avg_pool(2.5 * x - 1.5 * y)
    rhs = 2.5 * tensor.global_avg_pool(x) - 1.5 * tensor.global_avg_pool(y)
    err = float(np.abs(lhs - rhs).max())
    return err <= 1e-6, f"max error {err:.3g}"


@_invariant
def resample_round_trip(rng):
    x = rng.standard_normal((1, 3, 3, 5)).astype(np.float32)
    ok = np.array_equal(tensor.resample(tensor.resample(x, "up2"), "down2"), x)
    return bool(ok), "down2(up2(x)) == x"


@_invariant
def fusion_algebra(rng):
    w = rng.uniform(0.1, 3.0, 4)
    eps = 1e-4
    coef = bifpn.fusion_coefficients(w, eps)
    s = w.sum()
    sum_err = abs(coef.sum() - s / (eps + s))
    x = rng.standard_normal((1, 2, 3, 3))
    # 2 / 2.0001 = 0.99995000249..., printed elsewhere rounded to 0.99995
    sym_err = float(np.abs(bifpn.fuse_weighted([x, x], [1, 1], eps) - (2 / 2.0001) * x).max())
    ins = list(rng.standard_normal((4, 1, 2, 3, 3)))
    hom_err = float(np.abs(bifpn.fuse_weighted(ins, 3.0 * w, eps) - bifpn.fuse_weighted(ins, w, eps / 3.0)).max())
    ok = sum_err <= 1e-12 and coef.sum() < 1 and sym_err <= 1e-9 and hom_err <= 1e-9
    return ok, f"coef-sum {sum_err:.3g}, symmetric {sym_err:.3g}, homogeneity {hom_err:.3g}"


@_invariant
def neck_graphs(rng):
    g = bifpn.default_neck()
    rep = bifpn.graph_validate(g)
    ins = {lv: rng.standard_normal(d) for lv, d in g.inputs.items()}
    outs = bifpn.graph_execute(g, ins)
    dims_ok = all(outs[f"{lv}out"].shape == tuple(d) for lv, d in g.inputs.items())
    simp = bifpn.graph_simplify(bifpn.pan_neck())
    same = bifpn.graph_to_json(simp) == bifpn.graph_to_json(g)
    idem = bifpn.graph_to_json(bifpn.graph_simplify(simp)) == bifpn.graph_to_json(simp)
    return rep.ok and dims_ok and same and idem, (
        f"default valid: {rep.ok}; dims kept: {dims_ok}; simplify(pan) == default: {same}; idempotent: {idem}")


@_invariant
def bst_round_trip(rng):
    ok = True
    for _ in range(20):
        a = rng.standard_normal(tuple(int(v) for v in rng.integers(1, 5, 4))).astype(np.float32)
        buf = encode_bst(a)
        b = decode_bst(buf)
        ok &= b.shape == a.shape and b.tobytes() == a.tobytes() and encode_bst(b) == buf
    return ok, "20 random tensors round-trip byte-exactly"


@_oracle
def simam_analytic_vs_exact(rng):
    worst = 0.0
    beaten = 0
    for i in range(100):
        m = int(rng.integers(4, 65))
        lam = float((1e-4, 1e-2, 0.1)[i % 3])
        ch = rng.standard_normal(m)
        t = int(rng.integers(0, m))
        sol = simam.simam_oracle_min(ch, t, lam, samples=10_000, seed=i)
        om, b = simam.simam_analytic_solution(ch, t, lam)
        worst = max(worst, abs(om - sol.omega_t), abs(b - sol.b_t))
        beaten += sol.beaten
    return worst <= 1e-8 and beaten == 0, f"max |analytic - exact| {worst:.3g}; sampled beats: {beaten}"


def approximation_gap(m, rng, lam=1e-4, channels=20):
    gaps = []
    for _ in range(channels):
        ch = rng.standard_normal(m)
        full = simam.simam_energy(ch.reshape(1, 1, 1, m), lam).e_star.ravel()
        gaps.append(np.abs(full - simam.loo_min_energies(ch, lam)))
    return float(np.median(np.concatenate(gaps)))


@_oracle
def simam_gap_shrinks(rng):
    small, large = approximation_gap(64, rng), approximation_gap(6400, rng)
    return large < small, f"median gap M=64: {small:.3g}, M=6400: {large:.3g}"


@_oracle
def metrics_hand_fixtures(rng):
    curve = metrics.pr_curve([True, False, True], [0.9, 0.8, 0.7], 2)
    ap = metrics.average_precision(curve)
    p, r, f1 = metrics.prf(3, 1, 2)
    ok = abs(ap - 5 / 6) <= 1e-9 and abs(p - 0.75) <= 1e-12 and abs(r - 0.6) <= 1e-12 and abs(f1 - 2 / 3) <= 1e-12
    return ok, f"AP {ap:.9f}; P/R/F1 {p}, {r}, {f1:.6f}"


def run_suite(suite, seed=0, op=None, tol=gradcheck.DEFAULT_TOL, trials=20, threads=1):
    if suite == "grad":
        ops = [op] if op else list(gradcheck.CORE_OPS)
        out = []
        for name in ops:
            t0 = time.perf_counter()
            rep = gradcheck.check_op(name, trials=trials, tol=tol, seed=seed, threads=threads)
            detail = f"max rel {rep.max_rel_error:.3g}, max abs {rep.max_abs_error:.3g}, {rep.trials} trials"
            out.append(CheckResult("grad", name, rep.passed, detail, time.perf_counter() - t0))
        return out
    fns = {"invariants": _INVARIANTS, "oracle": _ORACLES}[suite]
    out = []
    for i, fn in enumerate(fns):
        t0 = time.perf_counter()
        ok, detail = fn(np.random.default_rng([seed, i]))
        out.append(CheckResult(suite, fn.__name__, bool(ok), detail, time.perf_counter() - t0))
    return out
