"""SimAM: parameter-free attention from per-neuron minimal energies.

Each neuron t in a channel plane of M = H*W values gets the closed-form
minimal energy

    e*_t = 4 (var + lam) / ((t - mean)^2 + 2 var + 2 lam)

with mean and biased variance taken over the whole plane, and the output is
sigmoid(1 / e*_t) * t. The leave-one-out problem that formula simplifies is
solved exactly by :func:`simam_oracle_min` for verification.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .tensor import as_tensor, sigmoid

DEFAULT_LAMBDA = 1e-4


@dataclass(frozen=True)
class SimAMConfig:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"lambda must be finite and >= 0, got {self.lam}")


@dataclass(frozen=True)
class EnergyField:
    e_star: np.ndarray      # (N, C, H, W), float64
    mu_hat: np.ndarray      # (N, C, 1, 1)
    sigma2_hat: np.ndarray  # (N, C, 1, 1), biased


@dataclass(frozen=True)
class ExactEnergySolution:
    omega_t: float
    b_t: float
    e_min: float
    t_index: int
    mu_t: float
    sigma2_t: float
    samples_checked: int = 0
    best_sampled: float = float("inf")

    @property
    def beaten(self):
        """True if some sampled (omega, b) undercut e_min by more than rounding."""
        return self.best_sampled < self.e_min - 1e-12 * max(1.0, abs(self.e_min))


def _cfg(cfg):
    if cfg is None:
        return SimAMConfig()
    if isinstance(cfg, SimAMConfig):
        return cfg
    return SimAMConfig(float(cfg))


def _plane_stats(x64, lam):
    mu = x64.mean(axis=(2, 3), keepdims=True)
    d = x64 - mu
    var = (d * d).mean(axis=(2, 3), keepdims=True)
    if lam == 0 and np.any(var == 0):
        raise DegenerateInputError("lambda = 0 with a constant channel plane: energy is 0/0")
    return mu, d, var


def simam_energy(x, cfg=None):
    cfg = _cfg(cfg)
    x = as_tensor(x)
    mu, d, var = _plane_stats(np.asarray(x, dtype=np.float64), cfg.lam)
    e = 4.0 * (var + cfg.lam) / (d * d + 2.0 * var + 2.0 * cfg.lam)
    return EnergyField(e_star=e, mu_hat=mu, sigma2_hat=var)


def _inverse_energy(d, var, lam):
    # 1/e* rearranged: no division by a quantity that can vanish when var + lam > 0
    return d * d / (4.0 * (var + lam)) + 0.5


def simam_weights(x, cfg=None):
    """Attention weights sigmoid(1/e*) in float64."""
    cfg = _cfg(cfg)
    x = as_tensor(x)
    _, d, var = _plane_stats(np.asarray(x, dtype=np.float64), cfg.lam)
    return sigmoid(_inverse_energy(d, var, cfg.lam))


def simam_forward(x, cfg=None):
    x = as_tensor(x)
    y = simam_weights(x, cfg) * np.asarray(x, dtype=np.float64)
    return y.astype(x.dtype, copy=False)


def simam_backward(x, cfg, upstream):
    """dL/dx for L = <upstream, simam_forward(x)>.

    The plane mean and variance depend on every neuron, so each input
    receives a direct term u*s plus a plane-wide correction.
    """
    cfg = _cfg(cfg)
    x = as_tensor(x)
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != x.shape:
        raise ConfigError(f"upstream dims {u.shape} != input dims {x.shape}")
    x64 = np.asarray(x, dtype=np.float64)
    _, d, var = _plane_stats(x64, cfg.lam)
    m = x.shape[2] * x.shape[3]
    a = 4.0 * (var + cfg.lam)
    s = sigmoid(d * d / a + 0.5)
    g = u * x64 * s * (1.0 - s)  # dL/dz per neuron
    sum_gd = (g * d).sum(axis=(2, 3), keepdims=True)
    sum_gd2 = (g * d * d).sum(axis=(2, 3), keepdims=True)
    dx = u * s + (2.0 / a) * (g * d - sum_gd / m) - (8.0 / (m * a * a)) * d * sum_gd2
    return dx.astype(x.dtype, copy=False)


def loo_energy(channel, t_index, lam, omega, b):
    """Leave-one-out energy of neuron t for a linear map (omega, b).

    Others are pushed toward -1 with weight 1/(M-1), the target toward +1,
    plus lam * omega^2. Accepts array-valued omega and b.
    """
    x = np.asarray(channel, dtype=np.float64).reshape(-1)
    t = x[t_index]
    others = np.delete(x, t_index)
    omega = np.asarray(omega, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    r = -1.0 - (np.multiply.outer(omega, others) + b[..., None])
    return (r * r).mean(axis=-1) + (1.0 - (omega * t + b)) ** 2 + lam * omega * omega


def simam_analytic_solution(channel, t_index, lam):
    """Closed-form (omega_t, b_t) from leave-one-out statistics.

    omega_t = 2 (t - mu_t) / ((t - mu_t)^2 + 2 var_t + 2 lam) and
    b_t = -(t + mu_t) omega_t / 2. omega_t carries the sign of t - mu_t so
    the target maps toward +1 and the others toward -1; negating it gives
    the mirrored labelling and a strictly larger energy.
    """
    x = np.asarray(channel, dtype=np.float64).reshape(-1)
    t = x[t_index]
    others = np.delete(x, t_index)
    mu_t = others.mean()
    var_t = ((others - mu_t) ** 2).mean()
    den = (t - mu_t) ** 2 + 2.0 * var_t + 2.0 * lam
    if den == 0:
        raise DegenerateInputError("lambda = 0 and all values equal")
    omega = 2.0 * (t - mu_t) / den
    b = -0.5 * (t + mu_t) * omega
    return float(omega), float(b)


def simam_oracle_min(channel, t_index, lam, samples=10_000, seed=0):
    """Minimise the leave-one-out energy exactly via its 2x2 normal equations.

    Independently of any closed form, builds the weighted least-squares
    system over rows [x_i, 1] -> -1 (weight 1/(M-1)) and [t, 1] -> +1
    (weight 1), adds the ridge term on omega, and solves it. The minimum is
    then challenged by `samples` random (omega, b) pairs; the best sampled
    energy is recorded and must not fall below e_min.
    """
    x = np.asarray(channel, dtype=np.float64).reshape(-1)
    m = x.size
    if m < 2:
        raise ConfigError("need at least 2 neurons")
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    t_index = int(t_index)
    t = x[t_index]
    others = np.delete(x, t_index)

    rows = np.column_stack([np.append(others, t), np.ones(m)])
    target = np.append(np.full(m - 1, -1.0), 1.0)
    wts = np.append(np.full(m - 1, 1.0 / (m - 1)), 1.0)
    lhs = rows.T @ (wts[:, None] * rows) + np.diag([lam, 0.0])
    rhs = rows.T @ (wts * target)
    det = lhs[0, 0] * lhs[1, 1] - lhs[0, 1] * lhs[1, 0]
    if abs(det) <= 1e-14 * max(1.0, abs(lhs[0, 0] * lhs[1, 1])):
        raise DegenerateInputError("singular normal equations: lambda = 0 and all values equal")
    omega, b = np.linalg.solve(lhs, rhs)
    e_min = float(loo_energy(x, t_index, lam, omega, b))

    best = float("inf")
    if samples:
        rng = np.random.default_rng(seed)
        scale = 1.0 / max(1.0, float(np.std(x)))
        # perturbations at several radii around the optimum plus a broad cloud
        radii = np.array([1e-6, 1e-3, 1e-1, 1.0, 10.0])
        r = radii[rng.integers(0, radii.size, samples)]
        om = omega + r * scale * rng.standard_normal(samples)
        bb = b + r * rng.standard_normal(samples)
        best = float(loo_energy(x, t_index, lam, om, bb).min())

    mu_t = others.mean()
    return ExactEnergySolution(
        omega_t=float(omega),
        b_t=float(b),
        e_min=e_min,
        t_index=t_index,
        mu_t=float(mu_t),
        sigma2_t=float(((others - mu_t) ** 2).mean()),
        samples_checked=int(samples),
        best_sampled=best,
    )


def loo_min_energies(channel, lam):
    """Exact leave-one-out minimal energy for every neuron of a channel.

    Vectorised normal-equation solve, one 2x2 system per neuron, built from
    running sums so large channels stay cheap.
    """
    x = np.asarray(channel, dtype=np.float64).reshape(-1)
    m = x.size
    s1 = x.sum() - x
    s2 = (x * x).sum() - x * x
    k = 1.0 / (m - 1)
    a11 = k * s2 + x * x + lam
    a12 = k * s1 + x
    a22 = 2.0
    r1 = -k * s1 + x
    r2 = 0.0  # -k*(m-1) + 1
    det = a11 * a22 - a12 * a12
    if np.any(det <= 0):
        raise DegenerateInputError("singular normal equations: lambda = 0 and all values equal")
    omega = (a22 * r1 - a12 * r2) / det
    b = (a11 * r2 - a12 * r1) / det
    # expand the energy with the same sums: mean of (-1 - w x_i - b)^2 over others
    others_sq = k * (omega * omega * s2 + 2.0 * omega * (1.0 + b) * s1) + (1.0 + b) ** 2
    return others_sq + (1.0 - omega * x - b) ** 2 + lam * omega * omega
