"""Numerical checks of the convergence analysis on synthetic composite problems.

Problems are ``J(z) = L(z) + sum_g lambda_g ||z_g||`` with an exact gradient of
``L`` and a stochastic oracle adding zero-mean Gaussian noise of total
variance ``sigma**2``.  Everything here uses the identity geometry, where
the composite step is the block soft-threshold.
"""
from dataclasses import dataclass
import math

import numpy as np

from .optim import OptimizerState, Schedule, schedule_at, step
from .projectors import FlatGroups, RegularizerConfig
from .tensor import Rng, STREAM_HARNESS


class Diverged(RuntimeError):
    pass


@dataclass
class CompositeProblem:
    loss: object
    grad: object
    offsets: np.ndarray
    lambdas: np.ndarray
    sigma: float = 0.0
    z_star: np.ndarray = None
    L_est: float = 1.0
    sigma_sq_est: float = 0.0
    z0: np.ndarray = None

    @property
    def dim(self):
        return int(self.offsets[-1])

    @property
    def layout(self):
        return FlatGroups(self.offsets)

    def g(self, z):
        return float(np.dot(self.lambdas, self.layout.norms({"z": z})))

    def objective(self, z):
        return self.loss(z) + self.g(z)

    def stochastic_grad(self, z, rng, batch=1):
        """Unbiased gradient with E||noise||^2 = sigma^2 / batch."""
        g = self.grad(z)
        if self.sigma == 0.0:
            return g
        return g + rng.normal(z.shape, self.sigma / math.sqrt(self.dim * batch))


def group_lasso_quadratic(n_groups=4, group_size=3, lam=0.5, sigma=0.0, seed=0):
    """L(z) = 1/2 sum_g q_g ||z_g - c_g||^2 with a closed-form composite minimizer.

    The minimizer is the block soft-threshold of ``c_g`` at ``lambda_g / q_g``.
    """
    rng = Rng(seed, STREAM_HARNESS)
    offsets = np.arange(n_groups + 1) * group_size
    q = rng.gen.uniform(0.5, 2.0, n_groups)
    c = rng.normal(n_groups * group_size)
    lambdas = np.full(n_groups, float(lam))
    qv = np.repeat(q, group_size)
    layout = FlatGroups(offsets)
    z_star = c.copy()
    norms = layout.norms({"z": c})
    for g in range(n_groups):
        sl = slice(offsets[g], offsets[g + 1])
        thr = lambdas[g] / q[g]
        z_star[sl] = 0.0 if norms[g] <= thr else c[sl] * (1 - thr / norms[g])
    return CompositeProblem(
        loss=lambda z: 0.5 * float(np.sum(qv * (z - c) ** 2)),
        grad=lambda z: qv * (z - c),
        offsets=offsets, lambdas=lambdas, sigma=sigma, z_star=z_star,
        L_est=float(q.max()), sigma_sq_est=sigma ** 2, z0=np.zeros(offsets[-1]),
    )


def nonconvex_sine(n_groups=5, group_size=2, lam=0.1, amp=0.5, freq=2.0, sigma=0.1, seed=0):
    """L(z) = 1/2 ||z - c||^2 + amp * sum_i sin(freq * z_i); nonconvex when amp*freq^2 > 1.

    Gradient Lipschitz constant: 1 + amp * freq^2.
    """
    rng = Rng(seed, STREAM_HARNESS)
    dim = n_groups * group_size
    offsets = np.arange(n_groups + 1) * group_size
    c = rng.normal(dim) * 2.0
    return CompositeProblem(
        loss=lambda z: 0.5 * float(np.sum((z - c) ** 2)) + amp * float(np.sum(np.sin(freq * z))),
        grad=lambda z: (z - c) + amp * freq * np.cos(freq * z),
        offsets=offsets, lambdas=np.full(n_groups, float(lam)), sigma=sigma,
        L_est=1.0 + amp * freq ** 2, sigma_sq_est=sigma ** 2, z0=rng.normal(dim) * 3.0,
    )


def composite_step(prob, z, direction, eta):
    """argmin_x <direction, x> + ||x - z||^2 / (2 eta) + g(x)."""
    return prob.layout.prox(z - eta * direction, eta * prob.lambdas)


def gradient_mapping(prob, z, eta, direction=None):
    """P = (z - z+) / eta with z+ the composite step along ``direction`` (default: full gradient)."""
    d = prob.grad(z) if direction is None else direction
    return (z - composite_step(prob, z, d, eta)) / eta


def _random_instance(rng, n_groups=None):
    n_groups = n_groups or int(rng.integers(1, 6))
    size = int(rng.integers(1, 5))
    lam = float(rng.gen.uniform(0.0, 2.0))
    prob = group_lasso_quadratic(n_groups, size, lam, seed=int(rng.integers(0, 2**31)))
    # zero some penalties so both branches of the mask gating are exercised
    prob.lambdas = prob.lambdas * (rng.gen.uniform(size=n_groups) < 0.8)
    z = rng.normal(prob.dim) * float(rng.gen.uniform(0.1, 3.0))
    eta = float(rng.gen.uniform(0.01, 1.0))
    return prob, z, eta


def check_lemma_a1(trials=1000, seed=0, slack=1e-9):
    """Fraction of random instances with <grad, P> >= ||P||^2 + (g(z+) - g(z)) / eta."""
    rng = Rng(seed, STREAM_HARNESS)
    passed = 0
    for _ in range(trials):
        prob, z, eta = _random_instance(rng)
        grad = prob.grad(z)
        P = gradient_mapping(prob, z, eta)
        z_plus = z - eta * P
        lhs = float(np.dot(grad, P))
        rhs = float(np.dot(P, P)) + (prob.g(z_plus) - prob.g(z)) / eta
        passed += lhs >= rhs - slack
    return passed / trials


def check_lemma_a3(trials=1000, seed=0, slack=1e-9):
    """Fraction of random instances with ||grad - m|| >= ||P - P~||."""
    rng = Rng(seed, STREAM_HARNESS)
    passed = 0
    for _ in range(trials):
        prob, z, eta = _random_instance(rng)
        grad = prob.grad(z)
        m = grad + rng.normal(prob.dim) * float(rng.gen.uniform(0.0, 2.0))
        P = gradient_mapping(prob, z, eta)
        P_tilde = gradient_mapping(prob, z, eta, direction=m)
        passed += np.linalg.norm(grad - m) >= np.linalg.norm(P - P_tilde) - slack
    return passed / trials


@dataclass
class GradMapRecord:
    t: int
    grad_map: float
    grad_map_est: float
    eta: float
    avg_grad_map: float


def run_theorem1(prob, schedule, T, batch=1, seed=0, record_every=1, z0=None):
    """Run the momentum mirror-descent stepper with the decaying schedule.

    Returns (records, z_T).  ``||P_t||`` uses the exact gradient; the running
    average is over all steps 1..t, recorded every ``record_every`` steps.
    """
    rng = Rng(seed, STREAM_HARNESS)
    z = np.array(prob.z0 if z0 is None else z0, dtype=np.float64)
    params = {"z": z}
    state = OptimizerState.zeros_like(params)
    layout = prob.layout
    cfg = RegularizerConfig(lam=0.0, projector="prox")
    records, total = [], 0.0
    alpha = 1.0
    for t in range(1, T + 1):
        eta, alpha_next = schedule_at(schedule, t)
        zt = params["z"]
        gmap = float(np.linalg.norm(gradient_mapping(prob, zt, eta)))
        grad = prob.stochastic_grad(zt, rng, batch)
        step(params, {"z": grad}, state, eta, alpha, layout, prob.lambdas, cfg)
        est = float(np.linalg.norm(zt - params["z"]) / eta)
        if not np.all(np.isfinite(params["z"])) or np.linalg.norm(params["z"]) > 1e6:
            raise Diverged(f"iterate diverged at step {t}")
        total += gmap
        alpha = alpha_next
        if t % record_every == 0 or t == T:
            records.append(GradMapRecord(t, gmap, est, eta, total / t))
    return records, params["z"]


def theory_schedule(L_est, c_bar=100.0, eps_sc=1.0):
    """Largest c_hat allowed by c_hat / sqrt(c_bar) <= min(1, eps / (4L)), with c1 = 4L / eps."""
    c_hat = math.sqrt(c_bar) * min(1.0, eps_sc / (4.0 * L_est))
    return Schedule(c_hat=c_hat, c_bar=c_bar, c1=4.0 * L_est / eps_sc)


def average_at(records, t):
    for r in records:
        if r.t == t:
            return r.avg_grad_map
    raise KeyError(t)
