"""Group projections for the mask-gated group-lasso penalty.

``lambda_g = lam * (1 - w_g)``: kept groups (w_g = 1) carry no penalty, masked
groups are shrunk by the proximal operator or cut by the half-space test.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .zig import group_keys


@dataclass
class RegularizerConfig:
    lam: float = 10.0
    projector: str = "prox"
    epsilon_hs: float = 0.05

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not 0.0 <= self.epsilon_hs < 1.0:
            raise ValueError("epsilon_hs must lie in [0, 1)")
        aliases = {"proximal": "prox", "halfspace": "hsp", "half-space": "hsp"}
        self.projector = aliases.get(self.projector.lower(), self.projector.lower())
        if self.projector not in ("prox", "hsp"):
            raise ValueError(f"unknown projector {self.projector!r}")


def group_lambda(w, cfg):
    """Per-group penalty weights lam * (1 - w)."""
    lam = cfg.lam if isinstance(cfg, RegularizerConfig) else float(cfg)
    return lam * (1.0 - np.asarray(getattr(w, "hard", w), dtype=np.float64))


def prox_group(z, eta, lam_g):
    """Block soft-threshold: argmin_x 0.5||x - z||^2 + eta*lam_g*||x||."""
    z = np.asarray(z, dtype=np.float64)
    thr = eta * lam_g
    if thr <= 0.0:
        return z.copy()
    norm = np.linalg.norm(z)
    if norm >= thr and norm > 0.0:
        return z - thr * z / norm
    return np.zeros_like(z)


def halfspace_group(z, m_ref, eps):
    z = np.asarray(z, dtype=np.float64)
    m_ref = np.asarray(m_ref, dtype=np.float64)
    if z.shape != m_ref.shape:
        raise ValueError("z and reference weights differ in shape")
    if np.dot(z.ravel(), m_ref.ravel()) < eps * np.dot(m_ref.ravel(), m_ref.ravel()):
        return np.zeros_like(z)
    return z.copy()


class NetworkGroups:
    """Group layout of a network partition; channel ``c`` of a block is one group."""

    def __init__(self, g, part):
        self.g = g
        self.part = part
        self.keys = group_keys(g, part)

    @property
    def num_groups(self):
        return self.part.num_groups

    def _block_dot(self, a, b, keys):
        acc = 0.0
        for key in keys:
            x, y = a[key], b[key]
            acc = acc + (x.reshape(x.shape[0], -1) * y.reshape(y.shape[0], -1)).sum(axis=1)
        return acc

    def norms(self, params):
        out = np.zeros(self.num_groups)
        for ids, keys in zip(self.part.blocks, self.keys):
            out[ids] = np.sqrt(self._block_dot(params, params, keys))
        return out

    def scale(self, params, factors):
        """Multiply every group's members by its factor, in place."""
        for ids, keys in zip(self.part.blocks, self.keys):
            f = factors[ids]
            if np.all(f == 1.0):
                continue
            for key in keys:
                p = params[key]
                params[key] = p * f.reshape((-1,) + (1,) * (p.ndim - 1))

    def inner(self, a, b):
        out = np.zeros(self.num_groups)
        for ids, keys in zip(self.part.blocks, self.keys):
            out[ids] = self._block_dot(a, b, keys)
        return out


class FlatGroups:
    """Contiguous groups of a single flat vector stored under ``key``."""

    def __init__(self, offsets, key="z"):
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.key = key
        sizes = np.diff(self.offsets)
        self.owner = np.repeat(np.arange(sizes.size), sizes)

    @property
    def num_groups(self):
        return self.offsets.size - 1

    def norms(self, params):
        z = params[self.key]
        return np.sqrt(np.bincount(self.owner, weights=z * z, minlength=self.num_groups))

    def scale(self, params, factors):
        params[self.key] = params[self.key] * factors[self.owner]

    def inner(self, a, b):
        return np.bincount(self.owner, weights=a[self.key] * b[self.key],
                           minlength=self.num_groups)

    def prox(self, z, thresholds):
        return kernels.group_prox_flat(np.ascontiguousarray(z, dtype=np.float64),
                                       self.offsets, np.asarray(thresholds, dtype=np.float64))


def project(params, layout, lambdas, eta, cfg, ref=None):
    """Apply the configured projector in place to every group with lambda_g > 0.

    ``ref`` holds the reference iterate for the half-space test (the weights
    before the gradient step); the proximal operator uses threshold eta*lambda_g.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64)
    active = lambdas > 0
    if not np.any(active):
        return params
    if cfg.projector == "prox" and isinstance(layout, FlatGroups):
        params[layout.key] = layout.prox(params[layout.key], eta * lambdas)
        return params
    if cfg.projector == "prox":
        factors = kernels.shrink_factors(layout.norms(params), eta * lambdas)
    else:
        if ref is None:
            raise ValueError("half-space projection needs reference weights")
        ref_sq = layout.inner(ref, ref)
        cut = layout.inner(params, ref) < cfg.epsilon_hs * ref_sq
        factors = np.where(active & cut, 0.0, 1.0)
    layout.scale(params, factors)
    return params


def penalty_value(params, layout, lambdas):
    """sum_g lambda_g * ||[M]_g||."""
    return float(np.dot(np.asarray(lambdas, dtype=np.float64), layout.norms(params)))
