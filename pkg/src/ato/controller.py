"""Mask controller: block embeddings -> bi-GRU -> LayerNorm/ReLU -> per-block heads.

The heads' logits ``o`` become a mask through a Gumbel-Sigmoid,
``soft = sigmoid((o + s + bias) / tau)``, rounded with ``hard = soft >= 0.5``.
The backward pass treats the rounding as identity (straight-through).
"""
from dataclasses import dataclass
import logging

import numpy as np

from . import graph as G
from .optim import Adam
from .tensor import Rng, STREAM_CONTROLLER, sample_gumbel

log = logging.getLogger(__name__)

EMBED_DIM = 64
HIDDEN = 128
GUMBEL_BIAS = 3.0
TAU = 0.4
REG_MASKS = ("emitted", "sampled")


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class MaskVector:
    hard: np.ndarray
    soft: np.ndarray
    frozen: bool = False

    def __len__(self):
        return self.hard.size

    @classmethod
    def ones(cls, n):
        return cls(np.ones(n), np.ones(n))


# ---------------------------------------------------------------- GRU cell


def gru_cell_forward(x, h, w_ih, w_hh, b_ih, b_hh):
    """One GRU step for a batch (gate order: reset, update, candidate)."""
    H = h.shape[1]
    gi = x @ w_ih.T + b_ih
    gh = h @ w_hh.T + b_hh
    r = sigmoid(gi[:, :H] + gh[:, :H])
    z = sigmoid(gi[:, H:2 * H] + gh[:, H:2 * H])
    hn = gh[:, 2 * H:]
    n = np.tanh(gi[:, 2 * H:] + r * hn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, r, z, n, hn)


def gru_cell_backward(dh_new, cache, w_ih, w_hh):
    """Returns (dx, dh, dw_ih, dw_hh, db_ih, db_hh)."""
    x, h, r, z, n, hn = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    dr = dan * hn
    dar = dr * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    dgi = np.concatenate([dar, daz, dan], axis=1)
    dgh = np.concatenate([dar, daz, dan * r], axis=1)
    dx = dgi @ w_ih
    dh = dh + dgh @ w_hh
    return dx, dh, dgi.T @ x, dgh.T @ h, dgi.sum(axis=0), dgh.sum(axis=0)


def layer_norm_forward(x, scale, shift, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * scale + shift, (xhat, inv)


def layer_norm_backward(dy, cache, scale):
    xhat, inv = cache
    dxhat = dy * scale
    dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


# ---------------------------------------------------------------- network


class ControllerNet:
    """Parameters live in ``self.params``; one head per block of the partition."""

    def __init__(self, block_sizes, seed=0, embed_dim=EMBED_DIM, hidden=HIDDEN,
                 bias=GUMBEL_BIAS, tau=TAU):
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.block_sizes = [int(b) for b in block_sizes]
        self.embed_dim, self.hidden = embed_dim, hidden
        self.bias, self.tau = bias, tau
        rng = Rng(seed, STREAM_CONTROLLER)
        nb, H = len(self.block_sizes), hidden
        k = 1.0 / np.sqrt(H)
        p = {"embed": rng.normal((nb, embed_dim), 0.1)}
        for d in ("fwd", "bwd"):
            p[f"{d}.w_ih"] = rng.gen.uniform(-k, k, (3 * H, embed_dim))
            p[f"{d}.w_hh"] = rng.gen.uniform(-k, k, (3 * H, H))
            p[f"{d}.b_ih"] = rng.gen.uniform(-k, k, 3 * H)
            p[f"{d}.b_hh"] = rng.gen.uniform(-k, k, 3 * H)
        p["ln.scale"] = np.ones(2 * H)
        p["ln.shift"] = np.zeros(2 * H)
        kh = 1.0 / np.sqrt(2 * H)
        for i, size in enumerate(self.block_sizes):
            p[f"head{i}.weight"] = rng.gen.uniform(-kh, kh, (size, 2 * H))
            p[f"head{i}.bias"] = rng.gen.uniform(-kh, kh, size)
        self.params = p

    @property
    def num_groups(self):
        return sum(self.block_sizes)

    def logits(self):
        """Head outputs o (length |G|) and the cache for :meth:`backward_logits`."""
        p, nb = self.params, len(self.block_sizes)
        emb = p["embed"]
        hs = {}
        caches = {}
        for d, order in (("fwd", range(nb)), ("bwd", range(nb - 1, -1, -1))):
            h = np.zeros((1, self.hidden))
            seq = []
            for i in order:
                h, c = gru_cell_forward(emb[i:i + 1], h, p[f"{d}.w_ih"], p[f"{d}.w_hh"],
                                        p[f"{d}.b_ih"], p[f"{d}.b_hh"])
                seq.append((i, c))
                hs[(d, i)] = h
            caches[d] = seq
        cat = np.concatenate([np.concatenate([hs[("fwd", i)], hs[("bwd", i)]], axis=1)
                              for i in range(nb)], axis=0)
        normed, ln_cache = layer_norm_forward(cat, p["ln.scale"], p["ln.shift"])
        act = np.maximum(normed, 0.0)
        outs = [p[f"head{i}.weight"] @ act[i] + p[f"head{i}.bias"] for i in range(nb)]
        return np.concatenate(outs), (caches, ln_cache, normed, act)

    def backward_logits(self, do, cache):
        """Gradients of all controller parameters given d(loss)/d(o)."""
        caches, ln_cache, normed, act = cache
        p, nb, H = self.params, len(self.block_sizes), self.hidden
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        dact = np.zeros_like(act)
        start = 0
        for i, size in enumerate(self.block_sizes):
            d_o = do[start:start + size]
            grads[f"head{i}.weight"] += np.outer(d_o, act[i])
            grads[f"head{i}.bias"] += d_o
            dact[i] = p[f"head{i}.weight"].T @ d_o
            start += size
        dnormed = dact * (normed > 0)
        dcat, grads["ln.scale"], grads["ln.shift"] = layer_norm_backward(dnormed, ln_cache, p["ln.scale"])
        for d, col in (("fwd", slice(0, H)), ("bwd", slice(H, 2 * H))):
            dh_next = np.zeros((1, H))
            for i, c in reversed(caches[d]):
                dh = dh_next + dcat[i:i + 1, col]
                dx, dh_next, dwi, dwh, dbi, dbh = gru_cell_backward(dh, c, p[f"{d}.w_ih"], p[f"{d}.w_hh"])
                grads[f"{d}.w_ih"] += dwi
                grads[f"{d}.w_hh"] += dwh
                grads[f"{d}.b_ih"] += dbi
                grads[f"{d}.b_hh"] += dbh
                grads["embed"][i] += dx[0]
        return grads

    def gumbel_sigmoid(self, o, noise):
        return sigmoid((o + noise + self.bias) / self.tau)


def round_mask(soft):
    """hard = 1 iff soft >= 0.5 (ties keep the channel)."""
    return (np.asarray(soft) >= 0.5).astype(np.float64)


def force_keep(hard, soft, blocks):
    """Switch on the highest-soft group of any block the mask would empty."""
    hard = hard.copy()
    for b, ids in enumerate(blocks):
        if ids and not hard[ids].any():
            best = ids[int(np.argmax(soft[ids]))]
            hard[best] = 1.0
            log.info("block %d fully masked; keeping group %d", b, best)
    return hard


def cn_forward(cn, rng=None, stochastic=True, blocks=None):
    """Emit a mask; returns (MaskVector, cache).  Deterministic when not stochastic."""
    o, cache = cn.logits()
    noise = sample_gumbel(rng, o.shape) if stochastic else np.zeros_like(o)
    soft = cn.gumbel_sigmoid(o, noise)
    hard = round_mask(soft)
    if blocks is not None:
        hard = force_keep(hard, soft, blocks)
    return MaskVector(hard, soft), (o, noise, soft, cache)


def reg_flops(p_current, p_budget):
    """log(max(x, y) / y)."""
    return float(np.log(max(p_current, p_budget) / p_budget))


@dataclass
class CNTape:
    mask: MaskVector
    cn_cache: tuple
    model_tape: object
    dlogits: np.ndarray
    dreg_dlogits: np.ndarray
    data_loss: float
    reg: float


def cn_loss(cn, model, part, batch, p, gamma, rng=None, stochastic=True, reg_mask="emitted"):
    """J = CE(f(x; M, w_hard), y) + gamma * log(max(P, p P_total) / (p P_total)).

    ``reg_mask`` picks the mask whose FLOPs ``P`` is penalized. ``"sampled"``
    uses the soft values of this batch's Gumbel sample, which sit above the
    deterministic emission on average (the noise has mean ~0.577), so the
    penalty keeps pushing after the emitted mask is already under budget.
    ``"emitted"`` (default) uses the hard noise-free mask that is actually
    handed to the target model, with the straight-through gradient taken
    through its noise-free sigmoid.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError("target FLOPs fraction must lie in (0, 1]")
    if reg_mask not in REG_MASKS:
        raise ValueError(f"reg_mask must be one of {REG_MASKS}")
    x, y = batch
    mask, cache = cn_forward(cn, rng, stochastic, part.blocks)
    logits, mtape = G.forward(model, x, "train", mask=mask.hard, part=part, update_stats=False)
    data_loss, dlogits = G.softmax_cross_entropy(logits, y)
    budget = p * G.flops(model)
    if reg_mask == "sampled":
        vals = sig = mask.soft
    else:
        sig = cn.gumbel_sigmoid(cache[0], np.zeros_like(cache[0]))
        vals = force_keep(round_mask(sig), sig, part.blocks)
    p_now, dp = G.flops(model, part.active_channels(vals), part, with_grad=True)
    reg = reg_flops(p_now, budget)
    if p_now > budget:
        # d/do of gamma*log(P): chain through the per-group active count and the sigmoid
        dlogit_reg = gamma * dp[part.block_of_groups()] / p_now * sig * (1.0 - sig) / cn.tau
    else:
        dlogit_reg = np.zeros(part.num_groups)
    tape = CNTape(mask, cache, mtape, dlogits, dlogit_reg, data_loss, reg)
    return data_loss + gamma * reg, tape


def cn_backward(cn, model, tape):
    """Gradients over the controller weights; rounding passes gradients straight through."""
    mgrads = G.backward(model, tape.model_tape, tape.dlogits)
    o, noise, soft, cache = tape.cn_cache
    do = mgrads["mask"] * soft * (1.0 - soft) / cn.tau + tape.dreg_dlogits
    return cn.backward_logits(do, cache)


def emitted_reg_flops(model, part, mask, p):
    """FLOPs regularizer value of an emitted mask (hard or soft values)."""
    budget = p * G.flops(model)
    return reg_flops(G.flops(model, part.active_channels(mask), part), budget)


def cn_update(model, cn, part, d_cn, gamma, p, opt=None, rng=None, batch_size=64,
              reg_mask="emitted"):
    """One pass of controller training over ``d_cn``, then a deterministic emission.

    Returns (mask, stats): the mean objective over the pass and the FLOPs
    regularizer evaluated on the emitted mask the penalty was computed from.
    """
    xs, ys = d_cn
    if len(ys) == 0:
        raise ValueError("controller dataset is empty")
    opt = opt or Adam(lr=1e-3)
    rng = rng or Rng(0, STREAM_CONTROLLER)
    order = rng.permutation(len(ys))
    losses = []
    for start in range(0, len(ys), batch_size):
        idx = order[start:start + batch_size]
        J, tape = cn_loss(cn, model, part, (xs[idx], ys[idx]), p, gamma, rng, reg_mask=reg_mask)
        opt.step(cn.params, cn_backward(cn, model, tape))
        losses.append(J)
    mask, _ = cn_forward(cn, stochastic=False, blocks=part.blocks)
    shown = mask.soft if reg_mask == "sampled" else mask.hard
    stats = {"cn_loss": float(np.mean(losses)),
             "reg_flops": emitted_reg_flops(model, part, shown, p)}
    return mask, stats
