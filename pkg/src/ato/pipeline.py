"""Joint training and pruning run, compression, and evaluation.

Per epoch: an unmasked pass over the training set with the mirror-descent
stepper (masked groups projected once the warm-up is over), then, inside the
controller window, one controller pass that re-emits the mask.  After the
window closes the mask is frozen; at the end masked channels are physically
removed.
"""
from dataclasses import dataclass, field
import copy
import csv
import io
import logging

import numpy as np

from . import checkpoint as ckpt_io
from . import data as D
from . import graph as G
from . import zig
from .config import RunConfig
from .controller import ControllerNet, MaskVector, cn_update, emitted_reg_flops
from .models import PRESETS
from .optim import Adam, OptimizerState, RecipeSchedule, Schedule, step
from .projectors import NetworkGroups, RegularizerConfig, group_lambda, penalty_value
from .tensor import (Rng, STREAM_CONTROLLER, STREAM_GUMBEL, STREAM_SHUFFLE,
                     STREAM_SPLIT)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "split", "loss", "accuracy", "flops_ratio", "group_sparsity",
                  "penalty_value", "reg_flops", "eta"]
ZERO_TOL = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, message, arrays):
        super().__init__(message)
        self.arrays = arrays


class MaskNotFrozen(RuntimeError):
    pass


# ---------------------------------------------------------------- setup


def build_model(cfg):
    m = cfg.values["model"]
    text = m["layers"] if m["layers"].strip() else PRESETS[m["preset"]]
    shape = tuple(int(s) for s in str(m["input"]).split(","))
    model = G.spec_parse(text, shape, seed=cfg.get("run", "seed"))
    return model, build_partition(model, cfg)


def build_partition(model, cfg):
    m = cfg.values["model"]
    protect = zig.default_protect(model, protect_stem=m["protect_stem"])
    for name in filter(None, (s.strip() for s in m["protect"].split(","))):
        protect.add(model.index(name))
    return zig.build_partition(model, protect)


def load_data(cfg):
    d = cfg.values["data"]
    if d["source"] == "synthetic":
        shape = tuple(int(s) for s in str(cfg.get("model", "input")).split(","))
        return D.synthetic(d["n_train"], d["n_test"], shape, d["n_classes"],
                           d["separation"], seed=cfg.get("run", "seed"))
    if d["source"] == "idx":
        train = D.load_idx_pair(d["train_images"], d["train_labels"], d["n_classes"])
        test = D.load_idx_pair(d["test_images"], d["test_labels"], d["n_classes"])
        return train, test
    raise D.DataConfigError(f"unknown data source {d['source']!r}")


def dense_baseline(cfg):
    """Same run with the controller disabled: all-ones mask, no penalty."""
    out = cfg.copy()
    out.values["schedule"]["t_start"] = cfg.epochs + 1
    out.values["schedule"]["t_end"] = cfg.epochs + 1
    return out


# ---------------------------------------------------------------- evaluation


def evaluate(model, dataset, mask=None, part=None, batch_size=500):
    """Eval-mode mean loss and top-1 accuracy, optionally under a mask."""
    total_loss, correct = 0.0, 0
    n = len(dataset)
    for start in range(0, n, batch_size):
        xb = dataset.x[start:start + batch_size]
        yb = dataset.y[start:start + batch_size]
        logits, _ = G.forward(model, xb, "eval", mask=mask, part=part)
        loss, _ = G.softmax_cross_entropy(logits, yb)
        total_loss += loss * len(yb)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return total_loss / n, correct / n


def flops_ratio(model, part, hard):
    return G.flops(model, part.active_channels(hard), part) / G.flops(model)


# ---------------------------------------------------------------- training


@dataclass
class RunResult:
    model: G.ModelGraph
    part: zig.ZigPartition
    mask: MaskVector
    controller: ControllerNet
    metrics: list
    arrays: dict
    mask_history: list = field(default_factory=list)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def _state_arrays(cfg, model, opt_state, cn, cn_opt, mask, epoch, rngs):
    arrays = {"meta.config": ckpt_io.encode_text(cfg.to_text()),
              "epoch": np.array([float(epoch)])}
    for k, v in model.params.items():
        arrays[f"param.{k}"] = v
    for k, v in model.buffers.items():
        arrays[f"buffer.{k}"] = v
    arrays["opt.t"] = np.array([float(opt_state.t)])
    for k, v in opt_state.m.items():
        arrays[f"opt.m.{k}"] = v
    for k, v in opt_state.v.items():
        arrays[f"opt.v.{k}"] = v
    for k, v in cn.params.items():
        arrays[f"cn.param.{k}"] = v
    arrays.update(cn_opt.state_arrays("cn.adam"))
    arrays["mask.hard"] = mask.hard.astype(np.uint8)
    arrays["mask.soft"] = mask.soft
    arrays["mask.frozen"] = np.array([int(mask.frozen)], dtype=np.uint8)
    for name, r in rngs.items():
        arrays[f"rng.{name}"] = ckpt_io.encode_text(r.get_state())
    return arrays


def train(cfg, log_every=0):
    """Run the full joint training/pruning schedule; returns a :class:`RunResult`."""
    cfg = cfg.copy().validate() if isinstance(cfg, RunConfig) else cfg
    seed = cfg.get("run", "seed")
    T = cfg.epochs
    t_w, t_start, t_end = cfg.window()
    o, c = cfg.values["optimizer"], cfg.values["controller"]

    model, part = build_model(cfg)
    layout = NetworkGroups(model, part)
    train_set, test_set = load_data(cfg)
    _, d_cn = D.split_dataset(train_set, c["d_cn_fraction"], Rng(seed, STREAM_SPLIT))
    reg_cfg = RegularizerConfig(o["lambda"], o["projector"], o["epsilon_hs"])

    cn = ControllerNet([len(b) for b in part.blocks], seed=seed)
    cn_opt = Adam(lr=c["cn_lr"])
    mask = MaskVector.ones(part.num_groups)
    geometry = "adam" if o["optimizer"] == "adam" else "identity"
    opt_state = OptimizerState.zeros_like(model.params, beta=o["beta"],
                                          eps_adam=o["eps_adam"], geometry=geometry)
    rngs = {"shuffle": Rng(seed, STREAM_SHUFFLE), "gumbel": Rng(seed, STREAM_GUMBEL),
            "controller": Rng(seed, STREAM_CONTROLLER)}
    n_batches = -(-len(train_set) // o["batch"])
    if o["schedule"] == "theory":
        sched, per_step = Schedule(o["c_hat"], o["c_bar"], o["c1"]), True
    else:
        sched, per_step = RecipeSchedule(o["lr"], o["momentum"], T), False
    def shown_mask(m):
        return m.soft if c["reg_mask"] == "sampled" else m.hard

    rows, history = [], []
    for epoch in range(1, T + 1):
        lambdas = group_lambda(mask, reg_cfg) if epoch >= t_w else None
        losses, correct = [], 0
        eta = 0.0
        for b, idx in enumerate(D.batches(len(train_set), o["batch"], rngs["shuffle"])):
            xb, yb = train_set.x[idx], train_set.y[idx]
            logits, tape = G.forward(model, xb, "train")
            loss, dlogits = G.softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                arrays = _state_arrays(cfg, model, opt_state, cn, cn_opt, mask, epoch, rngs)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}", arrays)
            grads = G.backward(model, tape, dlogits)
            t = (epoch - 1) * n_batches + b
            eta, alpha = sched.at(t) if per_step else sched.at(epoch - 1)
            step(model.params, grads, opt_state, eta, alpha, layout, lambdas, reg_cfg,
                 o["weight_decay"])
            losses.append(loss * len(yb))
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))

        if t_start <= epoch <= t_end and not mask.frozen:
            if c["cn_optimizer"] == "per_pass":
                cn_opt = Adam(lr=c["cn_lr"])
            mask, stats = cn_update(model, cn, part, (d_cn.x, d_cn.y), c["gamma"], c["p"],
                                    cn_opt, rngs["gumbel"], c["cn_batch"], c["reg_mask"])
        if epoch >= t_end:
            mask.frozen = True
        history.append(mask.hard.copy())

        lam_now = group_lambda(mask, reg_cfg) if epoch >= t_w else np.zeros(part.num_groups)
        norms = layout.norms(model.params)
        common = {
            "epoch": epoch,
            "flops_ratio": flops_ratio(model, part, mask.hard),
            "group_sparsity": float(np.mean(norms <= ZERO_TOL)) if part.num_groups else 0.0,
            "penalty_value": penalty_value(model.params, layout, lam_now),
            "reg_flops": emitted_reg_flops(model, part, shown_mask(mask), c["p"]),
            "eta": float(eta),
        }
        rows.append({**common, "split": "train", "loss": float(np.sum(losses) / len(train_set)),
                     "accuracy": correct / len(train_set)})
        test_loss, test_acc = evaluate(model, test_set, mask.hard, part)
        rows.append({**common, "split": "test", "loss": test_loss, "accuracy": test_acc})
        if log_every and epoch % log_every == 0:
            log.info("epoch %d loss %.4f test acc %.4f flops %.3f sparsity %.3f", epoch,
                     rows[-2]["loss"], test_acc, common["flops_ratio"], common["group_sparsity"])

    mask.frozen = True
    arrays = _state_arrays(cfg, model, opt_state, cn, cn_opt, mask, T, rngs)
    return RunResult(model, part, mask, cn, rows, arrays, history)


# ---------------------------------------------------------------- checkpoints


def restore(arrays):
    """Rebuild (cfg, model, partition, mask) from checkpoint arrays."""
    from .config import parse_text
    cfg = parse_text(ckpt_io.decode_text(arrays["meta.config"]), env={})
    model, part = build_model(cfg)
    state = {}
    for k in model.params:
        state[k] = arrays[f"param.{k}"]
    for k in model.buffers:
        state[k] = arrays[f"buffer.{k}"]
    model.load_state(state)
    mask = MaskVector(arrays["mask.hard"].astype(np.float64), arrays["mask.soft"].copy(),
                      bool(arrays["mask.frozen"][0]))
    return cfg, model, part, mask


# ---------------------------------------------------------------- compression


@dataclass
class CompressedModel:
    graph: G.ModelGraph
    kept: list  # per block, kept channel indices
    residual_norms: dict  # group id -> norm that was hard-zeroed


def compress(model, part, mask, require_frozen=True):
    """Physically remove masked channels; the result needs no further training.

    Masked groups whose norm still exceeds 1e-8 are hard-zeroed first and
    their residual norms reported.
    """
    if require_frozen and not getattr(mask, "frozen", True):
        raise MaskNotFrozen("mask not frozen")
    hard = np.asarray(getattr(mask, "hard", mask), dtype=np.float64)
    if hard.shape != (part.num_groups,):
        raise ValueError("mask length does not match the partition")
    layout = NetworkGroups(model, part)
    norms = layout.norms(model.params)
    residual = {int(gid): float(norms[gid]) for gid in np.flatnonzero(hard == 0)
                if norms[gid] > ZERO_TOL}
    if residual:
        log.warning("hard-zeroing %d masked groups with residual norm (max %.3g)",
                    len(residual), max(residual.values()))
    state = zig.zero_groups(model.state(), model, part, hard)

    kept = []
    for ids in part.blocks:
        keep = np.flatnonzero(hard[ids] != 0)
        if keep.size == 0:
            raise AssertionError("mask empties a whole layer")
        kept.append(keep)

    nodes = copy.deepcopy(model.nodes)
    params, buffers = {}, {}
    for i, node in enumerate(nodes):
        b_out = part.node_block.get(i)
        j = node.inputs[0] if node.inputs else None
        b_in = part.node_block.get(j) if j is not None else None
        if node.kind == "conv":
            wt = state[f"{node.name}.weight"]
            if b_out is not None:
                wt = wt[kept[b_out]]
            if b_in is not None:
                wt = wt[:, kept[b_in]]
            params[f"{node.name}.weight"] = wt.copy()
            if node.hyper.get("bias"):
                bias = state[f"{node.name}.bias"]
                params[f"{node.name}.bias"] = (bias[kept[b_out]] if b_out is not None else bias).copy()
            node.hyper["out"] = wt.shape[0]
        elif node.kind == "bn":
            sel = kept[b_out] if b_out is not None else slice(None)
            for key in ("gamma", "beta"):
                params[f"{node.name}.{key}"] = state[f"{node.name}.{key}"][sel].copy()
            for key in ("running_mean", "running_var"):
                buffers[f"{node.name}.{key}"] = state[f"{node.name}.{key}"][sel].copy()
        elif node.kind == "linear":
            wt = state[f"{node.name}.weight"]
            if b_in is not None:
                c_full = node.in_shape[0]
                per = wt.shape[1] // c_full
                cols = (kept[b_in][:, None] * per + np.arange(per)[None, :]).ravel()
                wt = wt[:, cols]
            params[f"{node.name}.weight"] = wt.copy()
            params[f"{node.name}.bias"] = state[f"{node.name}.bias"].copy()
        elif node.kind == "ln":
            for key in ("scale", "shift"):
                params[f"{node.name}.{key}"] = state[f"{node.name}.{key}"].copy()
        if b_in is not None:
            node.in_shape = (len(kept[b_in]),) + tuple(node.in_shape[1:])
        if b_out is not None:
            node.out_shape = (len(kept[b_out]),) + tuple(node.out_shape[1:])
        if node.kind == "linear":
            node.hyper["in"] = int(np.prod(node.in_shape))
    out = G.ModelGraph(nodes, model.input_shape, params, buffers)
    return CompressedModel(out, kept, residual)


def max_relative_deviation(a, b):
    scale = max(np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)
