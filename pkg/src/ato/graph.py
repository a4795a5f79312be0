"""Layer graph of the target network: construction, forward/backward, MACs.

A :class:`ModelGraph` is an ordered list of :class:`LayerNode` objects whose
parameters live in ``graph.params`` (trainable) and ``graph.buffers`` (BN
running statistics), keyed ``"<node>.<param>"``.  Edges always point to
earlier nodes, so list order is a topological order.
"""
from dataclasses import dataclass, field
import copy
import shlex

import numpy as np

from . import kernels
from .tensor import Rng, STREAM_INIT, ShapeError

KINDS = ("conv", "bn", "relu", "linear", "gap", "add", "ln")
_ALIASES = {
    "conv2d": "conv", "batchnorm": "bn", "linear": "linear", "fc": "linear",
    "pool": "gap", "globalavgpool": "gap", "residual": "add", "join": "add",
    "layernorm": "ln",
}


class SpecError(ValueError):
    """Malformed or inconsistent model description."""


class TapeError(RuntimeError):
    """Backward called with a tape that does not belong to this graph/forward."""


@dataclass
class LayerNode:
    name: str
    kind: str
    inputs: list
    hyper: dict = field(default_factory=dict)
    in_shape: tuple = ()
    out_shape: tuple = ()


@dataclass
class ForwardTape:
    graph_id: int
    mode: str
    caches: list
    mask: object = None
    used: bool = False


class ModelGraph:
    def __init__(self, nodes, input_shape, params, buffers):
        self.nodes = nodes
        self.input_shape = tuple(input_shape)
        self.params = params
        self.buffers = buffers
        self.partition = None

    def __len__(self):
        return len(self.nodes)

    def index(self, name):
        for i, node in enumerate(self.nodes):
            if node.name == name:
                return i
        raise KeyError(name)

    def consumers(self, i):
        return [j for j, node in enumerate(self.nodes) if i in node.inputs]

    def num_params(self):
        return int(sum(p.size for p in self.params.values()))

    def state(self):
        """Parameters and buffers in one dict (shared arrays, not copies)."""
        return {**self.params, **self.buffers}

    def clone(self):
        g = ModelGraph(copy.deepcopy(self.nodes), self.input_shape,
                       {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.buffers.items()})
        g.partition = self.partition
        return g

    def load_state(self, state):
        for key in self.params:
            self.params[key] = np.array(state[key], dtype=np.float64)
        for key in self.buffers:
            self.buffers[key] = np.array(state[key], dtype=np.float64)

    @property
    def output_shape(self):
        return self.nodes[-1].out_shape


# ---------------------------------------------------------------- parsing


def _parse_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def parse_layer_lines(text):
    """Split the layer description into (label, kind, positional, kwargs) tuples."""
    rows = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        label = None
        head, _, rest = line.partition(":")
        if rest and " " not in head.strip() and "=" not in head:
            label, line = head.strip(), rest.strip()
        tokens = shlex.split(line)
        kind = tokens[0].lower()
        kind = _ALIASES.get(kind, kind)
        if kind not in KINDS:
            raise SpecError(f"unknown layer kind {tokens[0]!r}")
        args, kwargs = [], {}
        for tok in tokens[1:]:
            if "=" in tok:
                key, _, val = tok.partition("=")
                kwargs[key.strip()] = _parse_value(val.strip())
            else:
                args.append(tok)
        rows.append((label, kind, args, kwargs))
    return rows


def spec_parse(text, input_shape, seed=0):
    """Build a graph from a layer list, with He-normal init and BN gamma=1, beta=0.

    One layer per line: ``[label:] kind key=value ...``.  ``add a b`` joins the
    outputs of two labelled layers; every other layer consumes its predecessor.
    """
    rows = parse_layer_lines(text)
    if not rows:
        raise SpecError("empty layer list")
    rng = Rng(seed, STREAM_INIT)
    nodes, params, buffers, labels = [], {}, {}, {}
    counts = {}
    shape = tuple(int(s) for s in input_shape)
    if len(shape) != 3:
        raise SpecError(f"input shape must be C,H,W, got {shape}")
    prev_shape = shape
    for label, kind, args, kw in rows:
        counts[kind] = counts.get(kind, 0) + 1
        name = label or f"{kind}{counts[kind]}"
        if name in labels:
            raise SpecError(f"duplicate layer label {name!r}")
        idx = len(nodes)
        if kind == "add":
            if len(args) != 2:
                raise SpecError("add needs exactly two input labels")
            try:
                inputs = [labels[a] for a in args]
            except KeyError as exc:
                raise SpecError(f"add references unknown label {exc}") from None
            shapes = [nodes[i].out_shape for i in inputs]
            if shapes[0] != shapes[1]:
                raise ShapeError(f"add {name}: input shapes differ {shapes}")
            in_shape = shapes[0]
        else:
            inputs = [] if idx == 0 else [idx - 1]
            in_shape = prev_shape if idx == 0 else nodes[idx - 1].out_shape
        hyper = dict(kw)
        if kind == "conv":
            if len(in_shape) != 3:
                raise ShapeError(f"conv {name} needs a C,H,W input, got {in_shape}")
            c_in = in_shape[0]
            if "in" in hyper and hyper["in"] != c_in:
                raise ShapeError(f"conv {name}: declared in={hyper['in']} but input has {c_in} channels")
            out, k = int(hyper["out"]), int(hyper.get("k", 3))
            stride, pad = int(hyper.get("stride", 1)), int(hyper.get("pad", k // 2))
            ho, wo = kernels.conv_output_shape(in_shape[1], in_shape[2], k, stride, pad)
            if ho < 1 or wo < 1:
                raise ShapeError(f"conv {name}: empty output")
            hyper.update(out=out, k=k, stride=stride, pad=pad, bias=bool(hyper.get("bias", False)))
            params[f"{name}.weight"] = rng.normal((out, c_in, k, k), np.sqrt(2.0 / (c_in * k * k)))
            if hyper["bias"]:
                params[f"{name}.bias"] = np.zeros(out)
            out_shape = (out, ho, wo)
        elif kind == "bn":
            if len(in_shape) != 3:
                raise ShapeError(f"bn {name} needs a C,H,W input")
            c = in_shape[0]
            hyper.setdefault("momentum", 0.1)
            hyper.setdefault("eps", 1e-5)
            params[f"{name}.gamma"] = np.ones(c)
            params[f"{name}.beta"] = np.zeros(c)
            buffers[f"{name}.running_mean"] = np.zeros(c)
            buffers[f"{name}.running_var"] = np.ones(c)
            out_shape = in_shape
        elif kind == "linear":
            fan_in = int(np.prod(in_shape))
            if "in" in hyper and hyper["in"] != fan_in:
                raise ShapeError(f"linear {name}: declared in={hyper['in']} but flattened input has {fan_in}")
            out = int(hyper["out"])
            hyper.update(out=out)
            params[f"{name}.weight"] = rng.normal((out, fan_in), np.sqrt(2.0 / fan_in))
            params[f"{name}.bias"] = np.zeros(out)
            out_shape = (out,)
        elif kind == "ln":
            feat = int(np.prod(in_shape))
            hyper.setdefault("eps", 1e-5)
            params[f"{name}.scale"] = np.ones(feat)
            params[f"{name}.shift"] = np.zeros(feat)
            out_shape = in_shape
        elif kind == "gap":
            if len(in_shape) != 3:
                raise ShapeError(f"gap {name} needs a C,H,W input")
            out_shape = (in_shape[0],)
        else:  # relu, add
            out_shape = in_shape
        nodes.append(LayerNode(name, kind, inputs, hyper, tuple(in_shape), tuple(out_shape)))
        labels[name] = idx
    return ModelGraph(nodes, shape, params, buffers)


# ---------------------------------------------------------------- forward


def _mask_vector(g, mask, part):
    if mask is None:
        return None, None
    part = part or g.partition
    if part is None:
        raise ShapeError("masked forward needs a partition attached to the graph")
    w = np.asarray(getattr(mask, "hard", mask), dtype=np.float64)
    if w.shape != (part.num_groups,):
        raise ShapeError(f"mask length {w.size} != number of groups {part.num_groups}")
    return w, part


def forward(g, x, mode="train", mask=None, part=None, update_stats=True):
    """Run the graph on a batch; returns (output, tape).

    Train mode normalizes BN with batch statistics and (when ``update_stats``)
    folds them into the running estimates; eval mode uses the running ones.
    With a mask, every grouped post-BN channel is multiplied by its mask value.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != g.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != model input {g.input_shape}")
    w, part = _mask_vector(g, mask, part)
    outs, caches = [], []
    for i, node in enumerate(g.nodes):
        xin = [outs[j] for j in node.inputs] if node.inputs else [x]
        y, cache = _FWD[node.kind](g, node, xin, mode, update_stats)
        if w is not None and node.kind == "bn" and i in part.bn_groups:
            m = w[part.bn_groups[i]]
            cache = (cache, y, m)
            y = y * m[None, :, None, None]
        caches.append(cache)
        outs.append(y)
    tape = ForwardTape(id(g), mode, caches, None if w is None else (w, part))
    return outs[-1], tape


def _conv_fwd(g, node, xin, mode, update_stats):
    x = xin[0]
    h = node.hyper
    k, stride, pad = h["k"], h["stride"], h["pad"]
    wt = g.params[f"{node.name}.weight"]
    n = x.shape[0]
    ho, wo = node.out_shape[1:]
    cols = kernels.im2col(x, k, stride, pad)
    out = cols @ wt.reshape(wt.shape[0], -1).T
    if h.get("bias"):
        out += g.params[f"{node.name}.bias"]
    y = np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))
    return y, (cols, x.shape)


def _bn_fwd(g, node, xin, mode, update_stats):
    x = xin[0]
    eps = node.hyper["eps"]
    gamma = g.params[f"{node.name}.gamma"]
    beta = g.params[f"{node.name}.beta"]
    rm_key, rv_key = f"{node.name}.running_mean", f"{node.name}.running_var"
    if mode == "train":
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            mom = node.hyper["momentum"]
            count = x.size // x.shape[1]
            unbiased = var * count / max(count - 1, 1)
            g.buffers[rm_key] = (1 - mom) * g.buffers[rm_key] + mom * mu
            rv = (1 - mom) * g.buffers[rv_key] + mom * unbiased
            g.buffers[rv_key] = np.maximum(rv, np.finfo(np.float64).tiny)
    else:
        mu, var = g.buffers[rm_key], g.buffers[rv_key]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, (xhat, inv_std, mode)


def _relu_fwd(g, node, xin, mode, update_stats):
    x = xin[0]
    return np.maximum(x, 0.0), x > 0


def _linear_fwd(g, node, xin, mode, update_stats):
    x = xin[0]
    flat = x.reshape(x.shape[0], -1)
    y = flat @ g.params[f"{node.name}.weight"].T + g.params[f"{node.name}.bias"]
    return y, (flat, x.shape)


def _gap_fwd(g, node, xin, mode, update_stats):
    x = xin[0]
    return x.mean(axis=(2, 3)), x.shape


def _add_fwd(g, node, xin, mode, update_stats):
    return xin[0] + xin[1], None


def _ln_fwd(g, node, xin, mode, update_stats):
    x = xin[0]
    flat = x.reshape(x.shape[0], -1)
    mu = flat.mean(axis=1, keepdims=True)
    var = flat.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + node.hyper["eps"])
    xhat = (flat - mu) * inv_std
    y = xhat * g.params[f"{node.name}.scale"] + g.params[f"{node.name}.shift"]
    return y.reshape(x.shape), (xhat, inv_std, x.shape)


_FWD = {"conv": _conv_fwd, "bn": _bn_fwd, "relu": _relu_fwd, "linear": _linear_fwd,
        "gap": _gap_fwd, "add": _add_fwd, "ln": _ln_fwd}


# ---------------------------------------------------------------- backward


def backward(g, tape, grad_out):
    """Gradients of every parameter given d(loss)/d(output).

    Returns a dict keyed like ``g.params``; when the forward was masked it
    also holds ``"mask"``, the gradient with respect to the mask vector.
    """
    if tape.graph_id != id(g) or len(tape.caches) != len(g.nodes):
        raise TapeError("tape was recorded on a different graph")
    grads = {k: np.zeros_like(v) for k, v in g.params.items()}
    dmask = None
    if tape.mask is not None:
        w, part = tape.mask
        dmask = np.zeros_like(w)
    douts = [None] * len(g.nodes)
    douts[-1] = np.asarray(grad_out, dtype=np.float64)
    for i in range(len(g.nodes) - 1, -1, -1):
        dy = douts[i]
        if dy is None:
            continue
        node = g.nodes[i]
        cache = tape.caches[i]
        if tape.mask is not None and node.kind == "bn" and i in part.bn_groups:
            cache, y_pre, m = cache
            np.add.at(dmask, part.bn_groups[i], np.sum(dy * y_pre, axis=(0, 2, 3)))
            dy = dy * m[None, :, None, None]
        dins = _BWD[node.kind](g, node, cache, dy, grads)
        for j, dx in zip(node.inputs, dins):
            douts[j] = dx if douts[j] is None else douts[j] + dx
    if dmask is not None:
        grads["mask"] = dmask
    return grads


def _conv_bwd(g, node, cache, dy, grads):
    cols, x_shape = cache
    h = node.hyper
    wt = g.params[f"{node.name}.weight"]
    dflat = dy.transpose(0, 2, 3, 1).reshape(-1, wt.shape[0])
    grads[f"{node.name}.weight"] += (dflat.T @ cols).reshape(wt.shape)
    if h.get("bias"):
        grads[f"{node.name}.bias"] += dflat.sum(axis=0)
    if not node.inputs:
        return []
    dcols = dflat @ wt.reshape(wt.shape[0], -1)
    n, c, hh, ww = x_shape
    return [kernels.col2im(dcols, n, c, hh, ww, h["k"], h["stride"], h["pad"])]


def _bn_bwd(g, node, cache, dy, grads):
    xhat, inv_std, mode = cache
    gamma = g.params[f"{node.name}.gamma"]
    grads[f"{node.name}.gamma"] += np.sum(dy * xhat, axis=(0, 2, 3))
    grads[f"{node.name}.beta"] += np.sum(dy, axis=(0, 2, 3))
    if not node.inputs:
        return []
    dxhat = dy * gamma[None, :, None, None]
    if mode == "eval":
        return [dxhat * inv_std[None, :, None, None]]
    mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    return [(dxhat - mean_d - xhat * mean_dx) * inv_std[None, :, None, None]]


def _relu_bwd(g, node, cache, dy, grads):
    return [dy * cache]


def _linear_bwd(g, node, cache, dy, grads):
    flat, x_shape = cache
    wt = g.params[f"{node.name}.weight"]
    grads[f"{node.name}.weight"] += dy.T @ flat
    grads[f"{node.name}.bias"] += dy.sum(axis=0)
    return [(dy @ wt).reshape(x_shape)]


def _gap_bwd(g, node, cache, dy, grads):
    n, c, h, w = cache
    return [np.broadcast_to(dy[:, :, None, None] / (h * w), cache).copy()]


def _add_bwd(g, node, cache, dy, grads):
    return [dy, dy]


def _ln_bwd(g, node, cache, dy, grads):
    xhat, inv_std, x_shape = cache
    dflat = dy.reshape(dy.shape[0], -1)
    grads[f"{node.name}.scale"] += np.sum(dflat * xhat, axis=0)
    grads[f"{node.name}.shift"] += np.sum(dflat, axis=0)
    dxhat = dflat * g.params[f"{node.name}.scale"]
    dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) * inv_std
    return [dx.reshape(x_shape)]


_BWD = {"conv": _conv_bwd, "bn": _bn_bwd, "relu": _relu_bwd, "linear": _linear_bwd,
        "gap": _gap_bwd, "add": _add_bwd, "ln": _ln_bwd}


# ---------------------------------------------------------------- loss


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# ---------------------------------------------------------------- FLOPs


def _channel_sources(g, part):
    if part is None:
        return [None] * len(g.nodes)
    return [part.node_block.get(i) for i in range(len(g.nodes))]


def layer_macs(g):
    """Dense per-sample MACs of each conv/linear node, keyed by node name."""
    out = {}
    for node in g.nodes:
        if node.kind == "conv":
            cin, cout = node.in_shape[0], node.out_shape[0]
            out[node.name] = cin * cout * node.hyper["k"] ** 2 * node.out_shape[1] * node.out_shape[2]
        elif node.kind == "linear":
            out[node.name] = int(np.prod(node.in_shape)) * node.out_shape[0]
    return out


def flops(g, active=None, part=None, with_grad=False):
    """Multiply-accumulate count of one forward pass for a single sample.

    ``active`` gives the (possibly fractional) live channel count per block of
    ``part``; None means every channel is live.  BN, ReLU, pooling and joins
    are not counted.  With ``with_grad`` also returns d(MACs)/d(active).
    """
    part = part if part is not None else g.partition
    src = _channel_sources(g, part) if active is not None else [None] * len(g.nodes)
    if active is not None:
        active = np.asarray(active, dtype=np.float64)
        grad = np.zeros_like(active)
    total = 0.0
    for i, node in enumerate(g.nodes):
        if node.kind not in ("conv", "linear"):
            continue
        j = node.inputs[0] if node.inputs else None
        in_src = src[j] if j is not None else None
        in_full = node.in_shape[0]
        per_in = int(np.prod(node.in_shape)) // in_full if node.kind == "linear" else 1
        cin = active[in_src] if in_src is not None else in_full
        if node.kind == "conv":
            out_src = src[i]
            cout = active[out_src] if out_src is not None else node.out_shape[0]
            spatial = node.hyper["k"] ** 2 * node.out_shape[1] * node.out_shape[2]
            total += cin * cout * spatial
            if active is not None:
                if in_src is not None:
                    grad[in_src] += cout * spatial
                if out_src is not None:
                    grad[out_src] += cin * spatial
        else:
            out = node.out_shape[0]
            total += cin * per_in * out
            if active is not None and in_src is not None:
                grad[in_src] += per_in * out
    total = float(total)
    if with_grad:
        return total, (grad if active is not None else None)
    return total
