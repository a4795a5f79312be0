"""Central finite-difference checks of every analytic backward pass.

Each check draws a random small instance, contracts the output with a fixed
random tensor to get a scalar, and compares analytic gradients against
``(f(x + h) - f(x - h)) / 2h`` on (a sample of) coordinates.  The error of
one tensor is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
"""
import numpy as np

from . import controller as C
from . import graph as G
from . import zig
from .tensor import Rng

STEP = 1e-5

LAYER_GRAPHS = {
    "conv": ("conv out=3 k=3 pad=1\nconv out=2 k=3 stride=2 pad=1", (2, 5, 5)),
    "bn": ("conv out=3 k=1\nbn\nconv out=2 k=1", (2, 3, 3)),
    "linear": ("linear out=5\nlinear out=3", (2, 2, 2)),
    "ln": ("linear out=6\nln\nlinear out=3", (2, 2, 2)),
    "graph": ("s: conv out=3 k=3\nbn\nr: relu\nconv out=3 k=3\nt: bn\nadd r t\nrelu\ngap\nlinear out=4",
              (2, 4, 4)),
}


def rel_error(a, n):
    a, n = np.ravel(a), np.ravel(n)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
    return float(np.linalg.norm(a - n) / denom)


def _coords(shape, rng, limit):
    size = int(np.prod(shape))
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.permutation(size)[:limit])


def numeric_grad(f, arr, coords, h=STEP):
    """Central differences of scalar ``f()`` w.r.t. entries ``coords`` of ``arr`` (mutated and restored)."""
    flat = arr.reshape(-1)
    out = np.zeros(len(coords))
    for n, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def check_graph(kind, seed, limit=40, with_mask=False):
    """Max relative error over all parameters (and the mask) of a small graph."""
    rng = Rng(seed, 100)
    text, shape = LAYER_GRAPHS[kind]
    g = G.spec_parse(text, shape, seed=seed)
    for key in g.params:  # move BN/LN affine params off their trivial init
        g.params[key] = g.params[key] + rng.normal(g.params[key].shape, 0.3)
    x = rng.normal((3,) + shape)
    mask = None
    if with_mask:
        part = zig.build_partition(g, protect=zig.default_protect(g, protect_stem=False))
        mask = rng.uniform((part.num_groups,))
    out, tape = G.forward(g, x, "train", mask=mask, update_stats=False)
    r = rng.normal(out.shape)
    grads = G.backward(g, tape, r)

    def f():
        y, _ = G.forward(g, x, "train", mask=mask, update_stats=False)
        return float(np.sum(y * r))

    worst = 0.0
    for key, arr in g.params.items():
        idx = _coords(arr.shape, rng, limit)
        worst = max(worst, rel_error(grads[key].reshape(-1)[idx], numeric_grad(f, arr, idx)))
    if mask is not None:
        idx = np.arange(mask.size)
        worst = max(worst, rel_error(grads["mask"], numeric_grad(f, mask, idx)))
    return worst


def check_gru_cell(seed):
    rng = Rng(seed, 101)
    n, d, h = 3, 4, 5
    arrays = {"x": rng.normal((n, d)), "h": rng.normal((n, h)),
              "w_ih": rng.normal((3 * h, d), 0.5), "w_hh": rng.normal((3 * h, h), 0.5),
              "b_ih": rng.normal(3 * h, 0.5), "b_hh": rng.normal(3 * h, 0.5)}
    r = rng.normal((n, h))

    def f():
        y, _ = C.gru_cell_forward(arrays["x"], arrays["h"], arrays["w_ih"], arrays["w_hh"],
                                  arrays["b_ih"], arrays["b_hh"])
        return float(np.sum(y * r))

    _, cache = C.gru_cell_forward(arrays["x"], arrays["h"], arrays["w_ih"], arrays["w_hh"],
                                  arrays["b_ih"], arrays["b_hh"])
    dx, dh, dwi, dwh, dbi, dbh = C.gru_cell_backward(r, cache, arrays["w_ih"], arrays["w_hh"])
    analytic = {"x": dx, "h": dh, "w_ih": dwi, "w_hh": dwh, "b_ih": dbi, "b_hh": dbh}
    return max(rel_error(analytic[k], numeric_grad(f, arrays[k], np.arange(arrays[k].size)))
               for k in arrays)


def check_layer_norm(seed):
    rng = Rng(seed, 102)
    arrays = {"x": rng.normal((3, 7)), "scale": rng.normal(7), "shift": rng.normal(7)}
    r = rng.normal((3, 7))

    def f():
        y, _ = C.layer_norm_forward(arrays["x"], arrays["scale"], arrays["shift"])
        return float(np.sum(y * r))

    _, cache = C.layer_norm_forward(arrays["x"], arrays["scale"], arrays["shift"])
    dx, dscale, dshift = C.layer_norm_backward(r, cache, arrays["scale"])
    analytic = {"x": dx, "scale": dscale, "shift": dshift}
    return max(rel_error(analytic[k], numeric_grad(f, arrays[k], np.arange(arrays[k].size)))
               for k in arrays)


def check_gumbel_surrogate(seed, limit=12):
    """Whole controller with rounding replaced by identity: d(sum c*soft)/dW."""
    rng = Rng(seed, 103)
    cn = C.ControllerNet([3, 2, 4], seed=seed, embed_dim=6, hidden=5)
    noise = C.sample_gumbel(rng, (cn.num_groups,))
    c = rng.normal(cn.num_groups)

    def f():
        o, _ = cn.logits()
        return float(np.sum(c * cn.gumbel_sigmoid(o, noise)))

    o, cache = cn.logits()
    soft = cn.gumbel_sigmoid(o, noise)
    grads = cn.backward_logits(c * soft * (1 - soft) / cn.tau, cache)
    worst = 0.0
    for key, arr in cn.params.items():
        idx = _coords(arr.shape, rng, limit)
        worst = max(worst, rel_error(grads[key].reshape(-1)[idx], numeric_grad(f, arr, idx)))
    return worst


CHECKS = {
    "conv": lambda s: check_graph("conv", s),
    "bn_train": lambda s: check_graph("bn", s),
    "linear": lambda s: check_graph("linear", s),
    "layernorm": lambda s: max(check_graph("ln", s), check_layer_norm(s)),
    "mask": lambda s: check_graph("graph", s, with_mask=True),
    "gru_cell": check_gru_cell,
    "gumbel_sigmoid": check_gumbel_surrogate,
}


def run_all(instances=20, seed=0):
    """Worst relative error per layer kind over ``instances`` random draws."""
    return {name: max(fn(seed + i) for i in range(instances)) for name, fn in CHECKS.items()}
