"""Acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line with the
measured quantities before asserting, so ``pytest -s`` (or running this file
directly) doubles as a report.  Criteria 8-10 share four full training runs
through a module-scoped cache; they take a few minutes on one CPU core.
"""
import time

import numpy as np
import pytest

from ato import controller as C
from ato import graph as G
from ato import gradcheck
from ato import harness as H
from ato import pipeline as P
from ato import zig
from ato.config import parse_text
from ato.models import build
from ato.projectors import halfspace_group, prox_group
from ato.tensor import Rng, STREAM_VERIFY

RESULTS = {}


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok


def randomize_buffers(g, rng):
    """Give BN running statistics non-trivial values so eval mode is exercised."""
    for key, buf in g.buffers.items():
        if key.endswith("running_mean"):
            g.buffers[key] = rng.normal(buf.shape, 0.5)
        elif key.endswith("running_var"):
            g.buffers[key] = 0.5 + rng.uniform(buf.shape)
    for key, p in g.params.items():
        if key.endswith(".beta"):
            g.params[key] = rng.normal(p.shape, 0.3)


# ---------------------------------------------------------------- 1


def _prox_closed_form(z, thr):
    norm = np.linalg.norm(z)
    return np.zeros_like(z) if norm <= thr else (1.0 - thr / norm) * z


def test_criterion_1_projectors():
    t0 = time.perf_counter()
    gen = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10_000):
        size = int(gen.integers(1, 9))
        z = gen.normal(size=size) * gen.uniform(0.01, 3.0)
        eta, lam = gen.uniform(0.01, 1.0), gen.uniform(0.0, 4.0)
        worst = max(worst, np.max(np.abs(prox_group(z, eta, lam) - _prox_closed_form(z, eta * lam))))
        m = gen.normal(size=size)
        eps = gen.uniform(0.0, 0.99)
        want = np.zeros(size) if z @ m < eps * (m @ m) else z
        worst = max(worst, np.max(np.abs(halfspace_group(z, m, eps) - want)))
    tabulated = [
        np.allclose(prox_group([0.3, 0.4], 1.0, 1.0), [0.0, 0.0], atol=1e-12, rtol=0),
        np.allclose(prox_group([3.0, 4.0], 1.0, 1.0), [2.4, 3.2], atol=1e-12, rtol=0),
        np.allclose(halfspace_group([1.0, 0.0], [1.0, 1.0], 0.6), [0.0, 0.0], atol=1e-12, rtol=0),
    ]
    # composite objective 0.5||x - z||^2 + thr ||x|| on a 2-d grid
    grid_ok = True
    axis = np.linspace(-3, 3, 601)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    for _ in range(50):
        z = gen.uniform(-2.5, 2.5, size=2)
        thr = gen.uniform(0.0, 2.0)
        x = prox_group(z, 1.0, thr)
        val = 0.5 * np.sum((x - z) ** 2) + thr * np.linalg.norm(x)
        grid = 0.5 * ((X - z[0]) ** 2 + (Y - z[1]) ** 2) + thr * np.hypot(X, Y)
        grid_ok &= val <= grid.min() + 1e-12
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and all(tabulated) and grid_ok and dt < 10
    assert report(1, ok, f"max abs error {worst:.1e}, tabulated {sum(tabulated)}/3, "
                         f"grid search beaten: {grid_ok}, {dt:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_gradient_checks():
    t0 = time.perf_counter()
    errors = gradcheck.run_all(instances=20)
    dt = time.perf_counter() - t0
    worst = max(errors.values())
    ok = worst <= 1e-4 and dt < 120 and len(errors) == 7
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    assert report(2, ok, f"{detail}; {dt:.1f}s")


# ---------------------------------------------------------------- 3


def test_criterion_3_zero_invariance():
    t0 = time.perf_counter()
    rng = Rng(3, STREAM_VERIFY)
    bad, checked, worst = {}, 0, 0.0
    for name in ("tiny-cnn", "tiny-resnet"):
        g = build(name, seed=3)
        randomize_buffers(g, rng)
        part = zig.build_partition(g, zig.default_protect(g, protect_stem=False))
        bad[name] = zig.verify_zero_invariance(g, part, rng, atol=1e-6)
        checked += part.num_groups
        x = rng.normal((16,) + g.input_shape)
        for _ in range(5):
            w = (rng.uniform(part.num_groups) < 0.5).astype(float)
            masked, _ = G.forward(g, x, "eval", mask=w, part=part)
            zeroed = g.clone()
            zeroed.load_state(zig.zero_groups(zeroed.state(), zeroed, part, w))
            plain, _ = G.forward(zeroed, x, "eval")
            worst = max(worst, float(np.max(np.abs(masked - plain))))
    dt = time.perf_counter() - t0
    ok = not any(bad.values()) and worst <= 1e-6 and dt < 30
    assert report(3, ok, f"{checked} groups checked, violations {bad}, "
                         f"masked vs zeroed max diff {worst:.1e}, {dt:.1f}s")


# ---------------------------------------------------------------- 4


def test_criterion_4_compression_equivalence():
    t0 = time.perf_counter()
    rng = Rng(4, STREAM_VERIFY)
    devs = {}
    for name in ("tiny-cnn", "tiny-resnet"):
        for sparsity in (0.0, 0.25, 0.5, 0.75):
            g = build(name, seed=4)
            randomize_buffers(g, rng)
            part = zig.build_partition(g, zig.default_protect(g, protect_stem=False))
            w = np.ones(part.num_groups)
            for ids in part.blocks:
                drop = rng.permutation(len(ids))[:int(round(sparsity * len(ids)))]
                w[np.asarray(ids)[drop]] = 0.0
            x = rng.normal((100,) + g.input_shape)
            full, _ = G.forward(g, x, "eval", mask=w, part=part)
            comp = P.compress(g, part, w)
            small, _ = G.forward(comp.graph, x, "eval")
            devs[(name, sparsity)] = P.max_relative_deviation(small, full)
    dt = time.perf_counter() - t0
    worst = max(devs.values())
    ok = worst <= 1e-5 and dt < 30
    assert report(4, ok, f"max relative deviation {worst:.1e} over "
                         f"{len(devs)} (model, sparsity) cases, {dt:.1f}s")


# ---------------------------------------------------------------- 5


def test_criterion_5_lemmas():
    t0 = time.perf_counter()
    a1 = H.check_lemma_a1(1000, seed=5, slack=1e-9)
    a3 = H.check_lemma_a3(1000, seed=5, slack=1e-9)
    dt = time.perf_counter() - t0
    ok = a1 == 1.0 and a3 == 1.0 and dt < 60
    assert report(5, ok, f"A1 rate {a1}, A3 rate {a3}, {dt:.1f}s")


# ---------------------------------------------------------------- 6


def test_criterion_6_analytic_minimizer():
    t0 = time.perf_counter()
    clean = H.group_lasso_quadratic(sigma=0.0, seed=6)
    _, z = H.run_theorem1(clean, H.theory_schedule(clean.L_est), 5000, seed=6, record_every=5000)
    err_clean = float(np.linalg.norm(z - clean.z_star))
    noisy = H.group_lasso_quadratic(sigma=0.1, seed=6)
    _, z = H.run_theorem1(noisy, H.theory_schedule(noisy.L_est), 20_000, seed=6,
                          record_every=20_000)
    err_noisy = float(np.linalg.norm(z - noisy.z_star))
    dt = time.perf_counter() - t0
    ok = err_clean <= 1e-3 and err_noisy <= 1e-2 and dt < 60
    assert report(6, ok, f"noiseless error {err_clean:.1e} (5000 steps), "
                         f"sigma=0.1 error {err_noisy:.1e} (20000 steps), {dt:.1f}s")


# ---------------------------------------------------------------- 7


def test_criterion_7_trend():
    t0 = time.perf_counter()
    prob = H.nonconvex_sine(seed=7)
    records, _ = H.run_theorem1(prob, H.theory_schedule(prob.L_est), 10_000, seed=7,
                                record_every=100)
    ratio = H.average_at(records, 10_000) / H.average_at(records, 100)
    dt = time.perf_counter() - t0
    ok = ratio <= 0.5 and dt < 300
    assert report(7, ok, f"avg ||P_t|| ratio T=1e4 / T=1e2 = {ratio:.3f}, {dt:.1f}s")


# ---------------------------------------------------------------- 8-10


_RUNS = {}


def fixture_config(*overrides):
    return parse_text("", ["model.preset=tiny-cnn", "data.n_train=5000", "data.n_test=1000",
                           "controller.p=0.5", "schedule.epochs=100", *overrides], env={})


def run_once(key):
    """Cached full runs: 'ato', 'ato_repeat', 'dense', 'gamma1'."""
    if key not in _RUNS:
        t0 = time.perf_counter()
        if key == "dense":
            res = P.train(P.dense_baseline(fixture_config()))
        elif key == "gamma1":
            res = P.train(fixture_config("controller.gamma=1"))
        else:
            res = P.train(fixture_config())
        _RUNS[key] = (res, time.perf_counter() - t0)
    return _RUNS[key]


def first_zero_epoch(res, t_end):
    for row in res.metrics:
        if row["split"] == "test" and row["reg_flops"] == 0.0 and row["epoch"] <= t_end:
            return row["epoch"]
    return None


@pytest.mark.slow
def test_criterion_8_end_to_end():
    cfg = fixture_config()
    assert cfg.window() == (20, 10, 50)
    res, dt = run_once("ato")
    dense, _ = run_once("dense")
    t_end = 50
    at_end = res.mask_history[t_end - 1]
    ratio = P.flops_ratio(res.model, res.part, at_end)
    frozen = all(np.array_equal(h, at_end) for h in res.mask_history[t_end - 1:])
    norms = P.NetworkGroups(res.model, res.part).norms(res.model.params)
    masked_max = float(np.max(norms[res.mask.hard == 0], initial=0.0))
    comp = P.compress(res.model, res.part, res.mask)
    _, test = P.load_data(cfg)
    _, acc = P.evaluate(comp.graph, test)
    _, dense_acc = P.evaluate(dense.model, test)
    ok_a = 0.45 <= ratio <= 0.55 and frozen
    ok_b = masked_max <= 1e-8
    ok_c = abs(acc - dense_acc) * 100 <= 3.0
    ok = ok_a and ok_b and ok_c and dt < 900
    assert report(8, ok, f"(a) ratio at T_end {ratio:.4f}, frozen after: {frozen}; "
                         f"(b) max masked-group norm {masked_max:.1e}; "
                         f"(c) compressed acc {acc:.3f} vs dense {dense_acc:.3f}; run {dt:.0f}s")


@pytest.mark.slow
def test_criterion_9_determinism():
    a, _ = run_once("ato")
    b, _ = run_once("ato_repeat")
    same_csv = P.metrics_csv(a.metrics).encode() == P.metrics_csv(b.metrics).encode()
    same_masks = all(np.array_equal(x, y) for x, y in zip(a.mask_history, b.mask_history))
    same_masks &= len(a.mask_history) == len(b.mask_history)
    assert report(9, same_csv and same_masks,
                  f"metrics CSV byte-identical: {same_csv}, emitted masks identical: {same_masks}")


@pytest.mark.slow
def test_criterion_10_reg_flops_gamma():
    g4, _ = run_once("ato")
    g1, _ = run_once("gamma1")
    t_end = 50
    e4, e1 = first_zero_epoch(g4, t_end), first_zero_epoch(g1, t_end)
    ok = e4 is not None and e4 < t_end and (e1 is None or e1 >= e4)
    assert report(10, ok, f"reg_flops first reaches 0 at epoch {e4} (gamma=4), "
                          f"{e1} (gamma=1), T_end={t_end}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s"]))
