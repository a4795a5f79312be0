import numpy as np
import pytest

from ato.optim import (Adam, OptimizerState, RecipeSchedule, Schedule, mirror_step,
                       schedule_at, step, update_momentum, update_second_moment)
from ato.projectors import FlatGroups, RegularizerConfig


def test_momentum_examples():
    st = OptimizerState(m={"a": np.array([2.0])})
    update_momentum(st, {"a": np.array([4.0])}, 0.5)
    assert st.m["a"][0] == 3.0
    update_momentum(st, {"a": np.array([-7.0])}, 1.0)
    assert st.m["a"][0] == -7.0
    update_momentum(st, {"a": np.array([-7.0])}, 0.3)
    assert st.m["a"][0] == -7.0
    with pytest.raises(ValueError):
        update_momentum(st, {"a": np.array([1.0])}, 0.0)


def test_second_moment_examples():
    st = OptimizerState.zeros_like({"a": np.zeros(1)}, beta=0.9, geometry="adam")
    update_second_moment(st, {"a": np.array([2.0])})
    assert st.v["a"][0] == pytest.approx(0.4)
    assert st.metric("a")[0] == pytest.approx(np.sqrt(0.4) + 1e-8)
    for _ in range(3000):
        update_second_moment(st, {"a": np.array([3.0])})
    assert st.metric("a")[0] == pytest.approx(3.0 + 1e-8, rel=1e-12)
    for _ in range(3000):
        update_second_moment(st, {"a": np.array([0.0])})
    assert st.metric("a")[0] == pytest.approx(1e-8, abs=1e-9)


def test_second_moment_needs_adam_geometry():
    with pytest.raises(ValueError):
        update_second_moment(OptimizerState(), {"a": np.ones(1)})
    with pytest.raises(ValueError):
        OptimizerState(geometry="newton")


def test_mirror_step_reduces_to_gradient_descent():
    p = {"a": np.array([1.0, -1.0])}
    st = OptimizerState(m={"a": np.array([0.5, 0.5])})
    mirror_step(p, st, 0.2)
    np.testing.assert_allclose(p["a"], [0.9, -1.1])
    st = OptimizerState(m={"a": np.zeros(2)})
    mirror_step(p, st, 0.2, FlatGroups([0, 2], key="a"), [0.0], RegularizerConfig())
    np.testing.assert_allclose(p["a"], [0.9, -1.1])


def composite_1d(z0, m, eta, lam):
    grid = np.linspace(-2, 2, 400_001)
    obj = m * grid + (grid - z0) ** 2 / (2 * eta) + lam * np.abs(grid)
    return grid[np.argmin(obj)]


def test_mirror_step_scalar_oracle():
    p = {"z": np.array([1.0])}
    st = OptimizerState(m={"z": np.array([2.0])})
    mirror_step(p, st, 0.1, FlatGroups([0, 1]), [1.0], RegularizerConfig(lam=1.0))
    assert p["z"][0] == pytest.approx(0.7, abs=1e-12)
    assert p["z"][0] == pytest.approx(composite_1d(1.0, 2.0, 0.1, 1.0), abs=1e-5)


def test_step_with_adam_geometry():
    p = {"z": np.array([1.0, 1.0])}
    st = OptimizerState.zeros_like(p, beta=0.9, geometry="adam")
    step(p, {"z": np.array([2.0, -2.0])}, st, 0.1, 1.0)
    a = np.sqrt(0.4) + 1e-8
    np.testing.assert_allclose(p["z"], [1 - 0.1 * 2 / a, 1 + 0.1 * 2 / a])
    assert st.t == 1


def test_theory_schedule_examples():
    s = Schedule(c_hat=1.0, c_bar=100.0, c1=10.0)
    eta, alpha = schedule_at(s, 0)
    assert eta == pytest.approx(0.1) and alpha == 1.0
    etas = [s.at(t)[0] for t in range(0, 10_000, 500)]
    assert all(a > b for a, b in zip(etas, etas[1:]))
    assert s.satisfies(L_est=2.5) and not s.satisfies(L_est=3.0)
    with pytest.raises(ValueError):
        Schedule(c_hat=0.0)


def test_recipe_schedule_milestones():
    s = RecipeSchedule(lr=0.1, momentum=0.9, total=100)
    assert s.at(0) == (0.1, pytest.approx(0.1))
    assert s.at(50)[0] == pytest.approx(0.01)
    assert s.at(75)[0] == pytest.approx(0.001)


def test_adam_minimizes_quadratic_and_roundtrips_state():
    opt = Adam(lr=0.05)
    p = {"x": np.array([3.0, -2.0])}
    for _ in range(2000):
        opt.step(p, {"x": 2 * p["x"]})
    assert np.linalg.norm(p["x"]) < 1e-2
    clone = Adam(lr=0.05)
    clone.load_arrays(opt.state_arrays("o"), "o")
    q = {"x": p["x"].copy()}
    opt.step(p, {"x": 2 * p["x"]})
    clone.step(q, {"x": 2 * q["x"]})
    np.testing.assert_array_equal(p["x"], q["x"])


def test_adam_first_step_is_lr_sized():
    opt = Adam(lr=1e-3)
    p = {"x": np.array([0.0])}
    opt.step(p, {"x": np.array([123.0])})
    assert p["x"][0] == pytest.approx(-1e-3, rel=1e-6)
