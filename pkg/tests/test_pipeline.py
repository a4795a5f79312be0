import numpy as np
import pytest

from ato import checkpoint as ck
from ato import graph as G
from ato import pipeline as P
from ato import zig
from ato.config import parse_text
from ato.controller import MaskVector
from ato.data import Dataset, synthetic
from ato.models import build
from ato.projectors import NetworkGroups
from ato.tensor import Rng


def small(*overrides):
    return parse_text("", ["data.n_train=400", "data.n_test=200", "schedule.epochs=8",
                           "optimizer.batch=50", "controller.d_cn_fraction=0.25", *overrides],
                      env={})


@pytest.fixture(scope="module")
def short_run():
    return P.train(small("controller.p=0.3", "controller.gamma=20"))


def test_metrics_rows_and_columns(short_run):
    rows = short_run.metrics
    assert len(rows) == 16
    assert [r["split"] for r in rows[:2]] == ["train", "test"]
    header = P.metrics_csv(rows).splitlines()[0]
    assert header == ",".join(P.METRIC_COLUMNS) == (
        "epoch,split,loss,accuracy,flops_ratio,group_sparsity,penalty_value,reg_flops,eta")


def test_mask_frozen_after_t_end(short_run):
    cfg = small()
    _, _, t_end = cfg.window()
    hist = short_run.mask_history
    assert all(np.array_equal(h, hist[t_end - 1]) for h in hist[t_end - 1:])
    assert short_run.mask.frozen


def test_penalty_only_after_warmup(short_run):
    t_w, _, _ = small().window()
    for row in short_run.metrics:
        if row["epoch"] < t_w:
            assert row["penalty_value"] == 0.0


def test_controller_disabled_degenerates_to_plain_training():
    base = P.train(P.dense_baseline(small()))
    assert all(np.all(h == 1) for h in base.mask_history)
    assert all(r["penalty_value"] == 0.0 and r["flops_ratio"] == 1.0 for r in base.metrics)


def test_zero_lambda_matches_plain_sgd_exactly():
    a = P.train(small("optimizer.lambda=0", "schedule.t_w=0"))
    b = P.train(P.dense_baseline(small()))
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])
    strip = lambda rows: [(r["epoch"], r["split"], r["loss"]) for r in rows if r["split"] == "train"]  # noqa: E731
    assert strip(a.metrics) == strip(b.metrics)


def test_masked_groups_shrink_to_zero():
    res = P.train(small("schedule.epochs=12", "controller.p=0.3", "controller.cn_lr=0.05",
                        "schedule.t_end=5", "schedule.t_w=5", "schedule.t_start=1"))
    norms = NetworkGroups(res.model, res.part).norms(res.model.params)
    assert np.any(res.mask.hard == 0)
    assert np.max(norms[res.mask.hard == 0]) <= 1e-8


def test_evaluate_random_model_near_chance():
    model = build("tiny-cnn", seed=11)
    _, test = synthetic(10, 1000, seed=11)
    _, acc = P.evaluate(model, test)
    assert abs(acc - 0.1) <= 0.03


def test_evaluate_memorized_labels():
    model = build("tiny-cnn", seed=12)
    x = Rng(12, 3).normal((64, 3, 8, 8))
    y = np.argmax(G.forward(model, x, "eval")[0], axis=1)
    assert P.evaluate(model, Dataset(x, y, 10))[1] == 1.0


def test_compress_identity_mask():
    model = build("tiny-cnn", seed=1)
    part = zig.build_partition(model)
    comp = P.compress(model, part, np.ones(part.num_groups))
    assert comp.graph.num_params() == model.num_params()
    for k, v in model.params.items():
        assert np.array_equal(comp.graph.params[k], v)


def test_compress_shapes_follow_mask():
    model = build("tiny-cnn", seed=2)
    part = zig.build_partition(model, zig.default_protect(model, protect_stem=False))
    w = np.ones(part.num_groups)
    w[[0, 3, 6]] = 0.0  # three channels of the first conv
    comp = P.compress(model, part, w)
    assert comp.graph.params["conv1.weight"].shape == (5, 3, 3, 3)
    assert comp.graph.params["conv2.weight"].shape == (16, 5, 3, 3)
    _, test = synthetic(10, 300, seed=2)
    loss_full, acc_full = P.evaluate(model, test, w, part)
    loss_comp, acc_comp = P.evaluate(comp.graph, test)
    assert loss_comp == pytest.approx(loss_full, abs=1e-5) and acc_comp == acc_full


def test_compress_reports_residual_norms():
    model = build("tiny-cnn", seed=3)
    part = zig.build_partition(model)
    w = np.ones(part.num_groups)
    w[2] = 0.0
    comp = P.compress(model, part, w)
    assert list(comp.residual_norms) == [2] and comp.residual_norms[2] > 0


def test_compress_guards():
    model = build("tiny-cnn")
    part = zig.build_partition(model)
    live = MaskVector(np.ones(part.num_groups), np.ones(part.num_groups), frozen=False)
    with pytest.raises(P.MaskNotFrozen, match="mask not frozen"):
        P.compress(model, part, live)
    with pytest.raises(ValueError):
        P.compress(model, part, np.ones(3))


def test_checkpoint_restore_roundtrip(short_run, tmp_path):
    path = tmp_path / "run.atoc"
    ck.save(path, short_run.arrays)
    cfg, model, part, mask = P.restore(ck.load(path))
    assert mask.frozen and np.array_equal(mask.hard, short_run.mask.hard)
    for k, v in short_run.model.params.items():
        assert np.array_equal(model.params[k], v)
    assert cfg.digest() == small("controller.p=0.3", "controller.gamma=20").digest()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_state():
    with pytest.raises(P.TrainingDiverged) as info:
        P.train(small("optimizer.lr=1e300", "schedule.epochs=3"))
    assert "param.conv1.weight" in info.value.arrays


def test_flops_ratio_of_full_mask_is_one():
    model = build("tiny-cnn")
    part = zig.build_partition(model)
    assert P.flops_ratio(model, part, np.ones(part.num_groups)) == 1.0
