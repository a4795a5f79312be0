import numpy as np
import pytest

from ato import graph as G
from ato import zig
from ato.models import build
from ato.tensor import Rng


def conv_bn(text="conv out=8 k=3\nbn\nrelu\ngap\nlinear out=2"):
    return G.spec_parse(text, (3, 6, 6))


def test_single_conv_bn_groups():
    g = conv_bn()
    part = zig.build_partition(g, zig.default_protect(g, protect_stem=False))
    assert part.num_groups == 8
    assert list(part.group_sizes) == [3 * 3 * 3 + 2] * 8


def test_only_protected_layers_gives_empty_partition():
    g = conv_bn()
    part = zig.build_partition(g)  # stem and classifier protected by default
    assert part.num_groups == 0 and part.blocks == []


def test_residual_branches_are_tied():
    text = """
    a: conv out=8 k=3
    bn
    left: relu
    conv out=8 k=3
    right: bn
    add left right
    gap
    linear out=2
    """
    g = G.spec_parse(text, (3, 6, 6))
    part = zig.build_partition(g, zig.default_protect(g, protect_stem=False))
    assert part.num_groups == 8 and part.num_blocks == 1
    assert len(part.block_convs[0]) == 2
    for grp in part.groups:
        assert {m[0] for m in grp.members} >= set(part.block_convs[0])


def test_tiny_fixtures_partition_shape():
    cnn = build("tiny-cnn")
    assert zig.build_partition(cnn).num_groups == 16
    res = build("tiny-resnet")
    p = zig.build_partition(res, zig.default_protect(res, protect_stem=False))
    assert p.num_groups == 32
    assert len(p.block_convs[0]) == 2  # stem tied with the residual branch's last conv


def test_conv_with_bias_is_rejected():
    g = G.spec_parse("conv out=4 k=3 bias=true\nbn\nrelu\ngap\nlinear out=2", (3, 6, 6))
    with pytest.raises(zig.UnsupportedPattern):
        zig.build_partition(g, zig.default_protect(g, protect_stem=False))
    # protecting the offending conv makes the model acceptable (and empty)
    assert zig.build_partition(g, {0, 4}).num_groups == 0


def test_conv_without_bn_is_rejected():
    g = G.spec_parse("conv out=4 k=3\nrelu\ngap\nlinear out=2", (3, 6, 6))
    with pytest.raises(zig.UnsupportedPattern):
        zig.build_partition(g, zig.default_protect(g, protect_stem=False))


def test_zero_groups_examples():
    g = conv_bn()
    part = zig.build_partition(g, zig.default_protect(g, protect_stem=False))
    state = g.state()
    same = zig.zero_groups(state, g, part, np.ones(8))
    assert all(np.array_equal(same[k], state[k]) for k in state)
    every = zig.zero_groups(g.state(), g, part, np.zeros(8))
    assert np.all(every["conv1.weight"] == 0) and np.all(every["bn1.gamma"] == 0)
    assert np.array_equal(every["linear1.weight"], state["linear1.weight"])


def test_zero_groups_diff_count_with_nonzero_beta():
    g = conv_bn()
    g.params["bn1.beta"][...] = 0.25
    part = zig.build_partition(g, zig.default_protect(g, protect_stem=False))
    w = np.ones(8)
    w[6] = 0.0
    before = g.state()
    after = zig.zero_groups(g.state(), g, part, w)
    assert sum(int(np.sum(after[k] != before[k])) for k in g.params) == 29


@pytest.mark.parametrize("name", ["tiny-cnn", "tiny-resnet"])
def test_fresh_fixture_verifies(name):
    g = build(name, seed=5)
    part = zig.build_partition(g, zig.default_protect(g, protect_stem=False))
    assert zig.verify_zero_invariance(g, part, Rng(5, 7)) == []


def test_nonzero_beta_after_zeroing_is_reported():
    g = build("tiny-cnn", seed=6)
    part = zig.build_partition(g, zig.default_protect(g, protect_stem=False))
    w = np.ones(part.num_groups)
    w[[1, 9]] = 0.0
    g.load_state(zig.zero_groups(g.state(), g, part, w))
    g.params["bn2.beta"][1] = 0.5  # group 9 is channel 1 of the second block
    bad = zig.verify_zero_invariance(g, part, Rng(6, 7), groups=[1, 9], assume_zeroed=True)
    assert bad == [9]


def test_group_norms_match_member_sum():
    g = build("tiny-cnn", seed=8)
    part = zig.build_partition(g)
    norms = zig.group_norms(g.params, g, part)
    ch = 4
    want = np.sqrt(np.sum(g.params["conv2.weight"][ch] ** 2)
                   + g.params["bn2.gamma"][ch] ** 2 + g.params["bn2.beta"][ch] ** 2)
    assert norms[ch] == pytest.approx(want)
