"""Zero-invariant groups (ZIGs) of a conv-BN network.

Each output channel of an unprotected bias-free conv, together with the
gamma/beta entries of the BN that directly follows it, forms one group.
Convs whose outputs are summed by a residual join are tied: channel ``c`` of
every tied conv lands in the same group.  One block per tied conv-BN set.
"""
from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from .tensor import Rng, STREAM_VERIFY


class UnsupportedPattern(ValueError):
    """The graph contains a layer pattern the partitioner cannot group."""


@dataclass
class ZigGroup:
    id: int
    members: list  # (node index, param key, channel)
    block: int

@dataclass
class ZigPartition:
    groups: list
    blocks: list  # list of group-id lists
    protected: frozenset
    block_convs: list = field(default_factory=list)
    block_bns: list = field(default_factory=list)
    block_offset: np.ndarray = None
    node_block: dict = field(default_factory=dict)
    bn_groups: dict = field(default_factory=dict)
    group_sizes: np.ndarray = None

    @property
    def num_groups(self):
        return len(self.groups)

    @property
    def num_blocks(self):
        return len(self.blocks)

    def block_of_groups(self):
        """Block index for each group id."""
        out = np.zeros(self.num_groups, dtype=np.int64)
        for b, ids in enumerate(self.blocks):
            out[ids] = b
        return out

    def active_channels(self, values):
        """Per-block sum of mask (hard or soft) values."""
        values = np.asarray(values, dtype=np.float64)
        return np.array([values[ids].sum() for ids in self.blocks])

    def summary(self):
        lines = [f"groups: {self.num_groups}", f"blocks: {self.num_blocks}"]
        for b, ids in enumerate(self.blocks):
            lines.append(f"  block {b}: {len(ids)} groups, convs={self.block_convs[b]}, "
                         f"bns={self.block_bns[b]}, group size={int(self.group_sizes[ids[0]])}")
        lines.append(f"protected nodes: {sorted(self.protected)}")
        return "\n".join(lines)


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, a):
        self.parent.setdefault(a, a)
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def default_protect(g, protect_stem=True):
    """Node indices excluded from pruning: the classifier and optionally the stem conv."""
    protect = set()
    convs = [i for i, n in enumerate(g.nodes) if n.kind == "conv"]
    linears = [i for i, n in enumerate(g.nodes) if n.kind == "linear"]
    if protect_stem and convs:
        protect.add(convs[0])
    if linears:
        protect.add(linears[-1])
    return protect


def build_partition(g, protect=None):
    """Group every prunable conv-BN channel; attach and return the partition."""
    if protect is None:
        protect = default_protect(g)
    protect = frozenset(g.index(p) if isinstance(p, str) else int(p) for p in protect)
    nodes = g.nodes
    pair = {}  # conv index -> bn index
    for i, node in enumerate(nodes):
        if node.kind != "conv" or i in protect:
            continue
        users = g.consumers(i)
        if node.hyper.get("bias"):
            raise UnsupportedPattern(f"conv {node.name} carries a bias and is not protected")
        if len(users) != 1 or nodes[users[0]].kind != "bn":
            raise UnsupportedPattern(f"conv {node.name} is not immediately followed by a BatchNorm")
        pair[i] = users[0]

    uf = _UnionFind()
    src = [None] * len(nodes)  # unit (conv index) whose channels this node carries
    poisoned = set()
    for i, node in enumerate(nodes):
        if node.kind == "conv":
            src[i] = i if i in pair else None
            if src[i] is not None:
                uf.find(i)
        elif node.kind in ("bn", "relu", "gap"):
            src[i] = src[node.inputs[0]] if node.inputs else None
        elif node.kind == "add":
            a, b = (src[j] for j in node.inputs)
            if a is None or b is None:
                poisoned.update(u for u in (a, b) if u is not None)
                src[i] = None
            else:
                uf.union(a, b)
                src[i] = a
        elif node.kind == "ln":
            for j in node.inputs:
                if src[j] is not None:
                    poisoned.add(src[j])
            src[i] = None
        else:
            src[i] = None
    poisoned_roots = {uf.find(u) for u in poisoned}
    roots = []
    for conv in sorted(pair):
        root = uf.find(conv)
        if root not in poisoned_roots and root not in roots:
            roots.append(root)
    root_block = {r: b for b, r in enumerate(roots)}

    groups, blocks, block_convs, block_bns, offsets = [], [], [], [], []
    bn_groups, sizes = {}, []
    for b, root in enumerate(roots):
        convs = [c for c in sorted(pair) if uf.find(c) == root]
        bns = [pair[c] for c in convs]
        n_ch = nodes[convs[0]].out_shape[0]
        if any(nodes[c].out_shape[0] != n_ch for c in convs):
            raise UnsupportedPattern("tied convs have different channel counts")
        start = len(groups)
        offsets.append(start)
        ids = list(range(start, start + n_ch))
        for ch in range(n_ch):
            members, size = [], 0
            for c, bn in zip(convs, bns):
                wkey = f"{nodes[c].name}.weight"
                members.append((c, wkey, ch))
                members.append((bn, f"{nodes[bn].name}.gamma", ch))
                members.append((bn, f"{nodes[bn].name}.beta", ch))
                size += int(np.prod(g.params[wkey].shape[1:])) + 2
            groups.append(ZigGroup(start + ch, members, b))
            sizes.append(size)
        for bn in bns:
            bn_groups[bn] = np.array(ids, dtype=np.int64)
        blocks.append(ids)
        block_convs.append(convs)
        block_bns.append(bns)

    node_block = {}
    for i in range(len(nodes)):
        if src[i] is not None and uf.find(src[i]) in root_block:
            node_block[i] = root_block[uf.find(src[i])]
    part = ZigPartition(groups, blocks, protect, block_convs, block_bns,
                        np.array(offsets, dtype=np.int64), node_block, bn_groups,
                        np.array(sizes, dtype=np.int64))
    g.partition = part
    return part


def _block_slices(g, part, b):
    """(param key, axis-0 channel slice owner) pairs for one block."""
    keys = []
    for c, bn in zip(part.block_convs[b], part.block_bns[b]):
        keys.append(f"{g.nodes[c].name}.weight")
        keys.append(f"{g.nodes[bn].name}.gamma")
        keys.append(f"{g.nodes[bn].name}.beta")
    return keys


def group_keys(g, part):
    """Per block, the parameter keys whose leading axis is indexed by channel."""
    return [_block_slices(g, part, b) for b in range(part.num_blocks)]


def group_norms(params, g, part):
    """Euclidean norm of every group, ordered by group id."""
    out = np.zeros(part.num_groups)
    for b, keys in enumerate(group_keys(g, part)):
        sq = 0.0
        for key in keys:
            p = params[key]
            sq = sq + (p.reshape(p.shape[0], -1) ** 2).sum(axis=1)
        out[part.blocks[b]] = np.sqrt(sq)
    return out


def zero_groups(state, g, part, w):
    """Copy of ``state`` with every member of groups where ``w == 0`` set to 0.

    ``state`` may hold parameters and buffers; the BN running mean of a zeroed
    channel is zeroed too.
    """
    w = np.asarray(getattr(w, "hard", w))
    if w.shape != (part.num_groups,):
        raise ValueError(f"mask length {w.size} != number of groups {part.num_groups}")
    out = {k: v.copy() for k, v in state.items()}
    for b, keys in enumerate(group_keys(g, part)):
        dead = np.flatnonzero(w[part.blocks[b]] == 0)
        if dead.size == 0:
            continue
        for key in keys:
            out[key][dead] = 0.0
        for bn in part.block_bns[b]:
            rm = f"{g.nodes[bn].name}.running_mean"
            if rm in out:
                out[rm][dead] = 0.0
    return out


def verify_zero_invariance(g, part=None, rng=None, groups=None, assume_zeroed=False,
                           n_inputs=16, atol=1e-6):
    """Ids of groups violating zero-invariance; an empty list means pass.

    For each checked group the model is cloned with the group zeroed (unless
    ``assume_zeroed``: the model is checked as given).  The group's post-BN
    channels must then be 0 and the model output must equal the original
    model evaluated under the mask with that single group switched off.
    """
    part = part if part is not None else g.partition
    rng = rng or Rng(0, STREAM_VERIFY)
    x = rng.normal((n_inputs,) + g.input_shape)
    ids = range(part.num_groups) if groups is None else groups
    bad = []
    for gid in ids:
        w = np.ones(part.num_groups)
        w[gid] = 0.0
        ref, _ = G.forward(g, x, "eval", mask=w, part=part)
        if assume_zeroed:
            zg = g
        else:
            zg = g.clone()
            zg.load_state(zero_groups(zg.state(), zg, part, w))
        out, tape = G.forward(zg, x, "eval")
        block = part.groups[gid].block
        ch = gid - part.block_offset[block]
        ok = np.max(np.abs(out - ref)) <= atol
        for bn in part.block_bns[block]:
            xhat, _, _ = tape.caches[bn]
            gamma = zg.params[f"{zg.nodes[bn].name}.gamma"][ch]
            beta = zg.params[f"{zg.nodes[bn].name}.beta"][ch]
            post = xhat[:, ch] * gamma + beta
            ok = ok and np.max(np.abs(post)) <= atol
        if not ok:
            bad.append(int(gid))
    return bad
