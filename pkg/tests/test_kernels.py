"""The numba kernels and their numpy twins must agree bit-for-bit in shape and to 1e-12 in value."""
import numpy as np
from hypothesis import given, settings, strategies as st

from ato import kernels as K
from ato._accel import HAS_NUMBA, USE_NUMBA, pick


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = K.conv_output_shape(h, wd, k, stride, pad)
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


conv_cases = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7),
                       st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 1),
                       st.integers(0, 2**31))


@settings(max_examples=30, deadline=None)
@given(conv_cases)
def test_im2col_parity_and_conv_oracle(case):
    n, c, h, k, stride, pad, seed = case
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(n, c, h, h))
    a = K._im2col_loops(x, k, stride, pad)
    b = K._im2col_numpy(x, k, stride, pad)
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)
    w = gen.normal(size=(2, c, k, k))
    ho, wo = K.conv_output_shape(h, h, k, stride, pad)
    out = (a @ w.reshape(2, -1).T).reshape(n, ho, wo, 2).transpose(0, 3, 1, 2)
    np.testing.assert_allclose(out, naive_conv(x, w, stride, pad), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(conv_cases)
def test_col2im_parity_and_adjoint(case):
    n, c, h, k, stride, pad, seed = case
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(n, c, h, h))
    cols = gen.normal(size=K._im2col_numpy(x, k, stride, pad).shape)
    a = K._col2im_loops(cols, n, c, h, h, k, stride, pad)
    b = K._col2im_numpy(cols, n, c, h, h, k, stride, pad)
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)
    # col2im is the adjoint of im2col: <im2col(x), cols> == <x, col2im(cols)>
    lhs = np.sum(K._im2col_numpy(x, k, stride, pad) * cols)
    assert np.isclose(lhs, np.sum(x * b), rtol=1e-10, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=12), st.integers(0, 2**31))
def test_group_prox_parity(sizes, seed):
    gen = np.random.default_rng(seed)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    z = gen.normal(size=int(offsets[-1]))
    thr = gen.uniform(0, 2.5, size=len(sizes))
    thr[gen.uniform(size=len(sizes)) < 0.2] = 0.0
    a = K._group_prox_loops(z, offsets, thr)
    b = K._group_prox_numpy(z, offsets, thr)
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)
    for g in range(len(sizes)):
        seg = slice(offsets[g], offsets[g + 1])
        norm = np.linalg.norm(z[seg])
        want = z[seg] * max(0.0, 1 - thr[g] / norm) if thr[g] > 0 else z[seg]
        np.testing.assert_allclose(a[seg], want, atol=1e-12)


def test_shrink_factors():
    f = K.shrink_factors(np.array([5.0, 0.5, 2.0, 0.0]), np.array([1.0, 1.0, 0.0, 0.0]))
    np.testing.assert_allclose(f, [0.8, 0.0, 1.0, 1.0])


def test_flag_selects_implementation():
    assert USE_NUMBA == HAS_NUMBA or not USE_NUMBA
    chosen = pick("fast", "slow")
    assert chosen == ("fast" if USE_NUMBA else "slow")
    assert (K.group_prox_flat is K._group_prox_loops) == USE_NUMBA


def test_disable_flag_in_subprocess():
    import os
    import subprocess
    import sys
    env = dict(os.environ, ATO_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c",
                          "from ato import kernels as K; print(K.im2col is K._im2col_numpy)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "True"
