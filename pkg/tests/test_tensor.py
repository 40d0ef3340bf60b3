import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drcp.tensor import (AttentionWeights, Kernel2D, LinearProjection, RngStream, add, bilinear_sample,
                         bilinear_scatter, concat_channels, conv2d, gaussian_draw, mul, multi_head_attention,
                         sigmoid, softmax, upsample_bilinear)
from drcp.validation import ContractViolation

from oracles import naive_conv, scalar_bilinear, scalar_resize


# --- independent scalar oracles ---------------------------------------------------------------

def naive_attention(q, k, v, heads, proj):
    (wq, bq), (wk, bk), (wv, bv), (wo, bo) = proj
    d = q.shape[1]
    dh = d // heads
    Q, K, V = q @ wq.T + bq, k @ wk.T + bk, v @ wv.T + bv
    ctx = np.zeros((q.shape[0], d))
    for hh in range(heads):
        sl = slice(hh * dh, (hh + 1) * dh)
        for i in range(q.shape[0]):
            scores = [float(Q[i, sl] @ K[j, sl]) / np.sqrt(dh) for j in range(k.shape[0])]
            m = max(scores)
            e = [np.exp(s - m) for s in scores]
            z = sum(e)
            for j in range(k.shape[0]):
                ctx[i, sl] += e[j] / z * V[j, sl]
    return ctx @ wo.T + bo


# --- conv2d ------------------------------------------------------------------------------------

def test_conv_ones_centre_and_corner():
    out = conv2d(np.ones((1, 3, 3)), Kernel2D(np.ones((1, 1, 3, 3)), np.zeros(1)), padding=1)
    assert out.shape == (1, 3, 3)
    assert out[0, 1, 1] == 9.0
    assert out[0, 0, 0] == 4.0


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((3, 6, 7)).astype(np.float32)
    np.testing.assert_array_equal(conv2d(x, Kernel2D.delta(3)), x)


def test_conv_matches_naive_loop(rng):
    x = rng.standard_normal((2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    expect = naive_conv(x, w, b, 1)
    np.testing.assert_allclose(conv2d(x, Kernel2D(w, b), padding=1), expect, rtol=1e-6, atol=1e-6)


@settings(max_examples=100)
@given(seed=st.integers(0, 2**31), c=st.integers(1, 3), o=st.integers(1, 3), k=st.sampled_from([1, 3, 5]),
       h=st.integers(3, 7), w=st.integers(3, 7))
def test_conv_oracle_property(seed, c, o, k, h, w):
    r = np.random.default_rng(seed)
    x = r.standard_normal((c, h, w)).astype(np.float32)
    wt = r.standard_normal((o, c, k, k)).astype(np.float32)
    b = r.standard_normal(o).astype(np.float32)
    got = conv2d(x, Kernel2D(wt, b), padding=k // 2)
    assert got.shape == (o, h, w)
    np.testing.assert_allclose(got, naive_conv(x, wt, b, k // 2), rtol=1e-6, atol=1e-5)


def test_conv_rejects_channel_mismatch_and_even_kernel():
    with pytest.raises(ContractViolation):
        conv2d(np.ones((2, 4, 4)), Kernel2D.zeros(1, 3, 3))
    with pytest.raises(ContractViolation):
        conv2d(np.ones((1, 4, 4)), Kernel2D.zeros(1, 1, 2))


def test_conv_stride():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    out = conv2d(x, Kernel2D.delta(1), stride=2)
    np.testing.assert_array_equal(out[0], [[0, 2], [8, 10]])


# --- bilinear sampling -------------------------------------------------------------------------

def test_sample_centre_of_four():
    m = np.array([[[0, 1], [2, 3]]], np.float32)
    assert bilinear_sample(m, np.array([[0.5, 0.5]]))[0, 0] == pytest.approx(1.5)


def test_sample_at_node():
    m = np.array([[[0, 1], [2, 3]]], np.float32)
    assert bilinear_sample(m, np.array([[1.0, 0.0]]))[0, 0] == 1.0


def test_sample_out_of_bounds_is_zero():
    m = np.ones((1, 2, 2), np.float32)
    out = bilinear_sample(m, np.array([[-5.0, 0.0], [0.0, 9.0], [-0.5, 0.0]]))
    np.testing.assert_allclose(out[0], [0.0, 0.0, 0.5])


def test_sample_matches_scalar_oracle(rng):
    img = rng.standard_normal((1, 8, 8)).astype(np.float32)
    pts = rng.uniform(0, 7, (100, 2))
    got = bilinear_sample(img, pts)[0]
    expect = [scalar_bilinear(img[0], x, y) for x, y in pts]
    np.testing.assert_allclose(got, expect, rtol=1e-6, atol=1e-6)


@settings(max_examples=100)
@given(seed=st.integers(0, 2**31), h=st.integers(1, 9), w=st.integers(1, 9))
def test_sample_oracle_property(seed, h, w):
    r = np.random.default_rng(seed)
    img = r.standard_normal((1, h, w)).astype(np.float32)
    pts = r.uniform(-2, max(h, w) + 1, (20, 2))
    got = bilinear_sample(img, pts)[0]
    expect = [scalar_bilinear(img[0], x, y) for x, y in pts]
    np.testing.assert_allclose(got, expect, rtol=1e-6, atol=1e-6)


def test_sample_rejects_nonfinite_coords():
    with pytest.raises(ContractViolation):
        bilinear_sample(np.ones((1, 2, 2)), np.array([[np.nan, 0.0]]))


# --- scatter -----------------------------------------------------------------------------------

def test_scatter_single_node():
    out = bilinear_scatter(np.array([[2.0]]), np.array([[1.0, 1.0]]), (3, 3))
    expect = np.zeros((1, 3, 3))
    expect[0, 1, 1] = 2.0
    np.testing.assert_array_equal(out, expect)


def test_scatter_constant_field_normalised():
    out = bilinear_scatter(np.array([[1.0]]), np.array([[0.5, 0.5]]), (2, 2))
    np.testing.assert_allclose(out, np.ones((1, 2, 2)), rtol=1e-6)


def test_scatter_untouched_cells_are_zero():
    out = bilinear_scatter(np.array([[3.0]]), np.array([[0.0, 0.0]]), (2, 2))
    assert out[0, 0, 0] == pytest.approx(3.0)
    assert out[0, 1, 1] == 0.0


def test_scatter_is_adjoint_of_sample(rng):
    for _ in range(100):
        c, h, w = rng.integers(1, 4), rng.integers(2, 10), rng.integers(2, 10)
        a = rng.standard_normal((c, h, w))
        grid = rng.uniform(-1.5, max(h, w) + 0.5, (rng.integers(1, 6), rng.integers(1, 6), 2))
        b = rng.standard_normal((c,) + grid.shape[:2])
        lhs = np.sum(bilinear_sample(a, grid).astype(np.float64) * b)
        rhs = np.sum(a * bilinear_scatter(b, grid, (h, w), normalize=False))
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


# --- upsampling --------------------------------------------------------------------------------

def test_upsample_constant():
    out = upsample_bilinear(np.full((2, 3, 5), 7.0), 6, 10)
    np.testing.assert_array_equal(out, np.full((2, 6, 10), 7.0, np.float32))


def test_upsample_single_pixel():
    np.testing.assert_array_equal(upsample_bilinear(np.full((1, 1, 1), 5.0), 2, 2), np.full((1, 2, 2), 5.0))


def test_upsample_matches_per_pixel_oracle(rng):
    img = rng.standard_normal((1, 2, 2)).astype(np.float32)
    np.testing.assert_allclose(upsample_bilinear(img, 4, 4)[0], scalar_resize(img[0], 4, 4), rtol=1e-6, atol=1e-6)


@settings(max_examples=100)
@given(seed=st.integers(0, 2**31), h=st.integers(1, 6), w=st.integers(1, 6), fh=st.integers(1, 4),
       fw=st.integers(1, 4))
def test_upsample_oracle_property(seed, h, w, fh, fw):
    img = np.random.default_rng(seed).standard_normal((1, h, w)).astype(np.float32)
    got = upsample_bilinear(img, h * fh, w * fw)[0]
    np.testing.assert_allclose(got, scalar_resize(img[0], h * fh, w * fw), rtol=1e-6, atol=1e-6)


def test_upsample_rejects_shrink():
    with pytest.raises(ContractViolation):
        upsample_bilinear(np.ones((1, 4, 4)), 2, 8)


# --- attention ---------------------------------------------------------------------------------

def _weights(rng, d):
    return AttentionWeights(*(LinearProjection(rng.standard_normal((d, d)), rng.standard_normal(d) * 0.1)
                              for _ in range(4)))


def test_attention_identical_keys_gives_mean_value(rng):
    d = 8
    w = _weights(rng, d)
    keys = np.tile(rng.standard_normal(d), (5, 1))
    values = rng.standard_normal((5, d))
    expect = w.o(w.v(values).mean(axis=0))
    for _ in range(3):
        out = multi_head_attention(rng.standard_normal((1, d)), keys, values, 2, w)
        np.testing.assert_allclose(out[0], expect, rtol=1e-5, atol=1e-5)


def test_attention_single_token(rng):
    d = 4
    w = _weights(rng, d)
    v = rng.standard_normal((1, d))
    out = multi_head_attention(rng.standard_normal((3, d)), rng.standard_normal((1, d)), v, 2, w)
    np.testing.assert_allclose(out, np.tile(w.o(w.v(v)), (3, 1)), rtol=1e-5, atol=1e-5)


def test_attention_matches_naive_oracle(rng):
    d, heads = 8, 2
    w = _weights(rng, d)
    q, k, v = (rng.standard_normal((4, d)) for _ in range(3))
    proj = [(p.weights.astype(np.float64), p.bias.astype(np.float64)) for p in (w.q, w.k, w.v, w.o)]
    expect = naive_attention(q, k, v, heads, proj)
    np.testing.assert_allclose(multi_head_attention(q, k, v, heads, w), expect, rtol=1e-5, atol=1e-5)


def test_attention_rows_sum_to_one(rng):
    w = _weights(rng, 8)
    _, attn = multi_head_attention(rng.standard_normal((3, 8)), rng.standard_normal((6, 8)),
                                   rng.standard_normal((6, 8)), 4, w, return_weights=True)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
    assert (attn >= 0).all()


def test_attention_errors(rng):
    w = _weights(rng, 6)
    with pytest.raises(ContractViolation):
        multi_head_attention(np.ones((1, 6)), np.ones((2, 6)), np.ones((2, 6)), 4, w)
    with pytest.raises(ContractViolation):
        multi_head_attention(np.ones((1, 6)), np.ones((2, 6)), np.ones((3, 6)), 2, w)


# --- elementwise and rng -----------------------------------------------------------------------

@given(seed=st.integers(0, 2**31), n=st.integers(1, 20), scale=st.floats(0.1, 500))
def test_softmax_is_a_distribution(seed, n, scale):
    x = np.random.default_rng(seed).standard_normal((3, n)) * scale
    p = softmax(x, axis=-1)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_sigmoid_is_stable():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_elementwise_and_concat():
    a = np.ones((1, 2, 2), np.float32)
    b = np.full((1, 2, 2), 3.0, np.float32)
    np.testing.assert_array_equal(add(a, b), np.full((1, 2, 2), 4.0))
    np.testing.assert_array_equal(mul(a, b), b)
    assert concat_channels([a, b]).shape == (2, 2, 2)
    with pytest.raises(ContractViolation):
        add(a, np.ones((1, 3, 2)))
    with pytest.raises(ContractViolation):
        concat_channels([a, np.ones((1, 3, 3))])


def test_gaussian_draw_reproducible_and_standard():
    a = gaussian_draw(RngStream(42), (100_000,))
    b = gaussian_draw(RngStream(42), (100_000,))
    np.testing.assert_array_equal(a, b)
    assert abs(a.mean()) < 0.02
    assert abs(a.std() - 1.0) < 0.02


def test_rng_spawn_depends_only_on_key():
    root = RngStream(7)
    first = root.spawn(3).normal(5)
    root.normal(100)
    np.testing.assert_array_equal(first, RngStream(7).spawn(3).normal(5))
    assert not np.array_equal(first, RngStream(7).spawn(4).normal(5))
