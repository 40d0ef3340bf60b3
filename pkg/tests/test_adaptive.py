import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drcp.adaptive import AdaptiveConvParams, adaptive_conv, blend_weights, branch_outputs
from drcp.tensor import Kernel2D, RngStream, conv2d
from drcp.validation import ContractViolation


def random_params(c, seed):
    r = RngStream(seed)
    kerns = [Kernel2D.xavier(c, c, k, r) for k in (3, 5, 7)]
    return AdaptiveConvParams(*kerns, Kernel2D.xavier(3, c, 1, r, gain=3.0))


def test_saturated_generator_selects_first_branch(rng):
    p = random_params(3, 0)
    p.weight_gen = Kernel2D(np.zeros((3, 3, 1, 1)), np.array([20.0, -20.0, -20.0]))
    x = rng.standard_normal((3, 9, 9)).astype(np.float32)
    np.testing.assert_allclose(adaptive_conv(x, p), conv2d(x, p.conv3, padding=1), atol=1e-6)


def test_zero_generator_averages_branches(rng):
    p = random_params(2, 1)
    p.weight_gen = Kernel2D.zeros(3, 2)
    x = rng.standard_normal((2, 8, 10)).astype(np.float32)
    f3 = conv2d(x, p.conv3, padding=1)
    f5 = conv2d(x, p.conv5, padding=2)
    f7 = conv2d(x, p.conv7, padding=3)
    np.testing.assert_allclose(adaptive_conv(x, p), (f3 + f5 + f7) / 3, atol=1e-6)


@settings(max_examples=40)
@given(seed=st.integers(0, 2**31), c=st.integers(1, 4), h=st.integers(3, 10), w=st.integers(3, 10))
def test_output_inside_branch_envelope(seed, c, h, w):
    p = random_params(c, seed % 1000)
    x = np.random.default_rng(seed).standard_normal((c, h, w)).astype(np.float32)
    # independent branch outputs straight from conv2d
    fs = np.stack([conv2d(x, k, padding=k.k_h // 2) for k in (p.conv3, p.conv5, p.conv7)])
    out = adaptive_conv(x, p)
    assert out.shape == x.shape
    assert (out >= fs.min(axis=0) - 1e-5).all()
    assert (out <= fs.max(axis=0) + 1e-5).all()
    np.testing.assert_allclose(blend_weights(x, p).sum(axis=0), 1.0, atol=1e-6)


def test_parts_and_seeded_identity(rng):
    x = rng.standard_normal((4, 6, 6)).astype(np.float32)
    p = AdaptiveConvParams.seeded(4, RngStream(0), noise=0.0)
    out, w, parts = adaptive_conv(x, p, return_parts=True)
    # zero-noise seeding is a pure identity on every branch
    for f in parts:
        np.testing.assert_allclose(f, x, atol=1e-6)
    np.testing.assert_allclose(out, x, atol=1e-6)
    assert len(branch_outputs(x, p)) == 3 and w.shape == (3, 6, 6)


def test_contract_errors():
    p = random_params(2, 0)
    with pytest.raises(ContractViolation):
        adaptive_conv(np.zeros((3, 5, 5)), p)
    with pytest.raises(ContractViolation):
        AdaptiveConvParams(p.conv5, p.conv5, p.conv7, p.weight_gen)
    with pytest.raises(ContractViolation):
        AdaptiveConvParams(p.conv3, p.conv5, p.conv7, Kernel2D.zeros(2, 2))
