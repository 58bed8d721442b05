import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slifmr import autodiff as ad
from slifmr import fusion as F
from slifmr.errors import ConfigError


def params(d, W=None, b=None, seed=0, proj=False):
    p = F.FusionParams.init(d, np.random.default_rng(seed), with_projection=proj)
    if W is not None:
        p.W = ad.constant(np.asarray(W, dtype=np.float64))
    if b is not None:
        p.b = ad.constant(np.asarray(b, dtype=np.float64))
    return p


def branches(n=4, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return [ad.constant(rng.normal(size=(n, d))) for _ in range(3)]


def test_zero_params_give_uniform_weights():
    xb, xm, xk = branches()
    a = F.ailf_weights(xb, xm, xk, params(3, np.zeros((9, 3)), np.zeros(3))).value
    np.testing.assert_allclose(a, 1 / 3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-50, 50))
def test_bias_shift_invariance_and_simplex(seed, c):
    xb, xm, xk = branches(seed=seed)
    p = params(3, seed=seed)
    a = F.ailf_weights(xb, xm, xk, p).value
    p.b = ad.constant(p.b.value + np.float32(c))
    a2 = F.ailf_weights(xb, xm, xk, p).value
    np.testing.assert_allclose(a, a2, atol=1e-5)
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)


def test_manual_logits():
    rng = np.random.default_rng(2)
    xb, xm, xk = branches(n=2, d=4, seed=5)
    W, b = rng.normal(size=(12, 3)), rng.normal(size=3)
    got = F.ailf_weights(xb, xm, xk, params(4, W, b)).value
    z = (np.hstack([xb.value, xm.value, xk.value]) @ W + b) / 2.0
    e = np.exp(z - z.max(axis=1, keepdims=True))
    np.testing.assert_allclose(got, e / e.sum(axis=1, keepdims=True), atol=1e-10)


def test_degenerate_and_convex_fuse():
    xb, xm, xk = branches()
    alpha = ad.constant(np.tile([1.0, 0.0, 0.0], (4, 1)))
    np.testing.assert_array_equal(F.fuse(xb, xm, xk, alpha).value, xb.value)
    v = xb
    a = F.ailf_weights(v, v, v, params(3))
    np.testing.assert_allclose(F.fuse(v, v, v, a).value, v.value, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_fused_output_in_convex_hull(seed):
    xb, xm, xk = branches(seed=seed)
    out, _ = F.aggregate("ailf", xb, xm, xk, params(3, seed=seed))
    stack = np.stack([xb.value, xm.value, xk.value])
    assert np.all(out.value >= stack.min(axis=0) - 1e-6)
    assert np.all(out.value <= stack.max(axis=0) + 1e-6)


def test_gradient_check_through_fusion():
    xb, xm, xk = branches(n=4, d=3, seed=3)
    rng = np.random.default_rng(0)
    b = ad.constant(rng.normal(size=3))

    def f(w):
        p = F.FusionParams(w, b)
        out, _ = F.aggregate("ailf", xb, xm, xk, p)
        return ad.sum(ad.tanh(out))

    assert ad.grad_check(f, rng.normal(size=(9, 3))) < 1e-4

    w_fixed = ad.constant(rng.normal(size=(9, 3)))

    def g(x):
        p = F.FusionParams(w_fixed, b)
        out, _ = F.aggregate("ailf", x, xm, xk, p)
        return ad.sum(out * out)

    assert ad.grad_check(g, xb.value) < 1e-4


def test_sum_and_concat_baselines():
    xb, xm, xk = branches()
    zero = ad.constant(np.zeros_like(xb.value))
    np.testing.assert_array_equal(F.baseline_aggregate("sum", xb, zero, zero).value, xb.value)
    p = params(3, proj=True)
    p.proj = ad.constant(np.vstack([np.eye(3)] * 3))
    np.testing.assert_allclose(F.baseline_aggregate("concat", xb, xm, xk, p).value,
                               F.baseline_aggregate("sum", xb, xm, xk).value, atol=1e-12)


def test_attention_mode_differs_from_ailf_by_scaling():
    xb, xm, xk = branches(d=4, seed=1)
    p = params(4, W=np.random.default_rng(1).normal(size=(12, 3)) * 2, b=np.zeros(3))
    att = F.baseline_aggregate("attention", xb, xm, xk, p).value
    ailf, _ = F.aggregate("ailf", xb, xm, xk, p)
    assert not np.allclose(att, ailf.value)
    flat = params(4, W=np.zeros((12, 3)), b=np.zeros(3))
    np.testing.assert_allclose(F.baseline_aggregate("attention", xb, xm, xk, flat).value,
                               F.aggregate("ailf", xb, xm, xk, flat)[0].value)


def test_ablated_branch_softmax_over_remaining():
    xb, xm, _ = branches()
    a = F.ailf_weights(xb, xm, None, params(3)).value
    assert np.all(a[:, 2] == 0)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)


def test_unknown_mode():
    xb, xm, xk = branches()
    with pytest.raises(ConfigError):
        F.aggregate("max", xb, xm, xk, params(3))
    with pytest.raises(ConfigError):
        F.baseline_aggregate("concat", xb, xm, xk, params(3))
