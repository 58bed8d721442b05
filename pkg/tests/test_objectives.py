import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slifmr import autodiff as ad
from slifmr import objectives as O
from slifmr.errors import ConfigError

CFG = O.LossConfig()


def c(x):
    return ad.constant(np.asarray(x, dtype=np.float64))


def test_inter_uniform_similarities():
    # every anchor is orthogonal to every unified rep: all sims 0
    anchor = c([[1, 0, 0, 0]] * 3)
    unified = c([[0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
    loss = O.inter_modal_loss(anchor, anchor, anchor, unified, [0, 1, 2], CFG).value
    assert loss == pytest.approx(3 * np.log(2), abs=1e-6)


def test_inter_two_items_direct():
    anchor = c([[1, 0], [0, 1]])
    unified = c([[1, 0], [0, 1]])
    term = O.info_nce_excluding_positive(anchor, unified, 1.0).value
    assert term == pytest.approx(-1.0, abs=1e-7)


def test_inter_stop_gradient_on_unified():
    rng = np.random.default_rng(0)
    xs = [c(rng.normal(size=(4, 3))) for _ in range(3)]
    u = ad.parameter(rng.normal(size=(4, 3)))
    loss = O.inter_modal_loss(*xs, u, [0, 1, 2, 3], CFG)
    loss.backward()
    assert u.grad is None or not np.any(u.grad)

    def f(unified):
        return O.inter_modal_loss(*xs, ad.detach(unified), [0, 1, 2, 3], CFG)

    # probing by finite differences: the loss does move, but no gradient is recorded
    base = f(c(u.value)).value
    moved = f(c(u.value + 0.1)).value
    assert base != moved


def test_inter_monotone_in_own_similarity():
    unified = c([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    rest = c([[0.2, 0.5, 0.3], [0.1, 0.9, 0.2], [0.3, 0.1, 0.8]])
    losses = []
    for w in [0.0, 0.5, 1.0, 2.0]:
        anchor = c([[0.2 + w, 0.5, 0.3], [0.1, 0.9, 0.2], [0.3, 0.1, 0.8]])
        losses.append(O.info_nce_excluding_positive(anchor, unified, 0.2).value)
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert O.info_nce_excluding_positive(rest, unified, 0.2).value == pytest.approx(losses[0])


def test_inter_gradient_check():
    rng = np.random.default_rng(1)
    unified = c(rng.normal(size=(5, 3)))
    others = [c(rng.normal(size=(5, 3))) for _ in range(2)]

    def f(x):
        return O.inter_modal_loss(x, *others, unified, [0, 1, 2, 3, 4], CFG)

    assert ad.grad_check(f, rng.normal(size=(5, 3))) < 1e-4


def test_batch_of_one_is_rejected():
    x = c([[1.0, 0.0]])
    with pytest.raises(ValueError):
        O.inter_modal_loss(x, x, x, x, [0], CFG)


def test_intra_identical_embeddings_zero():
    x = c(np.tile([1.0, 2.0], (4, 1)))
    for form in O.INTRA_FORMS:
        cfg = O.LossConfig(intra_form=form)
        assert O.intra_modal_loss(x, x, x, range(4), cfg).value == pytest.approx(0.0, abs=1e-6)


def test_intra_literal_two_items():
    # unit vectors at distance^2 = 4
    x = c([[1.0, 0.0], [-1.0, 0.0]])
    cfg = O.LossConfig(t_uniform=1.0)
    single = O._intra_single(x, cfg).value
    assert single == pytest.approx(2.0)


def naive_intra(x, t):
    f = x / np.linalg.norm(x, axis=1, keepdims=True)
    b = len(f)
    return t / b**2 * sum(np.sum((f[i] - f[j]) ** 2) for i in range(b) for j in range(b))


def test_intra_literal_matches_double_loop():
    rng = np.random.default_rng(2)
    xs = [rng.normal(size=(8, 5)) for _ in range(3)]
    got = O.intra_modal_loss(*map(c, xs), range(8), CFG).value
    assert got == pytest.approx(sum(naive_intra(x, CFG.t_uniform) for x in xs), abs=1e-6)


def test_intra_logsumexp_form():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 4))
    cfg = O.LossConfig(intra_form="logsumexp")
    f = x / np.linalg.norm(x, axis=1, keepdims=True)
    d2 = ((f[:, None] - f[None]) ** 2).sum(-1)
    expect = -np.log(np.exp(-cfg.t_uniform * d2).mean())
    assert O._intra_single(c(x), cfg).value == pytest.approx(expect, abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_intra_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 4))
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    a = O._intra_single(c(x), CFG).value
    b = O._intra_single(c(x @ q), CFG).value
    assert a == pytest.approx(b, abs=1e-6)


def test_bpr_examples():
    assert O.bpr_loss(c([1.5]), c([1.5])).value == pytest.approx(np.log(2))
    assert O.bpr_loss(c([20.0]), c([0.0])).value < 1e-8
    assert O.bpr_loss(c([-40.0]), c([40.0])).value == pytest.approx(80.0)


def test_bpr_gradient_check():
    rng = np.random.default_rng(4)
    neg = c(rng.normal(size=16))
    assert ad.grad_check(lambda p: O.bpr_loss(p, neg), rng.normal(size=16)) < 1e-4


@settings(max_examples=30, deadline=None)
@given(margins=st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_bpr_non_negative(margins):
    m = np.array(margins)
    assert O.bpr_loss(c(m), c(np.zeros_like(m))).value >= 0


def parts():
    return {"bpr": c(0.7), "inter": c(1.3), "intra": c(2.1)}


def test_total_loss_degenerate_and_linear():
    theta = [c(np.ones((2, 2)))]
    cfg0 = O.LossConfig(beta=0, gamma=0, eta=0)
    assert O.total_loss(parts(), theta, cfg0).value == 0.7
    cfg = O.LossConfig(beta=0.3, gamma=0.01, eta=0.5)
    zero = [c(np.zeros((2, 2)))]
    assert O.total_loss(parts(), zero, cfg).value == pytest.approx(0.7 + 0.3 * 1.3 + 0.01 * 2.1)
    rest = 0.7 + 0.01 * 2.1 + 0.5 * 4
    one = O.total_loss(parts(), theta, cfg).value - rest
    two = O.total_loss(parts(), theta, O.LossConfig(beta=0.6, gamma=0.01, eta=0.5)).value - rest
    assert two == pytest.approx(2 * one)


def test_cl_switch_drops_contrastive_terms():
    cfg = O.LossConfig(cl_enabled=False, eta=0)
    assert O.total_loss(parts(), [], cfg).value == 0.7


def test_config_validation():
    with pytest.raises(ConfigError):
        O.LossConfig(tau=0)
    with pytest.raises(ConfigError):
        O.LossConfig(beta=-1)
    with pytest.raises(ConfigError):
        O.LossConfig(intra_form="cubic")
