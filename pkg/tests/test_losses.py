import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgmae import losses as L
from dgmae import model as M
from dgmae import tensorad as ad
from dgmae.tensorad import Tape, Tensor

from .helpers import numeric_grad, random_graph, rel_err


def loop_sce(P, T, rows, gamma):
    vals = []
    for i in rows:
        p, t = P[i], T[i]
        np_, nt = np.linalg.norm(p), np.linalg.norm(t)
        cos = 0.0 if np_ == 0 or nt == 0 else p @ t / (np_ * nt)
        vals.append((1 - cos) ** gamma)
    return float(np.mean(vals))


def test_sce_examples():
    p = np.array([[1.0, 2.0]])
    assert L.sce(p, p, [0], 3.0).item() == pytest.approx(0.0, abs=1e-15)
    assert L.sce([[1.0, 0.0]], [[0.0, 5.0]], [0], 1.0).item() == pytest.approx(1.0)
    # cos = 0.5
    P = np.array([[1.0, 0.0]])
    T = np.array([[0.5, np.sqrt(3) / 2]])
    assert L.sce(P, T, [0], 3.0).item() == pytest.approx(0.125, abs=1e-12)


def test_sce_zero_prediction_row_is_finite():
    val = L.sce([[0.0, 0.0]], [[1.0, 1.0]], [0], 3.0).item()
    assert val == 1.0


def test_sce_rejects_empty_and_mismatch():
    with pytest.raises(ValueError):
        L.sce(np.ones((2, 2)), np.ones((2, 2)), np.zeros(2, bool), 2.0)
    with pytest.raises(ValueError):
        L.sce(np.ones((2, 2)), np.ones((3, 2)), [0], 2.0)


def test_feature_loss_examples(rng):
    X = rng.standard_normal((5, 3))
    plan = M.MaskPlan(np.array([True, False, True, True, False]))
    assert L.feature_loss(X * 2.5, X, plan, 3.0).item() == pytest.approx(0.0, abs=1e-12)
    Z = np.array([[1.0, 0.0]] * 3)
    Xo = np.array([[0.0, 2.0]] * 3)
    assert L.feature_loss(Z, Xo, M.MaskPlan(np.ones(3, bool)), 3.0).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        L.feature_loss(X, X, M.MaskPlan(np.zeros(5, bool)), 3.0)


def test_feature_loss_loop_oracle(rng):
    X = rng.standard_normal((8, 4))
    Z = rng.standard_normal((8, 4))
    plan = M.sample_mask(8, 0.5, 3)
    rows = np.flatnonzero(plan.masked)
    assert L.feature_loss(Z, X, plan, 3.0).item() == pytest.approx(loop_sce(Z, X, rows, 3.0), abs=1e-12)


def test_discrepancy_loss_examples(rng):
    XD = rng.standard_normal((6, 3))
    plan = M.MaskPlan(np.array([True, True, False, False, False, True]))
    ZD = XD.copy()
    ZD[plan.masked] = rng.standard_normal((3, 3))
    assert L.discrepancy_loss(ZD, XD, plan, 3.0).item() == pytest.approx(0.0, abs=1e-12)
    ortho = np.tile([[1.0, 0.0]], (2, 1))
    target = np.tile([[0.0, 1.0]], (2, 1))
    assert L.discrepancy_loss(ortho, target, M.MaskPlan(np.zeros(2, bool)), 3.0).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        L.discrepancy_loss(XD, XD, M.MaskPlan(np.ones(6, bool)), 3.0)


def test_discrepancy_loss_loop_oracle_and_normalization(rng):
    XD = rng.standard_normal((10, 4))
    ZD = rng.standard_normal((10, 4))
    plan = M.sample_mask(10, 0.3, 5)
    rows = np.flatnonzero(~plan.masked)
    # mean over the unmasked rows that are actually summed
    assert L.discrepancy_loss(ZD, XD, plan, 6.0).item() == pytest.approx(loop_sce(ZD, XD, rows, 6.0), abs=1e-12)


def test_total_loss_examples():
    assert L.total_loss(Tensor(0.2), Tensor(0.4), 0.0).item() == 0.2
    assert L.total_loss(Tensor(0.2), Tensor(0.4), 1.0).item() == 0.4
    assert L.total_loss(Tensor(0.2), Tensor(0.4), 0.5).item() == pytest.approx(0.3)


@settings(max_examples=50, deadline=None)
@given(
    lf=st.floats(0, 10), ld=st.floats(0, 10), delta=st.floats(1e-3, 5), lam=st.floats(0.01, 0.99)
)
def test_total_loss_monotone(lf, ld, delta, lam):
    base = L.total_loss(Tensor(lf), Tensor(ld), lam).item()
    assert L.total_loss(Tensor(lf + delta), Tensor(ld), lam).item() > base
    assert L.total_loss(Tensor(lf), Tensor(ld + delta), lam).item() > base


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_feature_loss_target_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((6, 3))
    Z = rng.standard_normal((6, 3))
    plan = M.MaskPlan(np.ones(6, bool))
    scaled = X * rng.uniform(0.01, 100, (6, 1))
    assert L.feature_loss(Z, scaled, plan, 3.0).item() == pytest.approx(L.feature_loss(Z, X, plan, 3.0).item(), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(cos=st.floats(-0.999, 0.999), g1=st.floats(1.01, 5), dg=st.floats(0.01, 3))
def test_larger_gamma_downweights(cos, g1, dg):
    P = np.array([[1.0, 0.0]])
    T = np.array([[cos, np.sqrt(1 - cos * cos)]])
    err = 1 - cos
    lo, hi = L.sce(P, T, [0], g1).item(), L.sce(P, T, [0], g1 + dg).item()
    if 0 < err < 1:
        assert hi < lo
    elif err > 1:
        assert hi > lo


def test_sce_gradient_both_arguments(rng):
    P = rng.standard_normal((5, 3))
    T = rng.standard_normal((5, 3))
    rows = np.array([0, 2, 3])
    tp, tt = Tensor(P, requires_grad=True), Tensor(T, requires_grad=True)
    with Tape() as tape:
        loss = L.sce(tp, tt, rows, 3.0)
    tape.backward(loss)

    def f():
        return L.sce(P, T, rows, 3.0).item()

    assert rel_err(tp.grad, numeric_grad(f, P)) <= 1e-4
    assert rel_err(tt.grad, numeric_grad(f, T)) <= 1e-4


def test_loss_config_validation():
    L.LossConfig(3.0, 6.0, 0.1)
    with pytest.raises(ValueError):
        L.LossConfig(1.0, 6.0, 0.1)
    with pytest.raises(ValueError):
        L.LossConfig(3.0, 6.0, 1.5)


def test_pull_push_examples(rng):
    x = rng.standard_normal(4)
    x /= np.linalg.norm(x)
    lhs, rhs = L.pull_push_identity_check(x, x, np.zeros((0, 4)))
    assert lhs == pytest.approx(1.0)
    assert rhs == pytest.approx(lhs, abs=1e-12)
    lhs, rhs = L.pull_push_identity_check(rng.standard_normal(4), x, [x])
    assert lhs == pytest.approx(0.0, abs=1e-12)
    assert rhs == pytest.approx(lhs, abs=1e-9)


def test_pull_push_expansion_oracle(rng):
    z = rng.standard_normal(5)
    xs = rng.standard_normal((4, 5))
    xs /= np.linalg.norm(xs, axis=1, keepdims=True)
    lhs, rhs = L.pull_push_identity_check(z, xs[0], xs[1:])
    # expanding |z - x|^2 = |z|^2 - 2<z, x> + 1 term by term
    pull = -0.5 * (z @ z - 2 * z @ xs[0] + 1)
    push = sum(0.5 * (z @ z - 2 * z @ x + 1) for x in xs[1:])
    assert lhs == pytest.approx(z @ xs[0] - sum(z @ x for x in xs[1:]), abs=1e-12)
    assert rhs - L.pull_push_constant(z, 3) == pytest.approx(pull + push, abs=1e-12)
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_pull_push_rejects_unnormalized():
    with pytest.raises(ValueError):
        L.pull_push_identity_check(np.ones(2), np.array([1.0, 1.0]), [])


def test_end_to_end_gradient_small_graph(rng):
    from dgmae.train import RunConfig, forward_losses

    g = random_graph(12, 0.3, rng)
    X = rng.standard_normal((12, 4))
    cfg = RunConfig(lam=0.5, mask_ratio=0.5, hidden_dim=4, heads=2, num_layers=2, p_c=0.8, p_tau=0.9, seed=4)
    params = M.init_params(4, 4, heads=2, num_layers=2, seed=1)
    with Tape() as tape:
        loss, _, _ = forward_losses(params, g, X, cfg, epoch=0)
    tape.backward(loss)

    def f():
        return forward_losses(params, g, X, cfg, epoch=0)[0].item()

    for t in params.tensors():
        num = numeric_grad(f, t.value)
        assert rel_err(t.grad, num) <= 1e-3
