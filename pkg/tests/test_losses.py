import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmvp import numerics as nx
from lmvp import losses as L
from lmvp.model import ModelConfig, ModelParams, extract_features
from lmvp.numerics import ContractError, Tensor

from oracles import ssim_direct, gdl_direct, bce_direct, mse_direct


def T(a):
    return Tensor(np.asarray(a, np.float64))


# ---------------------------------------------------------------- adversarial

def test_loss_dis_examples():
    assert float(L.loss_dis([T([0.5, 0.5])], [T([0.5])]).data) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert float(L.loss_dis([T([0.9])], [T([0.2])]).data) == pytest.approx(-math.log(0.9) - math.log(0.8), abs=1e-12)
    assert float(L.loss_dis([T([0.9])], [T([0.2])]).data) == pytest.approx(0.3285, abs=1e-4)
    eps = 1e-7
    assert float(L.loss_dis([T([1.0])], [T([0.0])]).data) == pytest.approx(2 * eps, rel=1e-3)


def test_loss_dis_clamps_and_rejects_empty():
    assert np.isfinite(float(L.loss_dis([T([0.0])], [T([1.0])]).data))
    with pytest.raises(ContractError):
        L.loss_dis([], [T([0.5])])


# ---------------------------------------------------------------- guider

def test_motion_target():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    np.testing.assert_array_equal(L.motion_target([A, A + B])[0], (A + B) - A)
    seq = [rng.normal(size=(1, 2, 2, 3)) for _ in range(4)]
    out = L.motion_target(seq)
    assert len(out) == 3
    for t in range(3):
        assert out[t].tobytes() == (seq[t + 1] - seq[t]).tobytes()
    static = [A.copy() for _ in range(3)]
    assert all(not m.any() for m in L.motion_target(static))
    with pytest.raises(ContractError):
        L.motion_target([A])


def test_learner_examples(rng):
    m = [rng.normal(size=(4, 4, 3))]
    assert float(L.loss_guider_learner([T(m[0])], m).data) == 0
    assert float(L.loss_guider_learner([T(np.zeros(12))], [np.ones(12)]).data) == 12
    mh = [rng.normal(size=(2, 2, 2, 3)) for _ in range(3)]
    tg = [rng.normal(size=(2, 2, 2, 3)) for _ in range(3)]
    brute = sum(float(((a - b) ** 2).sum()) for a, b in zip(mh, tg)) / 2
    assert float(L.loss_guider_learner([T(a) for a in mh], tg).data) == pytest.approx(brute, abs=1e-6)
    with pytest.raises(ContractError):
        L.loss_guider_learner([T(mh[0])], tg)


def test_teacher_examples(rng):
    f_hat = rng.normal(size=(1, 2, 2, 3))
    m_hat = rng.normal(size=(1, 2, 2, 3))
    exact = L.TeacherTerm(T(f_hat + m_hat), f_hat, m_hat)
    assert float(L.loss_guider_teacher([exact]).data) == 0
    f_next = rng.normal(size=(1, 2, 2, 3))
    drift = L.loss_guider_teacher([L.TeacherTerm(T(f_next), f_hat, np.zeros_like(m_hat))])
    assert float(drift.data) == pytest.approx(((f_next - f_hat) ** 2).sum(), abs=1e-12)
    with pytest.raises(ContractError):
        L.loss_guider_teacher([L.TeacherTerm(T(f_next), None, m_hat)])
    with pytest.raises(ContractError):
        L.loss_guider_teacher([])


def test_teacher_gradient_zero_for_extractor_and_guider(rng):
    cfg = ModelConfig(feat=4, width1=4, hidden=4, dec1=4, dec2=4, K=3)
    params = ModelParams.init(cfg, seed=0, dtype=np.float64)
    leaves = params.leaves(("G",))
    # new frame depends on a G-like leaf so the tape is non-trivial
    g = Tensor(rng.uniform(size=(1, 16, 16, 1)), requires_grad=True)
    clip = [Tensor(rng.uniform(size=(1, 16, 16, 1))) for _ in range(3)] + [g]
    f_next = extract_features(clip, leaves, cfg)
    term = L.TeacherTerm(f_next, rng.normal(size=f_next.shape), rng.normal(size=f_next.shape))
    fm = {n: t for n, t in leaves.items() if n[0] in "FM"}
    # F is evaluated on the tape but held constant, so only the frame path carries gradient
    grads = nx.backprop(L.loss_guider_teacher([term]), [g] + list(fm.values()))
    assert np.abs(grads[0]).sum() > 0
    assert all(not gr.any() for gr in grads[1:])


# ---------------------------------------------------------------- reconstruction

def test_recons_examples():
    mse = L.LossConfig(recon="mse")
    x = np.array([[0, 1], [0, 1]], float)[None, :, :, None]
    zero = np.zeros_like(x)
    assert float(L.loss_recons(x, T(x), mse).data) == 0
    assert float(L.loss_recons(x, T(zero), mse).data) == pytest.approx(1.0, abs=1e-12)
    a, b = np.full((1, 4, 4, 1), 0.3), np.full((1, 4, 4, 1), 0.8)
    assert float(L.gdl_loss(a, T(b)).data) == 0
    assert float(L.loss_recons(a, T(b), mse).data) == pytest.approx(0.25, abs=1e-12)
    with pytest.raises(ContractError):
        L.loss_recons(a, T(b[:, :3]), mse)


def test_loss_gen_examples():
    assert float(L.loss_gen(T(1.0), T(2.0), 0.1).data) == pytest.approx(1.2)
    assert float(L.loss_gen(T(1.0), T(2.0), 0.0).data) == 1.0
    assert L.loss_gen(T(1.5), None, 0.3).data == 1.5
    diff = float(L.loss_gen(T(1.0), T(2.0), 0.2).data) - float(L.loss_gen(T(1.0), T(2.0), 0.1).data)
    assert diff == pytest.approx(0.1 * 2.0, abs=1e-12)


def test_loss_config_invariants():
    with pytest.raises(ContractError) as e:
        L.LossConfig(gamma=-1, gdl_alpha=0.5, recon="l1", eps=0.6).validate()
    for key in ("gamma", "alpha", "recon", "eps"):
        assert key in str(e.value)


@settings(max_examples=40, deadline=None)
@given(x=st.floats(0, 1), y=st.floats(0.001, 0.999))
def test_bce_minimized_at_truth(x, y):
    tgt = np.full((1, 2, 2, 1), x)
    at_truth = float(L.bce_loss(tgt, T(np.clip(tgt, 1e-7, 1 - 1e-7))).data)
    assert at_truth <= float(L.bce_loss(tgt, T(np.full_like(tgt, y))).data) + 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(1, 5, 5, 1))
    y = rng.uniform(size=(1, 5, 5, 1))
    for recon in ("bce", "mse"):
        assert float(L.loss_recons(x, T(y), L.LossConfig(recon=recon)).data) >= 0
    assert float(L.loss_dis([T(rng.uniform(size=3))], [T(rng.uniform(size=3))]).data) >= 0


# ---------------------------------------------------------------- metrics

def test_metric_identity_and_psnr():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(3, 16, 16, 1))
    rec = L.evaluate_metrics(x, x)
    assert rec.mse == 0 and rec.psnr == 99 and rec.ssim == 1.0
    assert L.psnr_from_mse(0.01) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(ContractError):
        L.evaluate_metrics(x, x[:, :8])


def pairs(n=20, seed=7):
    rng = np.random.default_rng(seed)
    return [(rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))) for _ in range(n)]


def test_metrics_match_direct_formulas():
    for x, y in pairs():
        assert L.ssim(x, y) == pytest.approx(ssim_direct(x, y), abs=1e-6)
        assert L.bce_metric(x, y) == pytest.approx(bce_direct(x, y), abs=1e-6)
        assert L.mse_metric(x, y) == pytest.approx(mse_direct(x, y), abs=1e-6)
        assert L.psnr_from_mse(L.mse_metric(x, y)) == pytest.approx(10 * math.log10(1 / mse_direct(x, y)), abs=1e-6)
        g = L.gdl_loss(x[None, :, :, None], T(y[None, :, :, None]))
        assert float(g.data) == pytest.approx(gdl_direct(x, y), abs=1e-6)
        g2 = L.gdl_loss(x[None, :, :, None], T(y[None, :, :, None]), alpha=2.0)
        assert float(g2.data) == pytest.approx(gdl_direct(x, y, 2.0), abs=1e-6)


def test_ssim_properties():
    for x, y in pairs(5):
        assert L.ssim(x, x) == 1.0
        assert L.ssim(x, y) == pytest.approx(L.ssim(y, x), abs=1e-12)
        assert -1 <= L.ssim(x, y) <= 1
    with pytest.raises(ContractError):
        L.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_multichannel_is_channel_mean():
    x, y = pairs(1)[0]
    a = np.stack([x, y], -1)
    b = np.stack([y, x], -1)
    assert L.ssim(a, b) == pytest.approx(L.ssim(x, y), abs=1e-12)
