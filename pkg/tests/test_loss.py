import math

import numpy as np
import pytest

from dsvb import diffcore as dc
from dsvb.dat import Discriminator, frozen
from dsvb.diffcore import Tensor
from dsvb.errors import DomainError, ShapeMismatch
from dsvb.loss import LossBreakdown, bce_loss, dsvb_total, selbo_loss, ss_loss
from dsvb.vrnn import GaussianParams, Rollout, VRNNDims, VRNNModel, filter_sequence, gaussian_kld, gaussian_nll

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
SMALL = VRNNDims(n_y=2, n_x=3, hidden_size=6, prior_hidden=(5,), encoder_hidden=(5,),
                 decoder_hidden=(5,), x_feature_hidden=(4,), y_feature_hidden=(3,))


def g(mu, sd):
    return GaussianParams(Tensor(np.asarray(mu, float)), Tensor(np.asarray(sd, float)))


def forced_rollout(y, n_x=3, prior_mean=None):
    """Hand-built rollout: decoder at the measurement, posterior equal to prior."""
    T, n_y = y.shape
    pm = np.zeros((T, 1, n_x)) if prior_mean is None else prior_mean
    priors = [g(pm[n], np.ones((1, n_x))) for n in range(T)]
    decoded = [g(y[None, n], np.ones((1, n_y))) for n in range(T)]
    particles = [p.mean for p in priors]
    return Rollout(priors, list(priors), decoded, particles, [None] * T, 1, 1, y[:, None, :])


def test_selbo_forced_decoder():
    L = 7
    y = np.random.default_rng(0).standard_normal((L + 1, 2))
    recon, kld = selbo_loss(forced_rollout(y), y)
    assert recon.item() == pytest.approx((L + 1) * 2 * HALF_LOG_2PI, abs=1e-12)
    assert kld.item() == 0.0


def test_selbo_rejects_mismatched_measurements():
    y = np.zeros((3, 2))
    with pytest.raises(ShapeMismatch):
        selbo_loss(forced_rollout(y), np.ones((3, 2)))


def test_selbo_doubling_identical_particles():
    m = VRNNModel(SMALL, seed=0)
    y = np.random.default_rng(1).standard_normal((6, 2))
    eps = np.random.default_rng(2).standard_normal((6, 1, 3))
    one = selbo_loss(filter_sequence(m, y, 1, noise=eps))
    two = selbo_loss(filter_sequence(m, y, 2, noise=np.repeat(eps, 2, axis=1)))
    assert two[0].item() == pytest.approx(one[0].item(), rel=1e-12)
    assert two[1].item() == pytest.approx(one[1].item(), rel=1e-12)


def test_selbo_single_step_composition():
    m = VRNNModel(VRNNDims(n_y=1, n_x=1, hidden_size=4, prior_hidden=(3,), encoder_hidden=(3,),
                           decoder_hidden=(3,), x_feature_hidden=(2,), y_feature_hidden=(2,)), seed=5)
    y, eps = np.array([[0.4]]), np.array([[[0.3]]])
    recon, kld = selbo_loss(filter_sequence(m, y, noise=eps))
    fs = m.initial_state(1)
    post = m.encode(Tensor(y), fs)
    x = post.mean + post.std * Tensor(eps[0])
    want_r = gaussian_nll(Tensor(y), m.decode(x, fs)).item()
    want_k = gaussian_kld(post, m.prior(fs)).item()
    assert abs(recon.item() - want_r) < 1e-12 and abs(kld.item() - want_k) < 1e-12


def test_kld_term_nonnegative():
    for seed in range(5):
        m = VRNNModel(SMALL, seed=seed)
        y = np.random.default_rng(seed).standard_normal((3, 10, 2)) * 3
        assert selbo_loss(filter_sequence(m, y, rng=np.random.default_rng(seed)))[1].item() >= 0


def test_ss_loss_cases():
    y = np.zeros((4, 2))
    pm = np.random.default_rng(3).standard_normal((4, 1, 3))
    ro = forced_rollout(y, prior_mean=pm)
    x_star = pm[:, 0, :].copy()
    assert ss_loss(ro, x_star, np.zeros(4)).item() == 0.0
    assert ss_loss(ro, None, None).item() == 0.0
    one = np.array([0, 1, 0, 0])
    assert ss_loss(ro, x_star, one).item() == pytest.approx(3 * HALF_LOG_2PI, abs=1e-14)
    shifted = x_star.copy()
    shifted[1, 2] += 1.0
    assert ss_loss(ro, shifted, one).item() - ss_loss(ro, x_star, one).item() == pytest.approx(0.5, abs=1e-14)
    # a masked state channel contributes nothing, even with an absurd label
    shifted[1, 2] += 1e6
    dim_mask = np.array([1.0, 1.0, 0.0])
    assert ss_loss(ro, shifted, one, dim_mask).item() == pytest.approx(2 * HALF_LOG_2PI, abs=1e-14)


def test_ss_loss_ignores_nan_labels_on_unlabelled_steps():
    ro = forced_rollout(np.zeros((3, 2)))
    x_star = np.full((3, 3), np.nan)
    x_star[0] = 0.0
    assert ss_loss(ro, x_star, [1, 0, 0]).item() == pytest.approx(3 * HALF_LOG_2PI, abs=1e-14)
    with pytest.raises(ShapeMismatch):
        ss_loss(ro, x_star, [1, 1, 0])
    with pytest.raises(ShapeMismatch):
        ss_loss(ro, np.zeros((3, 3)), [1, 1])


def test_bce_values():
    assert bce_loss(Tensor([0.5]), [1]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert bce_loss(Tensor([0.5]), [0]).item() == pytest.approx(0.693147, abs=1e-6)
    assert bce_loss(Tensor([1.0]), [1]).item() == pytest.approx(0.0, abs=1e-6)
    assert bce_loss(Tensor([0.9]), [0]).item() == pytest.approx(-math.log(0.1), abs=1e-12)
    assert round(-math.log(0.1), 6) == 2.302585
    assert bce_loss(Tensor([0.0, 1.0]), [1, 0]).item() == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_bce_domain_errors():
    with pytest.raises(DomainError):
        bce_loss(Tensor([1.2]), [1])
    with pytest.raises(DomainError):
        bce_loss(Tensor([np.nan]), [1])


def test_dsvb_total_arithmetic():
    parts = dsvb_total(1.0, 1.0, 1.0, 1.0)
    assert parts.total == 2.0
    assert parts.discriminator_total == 1.0
    a = dsvb_total(1.5, 0.2, 0.3, 0.1, lam=0.0)
    b = dsvb_total(1.5, 0.2, 0.3, 99.0, lam=0.0)
    assert a.total == b.total
    p = dsvb_total(0.7, 0.4, 1.1, 0.6, kld_weight=0.5, ss_weight=2.0, lam=0.3)
    want = p.reconstruction_nll + p.kld_weight * p.kld + p.ss_weight * p.supervised_state_nll - p.lam * p.adversarial_bce
    assert abs(p.total - want) < 1e-12


def test_dsvb_total_lam_zero_leaves_bce_out_of_graph():
    bce = Tensor(0.3, requires_grad=True)
    r = Tensor(1.0, requires_grad=True)
    dsvb_total(r, Tensor(0.0), Tensor(0.0), bce, lam=0.0).objective.backward()
    assert bce.grad is None and r.grad == 1.0


def test_breakdown_to_dict():
    d = dsvb_total(1.0, 2.0, 3.0, 0.5, steps=10, particles=2).to_dict()
    assert d["total"] == 1 + 2 + 3 - 0.5 and d["steps"] == 10 and "objective" not in d
    assert isinstance(LossBreakdown(1, 1, 1, 1, 1, 1), LossBreakdown)


def _generator_objective(model, disc, y, x_star, mask, eps):
    ro = filter_sequence(model, y, noise=eps)
    recon, kld = selbo_loss(ro)
    ss = ss_loss(ro, x_star, mask)
    with frozen(disc):
        bce = bce_loss(disc.classify(ro.particles), np.ones(ro.rows))
    return dsvb_total(recon, kld, ss, bce).objective


@pytest.mark.parametrize("seed", range(10))
def test_generator_objective_descends(seed):
    rng = np.random.default_rng(100 + seed)
    model, disc = VRNNModel(SMALL, seed=seed), Discriminator(3, hidden_size=5, head_hidden=(4,), seed=seed)
    y, x_star = rng.standard_normal((2, 8, 2)), rng.standard_normal((2, 8, 3))
    mask, eps = np.ones((2, 8)), rng.standard_normal((8, 2, 3))
    before = _generator_objective(model, disc, y, x_star, mask, eps)
    model.zero_grad()
    before.backward()
    for p in model.parameters():
        p.values = p.values - 1e-4 * p.grad
    after = _generator_objective(model, disc, y, x_star, mask, eps)
    assert after.item() < before.item()


def test_loss_invariant_to_batch_order():
    rng = np.random.default_rng(4)
    m = VRNNModel(SMALL, seed=1)
    y, x_star = rng.standard_normal((4, 6, 2)), rng.standard_normal((4, 6, 3))
    mask, eps = rng.integers(0, 2, (4, 6)), rng.standard_normal((6, 4, 3))
    perm = np.array([2, 0, 3, 1])

    def total(yy, xx, mm, ee):
        ro = filter_sequence(m, yy, noise=ee)
        r, k = selbo_loss(ro)
        return r.item() + k.item() + ss_loss(ro, xx, mm).item()

    a = total(y, x_star, mask, eps)
    b = total(y[perm], x_star[perm], mask[perm], eps[:, perm])
    assert abs(a - b) < 1e-12 * max(1, abs(a))
