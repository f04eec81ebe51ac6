import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsvb import diffcore as dc
from dsvb.diffcore import Tensor, grad_check
from dsvb.errors import DomainError, ShapeMismatch
from dsvb.layers import zero_parameters
from dsvb.loss import selbo_loss
from dsvb.vrnn import (FilterState, GaussianParams, VRNNDims, VRNNModel, filter_sequence,
                       gaussian_kld, gaussian_nll, reparameterize)

SMALL = VRNNDims(n_y=2, n_x=3, hidden_size=4, prior_hidden=(5,), encoder_hidden=(5, 4),
                 decoder_hidden=(5, 3), x_feature_hidden=(4,), y_feature_hidden=(3,))
LN2 = math.log(2.0)


def gauss(mu, sd):
    return GaussianParams(Tensor(np.asarray(mu, float)), Tensor(np.asarray(sd, float)))


@pytest.fixture(scope="module")
def full():
    return VRNNModel(VRNNDims(n_y=2, n_x=22), seed=0)


def random_state(model, rng, rows=None):
    shape = (model.dims.hidden_size,) if rows is None else (rows, model.dims.hidden_size)
    return FilterState(Tensor(np.tanh(rng.standard_normal(shape))))


def test_default_architecture(full):
    names = full.named_parameters()
    assert names["prior.l0.w"].shape == (128, 128)
    assert names["prior.l1.w"].shape == (128, 44)
    assert names["encoder.l0.w"].shape == (22 + 128, 128)
    assert names["encoder.l1.w"].shape == (128, 128)
    assert names["decoder.l1.w"].shape == (128, 64)
    assert names["decoder.l2.w"].shape == (64, 4)
    assert names["phi_x.l0.w"].shape == (22, 32)
    assert names["phi_y.l0.w"].shape == (2, 22)
    assert names["rnn.w_x"].shape == (54, 3 * 128)


@pytest.mark.parametrize("head", ["prior", "encode", "decode"])
def test_zero_weight_heads(head):
    m = VRNNModel(VRNNDims(n_y=2, n_x=22), seed=0)
    zero_parameters(m)
    fs = m.initial_state()
    out = {"prior": lambda: m.prior(fs),
           "encode": lambda: m.encode(Tensor(np.ones(2)), fs),
           "decode": lambda: m.decode(Tensor(np.ones(22)), fs)}[head]()
    n = 2 if head == "decode" else 22
    assert out.shape == (n,)
    np.testing.assert_array_equal(out.mean.values, np.zeros(n))
    np.testing.assert_allclose(out.std.values, LN2, atol=1e-15)
    assert round(out.std.values[0], 4) == 0.6931


def test_output_dims(full):
    rng = np.random.default_rng(0)
    fs = random_state(full, rng, rows=5)
    assert full.prior(fs).shape == (5, 22)
    assert full.encode(Tensor(np.zeros((5, 2))), fs).shape == (5, 22)
    assert full.decode(Tensor(np.zeros((5, 22))), fs).shape == (5, 2)
    assert np.all(full.prior(fs).std.values > 0)


def _head_out(g):
    return dc.tsum(g.mean * Tensor(np.linspace(-1, 1, g.shape[-1]))) + dc.tsum(dc.log(g.std))


def test_prior_gradient_wrt_hidden(full):
    h0 = np.tanh(np.random.default_rng(1).standard_normal(128))
    assert grad_check(lambda h: _head_out(full.prior(FilterState(h))), Tensor(h0), 1e-4) < 1e-5


def test_decode_gradient_wrt_latent(full):
    rng = np.random.default_rng(2)
    fs = random_state(full, rng)
    assert grad_check(lambda x: _head_out(full.decode(x, fs)), Tensor(rng.standard_normal(22)), 1e-4) < 1e-5


def test_encode_sensitive_to_measurement(full):
    rng = np.random.default_rng(3)
    fs = random_state(full, rng)
    a = full.encode(Tensor([0.1, 0.2]), fs)
    b = full.encode(Tensor([0.1 + 1e-3, 0.2]), fs)
    assert np.max(np.abs(a.mean.values - b.mean.values)) > 0
    assert np.max(np.abs(a.std.values - b.std.values)) > 0


def test_recur_zero_fixed_point_and_counter():
    m = VRNNModel(VRNNDims(n_y=2, n_x=22), seed=0)
    zero_parameters(m)
    fs = m.initial_state()
    nxt = m.recur(Tensor(np.ones(2)), Tensor(np.ones(22)), fs)
    np.testing.assert_array_equal(nxt.hidden.values, np.zeros(128))
    assert nxt.step_index == fs.step_index + 1


def test_recur_matches_manual_composition(full):
    rng = np.random.default_rng(4)
    y, x = rng.standard_normal(2), rng.standard_normal(22)
    fs = random_state(full, rng)
    got = full.recur(Tensor(y), Tensor(x), fs).hidden.values

    P = {k: v.values for k, v in full.named_parameters().items()}
    fy = np.tanh(y @ P["phi_y.l0.w"] + P["phi_y.l0.b"]) @ P["phi_y.l1.w"] + P["phi_y.l1.b"]
    fx = np.tanh(x @ P["phi_x.l0.w"] + P["phi_x.l0.b"]) @ P["phi_x.l1.w"] + P["phi_x.l1.b"]
    inp, h, H = np.concatenate([fy, fx]), fs.hidden.values, 128
    gx = inp @ P["rnn.w_x"] + P["rnn.b"]
    rz = 1 / (1 + np.exp(-(gx[:2 * H] + h @ P["rnn.w_hrz"])))
    r, z = rz[:H], rz[H:]
    n = np.tanh(gx[2 * H:] + (r * h) @ P["rnn.w_hn"])
    np.testing.assert_allclose(got, (1 - z) * n + z * h, rtol=0, atol=1e-12)


def test_lstm_model_runs():
    m = VRNNModel(VRNNDims(n_y=2, n_x=3, hidden_size=6, cell_type="lstm"), seed=0)
    ro = filter_sequence(m, np.zeros((4, 2)), noise=0)
    assert ro.steps == 4 and isinstance(ro.states[-1].cell_state, tuple)


# reparameterization -------------------------------------------------------------

def test_reparameterize_basic_cases():
    g = gauss([1.0, -2.0], [0.5, 3.0])
    np.testing.assert_array_equal(reparameterize(g, np.zeros(2)).values, [1.0, -2.0])
    e = np.array([0.3, -1.7])
    np.testing.assert_array_equal(reparameterize(gauss([0, 0], [1, 1]), e).values, e)
    with pytest.raises(ShapeMismatch):
        reparameterize(g, np.zeros(3))


def test_reparameterize_gradient_reaches_mean_and_std_only():
    mu = Tensor([1.0], requires_grad=True)
    sd = Tensor([2.0], requires_grad=True)
    eps = Tensor([0.5], requires_grad=True)
    dc.tsum(reparameterize(GaussianParams(mu, sd), eps)).backward()
    assert mu.grad[0] == 1.0 and sd.grad[0] == 0.5
    assert eps.grad is None


def test_reparameterize_moments_monte_carlo():
    rng = np.random.default_rng(5)
    mu, sd = np.array([1.5, -0.7]), np.array([0.4, 2.2])
    eps = rng.standard_normal((100_000, 2))
    g = GaussianParams(Tensor(np.broadcast_to(mu, eps.shape).copy()), Tensor(np.broadcast_to(sd, eps.shape).copy()))
    x = reparameterize(g, eps).values
    np.testing.assert_allclose(x.mean(axis=0), mu, rtol=0.02)
    np.testing.assert_allclose(x.var(axis=0), sd ** 2, rtol=0.02)


def test_reparameterize_moment_error_shrinks_with_samples():
    rng = np.random.default_rng(6)
    errs = []
    for n in (100, 10_000, 1_000_000):
        x = reparameterize(gauss(np.full(n, 2.0), np.full(n, 0.5)), rng.standard_normal(n)).values
        m, s = x.mean(), x.std()
        # KL between the moment-matched fit and the target
        errs.append(math.log(0.5 / s) + (s ** 2 + (m - 2.0) ** 2) / (2 * 0.25) - 0.5)
    assert errs[2] < errs[0] and errs[2] < 1e-4


# analytic KL and NLL -------------------------------------------------------------

def test_kld_closed_forms():
    assert gaussian_kld(gauss([0.3], [1.2]), gauss([0.3], [1.2])).item() == 0.0
    assert gaussian_kld(gauss([1.0], [1.0]), gauss([0.0], [1.0])).item() == pytest.approx(0.5, abs=1e-15)
    want = math.log(1 / 2) + 2 - 0.5
    assert gaussian_kld(gauss([0.0], [2.0]), gauss([0.0], [1.0])).item() == pytest.approx(want, abs=1e-14)
    assert round(want, 5) == 0.80685


def test_kld_rejects_nonpositive_std():
    with pytest.raises(DomainError):
        gaussian_kld(gauss([0.0], [0.0]), gauss([0.0], [1.0]))
    with pytest.raises(DomainError):
        gaussian_nll(Tensor([0.0]), gauss([0.0], [-1.0]))


def test_kld_nonnegative_random_draws():
    rng = np.random.default_rng(7)
    mq, mp = rng.normal(0, 3, (10_000, 4)), rng.normal(0, 3, (10_000, 4))
    sq, sp = np.exp(rng.uniform(-3, 3, (10_000, 4))), np.exp(rng.uniform(-3, 3, (10_000, 4)))
    for i in range(10_000):
        assert gaussian_kld(gauss(mq[i], sq[i]), gauss(mp[i], sp[i])).item() >= 0
    for i in range(100):
        assert abs(gaussian_kld(gauss(mq[i], sq[i]), gauss(mq[i], sq[i])).item()) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(0.01, 50), st.floats(-50, 50), st.floats(0.01, 50)),
                min_size=1, max_size=6))
def test_kld_nonnegative_property(rows):
    a = np.array(rows)
    assert gaussian_kld(gauss(a[:, 0], a[:, 1]), gauss(a[:, 2], a[:, 3])).item() >= -1e-12


def _log_pdf(x, m, s):
    return -0.5 * np.log(2 * np.pi * s ** 2) - 0.5 * ((x - m) / s) ** 2


def test_kld_matches_monte_carlo_on_random_pairs():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        mq, mp = rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 2)
        sq, sp = np.exp(rng.uniform(-0.7, 0.7, 2)), np.exp(rng.uniform(-0.7, 0.7, 2))
        x = mq + sq * rng.standard_normal((1_000_000, 2))
        mc = np.mean(np.sum(_log_pdf(x, mq, sq) - _log_pdf(x, mp, sp), axis=1))
        exact = gaussian_kld(gauss(mq, sq), gauss(mp, sp)).item()
        worst = max(worst, abs(mc - exact) / exact)
    assert worst < 0.01


def test_nll_closed_forms():
    base = gaussian_nll(Tensor([0.4]), gauss([0.4], [1.0])).item()
    assert base == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)
    assert round(base, 6) == 0.918939
    shifted = gaussian_nll(Tensor([0.4 + 1.5]), gauss([0.4], [1.5])).item()
    scaled_base = gaussian_nll(Tensor([0.4]), gauss([0.4], [1.5])).item()
    assert shifted - scaled_base == pytest.approx(0.5, abs=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.05, 10))
def test_nll_symmetry(y, mu, sd):
    a = gaussian_nll(Tensor([y]), gauss([mu], [sd])).item()
    b = gaussian_nll(Tensor([-y]), gauss([-mu], [sd])).item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_nll_minimized_at_mean():
    g = gauss([0.7, -1.0], [0.3, 2.0])
    best = gaussian_nll(Tensor([0.7, -1.0]), g).item()
    for d in (-0.1, 0.05, 0.2):
        assert gaussian_nll(Tensor([0.7 + d, -1.0 - d]), g).item() > best


def test_nll_weight_masks_elements():
    g = gauss([0.0, 0.0], [1.0, 1.0])
    masked = gaussian_nll(Tensor([0.0, 9.0]), g, weight=np.array([1.0, 0.0])).item()
    assert masked == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)


# filtering -------------------------------------------------------------------

def test_single_step_sequence_has_no_recurrence():
    m = VRNNModel(SMALL, seed=1)
    ro = filter_sequence(m, np.ones((1, 2)), noise=0)
    assert ro.steps == 1
    assert ro.states[0].step_index == 0
    np.testing.assert_array_equal(ro.states[0].hidden.values, np.zeros((1, 4)))


def test_zero_noise_rollout_bit_exact():
    y = np.random.default_rng(9).standard_normal((12, 2))
    a = filter_sequence(VRNNModel(SMALL, seed=3), y, noise=0)
    b = filter_sequence(VRNNModel(SMALL, seed=3), y, noise=0)
    assert np.array_equal(a.particle_array(), b.particle_array())
    assert np.array_equal(a.decoded[-1].mean.values, b.decoded[-1].mean.values)


def test_seeded_noise_reproducible():
    y = np.random.default_rng(9).standard_normal((3, 8, 2))
    m = VRNNModel(SMALL, seed=3)
    a = filter_sequence(m, y, n_particles=2, rng=np.random.default_rng(1))
    b = filter_sequence(m, y, n_particles=2, rng=np.random.default_rng(1))
    assert np.array_equal(a.particle_array(), b.particle_array())
    assert a.particle_array().shape == (6, 8, 3)
    assert a.posterior_means().shape == (3, 8, 3)


def test_particles_follow_recursion():
    m = VRNNModel(SMALL, seed=2)
    y = np.random.default_rng(0).standard_normal((5, 2))
    eps = np.random.default_rng(1).standard_normal((5, 1, 3))
    ro = filter_sequence(m, y, noise=eps)
    fs = m.initial_state(1)
    for n in range(5):
        if n:
            fs = m.recur(Tensor(y[None, n - 1]), Tensor(ro.particles[n - 1].values), fs)
        post = m.encode(Tensor(y[None, n]), fs)
        np.testing.assert_allclose(ro.particles[n].values, post.mean.values + eps[n] * post.std.values, atol=1e-14)


def test_analytic_kld_matches_monte_carlo_single_step():
    m = VRNNModel(VRNNDims(n_y=2, n_x=22), seed=0)
    rng = np.random.default_rng(10)
    fs = random_state(m, rng)
    q = m.encode(Tensor([0.3, -0.2]), fs)
    p = m.prior(fs)
    mq, sq, mp, sp = q.mean.values, q.std.values, p.mean.values, p.std.values
    x = mq + sq * rng.standard_normal((100_000, 22))
    mc = np.mean(np.sum(_log_pdf(x, mq, sq) - _log_pdf(x, mp, sp), axis=1))
    assert abs(mc - gaussian_kld(q, p).item()) / gaussian_kld(q, p).item() < 0.01


def test_end_to_end_gradient_every_parameter():
    m = VRNNModel(SMALL, seed=4)
    rng = np.random.default_rng(11)
    y = rng.standard_normal((2, 2))
    eps = rng.standard_normal((2, 1, 3))

    def loss():
        recon, kld = selbo_loss(filter_sequence(m, y, noise=eps))
        return recon + kld

    m.zero_grad()
    loss().backward()
    worst = 0.0
    for name, p in m.named_parameters().items():
        assert p.grad is not None, name
        base = p.values.copy()
        for i in range(base.size):
            up, down = base.copy(), base.copy()
            up.flat[i] += 1e-5
            down.flat[i] -= 1e-5
            p.values = up
            fu = loss().item()
            p.values = down
            fd = (fu - loss().item()) / 2e-5
            p.values = base
            a = p.grad.flat[i]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    assert worst < 1e-4


def test_filter_errors():
    m = VRNNModel(SMALL, seed=0)
    with pytest.raises(ShapeMismatch):
        filter_sequence(m, np.zeros((4, 3)))
    with pytest.raises(ShapeMismatch):
        filter_sequence(m, np.zeros((4, 2)), noise=np.zeros((4, 1, 2)))
    with pytest.raises(ValueError):
        filter_sequence(m, np.zeros((4, 2)), n_particles=0)
    with pytest.raises(ShapeMismatch):
        m.decode(Tensor(np.zeros(2)), m.initial_state())


def test_dims_round_trip():
    assert VRNNDims.from_dict(SMALL.to_dict()) == SMALL
