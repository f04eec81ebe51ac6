"""Variational RNN with Gaussian prior, posterior and measurement likelihood.

Per step ``n`` the model computes

    h_n          = rnn([phi_y(y_{n-1}), phi_x(x_{n-1})], h_{n-1})     (h_0 = 0)
    prior        = N(mu_x, sigma_x)    from prior_net(h_n)
    posterior    = N(mu_xy, sigma_xy)  from encoder([phi_y(y_n), h_n])
    x_n          = mu_xy + eps * sigma_xy
    likelihood   = N(mu_y, sigma_y)    from decoder([phi_x(x_n), h_n])

All nets are batched over rows; particles are extra rows.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .cells import make_cell
from .diffcore import Tensor
from .errors import DomainError, NumericalDivergence, ShapeMismatch
from .layers import MLP, Initializer, Module

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GaussianParams:
    mean: Tensor
    std: Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ShapeMismatch(f"mean {self.mean.shape} and std {self.std.shape} differ")

    @property
    def shape(self):
        return self.mean.shape

    def rows(self, start, stop):
        return GaussianParams(dc.slice_(self.mean, start, stop, axis=0), dc.slice_(self.std, start, stop, axis=0))


class GaussianHead(Module):
    """MLP whose output splits into a mean and a softplus standard deviation."""

    def __init__(self, n_in, hidden, n_out, init, name):
        super().__init__(name)
        self.n_out = n_out
        self.net = self.add_child("net", MLP(n_in, hidden, 2 * n_out, init, name))

    def __call__(self, x):
        raw = self.net(x)
        d = self.n_out
        return GaussianParams(dc.slice_(raw, 0, d), dc.softplus(dc.slice_(raw, d, 2 * d)))


@dataclass
class FilterState:
    """Recurrent state: ``cell_state`` is ``h`` for a GRU or ``(h, c)`` for an LSTM."""

    cell_state: object
    step_index: int = 0

    @property
    def hidden(self):
        return self.cell_state[0] if isinstance(self.cell_state, tuple) else self.cell_state


@dataclass(frozen=True)
class VRNNDims:
    n_y: int
    n_x: int
    hidden_size: int = 128
    cell_type: str = "gru"
    prior_hidden: tuple = (128,)
    encoder_hidden: tuple = (128, 128)
    decoder_hidden: tuple = (128, 64)
    x_feature_hidden: tuple = (32,)
    y_feature_hidden: tuple = (22,)

    @property
    def x_feature_dim(self):
        return self.x_feature_hidden[-1]

    @property
    def y_feature_dim(self):
        return self.y_feature_hidden[-1]

    def to_dict(self):
        d = dict(self.__dict__)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


class VRNNModel(Module):
    def __init__(self, dims, seed=0):
        super().__init__("vrnn")
        self.dims = dims
        init = Initializer(seed)
        H = dims.hidden_size
        fx, fy = dims.x_feature_dim, dims.y_feature_dim
        self.phi_y = self.add_child("phi_y", MLP(dims.n_y, dims.y_feature_hidden, fy, init, "phi_y"))
        self.phi_x = self.add_child("phi_x", MLP(dims.n_x, dims.x_feature_hidden, fx, init, "phi_x"))
        self.prior_net = self.add_child("prior", GaussianHead(H, dims.prior_hidden, dims.n_x, init, "prior"))
        self.encoder_net = self.add_child("encoder", GaussianHead(fy + H, dims.encoder_hidden, dims.n_x, init, "encoder"))
        self.decoder_net = self.add_child("decoder", GaussianHead(fx + H, dims.decoder_hidden, dims.n_y, init, "decoder"))
        self.rnn = self.add_child("rnn", make_cell(dims.cell_type, fy + fx, H, init, "rnn"))

    @property
    def n_x(self):
        return self.dims.n_x

    @property
    def n_y(self):
        return self.dims.n_y

    def initial_state(self, batch=None):
        return FilterState(self.rnn.initial_state(batch), 0)

    def prior(self, fs):
        return self.prior_net(fs.hidden)

    def encode(self, y, fs):
        y = dc.as_tensor(y)
        _check_last(y, self.n_y, "encode")
        return self.encoder_net(dc.concat([self.phi_y(y), fs.hidden]))

    def decode(self, x, fs):
        x = dc.as_tensor(x)
        _check_last(x, self.n_x, "decode")
        return self.decoder_net(dc.concat([self.phi_x(x), fs.hidden]))

    def recur(self, y_prev, x_prev, fs):
        y_prev, x_prev = dc.as_tensor(y_prev), dc.as_tensor(x_prev)
        _check_last(y_prev, self.n_y, "recur measurement")
        _check_last(x_prev, self.n_x, "recur latent")
        inp = dc.concat([self.phi_y(y_prev), self.phi_x(x_prev)])
        return FilterState(self.rnn(inp, fs.cell_state), fs.step_index + 1)

    def generator_parameters(self):
        return self.parameters()


def _check_last(t, n, what):
    if t.shape[-1] != n:
        raise ShapeMismatch(f"{what}: expected last dimension {n}, got {t.shape}")


def reparameterize(g, noise):
    """Sample ``mean + noise * std``; gradients reach mean and std, never the noise."""
    noise = noise.values if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    if noise.shape != g.shape:
        raise ShapeMismatch(f"noise shape {noise.shape} != distribution shape {g.shape}")
    return g.mean + g.std * Tensor(noise)


def _check_std(*stds):
    for s in stds:
        if np.any(~(s.values > 0)):
            raise DomainError("standard deviation must be strictly positive")


def gaussian_kld(q, p):
    """KL(q || p) for diagonal Gaussians, summed over every element."""
    if q.shape != p.shape:
        raise ShapeMismatch(f"gaussian_kld: {q.shape} vs {p.shape}")
    _check_std(q.std, p.std)
    ratio = dc.square(q.std / p.std)
    mahal = dc.square((q.mean - p.mean) / p.std)
    return 0.5 * dc.tsum(ratio + mahal - dc.log(ratio) - 1.0)


def gaussian_nll(y, g, weight=None):
    """Negative log density of ``y`` under diagonal ``g``, summed over elements.

    ``weight`` (broadcastable 0/1 array) masks individual elements.
    """
    y = dc.as_tensor(y)
    if y.shape != g.shape:
        raise ShapeMismatch(f"gaussian_nll: y {y.shape} vs distribution {g.shape}")
    _check_std(g.std)
    per = dc.log(g.std) + 0.5 * dc.square((y - g.mean) / g.std) + HALF_LOG_2PI
    if weight is not None:
        per = per * Tensor(np.broadcast_to(weight, per.shape))
    return dc.tsum(per)


@dataclass
class Rollout:
    """Everything a filtering pass produces, step-major lists of length ``T``."""

    priors: list
    posteriors: list
    decoded: list
    particles: list
    states: list
    batch: int
    n_particles: int
    y_rows: np.ndarray  # (T, batch * n_particles, n_y) measurements replicated per particle
    extras: dict = field(default_factory=dict)

    @property
    def steps(self):
        return len(self.priors)

    @property
    def rows(self):
        return self.batch * self.n_particles

    def posterior_means(self):
        """Posterior means ``(batch, T, n_x)`` averaged over particles."""
        m = np.stack([g.mean.values for g in self.posteriors], axis=1)
        return m.reshape(self.batch, self.n_particles, *m.shape[1:]).mean(axis=1)

    def posterior_stds(self):
        s = np.stack([g.std.values for g in self.posteriors], axis=1)
        return s.reshape(self.batch, self.n_particles, *s.shape[1:]).mean(axis=1)

    def particle_array(self):
        """Latent particles ``(rows, T, n_x)``."""
        return np.stack([x.values for x in self.particles], axis=1)

    def particle_tensor_sequence(self):
        return self.particles


def _as_batch(y_seq):
    y = np.asarray(y_seq.values if isinstance(y_seq, Tensor) else y_seq, dtype=np.float64)
    if y.ndim == 2:
        return y[None], True
    if y.ndim != 3:
        raise ShapeMismatch(f"expected (T, n_y) or (batch, T, n_y), got {y.shape}")
    return y, False


def filter_sequence(model, y_seq, n_particles=1, rng=None, noise=None, mean_feedback=False):
    """Run the VRNN over measurement sequences.

    ``y_seq`` is ``(T, n_y)`` or ``(batch, T, n_y)``.  Particles for sequence
    ``b`` occupy rows ``b * n_particles ... (b + 1) * n_particles - 1``.

    ``noise`` overrides the standard normal draws; pass an array of shape
    ``(T, rows, n_x)`` or ``0`` for a noise-free rollout.  With
    ``mean_feedback`` the posterior mean replaces the sample everywhere
    (deterministic inference).
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    y, _ = _as_batch(y_seq)
    B, T, n_y = y.shape
    if n_y != model.n_y:
        raise ShapeMismatch(f"measurement dim {n_y} != model n_y {model.n_y}")
    if T < 1:
        raise ShapeMismatch("sequence must contain at least one step")
    rows = B * n_particles
    y_rows = np.repeat(y, n_particles, axis=0).transpose(1, 0, 2)  # (T, rows, n_y)

    if mean_feedback:
        eps = None
    elif noise is None:
        rng = np.random.default_rng() if rng is None else rng
        eps = rng.standard_normal((T, rows, model.n_x))
    elif np.isscalar(noise) and noise == 0:
        eps = np.zeros((T, rows, model.n_x))
    else:
        eps = np.asarray(noise, dtype=np.float64)
        if eps.shape != (T, rows, model.n_x):
            raise ShapeMismatch(f"noise must have shape {(T, rows, model.n_x)}, got {eps.shape}")

    fs = model.initial_state(rows)
    priors, posts, decs, xs, states = [], [], [], [], []
    x_prev = None
    for n in range(T):
        if n > 0:
            fs = model.recur(Tensor(y_rows[n - 1]), x_prev, fs)
        prior = model.prior(fs)
        post = model.encode(Tensor(y_rows[n]), fs)
        x = post.mean if eps is None else reparameterize(post, eps[n])
        dec = model.decode(x, fs)
        if not np.all(np.isfinite(post.mean.values)) or not np.all(np.isfinite(dec.mean.values)):
            raise NumericalDivergence(f"non-finite values at step {n}")
        priors.append(prior)
        posts.append(post)
        decs.append(dec)
        xs.append(x)
        states.append(fs)
        x_prev = x
    return Rollout(priors, posts, decs, xs, states, B, n_particles, y_rows)
