"""Domain discriminator and the alternating adversarial update."""

from contextlib import contextmanager

import numpy as np

from . import diffcore as dc
from .cells import GRUCell
from .diffcore import Tensor
from .errors import NumericalDivergence, ShapeMismatch
from .layers import MLP, Initializer, Module
from .loss import bce_loss, dsvb_total, selbo_loss, ss_loss
from .vrnn import filter_sequence

SOURCE, TARGET = 1.0, 0.0


class Discriminator(Module):
    """GRU over a latent window followed by an MLP head; outputs P(source)."""

    def __init__(self, n_x, hidden_size=128, head_hidden=(128,), seed=0):
        super().__init__("disc")
        init = Initializer(seed)
        self.n_x = n_x
        self.rnn = self.add_child("rnn", GRUCell(n_x, hidden_size, init, "disc.rnn"))
        self.head = self.add_child("head", MLP(hidden_size, head_hidden, 1, init, "disc.head"))

    def logits(self, x_seq):
        steps = _as_steps(x_seq, self.n_x)
        h = self.rnn.initial_state(steps[0].shape[0])
        for x in steps:
            h = self.rnn(x, h)
        return dc.slice_(self.head(h), 0, 1).sum(axis=-1)

    def classify(self, x_seq):
        """Probability per sequence that it comes from the source domain."""
        return dc.sigmoid(self.logits(x_seq))

    __call__ = classify


def _as_steps(x_seq, n_x):
    """Accept ``(T, n_x)``, ``(B, T, n_x)`` arrays or a list of ``(B, n_x)`` tensors."""
    if isinstance(x_seq, (list, tuple)):
        steps = [dc.as_tensor(x) for x in x_seq]
    else:
        a = np.asarray(x_seq.values if isinstance(x_seq, Tensor) else x_seq, dtype=np.float64)
        if a.ndim == 2:
            a = a[None]
        if a.ndim != 3:
            raise ShapeMismatch(f"latent sequence must be (T, n_x) or (B, T, n_x), got {a.shape}")
        steps = [Tensor(a[:, n]) for n in range(a.shape[1])]
    if not steps:
        raise ShapeMismatch("empty latent sequence")
    if steps[0].shape[-1] != n_x:
        raise ShapeMismatch(f"latent dim {steps[0].shape[-1]} != discriminator input {n_x}")
    return steps


@contextmanager
def frozen(module):
    params = module.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def accuracy(probs, labels):
    return float(np.mean((np.asarray(probs) > 0.5) == (np.asarray(labels) > 0.5)))


def adversarial_round(batch_source, batch_target, model, disc, gen_opt, disc_opt, *,
                      lam=1.0, kld_weight=1.0, ss_weight=1.0, n_particles=1, rng=None,
                      state_dim_mask=None):
    """One discriminator step followed by one generator step.

    ``batch_source`` / ``batch_target`` are mappings with ``y`` of shape
    ``(B, T, n_y)``; the source batch also carries ``x`` (labels) and ``mask``.
    Returns a ``LossBreakdown`` with extra audit values in ``extras``.
    """
    rng = np.random.default_rng() if rng is None else rng
    model.zero_grad()
    disc.zero_grad()
    ro_s = filter_sequence(model, batch_source["y"], n_particles, rng)
    ro_t = filter_sequence(model, batch_target["y"], n_particles, rng)
    rows_s, rows_t = ro_s.rows, ro_t.rows
    labels = np.concatenate([np.full(rows_s, SOURCE), np.full(rows_t, TARGET)])

    # discriminator: detached latents, VRNN untouched
    lat = np.concatenate([ro_s.particle_array(), ro_t.particle_array()], axis=0)
    p = disc.classify(lat)
    d_loss = bce_loss(p, labels)
    d_acc = accuracy(p.values, labels)
    d_bce = d_loss.item()
    d_loss.backward()
    disc_opt.step()
    disc.zero_grad()

    # generator: discriminator frozen
    recon_s, kld_s = selbo_loss(ro_s)
    recon_t, kld_t = selbo_loss(ro_t)
    w_s, w_t = rows_s / (rows_s + rows_t), rows_t / (rows_s + rows_t)
    recon = recon_s * w_s + recon_t * w_t
    kld = kld_s * w_s + kld_t * w_t
    ss = ss_loss(ro_s, batch_source.get("x"), batch_source.get("mask"), state_dim_mask)
    ss_target = ss_loss(ro_t, batch_target.get("x"), batch_target.get("mask"), state_dim_mask)
    if lam != 0:
        with frozen(disc):
            steps = [dc.concat([a, b], axis=0) for a, b in zip(ro_s.particles, ro_t.particles)]
            bce = bce_loss(disc.classify(steps), labels)
    else:
        bce = Tensor(d_bce)
    parts = dsvb_total(recon, kld, ss + ss_target, bce, kld_weight=kld_weight, ss_weight=ss_weight,
                       lam=lam, steps=ro_s.steps, particles=n_particles)
    if not np.isfinite(parts.total):
        raise NumericalDivergence("generator objective is not finite")
    parts.objective.backward()
    gen_opt.step()
    model.zero_grad()
    parts.objective = None
    parts.extras = {
        "disc_accuracy": d_acc,
        "disc_bce": d_bce,
        "target_ss": ss_target.item(),
        "source_ss": ss.item(),
    }
    return parts
