"""Objective terms: sequential ELBO, semi-supervised state term, domain BCE.

Sign convention: every term here is a quantity to *minimise*.  The ELBO is
handled as reconstruction NLL plus KL divergence; the generator objective is

    recon + kld_weight * kld + ss_weight * ss - lam * bce

and the discriminator objective is ``bce`` alone.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DomainError, NumericalDivergence, ShapeMismatch
from .vrnn import gaussian_kld, gaussian_nll

BCE_CLAMP = 1e-7


def _finite(t, what):
    if not np.all(np.isfinite(t.values)):
        raise NumericalDivergence(f"{what} is not finite")
    return t


def selbo_loss(rollout, y_seq=None):
    """Return ``(reconstruction_nll, kld)`` as scalar tensors.

    Both are summed over steps and averaged over rows (sequences x particles).
    """
    if y_seq is not None:
        y = np.asarray(y_seq.values if isinstance(y_seq, Tensor) else y_seq, dtype=np.float64)
        y = y[None] if y.ndim == 2 else y
        expected = np.repeat(y, rollout.n_particles, axis=0).transpose(1, 0, 2)
        if expected.shape != rollout.y_rows.shape or not np.array_equal(expected, rollout.y_rows):
            raise ShapeMismatch("y_seq does not match the sequence the rollout was produced on")
    rows = rollout.rows
    recon, kld = 0.0, 0.0
    for n in range(rollout.steps):
        recon = recon + gaussian_nll(Tensor(rollout.y_rows[n]), rollout.decoded[n])
        kld = kld + gaussian_kld(rollout.posteriors[n], rollout.priors[n])
    recon = _finite(dc.as_tensor(recon) * (1.0 / rows), "reconstruction NLL")
    kld = _finite(dc.as_tensor(kld) * (1.0 / rows), "KL divergence")
    return recon, kld


def _rows_per_step(arr, rollout, trailing):
    """Broadcast per-sequence arrays ``(B, T, ...)`` or ``(T, ...)`` to ``(T, rows, ...)``."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1 + trailing:
        a = a[None]
    if a.shape[0] != rollout.batch or a.shape[1] != rollout.steps:
        raise ShapeMismatch(f"array of shape {a.shape} does not align with {rollout.batch} sequences x {rollout.steps} steps")
    a = np.repeat(a, rollout.n_particles, axis=0)
    return np.moveaxis(a, 1, 0)


def ss_loss(rollout, x_star_seq, availability_mask, dim_mask=None):
    """Supervised prior NLL summed over labelled steps, averaged over rows.

    ``availability_mask`` flags labelled steps, shape ``(T,)`` or ``(B, T)``.
    ``dim_mask`` optionally excludes state channels from supervision.
    Unlabelled entries of ``x_star_seq`` may hold NaN.  Returns exactly 0 when
    no step is labelled.
    """
    if x_star_seq is None or availability_mask is None:
        return Tensor(0.0)
    mask = _rows_per_step(np.asarray(availability_mask, dtype=np.float64), rollout, 0)
    if not np.any(mask):
        return Tensor(0.0)
    x_star = _rows_per_step(x_star_seq, rollout, 1)
    if x_star.shape[-1] != rollout.priors[0].shape[-1]:
        raise ShapeMismatch(f"state labels have {x_star.shape[-1]} dims, latent has {rollout.priors[0].shape[-1]}")
    dims = np.ones(x_star.shape[-1]) if dim_mask is None else np.asarray(dim_mask, dtype=np.float64)
    total = 0.0
    for n in range(rollout.steps):
        m = mask[n]
        if not np.any(m):
            continue
        target = np.where(m[:, None] > 0, x_star[n], 0.0)
        if not np.all(np.isfinite(target)):
            raise ShapeMismatch(f"state label missing at a step marked available (step {n})")
        weight = m[:, None] * dims[None, :]
        total = total + gaussian_nll(Tensor(target), rollout.priors[n], weight=weight)
    return _finite(dc.as_tensor(total) * (1.0 / rollout.rows), "supervised state NLL")


def bce_loss(disc_outputs, domain_labels):
    """Mean binary cross entropy of probabilities against 0/1 labels."""
    p = dc.as_tensor(disc_outputs)
    a = np.asarray(domain_labels, dtype=np.float64)
    if a.shape != p.shape:
        a = np.broadcast_to(a, p.shape)
    if np.any(np.isnan(p.values)) or np.any(p.values < 0) or np.any(p.values > 1):
        raise DomainError("discriminator outputs must lie in (0, 1)")
    pc = dc.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    per = -(Tensor(a) * dc.log(pc) + Tensor(1.0 - a) * dc.log(1.0 - pc))
    return dc.mean(per)


@dataclass
class LossBreakdown:
    reconstruction_nll: float
    kld: float
    supervised_state_nll: float
    adversarial_bce: float
    total: float
    discriminator_total: float
    steps: int = 0
    particles: int = 0
    kld_weight: float = 1.0
    ss_weight: float = 1.0
    lam: float = 1.0
    objective: object = field(default=None, repr=False, compare=False)
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("objective", "extras")}
        d.update(self.extras)
        return d


def _val(x):
    return x.item() if isinstance(x, Tensor) else float(x)


def dsvb_total(recon, kld, ss, bce, kld_weight=1.0, ss_weight=1.0, lam=1.0, steps=0, particles=0):
    """Assemble the generator and discriminator objectives.

    Accepts floats or tensors.  With tensors, ``breakdown.objective`` is the
    differentiable generator objective; with ``lam == 0`` the BCE term is left
    out of the graph entirely.
    """
    objective = recon + kld_weight * kld + ss_weight * ss
    if lam != 0:
        objective = objective - lam * bce
    return LossBreakdown(
        reconstruction_nll=_val(recon),
        kld=_val(kld),
        supervised_state_nll=_val(ss),
        adversarial_bce=_val(bce),
        total=_val(objective),
        discriminator_total=_val(bce),
        steps=steps,
        particles=particles,
        kld_weight=kld_weight,
        ss_weight=ss_weight,
        lam=lam,
        objective=objective if isinstance(objective, Tensor) else None,
    )
