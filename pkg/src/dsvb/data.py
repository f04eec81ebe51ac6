"""Datasets: CSV ingestion, normalisation, windowing and a synthetic finger.

CSV schema (header is exact)::

    t,pressure,flex,m1x,m1z,...,m10x,m10z,fx,fz

State columns (markers and forces) are optional as a block.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, ParseError, SchemaError, TooShort, UnstableConfig

N_MARKERS = 10
MEASUREMENT_COLUMNS = ["pressure", "flex"]
STATE_COLUMNS = [f"m{i}{ax}" for i in range(1, N_MARKERS + 1) for ax in ("x", "z")] + ["fx", "fz"]
FULL_HEADER = ["t", *MEASUREMENT_COLUMNS, *STATE_COLUMNS]
MEASUREMENT_HEADER = ["t", *MEASUREMENT_COLUMNS]
N_Y = len(MEASUREMENT_COLUMNS)
N_X = len(STATE_COLUMNS)
STD_FLOOR = 1e-8


@dataclass
class SequenceDataset:
    measurements: np.ndarray  # (T, n_y)
    states: np.ndarray = None  # (T, n_x) or None when unlabelled
    domain_tag: str = "source"
    sample_rate_hz: float = 10.0
    t: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.measurements = np.asarray(self.measurements, dtype=np.float64)
        if self.measurements.ndim != 2:
            raise ValueError("measurements must be 2-D (T, n_y)")
        if self.states is not None:
            self.states = np.asarray(self.states, dtype=np.float64)
            if self.states.shape[0] != self.measurements.shape[0]:
                raise ValueError("states and measurements must have the same number of rows")
        if self.t is None:
            self.t = np.arange(len(self)) / self.sample_rate_hz
        if np.isnan(self.measurements).any() or (self.states is not None and np.isnan(self.states).any()):
            raise ValueError("dataset contains NaN")

    def __len__(self):
        return self.measurements.shape[0]

    @property
    def labelled(self):
        return self.states is not None

    @property
    def n_y(self):
        return self.measurements.shape[1]

    @property
    def n_x(self):
        return None if self.states is None else self.states.shape[1]

    def without_labels(self):
        return replace(self, states=None, meta=dict(self.meta))

    def split(self, n):
        """Split rows ``[:n]`` and ``[n:]``."""
        a = replace(self, measurements=self.measurements[:n], t=self.t[:n],
                    states=None if self.states is None else self.states[:n], meta=dict(self.meta))
        b = replace(self, measurements=self.measurements[n:], t=self.t[n:],
                    states=None if self.states is None else self.states[n:], meta=dict(self.meta))
        return a, b


# CSV -------------------------------------------------------------------------

def write_csv(path, ds):
    header = FULL_HEADER if ds.labelled else MEASUREMENT_HEADER
    cols = [ds.t[:, None], ds.measurements]
    if ds.labelled:
        cols.append(ds.states)
    data = np.hstack(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(v)) for v in row])


def load_csv(path, domain_tag="source", require_states=False, sample_rate_hz=10.0):
    """Parse a schema CSV.  Raises ``SchemaError`` / ``ParseError``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header == FULL_HEADER:
            labelled = True
        elif header == MEASUREMENT_HEADER:
            labelled = False
        else:
            missing = [c for c in FULL_HEADER if c not in header]
            extra = [c for c in header if c not in FULL_HEADER]
            raise SchemaError(f"{path}: header mismatch (missing={missing}, unexpected={extra})")
        if require_states and not labelled:
            raise SchemaError(f"{path}: state columns required but absent")
        rows = []
        for i, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}: row {i} (line {i + 1}) has {len(rec)} fields, expected {len(header)}", row=i)
            try:
                vals = [float(v) for v in rec]
            except ValueError:
                raise ParseError(f"{path}: row {i} (line {i + 1}) contains a non-numeric cell", row=i) from None
            if not all(np.isfinite(vals)):
                raise ParseError(f"{path}: row {i} (line {i + 1}) contains NaN or Inf", row=i)
            rows.append(vals)
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")
    arr = np.asarray(rows)
    return SequenceDataset(
        measurements=arr[:, 1:1 + N_Y],
        states=arr[:, 1 + N_Y:] if labelled else None,
        domain_tag=domain_tag,
        sample_rate_hz=sample_rate_hz,
        t=arr[:, 0],
        meta={"path": str(path), "rows": len(rows), "labelled": labelled},
    )


# normalisation ---------------------------------------------------------------

@dataclass
class NormalizationStats:
    y_mean: np.ndarray
    y_std: np.ndarray
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    y_degenerate: np.ndarray = None
    x_degenerate: np.ndarray = None

    @property
    def active_states(self):
        """Mask of state channels with non-degenerate spread."""
        return None if self.x_degenerate is None else ~self.x_degenerate

    def to_dict(self):
        return {k: (None if v is None else np.asarray(v).tolist()) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        def arr(k, dtype=np.float64):
            return None if d.get(k) is None else np.asarray(d[k], dtype=dtype)
        return cls(arr("y_mean"), arr("y_std"), arr("x_mean"), arr("x_std"),
                   arr("y_degenerate", bool), arr("x_degenerate", bool))


def _moments(a):
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    degenerate = std < STD_FLOOR
    return mean, np.maximum(std, STD_FLOOR), degenerate


def fit_normalizer(ds):
    """Per-channel mean/std; fit on the labelled source training split only."""
    if len(ds) == 0:
        raise EmptyDataset("cannot fit a normaliser on an empty dataset")
    y_mean, y_std, y_deg = _moments(ds.measurements)
    if ds.labelled:
        x_mean, x_std, x_deg = _moments(ds.states)
    else:
        x_mean = x_std = x_deg = None
    return NormalizationStats(y_mean, y_std, x_mean, x_std, y_deg, x_deg)


def normalize_states(stats, x):
    return (x - stats.x_mean) / stats.x_std


def denormalize_states(stats, x):
    return x * stats.x_std + stats.x_mean


def apply_normalizer(stats, ds):
    states = None
    if ds.labelled:
        if stats.x_mean is None:
            raise ValueError("normaliser has no state statistics")
        states = normalize_states(stats, ds.states)
    return replace(ds, measurements=(ds.measurements - stats.y_mean) / stats.y_std, states=states,
                   meta={**ds.meta, "normalized": True})


def invert_normalizer(stats, ds):
    states = None if not ds.labelled else denormalize_states(stats, ds.states)
    meta = dict(ds.meta)
    meta.pop("normalized", None)
    return replace(ds, measurements=ds.measurements * stats.y_std + stats.y_mean, states=states, meta=meta)


# windowing -------------------------------------------------------------------

@dataclass
class SequenceBatch:
    measurements: np.ndarray  # (L, n_y)
    states: np.ndarray  # (L, n_x) or None
    domain_tag: str
    start: int


def window(ds, seq_len, stride):
    if seq_len < 1 or stride < 1:
        raise ValueError("seq_len and stride must be positive")
    T = len(ds)
    if T < seq_len:
        raise TooShort(f"sequence of length {T} is shorter than window {seq_len}")
    out = []
    for s in range(0, T - seq_len + 1, stride):
        out.append(SequenceBatch(
            ds.measurements[s:s + seq_len],
            None if ds.states is None else ds.states[s:s + seq_len],
            ds.domain_tag, s,
        ))
    return out


def stack_windows(windows):
    """Stack into ``(y, x)`` arrays of shape ``(B, L, .)``; ``x`` is None if unlabelled."""
    y = np.stack([w.measurements for w in windows])
    x = None if windows[0].states is None else np.stack([w.states for w in windows])
    return y, x


# synthetic finger ------------------------------------------------------------

@dataclass
class SynthConfig:
    """Planar serial chain of torsional spring-damper joints with a compliant bulb.

    Lengths are in millimetres, forces in newtons, pressure in kPa.  The finger
    hangs along -z from the origin and curls toward +x as pressure rises.
    """

    n_links: int = 5
    link_length: float = 20.0
    inertia: float = 1.0e-3
    stiffness: float = 0.1
    damping: float = 0.012
    gain: float = 4.0e-4
    mode: str = "tip"
    bulb_radius: float = 15.0
    contact_curl: float = 0.6
    contact_stiffness: float = 0.5
    surface_range: tuple = (0.3, 0.8)
    surface_drift_s: float = 6.0
    actuation: str = "oscillatory"
    max_pressure: float = 100.0
    osc_period_s: float = 16.0
    rand_hold_s: tuple = (0.4, 2.0)
    noise_std: float = 0.005
    seed: int = 0
    T: int = 5000
    sample_rate_hz: float = 10.0
    substeps: int = 40

    @property
    def dt(self):
        return 1.0 / (self.sample_rate_hz * self.substeps)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("surface_range", "rand_hold_s"):
            if k in d and d[k] is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def check_stability(cfg):
    """Semi-implicit Euler on a damped oscillator needs ``dt*c/I < 1`` and
    ``dt*omega < 1`` with omega including the contact spring acting at the tip."""
    if cfg.mode not in ("tip", "surface"):
        raise UnstableConfig(f"unknown contact mode {cfg.mode!r}")
    if cfg.actuation not in ("oscillatory", "random"):
        raise UnstableConfig(f"unknown actuation pattern {cfg.actuation!r}")
    if min(cfg.inertia, cfg.stiffness, cfg.substeps, cfg.link_length, cfg.sample_rate_hz) <= 0 or cfg.damping < 0:
        raise UnstableConfig("physical parameters must be positive")
    reach = cfg.n_links * cfg.link_length
    k_eff = cfg.stiffness + 1e-3 * cfg.contact_stiffness * reach ** 2
    dt = cfg.dt
    if dt * cfg.damping / cfg.inertia >= 1.0 or dt * np.sqrt(k_eff / cfg.inertia) >= 1.0:
        raise UnstableConfig(
            f"time step {dt:.4g}s too large for damping {cfg.damping} / stiffness {k_eff:.4g}; raise substeps")


def pressure_profile(cfg, rng, n):
    """Sampled pressure sequence of length ``n`` at the output rate."""
    fs = cfg.sample_rate_hz
    p = np.empty(n)
    if cfg.actuation == "oscillatory":
        per = max(int(round(cfg.osc_period_s * fs)), 2)
        i = 0
        while i < n:
            amp = rng.uniform(0.3, 1.0) * cfg.max_pressure
            k = np.arange(per)
            cyc = 0.5 * amp * (1.0 - np.cos(2 * np.pi * k / per))
            p[i:i + per] = cyc[: n - i]
            i += per
    else:
        lo, hi = cfg.rand_hold_s
        i = 0
        level = 0.0
        raw = np.empty(n)
        while i < n:
            hold = max(int(round(rng.uniform(lo, hi) * fs)), 1)
            level = rng.uniform(0.0, cfg.max_pressure)
            raw[i:i + hold] = level
            i += hold
        # first-order low-pass to band-limit the steps
        alpha = 0.5
        acc = raw[0]
        for j in range(n):
            acc += alpha * (raw[j] - acc)
            p[j] = acc
    return p


@dataclass
class SimTrace:
    pressure: np.ndarray  # (T,)
    angles: np.ndarray  # (T, n_links)
    points: np.ndarray  # (T, n_links + 1, 2) base then link endpoints (x, z)
    force_on_bulb: np.ndarray  # (T, 2)
    gap: np.ndarray  # (T,) signed distance chain-to-bulb surface at the contact candidate
    normal: np.ndarray  # (T, 2) unit normal from bulb centre to contact candidate
    bulb_center: np.ndarray  # (T, 2)
    flex: np.ndarray  # (T,)


def _chain_points(q, length):
    """Base and link endpoints as a list of ``(x, z)``; plain floats for speed."""
    pts = [(0.0, 0.0)]
    theta = x = z = 0.0
    for qi in q:
        theta += qi
        x += length * math.sin(theta)
        z -= length * math.cos(theta)
        pts.append((x, z))
    return pts


def _closest_on_chain(points, cx, cz):
    """Closest point on the polyline to ``(cx, cz)``: (x, z, segment index, distance)."""
    best = None
    for k in range(len(points) - 1):
        ax, az = points[k]
        bx, bz = points[k + 1]
        ux, uz = bx - ax, bz - az
        t = ((cx - ax) * ux + (cz - az) * uz) / (ux * ux + uz * uz)
        t = min(max(t, 0.0), 1.0)
        px, pz = ax + t * ux, az + t * uz
        d = math.hypot(px - cx, pz - cz)
        if best is None or d < best[3]:
            best = (px, pz, k, d)
    return best


def _contact(points, cx, cz, cfg):
    """Penalty contact with the bulb.

    Returns ``(fx, fz, px, pz, seg, gap, nx, nz)``: the force on the finger,
    its application point, the index of the most distal joint it loads, the
    signed gap and the unit normal pointing from the bulb centre outwards.
    """
    if cfg.mode == "tip":
        px, pz = points[-1]
        seg = len(points) - 2
        dist = math.hypot(px - cx, pz - cz)
    else:
        px, pz, seg, dist = _closest_on_chain(points, cx, cz)
    inv = 1.0 / max(dist, 1e-12)
    nx, nz = (px - cx) * inv, (pz - cz) * inv
    gap = dist - cfg.bulb_radius
    if gap >= 0:
        return 0.0, 0.0, px, pz, seg, gap, nx, nz
    mag = cfg.contact_stiffness * (-gap)
    return mag * nx, mag * nz, px, pz, seg, gap, nx, nz


def _surface_track(cfg, rng, T):
    """Bounded Ornstein-Uhlenbeck drift of the contact height along the finger."""
    lo, hi = cfg.surface_range
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    tau = cfg.surface_drift_s * cfg.sample_rate_hz
    kick = np.sqrt(2.0 / tau) * 0.6 * rng.standard_normal(T)
    u = np.empty(T)
    s = rng.uniform(-1, 1)
    for j in range(T):
        s = min(max(s - s / tau + kick[j], -1.0), 1.0)
        u[j] = s
    return mid + half * u


def _point_at(q, length, arc):
    """Point a fraction ``arc`` of the way along the chain."""
    pts = _chain_points(q, length)
    u = arc * len(q)
    k = min(int(u), len(q) - 1)
    f = u - k
    (ax, az), (bx, bz) = pts[k], pts[k + 1]
    return np.array([ax + f * (bx - ax), az + f * (bz - az)])


def _bulb_center(cfg, arc):
    """Bulb placed so the free-curling finger first touches it at total curl
    ``contact_curl``, at the point ``arc`` of the way along the chain."""
    n, eps = cfg.n_links, 1e-6
    th = cfg.contact_curl / n
    p = _point_at([th] * n, cfg.link_length, arc)
    ahead = _point_at([th + eps / n] * n, cfg.link_length, arc)
    d = ahead - p
    return p + cfg.bulb_radius * d / np.linalg.norm(d)


def simulate(cfg):
    """Integrate the chain at ``substeps`` per output sample; returns a ``SimTrace``."""
    check_stability(cfg)
    rng = np.random.default_rng(cfg.seed)
    T, n = cfg.T, cfg.n_links
    pressure = pressure_profile(cfg, rng, T)
    if cfg.mode == "tip":
        arc = np.ones(T)
    else:
        arc = _surface_track(cfg, rng, T)
    centers = np.array([_bulb_center(cfg, a) for a in arc])
    bulb_x, bulb_z = centers[:, 0], centers[:, 1]

    q = [0.0] * n
    qd = [0.0] * n
    dt, L = cfg.dt, cfg.link_length
    k, c, inv_i = cfg.stiffness, cfg.damping, 1.0 / cfg.inertia
    angles = np.empty((T, n))
    pts = np.empty((T, n + 1, 2))
    f_bulb = np.empty((T, 2))
    gaps = np.empty(T)
    normals = np.empty((T, 2))
    for j in range(T):
        tau_p = cfg.gain * float(pressure[j])
        cx, cz = float(bulb_x[j]), float(bulb_z[j])
        for _ in range(cfg.substeps):
            points = _chain_points(q, L)
            fx, fz, px, pz, seg, _, _, _ = _contact(points, cx, cz, cfg)
            for i in range(n):
                tau = tau_p - k * q[i] - c * qd[i]
                if i <= seg and (fx != 0.0 or fz != 0.0):
                    ox, oz = points[i]
                    # generalised force of the point load on joint i; mm -> m
                    tau += 1e-3 * (fx * -(pz - oz) + fz * (px - ox))
                qd[i] += dt * tau * inv_i
                q[i] += dt * qd[i]
        points = _chain_points(q, L)
        fx, fz, _, _, _, gap, nx, nz = _contact(points, cx, cz, cfg)
        angles[j] = q
        pts[j] = points
        f_bulb[j] = (-fx, -fz)
        gaps[j] = gap
        normals[j] = (nx, nz)
    flex = angles.sum(axis=1) + cfg.noise_std * rng.standard_normal(T)
    return SimTrace(pressure, angles, pts, f_bulb, gaps, normals, centers, flex)


def trace_to_dataset(trace, cfg, domain_tag="source"):
    T = len(trace.pressure)
    markers = np.zeros((T, N_MARKERS, 2))
    k = min(cfg.n_links, N_MARKERS)
    markers[:, :k] = trace.points[:, 1:k + 1]
    states = np.hstack([markers.reshape(T, -1), trace.force_on_bulb])
    meas = np.stack([trace.pressure, trace.flex], axis=1)
    return SequenceDataset(meas, states, domain_tag, cfg.sample_rate_hz,
                           t=np.arange(T) / cfg.sample_rate_hz, meta={"synth": cfg.to_dict()})


def synth_generate(cfg, domain_tag="source"):
    """Simulate and package as a labelled ``SequenceDataset`` in the CSV schema."""
    return trace_to_dataset(simulate(cfg), cfg, domain_tag)


def write_sidecar(path, cfg, extra=None):
    with open(path, "w") as fh:
        json.dump({"synth_config": cfg.to_dict(), **(extra or {})}, fh, indent=2, sort_keys=True)
