"""How far apart are tip and surface contact?

Simulates both domains of scenario 1 and compares them three ways: how far
target states sit from the source distribution, how well a quadratic
measurement-to-state map fitted on source carries over, and how well the same
map does when fitted on the target itself.  The difference between the last two
is the headroom a transfer method can hope to recover.

    python3 demos/domain_gap.py [contact_curl]
"""

import sys

import numpy as np

from dsvb.data import fit_normalizer
from dsvb.scenarios import build_scenario

overrides = {"contact_curl": float(sys.argv[1])} if len(sys.argv) > 1 else None
sd = build_scenario(1, T=5000, T_test=1000, seed=0, synth_overrides=overrides)
src = sd.source_train
tgt_states = sd.target_train_labels.reveal("gap analysis")
stats = fit_normalizer(src)
keep = stats.active_states
zs = ((src.states - stats.x_mean) / stats.x_std)[:, keep]
zt = ((tgt_states - stats.x_mean) / stats.x_std)[:, keep]


def features(ds):
    y = (ds.measurements - stats.y_mean) / stats.y_std
    return np.hstack([y, y ** 2, y[:, :1] * y[:, 1:], np.ones((len(y), 1))])


def rmse(a, b):
    return float(np.sqrt(np.mean((a - b) ** 2)))


fs, ft = features(src), features(sd.target_train)
w_src, *_ = np.linalg.lstsq(fs, zs, rcond=None)
w_tgt, *_ = np.linalg.lstsq(ft, zt, rcond=None)
print(f"flex range   source {np.ptp(src.measurements[:, 1]):.2f} rad, target {np.ptp(sd.target_train.measurements[:, 1]):.2f} rad")
print(f"source-mean predictor on target      {rmse(zt, 0):.3f}")
print(f"quadratic map, source fit -> target  {rmse(ft @ w_src, zt):.3f}")
print(f"quadratic map, target fit -> target  {rmse(ft @ w_tgt, zt):.3f}")
