"""The four transfer scenarios, on synthetic or CSV data."""

from dataclasses import dataclass, replace

import numpy as np

from .data import SynthConfig, load_csv, synth_generate
from .errors import UnknownScenario


@dataclass(frozen=True)
class DomainSpec:
    mode: str  # "tip" | "surface"
    actuation: str  # "oscillatory" | "random"

    def label(self):
        return f"{self.mode}/{self.actuation}"


@dataclass(frozen=True)
class Scenario:
    id: int
    name: str
    source: DomainSpec
    target: DomainSpec

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError("source and target domains must differ")


TIP_OSC = DomainSpec("tip", "oscillatory")
SURFACE_OSC = DomainSpec("surface", "oscillatory")
TIP_RAND = DomainSpec("tip", "random")

SCENARIOS = {
    1: Scenario(1, "tip contact -> surface contact", TIP_OSC, SURFACE_OSC),
    2: Scenario(2, "surface contact -> tip contact", SURFACE_OSC, TIP_OSC),
    3: Scenario(3, "oscillatory -> random actuation", TIP_OSC, TIP_RAND),
    4: Scenario(4, "random -> oscillatory actuation", TIP_RAND, TIP_OSC),
}


def get_scenario(sid):
    try:
        return SCENARIOS[int(sid)]
    except (KeyError, ValueError, TypeError):
        raise UnknownScenario(f"unknown scenario {sid!r}; expected one of {sorted(SCENARIOS)}") from None


class SealedLabels:
    """Held-out target labels.  Every read is recorded in ``accesses``."""

    def __init__(self, states):
        self._states = np.array(states, dtype=np.float64, copy=True)
        self._states.setflags(write=False)
        self.accesses = []

    @property
    def accessed(self):
        return bool(self.accesses)

    def reveal(self, reason):
        self.accesses.append(str(reason))
        return self._states.copy()

    def __len__(self):
        return len(self._states)


@dataclass
class ScenarioData:
    scenario: Scenario
    source_train: object  # labelled
    source_test: object  # labelled
    target_train: object  # unlabelled training view
    target_test: object  # unlabelled view
    target_train_labels: SealedLabels
    target_test_labels: SealedLabels


def _seal(ds):
    return ds.without_labels(), SealedLabels(ds.states)


def _domain_seed(seed, spec, offset):
    # distinct, reproducible stream per domain
    key = {"tip": 11, "surface": 23}[spec.mode] * 3 + {"oscillatory": 1, "random": 2}[spec.actuation]
    return int(seed) * 1000 + key * 10 + offset


def synth_domain(spec, seed, T, T_test, overrides=None):
    """Generate ``(train, test)`` for one domain from a single continuous run."""
    cfg = SynthConfig(mode=spec.mode, actuation=spec.actuation, T=T + T_test,
                      seed=_domain_seed(seed, spec, 0), **(overrides or {}))
    ds = synth_generate(cfg, domain_tag=spec.label())
    return ds.split(T)


def build_scenario(sid, data_source="synthetic", T=5000, T_test=1000, seed=0, synth_overrides=None):
    """Assemble a scenario.

    ``data_source`` is ``"synthetic"`` or a mapping with CSV paths under
    ``source_train``, ``source_test``, ``target_train``, ``target_test``.
    Target labels are stripped from the training view and kept sealed.
    """
    sc = get_scenario(sid)
    if data_source == "synthetic":
        s_train, s_test = synth_domain(sc.source, seed, T, T_test, synth_overrides)
        t_train, t_test = synth_domain(sc.target, seed, T, T_test, synth_overrides)
    else:
        paths = dict(data_source)
        s_train = load_csv(paths["source_train"], "source", require_states=True)
        s_test = load_csv(paths["source_test"], "source", require_states=True)
        t_train = load_csv(paths["target_train"], "target", require_states=True)
        t_test = load_csv(paths["target_test"], "target", require_states=True)
    s_train = replace(s_train, domain_tag="source")
    s_test = replace(s_test, domain_tag="source")
    t_train = replace(t_train, domain_tag="target")
    t_test = replace(t_test, domain_tag="target")
    t_train_view, t_train_sealed = _seal(t_train)
    t_test_view, t_test_sealed = _seal(t_test)
    return ScenarioData(sc, s_train, s_test, t_train_view, t_test_view, t_train_sealed, t_test_sealed)
