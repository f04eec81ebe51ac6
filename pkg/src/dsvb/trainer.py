"""Training loops, evaluation and multi-seed experiments."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .cells import make_cell
from .checkpoint import load_checkpoint, save_checkpoint
from .dat import Discriminator, accuracy, adversarial_round
from .data import (
    apply_normalizer,
    denormalize_states,
    fit_normalizer,
    NormalizationStats,
    stack_windows,
    window,
)
from .diffcore import Tensor
from .errors import EmptyDataset, NumericalDivergence
from .layers import MLP, Initializer, Module
from .optim import Adam, AdamState, adam_step  # noqa: F401  (re-exported)
from .vrnn import VRNNDims, VRNNModel, filter_sequence

log = logging.getLogger(__name__)

METHODS = ("GRU", "LSTM", "DSVB-GRU", "DSVB-LSTM")


@dataclass
class TrainConfig:
    seq_len: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    epochs: int = 50
    n_particles: int = 1
    lam: float = 1.0
    kld_weight: float = 1.0
    ss_weight: float = 1.0
    seeds: tuple = (0, 1, 2, 3, 4)
    cell_type: str = "gru"
    hidden_size: int = 128
    stride: int = 10
    warmup_frac: float = 0.1
    val_frac: float = 0.1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        for name in ("seq_len", "batch_size", "epochs", "n_particles", "hidden_size", "stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if min(self.lam, self.kld_weight, self.ss_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.val_frac < 1 or not 0 <= self.warmup_frac <= 1:
            raise ValueError("val_frac must lie in [0, 1) and warmup_frac in [0, 1]")
        if self.cell_type not in ("gru", "lstm"):
            raise ValueError(f"cell_type must be 'gru' or 'lstm', got {self.cell_type!r}")

    def to_dict(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# baseline --------------------------------------------------------------------

class BaselineRNN(Module):
    """Deterministic recurrent regressor: measurements -> states."""

    def __init__(self, n_y, n_x, cell_type="gru", hidden_size=128, head_hidden=(128,), seed=0):
        super().__init__("baseline")
        init = Initializer(seed)
        self.n_y, self.n_x, self.cell_type = n_y, n_x, cell_type
        self.hidden_size, self.head_hidden = hidden_size, tuple(head_hidden)
        self.rnn = self.add_child("rnn", make_cell(cell_type, n_y, hidden_size, init, "rnn"))
        self.head = self.add_child("head", MLP(hidden_size, self.head_hidden, n_x, init, "head"))

    def forward(self, y):
        """``y`` is ``(B, T, n_y)``; returns a list of ``T`` tensors ``(B, n_x)``."""
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 2:
            y = y[None]
        state = self.rnn.initial_state(y.shape[0])
        out = []
        for n in range(y.shape[1]):
            state = self.rnn(Tensor(y[:, n]), state)
            out.append(self.head(self.rnn.hidden(state)))
        return out

    def spec(self):
        return {"n_y": self.n_y, "n_x": self.n_x, "cell_type": self.cell_type,
                "hidden_size": self.hidden_size, "head_hidden": list(self.head_hidden)}


def _mse(preds, x, dim_mask):
    w = np.ones(x.shape[-1]) if dim_mask is None else np.asarray(dim_mask, dtype=np.float64)
    if not w.any():
        # every channel constant: fit them all (they are zero once normalised)
        w = np.ones(x.shape[-1])
    denom = x.shape[0] * x.shape[1] * w.sum()
    total = 0.0
    for n, p in enumerate(preds):
        total = total + dc.tsum(dc.square(p - Tensor(x[:, n])) * Tensor(w))
    return total * (1.0 / denom)


# data preparation --------------------------------------------------------------

@dataclass
class Prepared:
    stats: NormalizationStats
    source_train: object
    source_val: object
    target_train: object = None


def prepare(config, source, target=None):
    """Carve a source validation tail, fit the normaliser on the source
    training part and apply it unchanged to everything else."""
    if len(source) == 0:
        raise EmptyDataset("source dataset is empty")
    if not source.labelled:
        raise ValueError("source dataset must carry state labels")
    n_val = int(round(len(source) * config.val_frac))
    if n_val and n_val < config.seq_len:
        n_val = 0
    if len(source) - n_val < config.seq_len:
        raise EmptyDataset(f"source dataset has fewer than seq_len={config.seq_len} training rows")
    train, val = source.split(len(source) - n_val) if n_val else (source, None)
    stats = fit_normalizer(train)
    norm = lambda ds: None if ds is None else apply_normalizer(stats, ds)  # noqa: E731
    if target is not None and target.labelled:
        raise ValueError("target training data must not carry labels")
    return Prepared(stats, norm(train), norm(val), norm(target))


def _batches(rng, n_items, size):
    idx = rng.permutation(n_items)
    return [idx[i:i + size] for i in range(0, n_items, size)]


# evaluation ------------------------------------------------------------------

def predict_states(model, measurements, seq_len):
    """Normalised state estimates over a whole series.

    The series is cut into contiguous windows of ``seq_len`` (the last one may
    be shorter), each filtered from a zero hidden state.  Returns ``(mean,
    std)``; ``std`` is None for deterministic baselines.
    """
    y = np.asarray(measurements, dtype=np.float64)
    T = y.shape[0]
    means, stds = [], []
    with dc.no_grad():
        starts = list(range(0, T, seq_len))
        full = [s for s in starts if s + seq_len <= T]
        chunks = []
        if full:
            chunks.append(np.stack([y[s:s + seq_len] for s in full]))
        tail = [s for s in starts if s + seq_len > T]
        for s in tail:
            chunks.append(y[s:][None])
        for chunk in chunks:
            if isinstance(model, VRNNModel):
                ro = filter_sequence(model, chunk, 1, mean_feedback=True)
                means.append(ro.posterior_means().reshape(-1, model.n_x))
                stds.append(ro.posterior_stds().reshape(-1, model.n_x))
            else:
                preds = np.stack([p.values for p in model.forward(chunk)], axis=1)
                means.append(preds.reshape(-1, model.n_x))
    mean = np.concatenate(means)
    return mean, (np.concatenate(stds) if stds else None)


def rmse_report(pred_norm, true_raw, stats):
    """RMSE in normalised units (non-degenerate channels) and original units."""
    true_norm = (true_raw - stats.x_mean) / stats.x_std
    active = np.ones(true_raw.shape[1], bool) if stats.x_degenerate is None else ~stats.x_degenerate
    if not active.any():
        active = np.ones(true_raw.shape[1], bool)
    err_norm = pred_norm - true_norm
    err_raw = denormalize_states(stats, pred_norm) - true_raw
    return {
        "rmse_normalized": float(np.sqrt(np.mean(err_norm[:, active] ** 2))),
        "rmse": float(np.sqrt(np.mean(err_raw ** 2))),
        "per_channel_normalized": np.sqrt(np.mean(err_norm ** 2, axis=0)).tolist(),
        "per_channel": np.sqrt(np.mean(err_raw ** 2, axis=0)).tolist(),
    }


def _val_rmse(model, prepared, seq_len):
    if prepared.source_val is None:
        return None
    pred, _ = predict_states(model, prepared.source_val.measurements, seq_len)
    x = prepared.source_val.states
    active = prepared.stats.active_states
    if not active.any():
        active = np.ones_like(active)
    return float(np.sqrt(np.mean((pred - x)[:, active] ** 2)))


# training --------------------------------------------------------------------

@dataclass
class TrainResult:
    method: str
    seed: int
    model: object
    stats: NormalizationStats
    history: list
    config: TrainConfig
    disc: object = None
    best_state: dict = None
    best_val: float = None
    checkpoint: Path = None

    @property
    def final_loss(self):
        return self.history[-1]["total"] if self.history else None


def _mean_rows(rows):
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) if isinstance(rows[0][k], (int, float)) else rows[0][k]
            for k in keys}


def _check_params(module):
    for name, p in module.named_parameters().items():
        if not np.all(np.isfinite(p.values)):
            raise NumericalDivergence(f"parameter {name} is not finite")


def method_name(kind, cell_type):
    return f"DSVB-{cell_type.upper()}" if kind == "dsvb" else cell_type.upper()


def checkpoint_meta(result, kind):
    meta = {
        "method": result.method,
        "seed": result.seed,
        "config": result.config.to_dict(),
        "normalizer": result.stats.to_dict(),
        "final_loss": result.final_loss,
        "best_val_rmse": result.best_val,
    }
    if kind == "dsvb":
        meta["dims"] = result.model.dims.to_dict()
    else:
        meta["baseline"] = result.model.spec()
    return meta


def save_result(result, path, state=None):
    kind = "dsvb" if isinstance(result.model, VRNNModel) else "baseline"
    tensors = dict(result.model.state_dict() if state is None else state)
    if kind == "dsvb" and result.disc is not None and state is None:
        tensors.update(result.disc.state_dict())
    return save_checkpoint(path, kind, tensors, checkpoint_meta(result, kind))


def load_model(path):
    """Rebuild a trained model from a checkpoint; returns ``(model, stats, doc)``."""
    doc = load_checkpoint(path)
    meta = doc["meta"]
    stats = NormalizationStats.from_dict(meta["normalizer"])
    tensors = doc["tensors"]
    if doc["kind"] == "dsvb":
        model = VRNNModel(VRNNDims.from_dict(meta["dims"]))
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("disc.")})
    elif doc["kind"] == "baseline":
        b = meta["baseline"]
        model = BaselineRNN(b["n_y"], b["n_x"], b["cell_type"], b["hidden_size"], tuple(b["head_hidden"]))
        model.load_state_dict(tensors)
    else:
        raise ValueError(f"unknown checkpoint kind {doc['kind']!r}")
    return model, stats, doc


def _write_history(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def train(config, source, target, seed=0, out_dir=None):
    """Adversarial semi-supervised training on labelled ``source`` and
    unlabelled ``target`` data (raw units)."""
    if target is None or len(target) == 0:
        raise EmptyDataset("target dataset is empty")
    prepared = prepare(config, source, target)
    src_w = window(prepared.source_train, config.seq_len, config.stride)
    tgt_w = window(prepared.target_train, config.seq_len, config.stride)
    if not src_w or not tgt_w:
        raise EmptyDataset("no training windows")
    ys, xs = stack_windows(src_w)
    yt, _ = stack_windows(tgt_w)
    n_y, n_x = ys.shape[-1], xs.shape[-1]

    dims = VRNNDims(n_y=n_y, n_x=n_x, hidden_size=config.hidden_size, cell_type=config.cell_type)
    model = VRNNModel(dims, seed=seed)
    disc = Discriminator(n_x, hidden_size=config.hidden_size, seed=seed)
    gen_opt = Adam(model.parameters(), lr=config.learning_rate)
    disc_opt = Adam(disc.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng([seed, 1])
    dim_mask = prepared.stats.active_states.astype(float)

    half = max(config.batch_size // 2, 1)
    n_batches = math.ceil(len(src_w) / half)
    total_steps = n_batches * config.epochs
    warmup = config.warmup_frac * total_steps
    result = TrainResult(method_name("dsvb", config.cell_type), seed, model, prepared.stats, [], config, disc=disc)
    out_dir = None if out_dir is None else Path(out_dir)
    last_good = model.state_dict()
    step = 0
    for epoch in range(config.epochs):
        src_batches = _batches(rng, len(src_w), half)
        tgt_order = np.concatenate([rng.permutation(len(yt)) for _ in range(math.ceil(len(src_w) / len(yt)) + 1)])
        rows = []
        try:
            for b, idx in enumerate(src_batches):
                lam = config.lam if warmup <= 0 else config.lam * min(1.0, step / warmup)
                tidx = tgt_order[b * half: b * half + len(idx)]
                parts = adversarial_round(
                    {"y": ys[idx], "x": xs[idx], "mask": np.ones(xs[idx].shape[:2])},
                    {"y": yt[tidx]},
                    model, disc, gen_opt, disc_opt,
                    lam=lam, kld_weight=config.kld_weight, ss_weight=config.ss_weight,
                    n_particles=config.n_particles, rng=rng, state_dim_mask=dim_mask,
                )
                _check_params(model)
                _check_params(disc)
                row = parts.to_dict()
                row["lam"] = lam
                row["lam_bce"] = lam * parts.adversarial_bce
                rows.append(row)
                step += 1
        except NumericalDivergence as exc:
            exc.epoch = epoch
            if out_dir is not None:
                result.best_state = result.best_state or last_good
                save_result(result, out_dir / "last_good.json", state=last_good)
            raise NumericalDivergence(f"numerical divergence in epoch {epoch}: {exc}", epoch=epoch) from exc
        last_good = model.state_dict()
        summary = _mean_rows(rows)
        summary["target_ss_max"] = float(max(abs(r["target_ss"]) for r in rows))
        summary["recon_per_step_dim"] = summary["reconstruction_nll"] / (config.seq_len * n_y)
        summary["kld_per_step_dim"] = summary["kld"] / (config.seq_len * n_x)
        summary["epoch"] = epoch
        summary["batches"] = len(rows)
        summary["val_rmse"] = _val_rmse(model, prepared, config.seq_len)
        result.history.append(summary)
        if summary["val_rmse"] is not None and (result.best_val is None or summary["val_rmse"] < result.best_val):
            result.best_val = summary["val_rmse"]
            result.best_state = {**model.state_dict(), **disc.state_dict()}
        log.info("seed %d epoch %d total %.3f val_rmse %s", seed, epoch, summary["total"], summary["val_rmse"])

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_result(result, out_dir / "checkpoint.json")
        if result.best_state is not None:
            save_result(result, out_dir / "best.json", state=result.best_state)
        _write_history(out_dir / "history.jsonl", result.history)
    return result


def train_baseline(config, source, seed=0, out_dir=None):
    """Supervised GRU/LSTM regression on the labelled source data only."""
    prepared = prepare(config, source)
    src_w = window(prepared.source_train, config.seq_len, config.stride)
    ys, xs = stack_windows(src_w)
    model = BaselineRNN(ys.shape[-1], xs.shape[-1], config.cell_type, config.hidden_size, seed=seed)
    opt = Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng([seed, 1])
    dim_mask = prepared.stats.active_states.astype(float)
    result = TrainResult(method_name("baseline", config.cell_type), seed, model, prepared.stats, [], config)
    out_dir = None if out_dir is None else Path(out_dir)
    last_good = model.state_dict()
    for epoch in range(config.epochs):
        losses = []
        try:
            for idx in _batches(rng, len(ys), config.batch_size):
                model.zero_grad()
                loss = _mse(model.forward(ys[idx]), xs[idx], dim_mask)
                if not np.isfinite(loss.item()):
                    raise NumericalDivergence("baseline loss is not finite")
                loss.backward()
                opt.step()
                _check_params(model)
                losses.append(loss.item())
        except NumericalDivergence as exc:
            if out_dir is not None:
                save_result(result, out_dir / "last_good.json", state=last_good)
            raise NumericalDivergence(f"numerical divergence in epoch {epoch}: {exc}", epoch=epoch) from exc
        last_good = model.state_dict()
        row = {"epoch": epoch, "total": float(np.mean(losses)), "mse": float(np.mean(losses)),
               "batches": len(losses), "val_rmse": _val_rmse(model, prepared, config.seq_len)}
        result.history.append(row)
        if row["val_rmse"] is not None and (result.best_val is None or row["val_rmse"] < result.best_val):
            result.best_val = row["val_rmse"]
            result.best_state = model.state_dict()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_result(result, out_dir / "checkpoint.json")
        if result.best_state is not None:
            save_result(result, out_dir / "best.json", state=result.best_state)
        _write_history(out_dir / "history.jsonl", result.history)
    return result


def discriminator_accuracy(result, source, target, seq_len=None, stride=None):
    """Accuracy of the trained discriminator on balanced windows from raw
    ``source`` / ``target`` series (labels are not needed)."""
    cfg = result.config
    seq_len = seq_len or cfg.seq_len
    stride = stride or cfg.stride
    stats = result.stats
    ws = window(apply_normalizer(stats, source.without_labels()), seq_len, stride)
    wt = window(apply_normalizer(stats, target.without_labels()), seq_len, stride)
    n = min(len(ws), len(wt))
    ys = np.stack([w.measurements for w in ws[:n]])
    yt = np.stack([w.measurements for w in wt[:n]])
    with dc.no_grad():
        lat = []
        for y in (ys, yt):
            ro = filter_sequence(result.model, y, 1, mean_feedback=True)
            lat.append(ro.particle_array())
        probs = result.disc.classify(np.concatenate(lat)).values
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    return accuracy(probs, labels)


# experiments -----------------------------------------------------------------

def train_method(method, config, source, target, seed, out_dir=None):
    cell = "lstm" if method.endswith("LSTM") else "gru"
    cfg = replace(config, cell_type=cell)
    if method.startswith("DSVB"):
        return train(cfg, source, target, seed=seed, out_dir=out_dir)
    return train_baseline(cfg, source, seed=seed, out_dir=out_dir)


def evaluate(result_or_model, stats, measurements, true_states, seq_len):
    model = getattr(result_or_model, "model", result_or_model)
    pred, _ = predict_states(model, (measurements - stats.y_mean) / stats.y_std, seq_len)
    return rmse_report(pred, true_states, stats)


def format_cell(values):
    return "%.3f±%.3f" % (float(np.mean(values)), float(np.std(values)))


@dataclass
class ExperimentResult:
    methods: list
    runs: list = field(default_factory=list)  # dicts: method, seed, source/target reports

    def rmse(self, method, domain, key="rmse_normalized"):
        return [r[domain][key] for r in self.runs if r["method"] == method]

    def table(self, key="rmse_normalized"):
        rows = []
        for m in self.methods:
            row = {"method": m}
            for domain in ("source", "target"):
                vals = self.rmse(m, domain, key)
                row[domain] = format_cell(vals)
                row[f"{domain}_mean"] = float(np.mean(vals))
                row[f"{domain}_std"] = float(np.std(vals))
            rows.append(row)
        return rows

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_table(out_dir / "rmse_table", self.table("rmse_normalized"), self.table("rmse"), self.runs)


def write_table(stem, table_norm, table_raw, runs):
    stem = Path(stem)
    with open(stem.with_suffix(".csv"), "w") as fh:
        fh.write("method,source,target,source_original_units,target_original_units\n")
        for a, b in zip(table_norm, table_raw):
            fh.write(f"{a['method']},{a['source']},{a['target']},{b['source']},{b['target']}\n")
    doc = {"normalized": table_norm, "original_units": table_raw, "runs": runs}
    with open(stem.with_suffix(".json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def run_experiment(scenario_data, config, methods=METHODS, out_dir=None):
    """Train every method for every seed and report source/target RMSE.

    ``scenario_data`` is a ``ScenarioData``; target labels are revealed only
    here, after training, for scoring.
    """
    result = ExperimentResult(list(methods))
    src_test = scenario_data.source_test
    tgt_test_y = scenario_data.target_test.measurements
    for seed in config.seeds:
        for m in methods:
            sub = None if out_dir is None else Path(out_dir) / m / f"seed{seed}"
            tr = train_method(m, config, scenario_data.source_train, scenario_data.target_train, seed, sub)
            tgt_true = scenario_data.target_test_labels.reveal("scoring")
            run = {
                "method": m,
                "seed": seed,
                "source": evaluate(tr, tr.stats, src_test.measurements, src_test.states, config.seq_len),
                "target": evaluate(tr, tr.stats, tgt_test_y, tgt_true, config.seq_len),
                "final_loss": tr.final_loss,
            }
            if tr.disc is not None:
                run["disc_accuracy"] = discriminator_accuracy(tr, src_test, scenario_data.target_test)
                run["target_ss_max"] = max(h["target_ss_max"] for h in tr.history)
                run["generator_loss"] = [h["total"] for h in tr.history]
            result.runs.append(run)
            log.info("%s seed %d: source %.3f target %.3f", m, seed,
                     run["source"]["rmse_normalized"], run["target"]["rmse_normalized"])
    if out_dir is not None:
        result.write(out_dir)
    return result
