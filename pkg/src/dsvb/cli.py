"""Command line interface.

    dsvb synth           simulate a domain (or a whole scenario) to CSV
    dsvb train           fit DSVB or a baseline over several seeds
    dsvb eval            RMSE table from checkpoints and labelled test CSVs
    dsvb infer           per-step state estimates with standard deviations
    dsvb export-latents  posterior-mean latents of two domains, tagged
    dsvb experiment      all four methods on a scenario, end to end

Exit status: 0 success, 2 usage or input error, 3 numerical divergence.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data import STATE_COLUMNS, SynthConfig, load_csv, write_csv, write_sidecar
from .errors import DSVBError, NumericalDivergence
from .scenarios import DomainSpec, build_scenario, get_scenario, synth_domain
from .trainer import (METHODS, ExperimentResult, TrainConfig, evaluate, load_model, predict_states,
                      run_experiment, train, train_baseline, write_table)
from .vrnn import VRNNModel

log = logging.getLogger("dsvb")

MANIFEST_SCHEMA = "dsvb-run-manifest"
MANIFEST_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3
ACTUATION = {"osc": "oscillatory", "rand": "random"}


class InputError(Exception):
    """Bad or missing user input; reported with exit status 2."""


# manifest --------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def code_hash():
    """Content hash of the package sources, independent of install location."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, command, argv, config, datasets, seeds, outputs):
    out_dir = Path(out_dir)
    doc = {
        "schema": MANIFEST_SCHEMA,
        "schema_version": MANIFEST_VERSION,
        "package_version": __version__,
        "code_hash": code_hash(),
        "command": command,
        "argv": list(argv),
        "config": config,
        "datasets": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in sorted(datasets.items())},
        "seeds": list(seeds),
        "outputs": sorted(str(o) for o in outputs),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# helpers ---------------------------------------------------------------------

def _existing(path, what):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {path}")
    return p


def _threads():
    raw = os.environ.get("DSVB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"DSVB_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _config_from(args, seeds):
    return TrainConfig(
        seq_len=args.seq_len, batch_size=args.batch_size, learning_rate=args.lr, epochs=args.epochs,
        n_particles=args.particles, lam=args.lam, kld_weight=args.kld_weight, ss_weight=args.ss_weight,
        seeds=tuple(seeds), cell_type=getattr(args, "cell", "gru"), hidden_size=args.hidden_size,
        stride=args.stride, val_frac=args.val_frac,
    )


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seq-len", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lam", type=float, default=1.0, help="adversarial weight after warm-up")
    p.add_argument("--kld-weight", type=float, default=1.0)
    p.add_argument("--ss-weight", type=float, default=1.0)
    p.add_argument("--particles", type=int, default=1)
    p.add_argument("--hidden-size", type=int, default=128)
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--val-frac", type=float, default=0.1, help="source tail held out for validation")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p.add_argument("--seed", type=int, default=0, help="first seed")


# synth -----------------------------------------------------------------------

def cmd_synth(args, argv):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.scenario is not None:
        sc = get_scenario(args.scenario)
        parts = {}
        for role, spec in (("source", sc.source), ("target", sc.target)):
            parts[f"{role}_train"], parts[f"{role}_test"] = synth_domain(spec, args.seed, args.T, args.T_test)
        for name, ds in parts.items():
            write_csv(out / f"{name}.csv", ds)
            outputs.append(out / f"{name}.csv")
        config = {"scenario": sc.id, "source": sc.source.label(), "target": sc.target.label(),
                  "seed": args.seed, "T": args.T, "T_test": args.T_test}
    else:
        spec = DomainSpec(args.mode, ACTUATION[args.actuation])
        train_ds, test_ds = synth_domain(spec, args.seed, args.T, args.T_test)
        write_csv(out / "train.csv", train_ds)
        write_csv(out / "test.csv", test_ds)
        outputs += [out / "train.csv", out / "test.csv"]
        cfg = SynthConfig.from_dict(train_ds.meta["synth"])
        write_sidecar(out / "synth.json", cfg, {"train_rows": len(train_ds), "test_rows": len(test_ds)})
        outputs.append(out / "synth.json")
        config = {"synth": cfg.to_dict(), "T": args.T, "T_test": args.T_test}
    write_manifest(out, "synth", argv, config, {}, [args.seed], outputs)
    print(f"wrote {len(outputs)} files to {out}")
    return EXIT_OK


# train -----------------------------------------------------------------------

def _train_one(job):
    """Worker for one seed; top level so a process pool can pickle it."""
    method, config, source, target, seed, out_dir = job
    if method == "dsvb":
        res = train(config, source, target, seed=seed, out_dir=out_dir)
    else:
        res = train_baseline(config, source, seed=seed, out_dir=out_dir)
    return {"seed": seed, "method": res.method, "final_loss": res.final_loss,
            "epochs": len(res.history), "checkpoint": str(res.checkpoint)}


def _run_jobs(jobs):
    n = min(_threads(), len(jobs))
    if n <= 1:
        return [_train_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_train_one, jobs))


def cmd_train(args, argv):
    source = load_csv(_existing(args.source, "source dataset"), "source", require_states=True)
    datasets = {"source": args.source}
    target = None
    if args.method == "baseline":
        if args.target:
            print("warning: --target is ignored for baselines (trained on source data only)", file=sys.stderr)
    else:
        if not args.target:
            raise InputError("--target is required for --method dsvb")
        target = load_csv(_existing(args.target, "target dataset"), "target")
        if target.labelled:
            print("note: state columns in the target file are ignored", file=sys.stderr)
            target = target.without_labels()
        datasets["target"] = args.target
    seeds = list(range(args.seed, args.seed + args.seeds))
    config = _config_from(args, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(args.method, config, source, target, s, out / f"seed{s}") for s in seeds]
    summary = _run_jobs(jobs)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    outputs = [out / "summary.json"] + [Path(r["checkpoint"]) for r in summary]
    write_manifest(out, "train", argv, {**config.to_dict(), "method": args.method}, datasets, seeds, outputs)
    for r in summary:
        print(f"{r['method']} seed {r['seed']}: final loss {r['final_loss']:.6f}")
    return EXIT_OK


# eval ------------------------------------------------------------------------

def _find_checkpoints(items):
    found = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            found += sorted(p.rglob("checkpoint.json"))
        elif p.is_file():
            found.append(p)
        else:
            raise InputError(f"checkpoint not found: {item}")
    if not found:
        raise InputError("no checkpoints found")
    return found


def cmd_eval(args, argv):
    ckpts = _find_checkpoints(args.checkpoints)
    src = load_csv(_existing(args.test_source, "source test set"), "source", require_states=True)
    tgt = load_csv(_existing(args.test_target, "target test set"), "target", require_states=True)
    runs, methods = [], []
    for path in ckpts:
        model, stats, doc = load_model(path)
        seq_len = doc["meta"]["config"]["seq_len"]
        method = doc["meta"]["method"]
        if method not in methods:
            methods.append(method)
        runs.append({
            "method": method, "seed": doc["meta"]["seed"], "checkpoint": str(path),
            "source": evaluate(model, stats, src.measurements, src.states, seq_len),
            "target": evaluate(model, stats, tgt.measurements, tgt.states, seq_len),
        })
    order = [m for m in METHODS if m in methods] + [m for m in methods if m not in METHODS]
    res = ExperimentResult(order, runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "rmse_table", res.table("rmse_normalized"), res.table("rmse"), runs)
    datasets = {"test_source": args.test_source, "test_target": args.test_target}
    datasets.update({f"checkpoint_{i}": p for i, p in enumerate(ckpts)})
    write_manifest(out, "eval", argv, {}, datasets, sorted({r["seed"] for r in runs}),
                   [out / "rmse_table.csv", out / "rmse_table.json"])
    _print_table(res)
    return EXIT_OK


def _print_table(res):
    print(f"{'method':<12}{'source':>16}{'target':>16}")
    for row in res.table():
        print(f"{row['method']:<12}{row['source']:>16}{row['target']:>16}")


# infer / export --------------------------------------------------------------

def _dsvb_checkpoint(path):
    model, stats, doc = load_model(_existing(path, "checkpoint"))
    if not isinstance(model, VRNNModel):
        raise InputError("this command needs a DSVB checkpoint (baselines carry no latent distribution)")
    return model, stats, doc


def estimate(model, stats, measurements, seq_len):
    """State estimates and standard deviations in original units."""
    mean, std = predict_states(model, (measurements - stats.y_mean) / stats.y_std, seq_len)
    return mean * stats.x_std + stats.x_mean, std * stats.x_std


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else repr(float(v)) for v in r])


def cmd_infer(args, argv):
    model, stats, doc = _dsvb_checkpoint(args.checkpoint)
    ds = load_csv(_existing(args.input, "input"), "input")
    mean, std = estimate(model, stats, ds.measurements, doc["meta"]["config"]["seq_len"])
    header = ["t", *STATE_COLUMNS, *(f"{c}_std" for c in STATE_COLUMNS)]
    _write_rows(args.out, header, np.hstack([ds.t[:, None], mean, std]))
    print(f"wrote {len(ds)} rows to {args.out}")
    return EXIT_OK


def cmd_export_latents(args, argv):
    model, stats, doc = _dsvb_checkpoint(args.checkpoint)
    seq_len = doc["meta"]["config"]["seq_len"]
    rows = []
    for tag, path in (("source", args.source), ("target", args.target)):
        ds = load_csv(_existing(path, f"{tag} dataset"), tag)
        mean, _ = estimate(model, stats, ds.measurements, seq_len)
        rows += [[*m, tag] for m in mean]
    _write_rows(args.out, [*STATE_COLUMNS, "domain"], rows)
    print(f"wrote {len(rows)} latent rows to {args.out}")
    return EXIT_OK


# experiment ------------------------------------------------------------------

def cmd_experiment(args, argv):
    seeds = list(range(args.seed, args.seed + args.seeds))
    config = _config_from(args, seeds)
    datasets = {}
    if args.csv_dir:
        names = ("source_train", "source_test", "target_train", "target_test")
        paths = {n: _existing(Path(args.csv_dir) / f"{n}.csv", n) for n in names}
        sd = build_scenario(args.scenario, data_source=paths)
        datasets = paths
    else:
        sd = build_scenario(args.scenario, T=args.T, T_test=args.T_test, seed=args.data_seed)
    methods = args.methods or list(METHODS)
    out = Path(args.out)
    res = run_experiment(sd, config, methods=methods, out_dir=out)
    write_manifest(out, "experiment", argv,
                   {**config.to_dict(), "scenario": sd.scenario.id, "methods": methods,
                    "data": "csv" if args.csv_dir else {"T": args.T, "T_test": args.T_test, "seed": args.data_seed}},
                   datasets, seeds, [out / "rmse_table.csv", out / "rmse_table.json"])
    _print_table(res)
    return EXIT_OK


# entry point -----------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="dsvb", description="Domain-adaptive sequential variational state estimation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="simulate finger data to CSV")
    p.add_argument("--mode", choices=["tip", "surface"], default="tip")
    p.add_argument("--actuation", choices=sorted(ACTUATION), default="osc")
    p.add_argument("--scenario", type=int, help="write all four splits of a scenario instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=5000, help="training rows")
    p.add_argument("--T-test", type=int, default=1000, help="test rows")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train DSVB or a baseline")
    p.add_argument("--source", required=True)
    p.add_argument("--target")
    p.add_argument("--cell", choices=["gru", "lstm"], default="gru")
    p.add_argument("--method", choices=["dsvb", "baseline"], default="dsvb")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE table from checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True, help="checkpoint files or run directories")
    p.add_argument("--test-source", required=True)
    p.add_argument("--test-target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="state estimates for a measurement CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-latents", help="posterior-mean latents of two domains")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_latents)

    p = sub.add_parser("experiment", help="train and score all methods on a scenario")
    p.add_argument("--scenario", type=int, required=True)
    p.add_argument("--methods", nargs="+", choices=list(METHODS))
    p.add_argument("--csv-dir", help="directory with source_/target_ train/test CSVs (default: synthetic)")
    p.add_argument("--T", type=int, default=5000)
    p.add_argument("--T-test", type=int, default=1000)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except NumericalDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, DSVBError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
