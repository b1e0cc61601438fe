"""Command-line entry point: ``gnnpp {synth,train,evaluate,compare,importance}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Every command writes ``manifest.json`` into its output
directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import kernels
from . import metrics as M
from .data import DataError, load_dir, load_split, save_dataset, save_split
from .models import predict_grouped
from .stats import (
    ID_FEATURE,
    compare_scores,
    normalize_importance,
    permutation_importance,
    write_dm_results,
    write_importance,
)
from .synth import SynthConfig, default_split, forecast_part, generate
from .tensor import NumericalError
from .training import PRESETS, EnsembleCheckpoint, TrainingAborted, load_config, preset, train_ensemble, write_training_log

log = logging.getLogger("gnnpp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- manifest -----------------------------------------------------------------------


def file_sha256(path):
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _checksums(*dirs):
    out = {}
    for d in dirs:
        if d is None:
            continue
        d = Path(d)
        files = [d] if d.is_file() else sorted(p for p in d.iterdir() if p.is_file() and p.suffix in (".csv", ".json"))
        for p in files:
            if p.name != "manifest.json":
                out[str(p)] = file_sha256(p)
    return out


def version_string():
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "0+unknown"
    try:
        rev = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{version}+g{rev}" if rev else version


def write_manifest(out_dir, args, started, config=None, inputs=(), seeds=None):
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "config": config,
        "input_checksums": _checksums(*inputs),
        "output_checksums": _checksums(out_dir),
        "seeds": seeds,
        "version": version_string(),
        "kernel_backend": kernels.BACKEND,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "elapsed_s": round(time.time() - started, 3),
    }
    Path(out_dir, "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------------


def cmd_synth(args):
    started = time.time()
    try:
        cfg = SynthConfig(
            n_stations=args.n_stations,
            n_days=args.n_days,
            n_members=args.n_members,
            n_features=args.n_features,
            seed=args.seed,
            bias_field=args.bias_field,
            spread_error=args.spread_error,
            spatial_corr_length=args.corr_length,
            sigma_true=args.sigma_true,
        ).validate()
        split = default_split(cfg, args.valid_frac, args.test_frac)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out)
    ds = generate(cfg)
    save_dataset(ds, out)
    save_split(split, out / "split.json")
    if args.r2f_days > 0:
        part = forecast_part(cfg, args.r2f_days, args.r2f_members)
        r2f_dir = _out_dir(out / "r2f")
        save_dataset(generate(part), r2f_dir)
        write_manifest(r2f_dir, args, started, config=asdict(part), seeds=[part.seed])
    write_manifest(out, args, started, config=asdict(cfg), seeds=[cfg.seed])
    print(f"wrote synthetic dataset to {out} (days per part: {split.sizes(ds)})")
    return EXIT_OK


def _train_config(args):
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; available presets: {', '.join(PRESETS)}")
    cfg = preset(args.preset)
    if args.config:
        cfg = load_config(args.config, base=cfg)
    overrides = {
        k: v
        for k, v in {
            "ensemble_size": args.ensemble_size,
            "seed": args.seed,
            "max_epochs": args.max_epochs,
            "learning_rate": args.learning_rate,
            "hidden": args.hidden,
            "heads": args.heads,
            "n_blocks": args.blocks,
            "patience": args.patience,
            "workers": args.threads,
        }.items()
        if v is not None
    }
    return replace(cfg, **overrides)


def _split_for(data_dir, split_file):
    path = Path(split_file) if split_file else Path(data_dir) / "split.json"
    if not path.exists():
        raise DataError(f"split file {path} not found")
    return load_split(path)


def cmd_train(args):
    started = time.time()
    try:
        cfg = _train_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    kind = args.model.upper()
    print(
        f"config: model={kind} preset={cfg.lead_time} lr={cfg.learning_rate:g} K={cfg.n_blocks} "
        f"heads={cfg.heads} hidden={cfg.hidden} batch={cfg.batch_size} epochs={cfg.max_epochs} "
        f"patience={cfg.patience} ensemble={cfg.ensemble_size} d_max={cfg.d_max:g} weight_decay={cfg.weight_decay:g}"
    )
    if args.dry_run:
        return EXIT_OK
    ds = load_dir(args.data)
    split = _split_for(args.data, args.split_file)
    ckpt = train_ensemble(kind, ds, split, cfg)
    out = _out_dir(args.out)
    ckpt.save(out / "checkpoint.json")
    (out / "train_config.txt").write_text(cfg.to_text())
    for k, trace in enumerate(ckpt.traces):
        write_training_log(trace, out / f"training_log_m{k}.csv")
    write_training_log(ckpt.traces[0], out / "training_log.csv")
    if ckpt.failures:
        (out / "failures.txt").write_text("\n".join(ckpt.failures) + "\n")
        print(f"warning: {len(ckpt.failures)} member(s) aborted, ensemble uses {len(ckpt.models)}")
    write_manifest(out, args, started, config=asdict(cfg), inputs=[args.data], seeds=ckpt.seeds)
    print(f"trained {len(ckpt.models)} model(s); validation CRPS {np.round(ckpt.valid_scores, 5).tolist()}")
    return EXIT_OK


def _evaluation_data(args):
    ds = load_dir(args.data)
    if args.split == "r2f":
        return ds
    return _split_for(args.data, args.split_file).subset(ds, "test")


def cmd_evaluate(args):
    started = time.time()
    if args.model is None and args.checkpoint is None:
        raise UsageError("give --checkpoint, or --model ens for the raw ensemble")
    test = _evaluation_data(args)
    if test.n_days == 0:
        raise DataError("no evaluation days in the selected split")
    ens = M.ensemble_report(test)
    ref_name, ref_crps = "ENS", ens.crps.values
    if args.reference:
        ref = M.ScoreSeries.from_csv(Path(args.reference) / "scores.csv")
        if not np.array_equal(ref.station_ids, test.station_ids) or not np.array_equal(ref.days, test.days):
            raise DataError("reference report covers different stations or days")
        ref_name, ref_crps = str(args.reference), ref.values
    seeds = None
    if args.checkpoint is None:
        report = M.ensemble_report(test, ref_crps, ref_name)
    else:
        ckpt = EnsembleCheckpoint.load(args.checkpoint)
        seeds = ckpt.seeds
        model = ckpt.ensemble
        n_train = ckpt.models[0].n_train_members
        groups = None
        if test.n_members > n_train:
            pred, groups = predict_grouped(model, test, n_train)
            print(f"member groups: {groups}")
        else:
            pred = model.predict(test)
        report = M.gaussian_report(ckpt.kind, test, pred.mu, pred.sigma, ref_crps, ref_name, groups)
    out = _out_dir(args.out)
    report.write(out)
    write_manifest(out, args, started, inputs=[args.data, args.checkpoint], seeds=seeds)
    s = report.summary()
    print(
        f"{s['model']}: CRPS {s['crps_mean']:.5f}  PI length {s['pi_length']:.4f}  "
        f"PI cover {s['pi_cover']:.2f}% (nominal {s['pi_nominal']:.2f}%)"
    )
    return EXIT_OK


def cmd_compare(args):
    started = time.time()
    a, b = (Path(p) for p in args.reports)
    sa, sb = M.ScoreSeries.from_csv(a / "scores.csv"), M.ScoreSeries.from_csv(b / "scores.csv")
    comparison = compare_scores(sa, sb, args.alpha, args.demeaned)
    out = _out_dir(args.out)
    write_dm_results(comparison, out / "dm_results.csv")
    summary = {
        "first": str(a),
        "second": str(b),
        "alpha": args.alpha,
        "n_stations": len(comparison.results),
        "p_star": comparison.bh.p_star,
        "fraction_rejected": comparison.fraction_rejected,
        "fraction_first_better": comparison.fraction_favouring(first=True),
        "fraction_second_better": comparison.fraction_favouring(first=False),
        "degenerate_stations": [r.station for r in comparison.results if r.degenerate],
    }
    (out / "comparison.json").write_text(json.dumps(summary, indent=2))
    write_manifest(out, args, started, inputs=[a / "scores.csv", b / "scores.csv"])
    print(
        f"rejected at {100 * summary['fraction_rejected']:.1f}% of stations "
        f"({100 * summary['fraction_first_better']:.1f}% first better, "
        f"{100 * summary['fraction_second_better']:.1f}% second better)"
    )
    return EXIT_OK


def cmd_importance(args):
    started = time.time()
    ckpt = EnsembleCheckpoint.load(args.checkpoint)
    ds = load_dir(args.data)
    split = _split_for(args.data, args.split_file)
    features = args.features or ckpt.models[0].input_names + [ID_FEATURE]
    results = []
    for name in features:
        try:
            res = permutation_importance(ckpt.ensemble, ds, split, name, args.reps, seed=args.seed)
        except KeyError as exc:
            raise UsageError(exc.args[0]) from None
        results.append(res)
        print(f"{name}: {res.imp_mean:+.5f} +- {res.imp_std:.5f}")
    normalize_importance(results)
    out = _out_dir(args.out)
    write_importance(results, out / "importance.csv")
    write_manifest(out, args, started, inputs=[args.data, args.checkpoint], seeds=[args.seed])
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="gnnpp", description="Graph-based post-processing of ensemble weather forecasts.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--threads", type=int, default=None, help="worker processes for ensemble training")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-stations", type=int, default=20)
    s.add_argument("--n-days", type=int, default=2600)
    s.add_argument("--n-members", type=int, default=11)
    s.add_argument("--n-features", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--bias-field", choices=["per-station", "spatially-correlated"], default="spatially-correlated")
    s.add_argument("--spread-error", type=float, default=1.0)
    s.add_argument("--corr-length", type=float, default=300.0, help="spatial correlation length in km")
    s.add_argument("--sigma-true", type=float, default=1.0)
    s.add_argument("--valid-frac", type=float, default=0.12)
    s.add_argument("--test-frac", type=float, default=0.12)
    s.add_argument("--r2f-days", type=int, default=0, help="also write an operational-style part to OUT/r2f")
    s.add_argument("--r2f-members", type=int, default=51)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train an ensemble of models")
    t.add_argument("--model", required=True, type=str.lower, choices=["gat", "smry", "ds", "drn"])
    t.add_argument("--preset", default="24h", help=f"one of {', '.join(PRESETS)}")
    t.add_argument("--data")
    t.add_argument("--split-file")
    t.add_argument("--out")
    t.add_argument("--config", help="flat key = value file overriding the preset")
    t.add_argument("--ensemble-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--hidden", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--blocks", type=int, help="number of GNN blocks (K)")
    t.add_argument("--patience", type=int)
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint or the raw ensemble")
    e.add_argument("--checkpoint")
    e.add_argument("--model", type=str.lower, choices=["ens"])
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["r2r", "r2f"], default="r2r")
    e.add_argument("--split-file")
    e.add_argument("--reference", help="report directory used as CRPSS reference (default: raw ensemble)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="per-station DM tests between two reports")
    c.add_argument("--reports", nargs=2, required=True, metavar=("A", "B"))
    c.add_argument("--alpha", type=float, default=0.05)
    c.add_argument("--demeaned", action="store_true", help="use the centred variance in the DM statistic")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    i = sub.add_parser("importance", help="two-stage permutation feature importance")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--split-file")
    i.add_argument("--reps", type=int, default=10)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--features", nargs="+")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_importance)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not args.dry_run and not (args.data and args.out):
        parser.error("train needs --data and --out")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gnnpp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, LookupError) as exc:
        print(f"gnnpp {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingAborted, FloatingPointError) as exc:
        print(f"gnnpp {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
