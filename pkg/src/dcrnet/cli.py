"""Command-line interface: ``dcrnet <command> [options]``.

Commands: ``generate-data``, ``train``, ``eval``, ``analyze`` and ``sweep``.

Every run writes a JSON manifest (command line, working directory, resolved
configuration, seeds, package version, input/output files with SHA-256 and
wall time). :func:`rerun_manifest` replays a manifest and reports outputs
whose bytes differ.

Exit codes: 0 success, 1 usage, 2 configuration, 3 data, 4 numeric failure.
"""

import argparse
import contextlib
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from fractions import Fraction

from . import __version__, kernels
from .complexity import CONVENTIONS, analyze, sweep, sweep_csv
from .csi import GeneratorParams, generate_splits, generator_summary, load_datasets, save_datasets
from .errors import DataError, DcrNetError, UsageError
from .model import DcrNetConfig, build, load_checkpoint, load_config, parse_eta, receptive_field
from .serialization import atomic_write
from .train import LrSchedule, evaluate, train

MANIFEST_VERSION = 1


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    with atomic_write(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_text(path, text):
    with atomic_write(path, "w") as f:
        f.write(text)


class RunManifest:
    """Collects what one command read and wrote."""

    def __init__(self, command, argv):
        self.command = command
        self.argv = list(argv)
        self.cwd = os.getcwd()
        self.config = {}
        self.seeds = {}
        self.inputs = []
        self.outputs = []
        self._t0 = time.perf_counter()

    def add_input(self, path):
        self.inputs.append(path)

    def add_output(self, path):
        self.outputs.append(path)

    def to_dict(self):
        def files(paths):
            return [{"path": os.path.abspath(p), "sha256": _sha256(p)} for p in paths]

        return {"manifest_version": MANIFEST_VERSION, "tool": "dcrnet",
                "version": __version__, "command": self.command, "argv": self.argv,
                "cwd": self.cwd, "config": self.config, "seeds": self.seeds,
                "kernel_backend": kernels.BACKEND, "inputs": files(self.inputs),
                "outputs": files(self.outputs),
                "wall_seconds": round(time.perf_counter() - self._t0, 3)}

    def write(self, path):
        _write_json(path, self.to_dict())


# -- argument helpers ----------------------------------------------------------

def _int_range(text):
    """``2..4`` or ``3`` -> (lo, hi)."""
    lo, sep, hi = text.partition("..")
    try:
        lo = int(lo)
        hi = int(hi) if sep else lo
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO..HI, got {text!r}") from None
    return lo, hi


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _eta_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _model_config(args):
    config = load_config(args.config) if args.config else DcrNetConfig()
    changes = {}
    if getattr(args, "eta", None) is not None and not isinstance(args.eta, list):
        changes["eta"] = parse_eta(args.eta)
    if getattr(args, "rho", None) is not None and not isinstance(args.rho, list):
        changes["rho"] = args.rho
    if getattr(args, "ablation", None) is not None:
        changes["ablation"] = args.ablation
    return replace(config, **changes) if changes else config


def _config_dict(config):
    return {"na": config.na, "nt": config.nt, "eta": str(config.eta), "rho": config.rho,
            "ablation": config.ablation.value, "decoder_groups": config.decoder_groups}


# -- commands ------------------------------------------------------------------

def cmd_generate(args, man):
    params = GeneratorParams(na=args.na, nt=args.nt, nc=args.nc, clusters=args.clusters,
                             decay=args.decay, spread=args.spread, onset=args.onset)
    n_val = args.samples // 10 if args.val is None else args.val
    n_test = args.samples // 10 if args.test is None else args.test
    counts = {"train": args.samples}
    if n_val:
        counts["val"] = n_val
    if n_test:
        counts["test"] = n_test
    splits = generate_splits(counts, params, args.seed)
    save_datasets(args.out, splits)
    man.config = {"generator": generator_summary(params), "counts": counts}
    man.seeds = {"data": args.seed}
    man.add_output(args.out)
    meta = splits["train"].norm
    print(f"wrote {args.out}: " + ", ".join(f"{k}={v}" for k, v in counts.items())
          + f"; min {meta.lo:.6g} max {meta.hi:.6g}")
    return 0


def _split(splits, name, path):
    if name not in splits:
        raise DataError(f"{path} has no {name!r} split (has: {', '.join(sorted(splits))})")
    return splits[name]


def cmd_train(args, man):
    config = _model_config(args)
    splits = load_datasets(args.data)
    man.add_input(args.data)
    train_set = _split(splits, "train", args.data)
    val_set = _split(splits, "val", args.data)
    if not args.config:
        # without a config file the matrix size follows the data
        config = replace(config, na=train_set.na, nt=train_set.nt)
    total = args.schedule_epochs or args.epochs
    warmup = args.warmup if args.warmup is not None else min(10, total - 1)
    schedule = LrSchedule(args.lr_min, args.lr_max, warmup, total)
    init_seed = args.seed if args.init_seed is None else args.init_seed
    model = build(config, init_seed)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "config.txt"), config.to_text())
    report = train(model, train_set, val_set, schedule, args.epochs, args.batch, args.seed,
                   args.out, log=None if args.quiet else print)
    summary = report.summary()
    summary["config"] = _config_dict(config)
    _write_json(os.path.join(args.out, "report.json"), summary)
    man.config = {"model": _config_dict(config), "epochs": args.epochs,
                  "batch_size": args.batch,
                  "schedule": {"gamma_min": schedule.gamma_min, "gamma_max": schedule.gamma_max,
                               "warmup": schedule.warmup, "total": schedule.total}}
    man.seeds = {"shuffle": args.seed, "init": init_seed}
    for name in ("config.txt", "metrics.csv", "best.dcrc", "final.dcrc", "report.json"):
        man.add_output(os.path.join(args.out, name))
    print(f"best val NMSE {report.best_val_nmse_db:.3f} dB at epoch {report.best_epoch}; "
          f"final train {report.final_train_nmse_db:.3f} dB, "
          f"val {report.final_val_nmse_db:.3f} dB")
    return 0


def cmd_eval(args, man):
    model = load_checkpoint(args.checkpoint)
    man.add_input(args.checkpoint)
    splits = load_datasets(args.data)
    man.add_input(args.data)
    ds = _split(splits, args.split, args.data)
    res = evaluate(model, ds)
    c = model.config
    rep1 = analyze(model, "mac1")
    out = args.out or os.path.splitext(args.checkpoint)[0] + f".{args.split}.eval.json"
    result = {"nmse_db": res.db, "nmse_linear": res.linear, "samples": res.samples,
              "skipped": res.skipped, "split": args.split, "eta": str(c.eta), "rho": c.rho,
              "ablation": c.ablation.value, "params": rep1.total_params,
              "flops": rep1.total_flops, "flops_mac2": analyze(model, "mac2").total_flops}
    _write_json(out, result)
    man.config = {"model": _config_dict(c), "split": args.split}
    man.add_output(out)
    print(f"NMSE ({args.split}, {res.samples} samples): {res.db:.4f} dB")
    return 0


def _print_analysis(config, elementwise, layers, convention):
    model = build(config, 0)
    reps = {conv: analyze(model, conv, elementwise) for conv in CONVENTIONS}
    rep = reps[convention]
    ew = "included" if elementwise else "excluded"
    print(f"config: na={config.na} nt={config.nt} eta={config.eta} rho={config.rho} "
          f"ablation={config.ablation.value}")
    print(f"params: {rep.total_params} total, {rep.params_without_bn} conv+fc, "
          f"{rep.bn_prelu_params} bn+prelu")
    for conv in CONVENTIONS:
        r = reps[conv]
        print(f"flops [{conv}, elementwise {ew}]: {r.total_flops} "
              f"(conv {r.subtotal('conv')}, fc {r.subtotal('fc')}, bn {r.subtotal('bn')}, "
              f"prelu {r.subtotal('prelu')}, add {r.subtotal('add')})")
    for part in ("encoder_dilated", "encoder_block", "encoder", "decoder_block"):
        print(f"receptive field {part}: {receptive_field(model, part)}")
    if layers:
        print(f"{'layer':44s} {'kind':6s} {'params':>9s} {'flops':>10s}  k_eff  rf")
        for r in rep.rows:
            print(f"{r.name:44s} {r.kind:6s} {r.params:9d} {r.flops:10d}  "
                  f"{r.k_eff or ''}  {r.rf or ''}")
    return rep


def cmd_analyze(args, man):
    config = _model_config(args)
    elementwise = not args.no_elementwise
    rep = _print_analysis(config, elementwise, args.layers, args.convention)
    man.config = {"model": _config_dict(config), "convention": args.convention,
                  "elementwise": elementwise}
    if args.config:
        man.add_input(args.config)
    if args.csv:
        _write_text(args.csv, rep.to_csv())
        man.add_output(args.csv)
    return 0


def _load_results(paths):
    out = {}
    for path in paths:
        try:
            with open(path) as f:
                r = json.load(f)
            out[(int(r["rho"]), Fraction(r["eta"]))] = float(r["nmse_db"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"cannot read eval result {path}: {exc}") from None
    return out


def cmd_sweep(args, man):
    base = _model_config(args)
    elementwise = not args.no_elementwise
    nmse = _load_results(args.results)
    for p in args.results:
        man.add_input(p)
    rows = []
    for eta in args.eta:
        rows += sweep(args.rho, replace(base, eta=parse_eta(eta)), elementwise, nmse)
    print(f"{'rho':>4s} {'eta':>6s} {'params':>9s} {'flops mac1':>11s} {'flops mac2':>11s}"
          f" {'nmse dB':>8s}")
    for r in rows:
        db = "" if r.nmse_db is None else f"{r.nmse_db:.2f}"
        print(f"{r.rho:4d} {str(r.eta):>6s} {r.params:9d} {r.flops_mac1:11d} "
              f"{r.flops_mac2:11d} {db:>8s}")
    man.config = {"model": _config_dict(base), "rho": args.rho, "eta": args.eta,
                  "elementwise": elementwise}
    if args.csv:
        _write_text(args.csv, sweep_csv(rows))
        man.add_output(args.csv)
    return 0


# -- parser --------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--manifest", help="manifest path (default depends on the command)")

    model = _Parser(add_help=False)
    model.add_argument("--config", help="model config file (key=value lines)")
    model.add_argument("--ablation", choices=("full", "m1", "baseline"))

    p = _Parser(prog="dcrnet", description="DCRNet CSI feedback autoencoder tools.")
    p.add_argument("--version", action="version", version=f"dcrnet {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate-data", parents=[common], help="synthesize a CSI dataset file")
    g.add_argument("--samples", type=int, required=True, help="training samples")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--val", type=int, help="validation samples (default samples/10)")
    g.add_argument("--test", type=int, help="test samples (default samples/10)")
    d = GeneratorParams()
    g.add_argument("--clusters", type=_int_range, default=d.clusters, help="LO..HI per sample")
    g.add_argument("--decay", type=float, default=d.decay, help="delay power decay in taps")
    g.add_argument("--spread", type=float, default=d.spread, help="angular spread in bins")
    g.add_argument("--onset", type=float, default=d.onset,
                   help="cluster onsets drawn in [0, onset*Na)")
    g.add_argument("--na", type=int, default=d.na)
    g.add_argument("--nt", type=int, default=d.nt)
    g.add_argument("--nc", type=int, default=d.nc)
    g.set_defaults(func=cmd_generate, manifest_default=lambda a: a.out + ".manifest.json")

    t = sub.add_parser("train", parents=[common, model], help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--schedule-epochs", type=int,
                   help="schedule length T (default: --epochs)")
    t.add_argument("--warmup", type=int, help="warm-up epochs (default min(10, T-1))")
    t.add_argument("--lr-min", type=float, default=LrSchedule.gamma_min)
    t.add_argument("--lr-max", type=float, default=LrSchedule.gamma_max)
    t.add_argument("--batch", type=int, default=200)
    t.add_argument("--seed", type=int, default=0, help="shuffle seed")
    t.add_argument("--init-seed", type=int, help="weight init seed (default: --seed)")
    t.add_argument("--eta")
    t.add_argument("--rho", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train, manifest_default=lambda a: os.path.join(a.out, "manifest.json"))

    e = sub.add_parser("eval", parents=[common], help="NMSE of a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=("train", "val", "test"))
    e.add_argument("--out", help="result JSON (default <checkpoint>.<split>.eval.json)")
    e.set_defaults(func=cmd_eval, manifest_default=lambda a: (
        a.out or os.path.splitext(a.checkpoint)[0] + f".{a.split}.eval.json") + ".manifest.json")

    a = sub.add_parser("analyze", parents=[common, model], help="parameters, FLOPs and RF")
    a.add_argument("--eta")
    a.add_argument("--rho", type=int)
    a.add_argument("--convention", choices=CONVENTIONS, default="mac1",
                   help="MAC convention of the per-layer CSV")
    a.add_argument("--no-elementwise", action="store_true",
                   help="count only conv and FC multiply-accumulates")
    a.add_argument("--layers", action="store_true", help="print the per-layer table")
    a.add_argument("--csv", help="write the per-layer table as CSV")
    a.set_defaults(func=cmd_analyze, manifest_default=lambda a: (
        a.csv + ".manifest.json" if a.csv else "analyze.manifest.json"))

    s = sub.add_parser("sweep", parents=[common, model], help="complexity across widths")
    s.add_argument("--rho", type=_int_list, default=[1, 4, 8, 10, 12])
    s.add_argument("--eta", type=_eta_list, default=["1/4"])
    s.add_argument("--results", nargs="*", default=[], help="eval JSON files to attach NMSE")
    s.add_argument("--no-elementwise", action="store_true")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_sweep, manifest_default=lambda a: (
        a.csv + ".manifest.json" if a.csv else "sweep.manifest.json"))
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv:
            parser.print_usage(sys.stderr)
            return UsageError.exit_code
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return UsageError.exit_code
        man = RunManifest(args.command, argv)
        code = args.func(args, man)
        man.write(args.manifest or args.manifest_default(args))
        return code
    except DcrNetError as exc:
        print(f"dcrnet: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else 0
    except OSError as exc:
        print(f"dcrnet: error: {exc}", file=sys.stderr)
        return DataError.exit_code


@contextlib.contextmanager
def _chdir(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def rerun_manifest(path, manifest_out=None):
    """Replay a manifest's command line from its working directory.

    Returns ``(exit_code, mismatches)`` where ``mismatches`` lists output files
    whose SHA-256 differs from the recorded one.
    """
    try:
        with open(path) as f:
            recorded = json.load(f)
        argv, cwd = list(recorded["argv"]), recorded["cwd"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    if "--manifest" in argv:
        i = argv.index("--manifest")
        del argv[i:i + 2]
    if manifest_out is None:
        manifest_out = os.path.abspath(path) + ".rerun.json"
    manifest_out = os.path.abspath(os.fspath(manifest_out))
    with _chdir(cwd):
        code = main(argv + ["--manifest", manifest_out])
    if code != 0:
        return code, [o["path"] for o in recorded["outputs"]]
    mismatches = [o["path"] for o in recorded["outputs"]
                  if not os.path.exists(o["path"]) or _sha256(o["path"]) != o["sha256"]]
    return code, mismatches


if __name__ == "__main__":
    raise SystemExit(main())
