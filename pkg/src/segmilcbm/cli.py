"""Command-line interface: build bags, generate synthetic data, train,
evaluate, corrupt, and merge multi-seed reports.

Exit codes: 0 ok, 2 schema/data error, 3 I/O error, 4 config error. Options
can come from a single JSON config file (--config); explicit flags override
config keys, which override the built-in defaults shown in --help. All
randomness flows from --seed; output files carry no timestamps, so a rerun
with identical inputs and seed is byte-identical.
"""

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__
from .bagbuild import BuildConfig, build_bag, iter_rawdet
from .bagio import iter_bagpack, read_bagpack, write_bagpack
from .errors import ConfigError, ProtocolError, SchemaError
from .metrics import (
    CorruptionReport,
    EvalReport,
    aggregate_values,
    corruption_eval,
    evaluate,
    seed_aggregate,
)
from .milmodel import explanation_record, forward
from .synthbench import CORRUPTION_KINDS, SynthSpec, corrupt, generate_files
from .training import (
    TrainConfig,
    format_training_log,
    read_checkpoint,
    train,
    write_checkpoint,
)
from .kernels import get_backend


def _default_workers() -> int:
    raw = os.environ.get("SEGMILCBM_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# Option registry: dest -> (type, default, help). Flags default to None in
# argparse so the flag > config > default resolution chain can tell whether
# a flag was given explicitly.
OPTIONS = {
    "k_top": (int, 8, "concepts kept per image after similarity ranking"),
    "tau_iou": (float, 0.5, "IoU threshold above which masks merge"),
    "tau_minpix": (int, 100, "minimum mask area in pixels"),
    "rho_max": (float, 0.5, "maximum mask area as a fraction of the image"),
    "max_instances": (int, 15, "bag size cap N_s; largest-area segments kept"),
    "lr": (float, 1e-4, "Adam learning rate"),
    "beta1": (float, 0.9, "Adam first-moment decay"),
    "beta2": (float, 0.999, "Adam second-moment decay"),
    "eps_adam": (float, 1e-8, "Adam denominator epsilon"),
    "lambda_concept": (float, 0.1, "concept alignment loss weight"),
    "epochs": (int, 50, "training epochs"),
    "batch_bags": (int, 16, "bags per training batch"),
    "seed": (int, 0, "master seed for init, shuffling, and generation"),
    "easy_hard": (bool, False, "alternate easy/hard batches after warmup"),
    "warmup_epochs": (int, 5, "plain-shuffle epochs before easy/hard kicks in"),
    "easy_quantile": (float, 0.5, "confidence quantile defining the easy pool"),
    "attention": (str, "mlp", "attention form: mlp, linear, or uniform"),
    "attention_hidden": (int, 128, "attention MLP hidden width"),
    "temperature": (float, 1.0, "attention softmax temperature T"),
    "aggregate_normalized": (bool, True, "pool normalized concept rows"),
    "kernel": (str, "auto", "kernel backend: auto, compiled, or numpy"),
    "workers": (int, None, "parallel workers (env SEGMILCBM_WORKERS)"),
    "n_train": (int, 1600, "synthetic training bags"),
    "n_test": (int, 800, "synthetic test bags (multiple of 4)"),
    "dim": (int, 16, "synthetic embedding dimension D"),
    "concepts": (int, 12, "synthetic concept count C"),
    "spurious_corr": (float, 0.95, "P(background matches class) in train"),
    "n_core": (int, 2, "core instances per synthetic bag"),
    "n_spur": (int, 3, "background instances per synthetic bag"),
    "noise_sigma": (float, 0.42, "synthetic embedding noise std"),
    "kinds": (str, ",".join(CORRUPTION_KINDS), "comma-separated corruption kinds"),
    "top_m": (int, 5, "concepts listed per explanation entry"),
    "seeds": (int, 3, "seeds expected when merging multi-seed reports"),
}

_BUILD_KEYS = ("k_top", "tau_iou", "tau_minpix", "rho_max", "max_instances")
_TRAIN_KEYS = (
    "lr", "beta1", "beta2", "eps_adam", "lambda_concept", "epochs", "batch_bags",
    "seed", "easy_hard", "warmup_epochs", "easy_quantile", "attention",
    "attention_hidden", "temperature", "aggregate_normalized", "kernel",
)
_SYNTH_KEYS = (
    "n_train", "n_test", "dim", "concepts", "spurious_corr", "n_core", "n_spur",
    "noise_sigma", "seed",
)


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(4)


def _add_options(parser, keys):
    for key in keys:
        typ, default, help_text = OPTIONS[key]
        flag = "--" + key.replace("_", "-")
        if typ is bool:
            parser.add_argument(
                flag,
                dest=key,
                action=argparse.BooleanOptionalAction,
                default=None,
                help=f"{help_text} [default: {default}]",
            )
        else:
            shown = OPTIONS[key][1] if key != "workers" else "env or 1"
            parser.add_argument(
                flag,
                dest=key,
                type=typ,
                default=None,
                help=f"{help_text} [default: {shown}]",
            )


class Settings:
    """Flag > config-file > default resolution over the option registry."""

    def __init__(self, args):
        self.args = args
        self.config = {}
        if getattr(args, "config", None):
            with open(args.config, "r", encoding="utf-8") as fh:
                try:
                    self.config = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
            if not isinstance(self.config, dict):
                raise ConfigError(f"{args.config}: config must be a JSON object")
            unknown = set(self.config) - set(OPTIONS)
            if unknown:
                raise ConfigError(f"unknown config key(s): {sorted(unknown)}")

    def get(self, key):
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        if key in self.config:
            typ = OPTIONS[key][0]
            value = self.config[key]
            if typ is bool:
                if not isinstance(value, bool):
                    raise ConfigError(f"config key {key} must be a boolean")
                return value
            try:
                return typ(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
        if key == "workers":
            return _default_workers()
        return OPTIONS[key][1]

    def build_config(self) -> BuildConfig:
        cfg = BuildConfig(**{k: self.get(k) for k in _BUILD_KEYS})
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(**{k: self.get(k) for k in _TRAIN_KEYS})
        cfg.validate()
        return cfg

    def synth_spec(self) -> SynthSpec:
        spec = SynthSpec(
            n_train=self.get("n_train"),
            n_test=self.get("n_test"),
            D=self.get("dim"),
            C=self.get("concepts"),
            spurious_corr=self.get("spurious_corr"),
            n_core=self.get("n_core"),
            n_spur=self.get("n_spur"),
            noise_sigma=self.get("noise_sigma"),
            seed=self.get("seed"),
        )
        spec.validate()
        return spec


def cmd_build_bags(args) -> int:
    settings = Settings(args)
    cfg = settings.build_config()
    stream = iter_rawdet(args.rawdet)
    manifest = next(stream)
    bags = []
    for raw in stream:
        bag, counts = build_bag(raw, manifest, cfg)
        bags.append(bag)
        print(
            f"{raw.image_id}: detections={counts.detections} "
            f"selected={counts.selected} kept={counts.kept_after_filter} "
            f"merged={counts.merged} in_bag={counts.in_bag}"
        )
    write_bagpack(manifest, bags, args.out)
    print(f"wrote {len(bags)} bags to {args.out}")
    return 0


def cmd_gen_synth(args) -> int:
    settings = Settings(args)
    spec = settings.synth_spec()
    train_path, test_path = generate_files(spec, args.out_dir)
    print(f"wrote {train_path} and {test_path}")
    return 0


def cmd_train(args) -> int:
    settings = Settings(args)
    cfg = settings.train_config()
    manifest, bags = read_bagpack(args.data)
    def progress(stats):
        print(
            f"epoch {stats.epoch}: loss_cls={stats.loss_cls:.6f} "
            f"loss_concept={stats.loss_concept:.6f} loss_total={stats.loss_total:.6f} "
            f"train_acc={stats.train_acc:.4f} wall_ms={stats.wall_ms:.1f}",
            file=sys.stderr,
        )
    result = train(manifest, bags, cfg, progress=progress)
    write_checkpoint(args.checkpoint_out, result.params)
    if args.log_out:
        with open(args.log_out, "w", encoding="utf-8") as fh:
            fh.write(format_training_log(result.log))
    for note in result.notes:
        print(note, file=sys.stderr)
    print(f"trained {cfg.epochs} epochs ({result.backend} kernel); "
          f"checkpoint at {args.checkpoint_out}")
    return 0


def _read_suite(suite_dir):
    suite = {}
    for name in sorted(os.listdir(suite_dir)):
        if not name.endswith(".bagpack"):
            continue
        stem = name[: -len(".bagpack")]
        if "_s" not in stem:
            raise ProtocolError(f"unrecognized suite file name {name!r}")
        kind, _, sev = stem.rpartition("_s")
        if not sev.isdigit():
            raise ProtocolError(f"unrecognized suite file name {name!r}")
        _, bags = read_bagpack(os.path.join(suite_dir, name))
        suite.setdefault(kind, {})[int(sev)] = bags
    if not suite:
        raise ProtocolError(f"no *.bagpack suite files found in {suite_dir}")
    return suite


def _eval_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["record", "group", "value", "n"])
    writer.writerow(["avg_acc", "", repr(report.avg_acc), report.n_total])
    if report.worst_group_acc is not None:
        writer.writerow(["worst_group_acc", "", repr(report.worst_group_acc), report.n_total])
        for g, acc in sorted(report.per_group_acc.items()):
            writer.writerow(["group_acc", g, repr(acc), report.n_per_group[g]])
    return buf.getvalue()


def _corruption_csv(report: CorruptionReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["record", "corruption", "severity", "value"])
    writer.writerow(["clean_acc", "", "", repr(report.clean_acc)])
    for (kind, severity), acc in sorted(report.cell_acc.items()):
        writer.writerow(["severity_acc", kind, severity, repr(acc)])
    for kind, ce in sorted(report.ce_per_corruption.items()):
        writer.writerow(["corruption_ce", kind, "", repr(ce)])
    writer.writerow(["overall_ce", "", "", repr(report.overall_ce)])
    return buf.getvalue()


def cmd_eval(args) -> int:
    settings = Settings(args)
    workers = settings.get("workers")
    params = read_checkpoint(args.checkpoint)
    backend = get_backend(settings.get("kernel"))
    manifest, bags = read_bagpack(args.data)
    report = evaluate(params, bags, backend=backend, workers=workers)
    if args.worst_group and report.worst_group_acc is None:
        raise SchemaError(
            "worst-group accuracy requested but the split carries no group ids"
        )
    payload = {"eval": report.to_dict()}
    if args.suite_dir:
        baseline = None
        if args.baseline_ce:
            with open(args.baseline_ce, "r", encoding="utf-8") as fh:
                baseline = {k: float(v) for k, v in json.load(fh).items()}
        corruption = corruption_eval(
            params, bags, _read_suite(args.suite_dir),
            backend=backend, workers=workers, baseline_ce=baseline,
        )
        payload["corruption"] = corruption.to_dict()
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.csv:
        text = _eval_csv(report)
        if args.suite_dir:
            text += _corruption_csv(corruption)
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(text)
    if args.explain_out:
        top_m = min(settings.get("top_m"), manifest.C)
        with open(args.explain_out, "w", encoding="utf-8") as fh:
            for bag in bags:
                H = np.asarray([inst.embedding for inst in bag.instances])
                record = explanation_record(
                    bag, forward(params, H), manifest.concept_names, top_m
                )
                fh.write(json.dumps(record, allow_nan=False) + "\n")
    print(f"avg_acc={report.avg_acc:.4f}" + (
        f" worst_group_acc={report.worst_group_acc:.4f}"
        if report.worst_group_acc is not None else ""
    ))
    return 0


def cmd_corrupt(args) -> int:
    settings = Settings(args)
    seed = settings.get("seed")
    kinds = [k for k in settings.get("kinds").split(",") if k]
    manifest, bags = read_bagpack(args.data)
    os.makedirs(args.out_dir, exist_ok=True)
    if args.severities:
        try:
            severities = [int(s) for s in args.severities.split(",")]
        except ValueError as exc:
            raise ConfigError(f"severities must be integers: {exc}") from exc
    else:
        severities = list(range(1, 6))
    for kind in kinds:
        for severity in severities:
            corrupted = corrupt(bags, kind, severity, seed)
            path = os.path.join(args.out_dir, f"{kind}_s{severity}.bagpack")
            write_bagpack(manifest, corrupted, path)
            print(f"wrote {path}")
    return 0


def _load_report_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(payload, dict) or "eval" not in payload:
        raise SchemaError(f"{path}: missing 'eval' section")
    e = payload["eval"]
    report = EvalReport(
        avg_acc=e["avg_acc"],
        worst_group_acc=e.get("worst_group_acc"),
        per_group_acc={int(k): v for k, v in e.get("per_group_acc", {}).items()},
        n_per_group={int(k): v for k, v in e.get("n_per_group", {}).items()},
        n_total=e.get("n_total", 0),
        n_correct=e.get("n_correct", 0),
    )
    return report, payload.get("corruption")


def cmd_report(args) -> int:
    settings = Settings(args)
    expected = settings.get("seeds")
    loaded = [_load_report_json(path) for path in args.inputs]
    if len(loaded) != expected:
        print(
            f"note: merging {len(loaded)} reports, protocol expects {expected} seeds",
            file=sys.stderr,
        )
    reports = [r for r, _ in loaded]
    stats = seed_aggregate(reports)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["record", "corruption", "severity", "mean", "std", "ci95", "n"])

    def fmt(x):
        return "" if x is None else repr(x)

    for name, fs in stats.items():
        writer.writerow([name, "", "", repr(fs.mean), fmt(fs.std), fmt(fs.ci95), fs.n])

    corruption_payloads = [c for _, c in loaded if c is not None]
    if corruption_payloads:
        if len(corruption_payloads) != len(loaded):
            raise SchemaError("some inputs carry corruption sections and some do not")
        cells = {}
        for payload in corruption_payloads:
            for cell in payload["cells"]:
                cells.setdefault((cell["corruption"], cell["severity"]), []).append(cell["acc"])
        for (kind, severity), values in sorted(cells.items()):
            fs = aggregate_values(values)
            writer.writerow(
                ["severity_acc", kind, severity, repr(fs.mean), fmt(fs.std), fmt(fs.ci95), fs.n]
            )
        ce = {}
        for payload in corruption_payloads:
            for kind, value in payload["ce_per_corruption"].items():
                ce.setdefault(kind, []).append(value)
        for kind, values in sorted(ce.items()):
            fs = aggregate_values(values)
            writer.writerow(
                ["corruption_ce", kind, "", repr(fs.mean), fmt(fs.std), fmt(fs.ci95), fs.n]
            )
        overall = aggregate_values([p["overall_ce"] for p in corruption_payloads])
        writer.writerow(
            ["overall_ce", "", "", repr(overall.mean), fmt(overall.std), fmt(overall.ci95), overall.n]
        )
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    print(f"wrote {args.out}")
    return 0


def build_parser() -> Parser:
    parser = Parser(
        prog="segmilcbm",
        description=(
            "Concept-guided bag construction, attention-MIL concept-bottleneck "
            "training, and robustness evaluation. Embeddings are consumed as "
            "data; fine-tuning a backbone happens outside this tool, before "
            "export."
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-bags", help="construct bags from a rawdet file")
    p.add_argument("--rawdet", required=True, help="input rawdet JSONL")
    p.add_argument("--out", required=True, help="output bagpack path")
    p.add_argument("--config", help="JSON config file")
    _add_options(p, _BUILD_KEYS)
    p.set_defaults(func=cmd_build_bags)

    p = sub.add_parser("gen-synth", help="generate the synthetic benchmark")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file")
    _add_options(p, _SYNTH_KEYS)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train on a bagpack file")
    p.add_argument("--data", required=True, help="training bagpack")
    p.add_argument("--checkpoint-out", required=True, help="checkpoint output path")
    p.add_argument("--log-out", help="training log CSV output path")
    p.add_argument("--config", help="JSON config file")
    _add_options(p, _TRAIN_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a bagpack file")
    p.add_argument("--data", required=True, help="evaluation bagpack")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--out", required=True, help="report JSON output path")
    p.add_argument("--csv", help="also write a CSV report here")
    p.add_argument("--worst-group", action="store_true",
                   help="fail (exit 2) unless worst-group accuracy is available")
    p.add_argument("--suite-dir", help="directory of <kind>_s<severity>.bagpack files")
    p.add_argument("--baseline-ce", help="JSON of per-corruption baseline CE for mCE ratios")
    p.add_argument("--explain-out", help="write explanation JSONL here")
    p.add_argument("--config", help="JSON config file")
    _add_options(p, ("kernel", "workers", "top_m"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("corrupt", help="write corrupted copies of a bagpack")
    p.add_argument("--data", required=True, help="input bagpack")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--severities", help="comma-separated severities [default: 1,2,3,4,5]")
    p.add_argument("--config", help="JSON config file")
    _add_options(p, ("kinds", "seed"))
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("report", help="merge multi-seed eval JSONs into a CSV")
    p.add_argument("--inputs", nargs="+", required=True, help="eval JSON files")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--config", help="JSON config file")
    _add_options(p, ("seeds",))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4
    except (SchemaError, ProtocolError) as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
