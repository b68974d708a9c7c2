"""Command-line pipeline: fixture-gen, train, detect, retrieve, report, serve.

Options may come from a JSON config file (--config) with keys named like the
long flags (underscores for dashes); explicit flags win over the file, the
file wins over built-in defaults. RFCAM_LOG controls log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from rfcam.detector import DetectionConfig, read_records
from rfcam.errors import NotFoundError, ValidationError
from rfcam.fixtures import FixtureSpec, fixture_gen
from rfcam.gbdt import BoostConfig
from rfcam.pipeline import load_surrogates, run_detection, save_surrogates, train_surrogates
from rfcam.retrieval import similar_instances
from rfcam.tensor_store import load_bundle

log = logging.getLogger("rfcam.cli")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


class _Parser(argparse.ArgumentParser):
    # spec'd contract: unknown flags print usage on stderr and exit 1
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_VALIDATION)


def _build_parser() -> _Parser:
    parser = _Parser(prog="rfcam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file; flags override its values")
        return p

    p = add("fixture-gen", "generate a synthetic tensor bundle with planted ground truth")
    p.add_argument("--out", help="bundle output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int, dest="num_classes")
    p.add_argument("--channels", type=int)
    p.add_argument("--map-size", type=int)
    p.add_argument("--train-per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--spurious-fraction", type=float)
    p.add_argument("--noise-sigma", type=float)

    p = add("train", "train per-class surrogate models on a bundle")
    p.add_argument("--bundle", help="bundle directory")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--rounds", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--min-child-cover", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--seed", type=int)

    p = add("detect", "run detection over the bundle's test split")
    p.add_argument("--bundle")
    p.add_argument("--out")
    p.add_argument("--theta", type=float)
    p.add_argument("--mask-threshold", type=float)
    p.add_argument("--parallelism", type=int)

    p = add("retrieve", "rank instances similar to one instance's top neural feature")
    p.add_argument("--bundle")
    p.add_argument("--out")
    p.add_argument("--instance", help="query instance id")
    p.add_argument("--top", type=int)

    p = add("report", "print per-class flag rates; write CSV and figures")
    p.add_argument("--out")

    p = add("serve", "launch the review console service")
    p.add_argument("--bundle")
    p.add_argument("--out", help="run directory holding records.jsonl and heatmaps")
    p.add_argument("--listen", help="host:port (default 127.0.0.1:8787)")
    p.add_argument("--ui", help="directory of built UI assets to serve at /")
    p.add_argument("--auto-flag-top-n", type=int)

    return parser


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    """flag > config file > default."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        loaded = json.loads(path.read_text(encoding="utf-8"))
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        merged.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _require(options: dict, *keys: str) -> None:
    missing = [k for k in keys if options.get(k) is None]
    if missing:
        raise ValidationError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")


def _cmd_fixture_gen(args) -> int:
    options = _merge(args, {
        "out": None, "seed": 0, "num_classes": 4, "channels": 64, "map_size": 7,
        "train_per_class": 200, "test_per_class": 60,
        "spurious_fraction": 0.3, "noise_sigma": 0.05,
    })
    _require(options, "out")
    spec = FixtureSpec(
        num_classes=options["num_classes"],
        channels=options["channels"],
        map_size=options["map_size"],
        train_per_class=options["train_per_class"],
        test_per_class=options["test_per_class"],
        spurious_fraction=options["spurious_fraction"],
        noise_sigma=options["noise_sigma"],
        seed=options["seed"],
    )
    bundle, truth = fixture_gen(spec, options["out"])
    test = bundle.entries_for_split("test")
    acc_note = ""
    if test:
        correct = sum(1 for e in test if e.predicted_label == e.true_label)
        acc_note = f", head test accuracy {correct / len(test):.3f}"
    print(f"wrote bundle to {options['out']}: {len(bundle.images)} instances, "
          f"{bundle.manifest.num_classes} classes{acc_note}")
    return EXIT_OK


def _boost_config(options: dict) -> BoostConfig:
    return BoostConfig(
        num_rounds=options["rounds"],
        max_depth=options["depth"],
        learning_rate=options["lr"],
        min_child_cover=options["min_child_cover"],
        l2_regularization=options["l2"],
        seed=options["seed"],
    )


def _cmd_train(args) -> int:
    options = _merge(args, {
        "bundle": None, "out": None, "rounds": 50, "depth": 4, "lr": 0.1,
        "min_child_cover": 1.0, "l2": 1.0, "seed": 0,
    })
    _require(options, "bundle", "out")
    bundle = load_bundle(options["bundle"])
    config = _boost_config(options)
    config.validate()
    models = train_surrogates(bundle, config)
    out_dir = Path(options["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_surrogates(models, out_dir)

    metrics = {
        str(c): {k: v for k, v in m.metrics.items() if k != "train_loss_curve"}
        for c, m in sorted(models.items())
    }
    (out_dir / "training_metrics.json").write_text(json.dumps(metrics, indent=1) + "\n")
    for c, m in sorted(models.items()):
        test_acc = m.metrics["test_accuracy"]
        print(f"class {c}: train acc {m.metrics['train_accuracy']:.4f}, "
              f"test acc {'n/a' if test_acc is None else format(test_acc, '.4f')}")
    print(f"wrote {len(models)} surrogates to {out_dir / 'surrogates'}")
    return EXIT_OK


def _cmd_detect(args) -> int:
    options = _merge(args, {
        "bundle": None, "out": None, "theta": 15.0, "mask_threshold": 0.78,
        "parallelism": 1,
    })
    _require(options, "bundle", "out")
    if options["parallelism"] < 1:
        raise ValidationError("parallelism must be >= 1")
    bundle = load_bundle(options["bundle"])
    try:
        models = load_surrogates(options["out"])
    except NotFoundError:
        raise ValidationError(
            f"surrogates not found under {options['out']}; run `rfcam train` first"
        ) from None
    config = DetectionConfig(mse_threshold=options["theta"], mask_threshold=options["mask_threshold"])
    config.validate()
    config_echo = {
        "bundle": str(options["bundle"]),
        "detection": config.to_json_dict(),
        "boost": next(iter(models.values())).training_config.to_json_dict(),
        "parallelism": options["parallelism"],
    }
    records, report = run_detection(
        bundle, models, config, options["out"],
        parallelism=options["parallelism"], config_echo=config_echo,
    )
    overall = report["overall"]
    print(f"detected {overall['n_flagged']} potential spurious correlations in "
          f"{overall['n_test']} test instances "
          f"({100 * overall['flag_rate_test']:.2f}% of test, "
          f"{100 * overall['flag_rate_correct']:.2f}% of correct)")
    print(f"wrote records.jsonl, report.json and heatmaps under {options['out']}")
    return EXIT_OK


def _cmd_retrieve(args) -> int:
    options = _merge(args, {"bundle": None, "out": None, "instance": None, "top": 10})
    _require(options, "bundle", "out", "instance")
    if options["top"] < 1:
        raise ValidationError("--top must be >= 1")
    bundle = load_bundle(options["bundle"])
    records_path = Path(options["out"]) / "records.jsonl"
    if not records_path.exists():
        raise FileNotFoundError(f"records not found: {records_path}; run `rfcam detect` first")
    records = {r.instance_id: r for r in read_records(records_path)}
    query = records.get(options["instance"])
    if query is None:
        raise ValidationError(f"no detection record for instance {options['instance']!r}")
    result = similar_instances(
        bundle, query.predicted_class, query.top_feature, query.instance_id, options["top"],
    )
    print(f"instances most activating feature {result.feature} "
          f"(class {result.class_index}, query {result.query_instance}):")
    print(f"{'rank':>4}  {'instance':<24} {'activation':>10}  {'status':<12}")
    for rank, (instance_id, score) in enumerate(result.ranked, start=1):
        status = records[instance_id].status if instance_id in records else "-"
        print(f"{rank:>4}  {instance_id:<24} {score:>10.5f}  {status:<12}")
    return EXIT_OK


def _cmd_report(args) -> int:
    from rfcam.report import format_per_class_table, render_report_outputs

    options = _merge(args, {"out": None})
    _require(options, "out")
    out_dir = Path(options["out"])
    report_path = out_dir / "report.json"
    if not report_path.exists():
        raise FileNotFoundError(f"report not found: {report_path}; run `rfcam detect` first")
    report = json.loads(report_path.read_text(encoding="utf-8"))
    records = read_records(out_dir / "records.jsonl")
    print(format_per_class_table(report))
    written = render_report_outputs(out_dir, report, records)
    print("\nwrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def _cmd_serve(args) -> int:
    from rfcam.service import serve

    options = _merge(args, {
        "bundle": None, "out": None, "listen": "127.0.0.1:8787", "ui": None,
        "auto_flag_top_n": 10,
    })
    _require(options, "bundle", "out")
    records_path = Path(options["out"]) / "records.jsonl"
    if not records_path.exists():
        raise FileNotFoundError(f"records not found: {records_path}; run `rfcam detect` first")
    host, _, port = options["listen"].rpartition(":")
    serve(
        records_dir=Path(options["out"]),
        bundle_dir=Path(options["bundle"]),
        host=host or "127.0.0.1",
        port=int(port),
        ui_dir=Path(options["ui"]) if options["ui"] else None,
        auto_flag_top_n=options["auto_flag_top_n"],
    )
    return EXIT_OK


_COMMANDS = {
    "fixture-gen": _cmd_fixture_gen,
    "train": _cmd_train,
    "detect": _cmd_detect,
    "retrieve": _cmd_retrieve,
    "report": _cmd_report,
    "serve": _cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("RFCAM_LOG", "WARNING").upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse --help exits 0; our error() exits 1
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
