"""``oavnn`` command line.

Exit codes: 0 success, 1 a check reported a failure, 2 usage, config or
parse error, 3 degenerate input, 4 numerical failure.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import probes, report
from .errors import (
    ConfigError,
    ContractViolation,
    DegenerateCloudError,
    DegenerateDirectionError,
    DomainError,
    FormatError,
    NumericalError,
    ParseError,
)
from .geometry import SHAPE_KINDS, ShapeSpec, gen_shape, load_xyz, mirror_residual, save_xyz
from .model import ModelConfig, evaluate, load_checkpoint, save_checkpoint, train
from .symmetry import (
    DEFAULT_SHELLS,
    accuracy_best_sign,
    on_plane_mask,
    plane_classifier,
    planar_symmetry_direction,
)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_DEGENERATE, EXIT_NUMERICAL = 0, 1, 2, 3, 4
MANIFEST = "manifest.json"
log = logging.getLogger("oavnn")


def _echo(args):
    """Print the effective configuration (all defaults filled in) to stderr."""
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    print("config: " + json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        spec = ShapeSpec(args.kind, args.points, args.seed + i, args.jitter)
        cloud = gen_shape(spec)
        fname = f"{args.kind}_{i:04d}.xyz"
        save_xyz(cloud, out / fname)
        entries.append(
            {"file": fname, "spec": dataclasses.asdict(spec), "mirror_residual": mirror_residual(cloud.points)}
        )
    manifest = {
        "kind": args.kind,
        "count": args.count,
        "points": args.points,
        "jitter": args.jitter,
        "seed": args.seed,
        "files": entries,
    }
    with open(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    print(f"wrote {args.count} clouds to {out}")
    return EXIT_OK


def load_dataset(path):
    """Clouds from an XYZ file, a directory of XYZ files, or a manifest."""
    p = Path(path)
    if p.is_dir():
        if (p / MANIFEST).exists():
            with open(p / MANIFEST) as fh:
                files = [p / e["file"] for e in json.load(fh)["files"]]
        else:
            files = sorted(p.glob("*.xyz"))
    elif p.exists():
        files = [p]
    else:
        raise ConfigError(f"no such data path: {path}")
    if not files:
        raise ConfigError(f"no .xyz files under {path}")
    return [load_xyz(f, name=f.name) for f in files]


# ---------------------------------------------------------------------------
# symmetry
# ---------------------------------------------------------------------------


def cmd_detect_symmetry(args):
    cloud = load_xyz(args.file)
    est = planar_symmetry_direction(cloud, args.shells)
    doc = {
        "file": str(args.file),
        "c": est.direction.tolist(),
        "norm": est.magnitude,
        "unit_direction": None if est.degenerate else est.unit_direction.tolist(),
        "degenerate": est.degenerate,
        "shells": est.n_shells,
    }
    if args.json:
        print(json.dumps(doc))
        return EXIT_OK
    print(f"c               {' '.join(f'{x:.17g}' for x in est.direction)}")
    print(f"|c|             {est.magnitude:.6g}")
    if est.degenerate:
        print("unit direction  degenerate: multi-plane/isotropic")
    else:
        print(f"unit direction  {' '.join(f'{x:.9f}' for x in est.unit_direction)}")
    print(f"shells          {est.n_shells}")
    return EXIT_OK


def cmd_segment_plane(args):
    cloud = load_xyz(args.file)
    if cloud.labels is None:
        raise ConfigError(f"{args.file}: segment-plane needs a labeled file")
    est = planar_symmetry_direction(cloud, args.shells)
    if est.degenerate:
        raise DegenerateDirectionError(
            f"symmetry direction vanished (|c| = {est.magnitude:.3g}): the cloud has two or "
            "more mirror planes or no preferred plane, so no single cut exists"
        )
    pred = plane_classifier(cloud, est.direction)
    keep = ~on_plane_mask(cloud, est.direction)
    acc = accuracy_best_sign(pred[keep], cloud.labels[keep])
    lines = ["index,label"] + [f"{i},{lab}" for i, lab in enumerate(pred)]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    print(f"accuracy {acc:.6f} ({int(keep.sum())} of {len(cloud)} points off the plane)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

RUN_DEFAULTS = {
    "kind": "airplane",
    "n_points": 256,
    "jitter": 0.0,
    "train_count": 200,
    "test_count": 50,
    "train_seed": 0,
    "test_seed": 1000,
    "train_dir": None,
    "test_dir": None,
    "out_dir": "runs/run",
}


def run_config(doc):
    """Split and validate a run document; returns ``(model_config, run_opts, effective)``."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(doc) - model_keys - set(RUN_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        mcfg = ModelConfig.from_dict({k: v for k, v in doc.items() if k in model_keys})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    run = {**RUN_DEFAULTS, **{k: v for k, v in doc.items() if k in RUN_DEFAULTS}}
    if run["kind"] not in SHAPE_KINDS:
        raise ConfigError(f"unknown kind {run['kind']!r}")
    return mcfg, run, {**mcfg.to_dict(), **run}


def _parse_override(text):
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def _dataset(run, split):
    d = run[f"{split}_dir"]
    if d:
        return load_dataset(d)
    seed = run[f"{split}_seed"]
    return [
        gen_shape(ShapeSpec(run["kind"], run["n_points"], seed + i, run["jitter"]))
        for i in range(run[f"{split}_count"])
    ]


def cmd_train(args):
    doc = {}
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    for item in args.set or ():
        k, v = _parse_override(item)
        doc[k] = v
    mcfg, run, effective = run_config(doc)
    print("config: " + json.dumps(effective, sort_keys=True), file=sys.stderr)
    out = Path(run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(effective, fh, indent=2, sort_keys=True)
        fh.write("\n")
    model, metrics = train(mcfg, _dataset(run, "train"), _dataset(run, "test"))
    report.write_metrics_csv(metrics, out / report.METRICS_FILE)
    summary = report.summarize(mcfg.variant, metrics)
    report.write_summary(summary, out / report.SUMMARY_FILE)
    save_checkpoint(model, out / "checkpoint.json", extra={"summary": summary})
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    acc = evaluate(model, load_dataset(args.data))
    print(f"accuracy {acc!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# checks and reports
# ---------------------------------------------------------------------------


def cmd_check_equivariance(args):
    if args.stage != "all" and args.stage not in probes.STAGES:
        raise ConfigError(f"unknown stage {args.stage!r}; choose from all, {', '.join(probes.STAGES)}")
    stages = list(probes.STAGES) if args.stage == "all" else [args.stage]
    results = probes.probe_all(args.trials, args.improper, args.seed, stages)
    width = max(len(r.stage) for r in results)
    print(f"{'stage':<{width}}  {'behavior':<11}  {'max error':>9}  {'tolerance':>9}  verdict")
    for r in results:
        print(f"{r.stage:<{width}}  {r.behavior:<11}  {r.max_error:9.2e}  {r.tolerance:9.0e}  {r.verdict}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_check_gradients(args):
    if args.layer != "all" and args.layer not in probes.GRADIENT_LAYERS:
        raise ConfigError(f"unknown layer {args.layer!r}; choose from all, {', '.join(probes.GRADIENT_LAYERS)}")
    names = probes.GRADIENT_LAYERS if args.layer == "all" else [args.layer]
    results = [r for n in names for r in probes.gradient_check(n, args.seed)]
    print(f"{'layer':<16}  {'arg':<4}  {'max rel err':>11}  verdict")
    for r in results:
        print(f"{r.layer:<16}  {r.argument:<4}  {r.max_error:11.2e}  {'pass' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_report(args):
    groups = report.collect_runs(args.runs)
    if not groups:
        raise ConfigError(f"no {report.METRICS_FILE} files under {args.runs}")
    Path(args.out).write_text(report.learning_curves_svg(groups))
    summaries = [g.summary() for _, g in sorted(groups.items())]
    summary_path = Path(args.summary) if args.summary else Path(args.out).with_suffix(".json")
    with open(summary_path, "w") as fh:
        json.dump(summaries, fh, indent=2)
        fh.write("\n")
    for s in summaries:
        print(json.dumps(s))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="oavnn", description="Orientation-aware vector neurons and planar symmetry tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic labeled XYZ clouds and a manifest")
    g.add_argument("--kind", choices=SHAPE_KINDS, default="airplane")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--points", type=int, default=256)
    g.add_argument("--jitter", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    d = sub.add_parser("detect-symmetry", help="estimate the mirror-plane normal of a cloud")
    d.add_argument("file")
    d.add_argument("--shells", type=int, default=DEFAULT_SHELLS)
    d.add_argument("--json", action="store_true")
    d.set_defaults(func=cmd_detect_symmetry)

    s = sub.add_parser("segment-plane", help="label points by side of the detected plane")
    s.add_argument("file")
    s.add_argument("--shells", type=int, default=DEFAULT_SHELLS)
    s.add_argument("--out", help="CSV of predicted labels (default: stdout)")
    s.set_defaults(func=cmd_segment_plane)

    t = sub.add_parser("train", help="train a segmentation model from a JSON run config")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on labeled data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check-equivariance", help="numerical equivariance probes")
    c.add_argument("--stage", default="all")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--improper", action="store_true", help="alternate rotations with reflections")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check_equivariance)

    k = sub.add_parser("check-gradients", help="finite-difference gradient checks")
    k.add_argument("--layer", default="all")
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_check_gradients)

    r = sub.add_parser("report", help="SVG learning curves and summary from run directories")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--summary", help="summary JSON path (default: next to the SVG)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.func is not cmd_train:
        _echo(args)
    try:
        return args.func(args)
    except (DegenerateDirectionError, DegenerateCloudError) as exc:
        print(f"error: degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (NumericalError, DomainError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ParseError, FormatError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
