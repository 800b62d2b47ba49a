"""Run artifacts: metrics CSV, summary JSON and SVG learning curves."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import FormatError
from .model import EpochRecord, Metrics

CSV_HEADER = ("epoch", "split", "accuracy", "loss")
SPLITS = ("train", "test")
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"

_COLORS = {
    "OAVNN": "#d62728",
    "VNN": "#7f7f7f",
    "ShellOnly": "#1f77b4",
    "ComplexOnly": "#2ca02c",
}
_FALLBACK = ("#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22")


def write_metrics_csv(metrics, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in metrics.records:
            w.writerow((r.epoch, "train", repr(r.train_accuracy), repr(r.loss)))
            w.writerow((r.epoch, "test", repr(r.test_accuracy), repr(r.test_loss)))


def read_metrics_csv(path):
    """Parse a metrics CSV back into :class:`Metrics` (wall time unknown)."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise FormatError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for n, row in enumerate(reader, start=2):
            try:
                epoch, split, acc, loss = int(row[0]), row[1], float(row[2]), float(row[3])
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}: line {n}: {exc}") from exc
            if split not in SPLITS:
                raise FormatError(f"{path}: line {n}: unknown split {split!r}")
            rows.setdefault(epoch, {})[split] = (acc, loss)
    records = []
    for epoch in sorted(rows):
        got = rows[epoch]
        if set(got) != set(SPLITS):
            raise FormatError(f"{path}: epoch {epoch} lacks a train or test row")
        (tr_acc, tr_loss), (te_acc, te_loss) = got["train"], got["test"]
        records.append(EpochRecord(epoch, tr_acc, te_acc, tr_loss, te_loss))
    return Metrics(records)


def summarize(variant, metrics, threshold=0.9):
    return {
        "variant": variant,
        "final_test_accuracy": metrics.final_test_accuracy(),
        "epochs_to_90": metrics.epochs_to(threshold),
    }


def write_summary(summary, path):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class RunSet:
    """All runs of one variant found under a directory."""

    variant: str
    runs: list = field(default_factory=list)  # list of Metrics
    summaries: list = field(default_factory=list)  # per-run summary.json or None

    def mean_curve(self, split="test"):
        """Per-epoch mean accuracy over runs (epochs present in every run)."""
        epochs = set.intersection(*({r.epoch for r in m.records} for m in self.runs))
        out = []
        for e in sorted(epochs):
            vals = []
            for m in self.runs:
                rec = next(r for r in m.records if r.epoch == e)
                vals.append(rec.test_accuracy if split == "test" else rec.train_accuracy)
            out.append((e, sum(vals) / len(vals)))
        return out

    def summary(self, threshold=0.9):
        finals = [m.final_test_accuracy() for m in self.runs]
        # summaries keep sub-epoch resolution that the CSV does not
        hits = [
            s["epochs_to_90"] if s and "epochs_to_90" in s else m.epochs_to(threshold)
            for m, s in zip(self.runs, self.summaries + [None] * len(self.runs))
        ]
        reached = [h for h in hits if h is not None]
        return {
            "variant": self.variant,
            "final_test_accuracy": sum(finals) / len(finals),
            "epochs_to_90": sum(reached) / len(reached) if len(reached) == len(hits) else None,
            "runs": len(self.runs),
        }


def collect_runs(root):
    """Group every ``metrics.csv`` below ``root`` by variant.

    The variant comes from a sibling ``summary.json``; failing that, from the
    parent directory name.
    """
    groups = {}
    for csv_path in sorted(Path(root).rglob(METRICS_FILE)):
        variant, side = csv_path.parent.name, None
        side_path = csv_path.parent / SUMMARY_FILE
        if side_path.exists():
            with open(side_path) as fh:
                side = json.load(fh)
            variant = side.get("variant", variant)
        group = groups.setdefault(variant, RunSet(variant))
        group.runs.append(read_metrics_csv(csv_path))
        group.summaries.append(side)
    return groups


def learning_curves_svg(groups, width=640, height=400):
    """Static SVG 1.1: accuracy vs epoch, test solid and train dashed, one colour per variant."""
    left, right, top, bottom = 60, 150, 20, 50
    pw, ph = width - left - right, height - top - bottom
    max_epoch = max((e for g in groups.values() for e, _ in g.mean_curve()), default=1)
    max_epoch = max(max_epoch, 1)

    def sx(e):
        return left + pw * e / max_epoch

    def sy(a):
        return top + ph * (1.0 - a)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(6):
        a = i / 5
        parts.append(f'<text x="{left - 8}" y="{sy(a) + 4:.1f}" text-anchor="end">{a:.1f}</text>')
        parts.append(
            f'<line x1="{left}" y1="{sy(a):.1f}" x2="{left + pw}" y2="{sy(a):.1f}" stroke="#dddddd"/>'
        )
    step = max(1, math.ceil(max_epoch / 10))
    for e in range(0, max_epoch + 1, step):
        parts.append(f'<text x="{sx(e):.1f}" y="{top + ph + 18}" text-anchor="middle">{e}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">epoch</text>')
    parts.append(
        f'<text x="15" y="{top + ph / 2}" text-anchor="middle" '
        f'transform="rotate(-90 15 {top + ph / 2})">accuracy</text>'
    )
    for idx, (variant, group) in enumerate(sorted(groups.items())):
        color = _COLORS.get(variant, _FALLBACK[idx % len(_FALLBACK)])
        for split, dash in (("test", ""), ("train", ' stroke-dasharray="5,3"')):
            pts = [(0, None)] + group.mean_curve(split)
            coords = " ".join(f"{sx(e):.1f},{sy(a):.1f}" for e, a in pts if a is not None)
            parts.append(
                f'<polyline class="curve" data-variant="{escape(variant)}" data-split="{split}" '
                f'points="{coords}" fill="none" stroke="{color}" stroke-width="2"{dash}/>'
            )
        ly = top + 10 + 20 * idx
        parts.append(
            f'<line x1="{left + pw + 15}" y1="{ly}" x2="{left + pw + 40}" y2="{ly}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(f'<text x="{left + pw + 45}" y="{ly + 4}">{escape(variant)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
