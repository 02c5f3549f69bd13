"""Per-angle accuracy reports and their CSV/JSON serialisation.

Report CSV columns, in order::

    schema_version, variant, angle_deg, accuracy, correct, total

The merged (plot-ready) CSV written by :func:`merge_reports` uses::

    variant, angle_deg, accuracy, correct, total, source

Readers accept any ``schema_version`` with the same major number as
``SCHEMA_VERSION`` and reject the rest.
"""
import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
REPORT_COLUMNS = ("schema_version", "variant", "angle_deg", "accuracy", "correct", "total")
MERGED_COLUMNS = ("variant", "angle_deg", "accuracy", "correct", "total", "source")
HISTORY_MERGED_COLUMNS = ("source", "epoch", "lr", "train_loss", "valid_accuracy")


def check_schema(version, where):
    """Raise :class:`ParseError` unless ``version`` shares our major number."""
    try:
        major = int(str(version).split(".")[0])
    except ValueError:
        raise ParseError(f"{where}: unreadable schema version {version!r}") from None
    if major != int(SCHEMA_VERSION.split(".")[0]):
        raise ParseError(
            f"{where}: schema version {version} is not supported (reader is {SCHEMA_VERSION})")


@dataclass
class RunReport:
    variant: str
    angles: list
    correct: list
    total: list
    config: dict = field(default_factory=dict)
    seed: int = 0
    seconds: float = 0.0
    schema_version: str = SCHEMA_VERSION
    package_version: str = ""

    def __post_init__(self):
        if not (len(self.angles) == len(self.correct) == len(self.total)):
            raise ValueError("angles, correct and total must have equal lengths")

    @property
    def accuracies(self):
        return [c / t if t else float("nan") for c, t in zip(self.correct, self.total)]

    @property
    def aggregate(self):
        """Mean of the per-angle accuracies (equal to pooled accuracy for equal subsets)."""
        return float(np.mean(self.accuracies)) if self.angles else float("nan")

    @property
    def spread(self):
        acc = self.accuracies
        return float(max(acc) - min(acc)) if acc else float("nan")

    def accuracy_at(self, angle):
        return self.accuracies[list(self.angles).index(angle)]

    def rows(self):
        return [(self.variant, int(a), acc, int(c), int(t))
                for a, acc, c, t in zip(self.angles, self.accuracies, self.correct, self.total)]

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "package_version": self.package_version,
            "variant": self.variant,
            "seed": self.seed,
            "seconds": self.seconds,
            "config": self.config,
            "aggregate": self.aggregate,
            "rows": [dict(zip(REPORT_COLUMNS[1:], r)) for r in self.rows()],
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for variant, angle, acc, c, t in self.rows():
                writer.writerow([self.schema_version, variant, angle, repr(acc), c, t])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write(self, prefix):
        """Write ``prefix.csv`` and ``prefix.json``; returns both paths."""
        paths = (prefix + ".csv", prefix + ".json")
        self.write_csv(paths[0])
        self.write_json(paths[1])
        return paths


def _report_from_rows(rows, where, **extra):
    variants = {r["variant"] for r in rows}
    if len(variants) > 1:
        raise ParseError(f"{where}: one report holds one variant, found {sorted(variants)}")
    try:
        return RunReport(
            variant=variants.pop() if variants else "",
            angles=[int(r["angle_deg"]) for r in rows],
            correct=[int(r["correct"]) for r in rows],
            total=[int(r["total"]) for r in rows], **extra)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{where}: malformed report row ({exc})") from None


def read_report_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ParseError(f"{path}: columns {reader.fieldnames} are not a report header")
        rows = list(reader)
    for r in rows:
        check_schema(r["schema_version"], path)
    return _report_from_rows(rows, path)


def read_report_json(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or "schema_version" not in doc or "rows" not in doc:
        raise ParseError(f"{path}: not a report document")
    check_schema(doc["schema_version"], path)
    rows = [dict(r, variant=doc.get("variant", r.get("variant"))) for r in doc["rows"]]
    return _report_from_rows(rows, path, config=doc.get("config", {}),
                             seed=doc.get("seed", 0), seconds=doc.get("seconds", 0.0),
                             schema_version=doc["schema_version"],
                             package_version=doc.get("package_version", ""))


def read_report(path):
    if path.endswith(".json"):
        return read_report_json(path)
    return read_report_csv(path)


def _sniff_header(path):
    with open(path, newline="") as fh:
        return tuple(next(csv.reader(fh), ()))


def merge_reports(paths, out_path):
    """Merge report (and history) files into plot-ready CSVs.

    Report rows are deduplicated by ``(variant, angle_deg)``; the first
    occurrence wins. History CSVs, if any, are stacked into
    ``<out stem>_history.csv``. Returns the number of merged report rows.
    """
    from .trainer import HISTORY_COLUMNS

    merged, seen, histories = [], {}, []
    for path in paths:
        if not os.path.exists(path):
            raise ParseError(f"{path}: no such file")
        if not path.endswith(".json") and _sniff_header(path) == HISTORY_COLUMNS:
            histories.append(path)
            continue
        report = read_report(path)
        for variant, angle, acc, c, t in report.rows():
            key = (variant, angle)
            if key in seen:
                if seen[key] != (c, t):
                    log.warning("conflicting duplicate %s at %d deg in %s ignored",
                                variant, angle, path)
                continue
            seen[key] = (c, t)
            merged.append((variant, angle, acc, c, t, os.path.basename(path)))
    merged.sort(key=lambda r: (r[0], r[1]))
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MERGED_COLUMNS)
        for variant, angle, acc, c, t, src in merged:
            writer.writerow([variant, angle, repr(acc), c, t, src])
    if histories:
        stem, _ = os.path.splitext(out_path)
        with open(stem + "_history.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_MERGED_COLUMNS)
            for path in histories:
                with open(path, newline="") as src:
                    for row in list(csv.reader(src))[1:]:
                        writer.writerow([os.path.basename(path)] + row)
    return len(merged)
