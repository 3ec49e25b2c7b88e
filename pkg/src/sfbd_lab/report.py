"""Merge metric files from several runs and summarize them for plotting."""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import ConfigError, SchemaError
from .trainers import METRIC_COLUMNS


def read_metrics_csv(path):
    """Rows ``(step, metric, value)`` of a long-format metrics file."""
    try:
        fh = open(path, newline="")
    except OSError as err:
        raise ConfigError(f"cannot read metrics file {path}: {err}") from err
    with fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != METRIC_COLUMNS:
            missing = [c for c in METRIC_COLUMNS if c not in header]
            extra = [c for c in header if c not in METRIC_COLUMNS]
            raise SchemaError(
                f"{path}: columns {list(header)} do not match {list(METRIC_COLUMNS)} "
                f"(missing {missing}, unexpected {extra})"
            )
        return [(int(r[0]), r[1], float(r[2])) for r in reader if r]


def summarize(rows):
    """``{metric: (best_step, best_value, final_step, final_value)}``; best means smallest."""
    out = {}
    for step, metric, value in rows:
        if metric not in out:
            out[metric] = [step, value, step, value]
            continue
        entry = out[metric]
        if value < entry[1]:
            entry[0], entry[1] = step, value
        if step >= entry[2]:
            entry[2], entry[3] = step, value
    return {k: tuple(v) for k, v in out.items()}


def run_report(metrics_csvs, out_dir, labels=None):
    """Write ``merged.csv``, ``summary.csv`` and, for two or more runs, ``comparison.csv``.

    Deltas in the comparison are taken against the first run.
    """
    paths = [Path(p) for p in metrics_csvs]
    if not paths:
        raise SchemaError("no metrics files given")
    labels = list(labels) if labels else [p.parent.name or p.stem for p in paths]
    if len(set(labels)) != len(labels):
        labels = [f"{lab}#{i}" for i, lab in enumerate(labels)]
    runs = {lab: read_metrics_csv(p) for lab, p in zip(labels, paths)}

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"merged": out / "merged.csv", "summary": out / "summary.csv"}
    with open(files["merged"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run",) + METRIC_COLUMNS)
        for lab, rows in runs.items():
            w.writerows((lab, s, m, repr(v)) for s, m, v in rows)

    summaries = {lab: summarize(rows) for lab, rows in runs.items()}
    with open(files["summary"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run", "metric", "best_step", "best_value", "final_step", "final_value"))
        for lab, summ in summaries.items():
            for metric in sorted(summ):
                bs, bv, fs, fv = summ[metric]
                w.writerow((lab, metric, bs, repr(bv), fs, repr(fv)))

    if len(runs) > 1:
        files["comparison"] = out / "comparison.csv"
        base_label = labels[0]
        base = summaries[base_label]
        with open(files["comparison"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("metric", "run", "best_value", "best_delta", "final_value", "final_delta"))
            for lab in labels[1:]:
                for metric in sorted(set(base) & set(summaries[lab])):
                    _, bv, _, fv = summaries[lab][metric]
                    w.writerow((metric, lab, repr(bv), repr(bv - base[metric][1]), repr(fv), repr(fv - base[metric][3])))
    return files
