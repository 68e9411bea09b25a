"""Report serialization: json, csv and a plain-text table."""

import csv
import io
import json
from pathlib import Path

from .experiment import ExperimentReport, ReportRow

CSV_FIELDS = [
    "layer", "pass", "scenario", "cycles", "speedup", "macs_performed", "macs_skipped_input",
    "macs_skipped_output", "dense_total", "avg_max_ratio", "lane_utilization", "wr_events",
    "wr_commands", "input_sparsity", "output_sparsity", "energy_pj", "grid",
]
FORMATS = ("json", "csv", "table")


def to_json(report):
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def from_json(text):
    return ExperimentReport.from_dict(json.loads(text))


def to_csv(report):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in report.rows:
        d = row.to_dict()
        d["grid"] = "x".join(str(g) for g in d["grid"]) if d["grid"] else ""
        writer.writerow(d)
    return buf.getvalue()


def to_table(report):
    """One line per (layer, pass), scenarios side by side as cycles and speedup."""
    scen = report.scenarios
    head = f"{'layer':>5} {'pass':>4} " + " ".join(f"{s:>20}" for s in scen)
    lines = [head, "-" * len(head)]
    groups = {}
    for r in report.rows:
        groups.setdefault((r.layer, r.pass_), {})[r.scenario] = r
    for (layer, p), cells in groups.items():
        parts = []
        for s in scen:
            r = cells.get(s)
            parts.append(f"{'-':>20}" if r is None else f"{r.cycles:>12} {r.speedup:>6.2f}x")
        lines.append(f"{layer:>5} {p:>4} " + " ".join(parts))
    if report.end_to_end:
        lines.append("-" * len(head))
        for s in scen:
            e = report.end_to_end[s]
            split = " ".join(f"{p}={e[p]}" for p in report.passes)
            lines.append(f"{'all':>5} {s:>9}: {e['total']} cycles, {e['speedup']:.2f}x  ({split})")
    for v in report.ordering_violations:
        lines.append(f"ordering violation: {v}")
    return "\n".join(lines) + "\n"


def emit_report(report, fmt="json", dest=None):
    """Render ``report``; write to ``dest`` (path or text stream) when given. Returns the text."""
    if fmt == "json":
        text = to_json(report)
    elif fmt == "csv":
        text = to_csv(report)
    elif fmt == "table":
        text = to_table(report)
    else:
        raise ValueError(f"unknown format {fmt!r}; have {FORMATS}")
    if dest is None:
        return text
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        Path(dest).write_text(text)
    return text


__all__ = ["CSV_FIELDS", "FORMATS", "ReportRow", "emit_report", "from_json", "to_csv", "to_json", "to_table"]
