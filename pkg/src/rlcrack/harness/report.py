"""JSON reports and CSV histogram exports."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

from ..errors import ParameterError
from .evaluate import POPULATIONS, AttackMetrics

REPORT_VERSION = 1


def histogram_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".hist.csv")


def write_json(obj, path: str | Path) -> None:
    # sorted keys and a trailing newline keep reruns byte-identical
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def export_report(
    metrics: AttackMetrics,
    path: str | Path,
    config: Optional[dict] = None,
    seeds: Optional[dict] = None,
) -> tuple[Path, Path]:
    """Write ``path`` (JSON) and a sibling ``*.hist.csv``; return both paths."""
    if metrics is None or metrics.n <= 0 or not metrics.histograms:
        raise ParameterError("refusing to export an empty metrics object")
    path = Path(path)
    doc = {
        "version": REPORT_VERSION,
        "config": config or {},
        "seeds": seeds or {},
        "metrics": metrics.to_dict(),
        "histograms": {k: h.to_dict() for k, h in metrics.histograms.items()},
    }
    write_json(doc, path)

    csv_path = histogram_path(path)
    pops = [p for p in POPULATIONS if p in metrics.histograms]
    edges = metrics.histograms[pops[0]].edges
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", *pops])
        for b in range(len(edges) - 1):
            w.writerow([repr(edges[b]), repr(edges[b + 1]), *(metrics.histograms[p].counts[b] for p in pops)])
    return path, csv_path


def load_report(path: str | Path) -> tuple[AttackMetrics, dict, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != REPORT_VERSION:
        raise ParameterError(f"unsupported report version {doc.get('version')!r}")
    return AttackMetrics.from_dict(doc["metrics"], doc["histograms"]), doc["config"], doc["seeds"]
