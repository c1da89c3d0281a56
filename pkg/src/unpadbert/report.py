"""Machine-readable experiment reports and their serialization."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources

import numpy as np

SCHEMA_VERSION = "1.0"
FORMATS = ("json", "csv")


def data_path(name: str):
    """Path to a file committed under the package's ``data`` directory."""
    return resources.files("unpadbert") / "data" / name


def load_schema() -> dict:
    return json.loads(data_path("report.schema.json").read_text(encoding="utf-8"))


@dataclass
class Report:
    command: str | None = None
    inputs: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    table: list | None = None  # row-shaped view used by the CSV emitter

    def to_dict(self) -> dict:
        out: dict = {"schema_version": SCHEMA_VERSION}
        if self.command is not None:
            out["command"] = self.command
        for key in ("inputs", "metrics", "details"):
            if getattr(self, key):
                out[key] = jsonable(getattr(self, key))
        return out


def jsonable(obj):
    """Convert numpy values, fractions and tuples into plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, Fraction):
        return int(obj) if obj.denominator == 1 else float(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
        return x
    return obj


def _flatten(prefix: str, obj, rows: list) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, rows)
    elif isinstance(obj, list) and any(isinstance(v, (dict, list)) for v in obj):
        for i, v in enumerate(obj):
            _flatten(f"{prefix}.{i}", v, rows)
    elif isinstance(obj, list):
        rows.append((prefix, " ".join(json.dumps(v) for v in obj)))
    else:
        rows.append((prefix, json.dumps(obj)))


def emit_report(report: Report, fmt: str = "json") -> bytes:
    """Serialize deterministically: equal reports give equal bytes."""
    if fmt not in FORMATS:
        raise ValueError(f"unsupported format {fmt!r}; choose from {FORMATS}")
    doc = report.to_dict()
    if fmt == "json":
        return (json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n").encode("utf-8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if report.table:
        cols = list(report.table[0])
        w.writerow(cols)
        for row in jsonable(report.table):
            w.writerow([row[c] for c in cols])
    else:
        rows: list = []
        _flatten("", doc.get("metrics", {}), rows)
        w.writerow(["metric", "value"])
        w.writerows(rows)
    return buf.getvalue().encode("utf-8")


def error_report(command: str | None, exc: BaseException) -> dict:
    out: dict = {"schema_version": SCHEMA_VERSION}
    if command is not None:
        out["command"] = command
    out["error"] = {"type": type(exc).__name__, "message": str(exc)}
    return out
