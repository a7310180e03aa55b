"""CSV/JSON helpers shared by the artifact writers."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path


def fmt_shortest(x) -> str:
    """Shortest round-trip decimal for floats, plain ``str`` otherwise."""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    if hasattr(x, "item"):
        return fmt_shortest(x.item())
    return str(x)


def fmt_sig9(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float) or hasattr(x, "dtype") and x.dtype.kind == "f":
        return format(float(x), ".9g")
    if hasattr(x, "item"):
        return fmt_sig9(x.item())
    return str(x)


def csv_text(header, rows, fmt=fmt_shortest, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment is not None:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows, fmt=fmt_shortest, comment: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows, fmt=fmt, comment=comment))
    return path


def read_csv(path):
    """Return (header, rows) skipping leading ``#`` comment lines."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [row for row in reader]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "tolist"):
        return _jsonable(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path
