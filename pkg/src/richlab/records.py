"""CSV persistence for measurement records and fitted exponents."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

from .scaling import ExponentRow, MeasurementRecord

COLUMNS = ("run_id", "gauge", "r", "width", "seed", "step", "quantity", "layer", "value", "diverged")
EXPONENT_COLUMNS = ("quantity", "r", "step", "slope", "slope_stderr", "intercept", "n_points", "n_diverged")


def fmt(v: float) -> str:
    return f"{v:.17g}"


def config_hash(text: str | bytes) -> str:
    if isinstance(text, str):
        text = text.encode()
    return hashlib.sha256(text).hexdigest()


def records_to_csv(records, cfg_hash: str | None = None) -> str:
    buf = io.StringIO()
    if cfg_hash:
        buf.write(f"# config_hash={cfg_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for rec in records:
        w.writerow([rec.run_id, rec.gauge, fmt(rec.r), rec.width, rec.seed, rec.step,
                    rec.quantity, rec.layer, fmt(rec.value), int(rec.diverged)])
    return buf.getvalue()


def write_records(path, records, cfg_hash: str | None = None) -> None:
    Path(path).write_text(records_to_csv(records, cfg_hash), encoding="utf-8", newline="\n")


def read_header_hash(path) -> str | None:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first.startswith("# config_hash="):
        return first.split("=", 1)[1]
    return None


def parse_records(text: str) -> list[MeasurementRecord]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if not lines:
        return []
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != COLUMNS:
        raise ValueError(f"unexpected CSV columns {reader.fieldnames}")
    out = []
    for row in reader:
        out.append(MeasurementRecord(
            run_id=row["run_id"], gauge=row["gauge"], r=float(row["r"]),
            width=int(row["width"]), seed=int(row["seed"]), step=int(row["step"]),
            quantity=row["quantity"], layer=int(row["layer"]), value=float(row["value"]),
            diverged=row["diverged"] == "1"))
    return out


def read_records(path) -> list[MeasurementRecord]:
    return parse_records(Path(path).read_text(encoding="utf-8"))


def exponents_to_csv(rows: list[ExponentRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EXPONENT_COLUMNS)
    for row in rows:
        f = row.fit
        if f is None:
            w.writerow([row.quantity, fmt(row.r), row.step, "nan", "nan", "nan", 0, row.n_diverged])
        else:
            w.writerow([row.quantity, fmt(row.r), row.step, fmt(f.slope), fmt(f.slope_stderr),
                        fmt(f.intercept), f.n_points, row.n_diverged])
    return buf.getvalue()


def write_manifest(path, *, cfg_hash: str, version: str, timestamp: str, seeds: list[int],
                   outputs: dict[str, str], extra: dict | None = None) -> None:
    data = {"config_hash": cfg_hash, "tool_version": version, "timestamp": timestamp,
            "seed_roster": seeds, "outputs": outputs}
    if extra:
        data.update(extra)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
