"""Run records, byte-stable reports and resumable run directories."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from fcx import __version__
from fcx.errors import UnsupportedFormat
from fcx.utils import canonical_json, config_hash

SCHEMA_VERSION = 1
CSV_HEADER = ("depth", "component", "rho_c", "rho_reli", "phi_train", "phi_overfit",
              "alpha_eff", "alpha_overfit")
FORMATS = ("json", "csv")


def jsonable(obj):
    """JSON-safe copy: numpy scalars/arrays to python, non-finite floats to None."""
    if hasattr(obj, "tolist"):
        obj = obj.tolist()
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


@dataclass
class RunRecord:
    name: str
    config: dict
    seeds: list[int]
    tables: dict = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    wall_clock: float = 0.0
    version: str = __version__

    @property
    def config_hash(self) -> str:
        return config_hash(jsonable({"name": self.name, "config": self.config}))

    def to_dict(self) -> dict:
        """Everything except wall-clock time, which lives in a sidecar."""
        return jsonable({"schema_version": SCHEMA_VERSION, "name": self.name,
                       "config_hash": self.config_hash, "config": self.config,
                       "seeds": list(self.seeds), "tables": self.tables, "rows": self.rows,
                       "artifacts": sorted(self.artifacts), "version": self.version})

    @classmethod
    def from_dict(cls, d: dict, wall_clock: float = 0.0) -> "RunRecord":
        return cls(d["name"], d["config"], d["seeds"], d.get("tables", {}), d.get("rows", []),
                   d.get("artifacts", []), wall_clock, d.get("version", __version__))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in CSV_HEADER])
    return buf.getvalue()


def report_json(record: RunRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True, indent=1, allow_nan=False) + "\n"


def emit_report(record: RunRecord, fmt: str, out_dir) -> Path:
    """Write ``report.<fmt>`` plus the ``timing.json`` sidecar; return the report path."""
    if fmt not in FORMATS:
        raise UnsupportedFormat(f"unknown report format {fmt!r}; use one of {FORMATS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"report.{fmt}"
    text = report_json(record) if fmt == "json" else report_csv(record.rows)
    path.write_text(text)
    (out / "timing.json").write_text(canonical_json({"wall_clock": record.wall_clock}) + "\n")
    return path


def load_record(path) -> RunRecord:
    path = Path(path)
    d = json.loads(path.read_text())
    timing = path.parent / "timing.json"
    wall = json.loads(timing.read_text())["wall_clock"] if timing.exists() else 0.0
    return RunRecord.from_dict(d, wall)


def run_dir(out_root, name: str, config: dict) -> Path:
    h = config_hash(jsonable({"name": name, "config": config}))
    return Path(out_root) / f"{name}-{h[:12]}"


def existing_record(directory: Path, name: str, config: dict) -> RunRecord | None:
    """A completed record in ``directory`` with a matching config hash, if any."""
    path = Path(directory) / "report.json"
    if not path.exists():
        return None
    rec = load_record(path)
    want = config_hash(jsonable({"name": name, "config": config}))
    return rec if rec.config_hash == want else None
