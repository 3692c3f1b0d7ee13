"""Profile database: keyed measured operator latencies.

File format is line-delimited CSV with a required header:

    device_id,op_kind,shape_signature,precision,latency_ns_mean,samples

The shape signature is a stable rendering of the cost-relevant scalar attrs
plus the input shapes, e.g. "causal=true;head_dim=4;heads=2|1x4x8_1x4x8_1x4x8".
The full canonical record key concatenates kind, signature, precision and
device id.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .ir import ConfigError, OperatorGraph, OpNode

DB_COLUMNS = ["device_id", "op_kind", "shape_signature", "precision", "latency_ns_mean", "samples"]

# bookkeeping attrs that never affect kernel cost
_SIGNATURE_SKIP = {
    "cat",
    "group",
    "scope",
    "vjp_of",
    "grad_of",
    "grad_contrib_of",
    "tp_shard",
    "replicated",
    "recompute",
    "payload_bytes",
    "chunk_elems",
}


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "+".join(_render(v) for v in value)
    return str(value)


def shape_signature(g: OperatorGraph, n: OpNode) -> str:
    attrs = ";".join(
        f"{k}={_render(v)}"
        for k, v in sorted(n.attrs.items())
        if k not in _SIGNATURE_SKIP and not isinstance(v, dict)
    )
    shapes = "_".join(
        "x".join(str(d) for d in g.resolve(ref).shape) for ref in n.inputs
    )
    return f"{attrs}|{shapes}"


def record_key(device_id: str, op_kind: str, signature: str, precision: str) -> str:
    return f"{op_kind}|{signature}|{precision}|{device_id}"


@dataclass
class ProfileRecord:
    device_id: str
    op_kind: str
    shape_signature: str
    precision: str
    latency_ns_mean: float
    samples: int = 1

    def __post_init__(self):
        if self.latency_ns_mean <= 0:
            raise ConfigError("profile latency must be positive")

    @property
    def key(self) -> str:
        return record_key(self.device_id, self.op_kind, self.shape_signature, self.precision)


class ProfileDB:
    def __init__(self, records: list[ProfileRecord] | None = None):
        self._records: dict[str, ProfileRecord] = {}
        for r in records or []:
            self.add(r)

    def add(self, record: ProfileRecord) -> None:
        if record.key in self._records:
            raise ConfigError(f"duplicate profile record for key {record.key!r}")
        self._records[record.key] = record

    def lookup(self, device_id: str, op_kind: str, signature: str, precision: str) -> float | None:
        """Mean latency in ns on an exact key hit, else None (no interpolation)."""
        rec = self._records.get(record_key(device_id, op_kind, signature, precision))
        return rec.latency_ns_mean if rec else None

    def records(self) -> list[ProfileRecord]:
        return list(self._records.values())

    def by_kind(self, op_kind: str) -> list[ProfileRecord]:
        return [r for r in self._records.values() if r.op_kind == op_kind]

    def __len__(self) -> int:
        return len(self._records)

    # -- file I/O -------------------------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "ProfileDB":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError("profile db is empty (header line required)") from None
        if [h.strip() for h in header] != DB_COLUMNS:
            raise ConfigError(f"profile db header must be {','.join(DB_COLUMNS)!r}")
        db = cls()
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DB_COLUMNS):
                raise ConfigError(f"profile db line {line_no}: expected {len(DB_COLUMNS)} fields")
            db.add(
                ProfileRecord(
                    device_id=row[0].strip(),
                    op_kind=row[1].strip(),
                    shape_signature=row[2].strip(),
                    precision=row[3].strip(),
                    latency_ns_mean=float(row[4]),
                    samples=int(row[5]),
                )
            )
        return db

    def to_text(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(DB_COLUMNS)
        for key in sorted(self._records):
            r = self._records[key]
            writer.writerow(
                [r.device_id, r.op_kind, r.shape_signature, r.precision, repr(r.latency_ns_mean), r.samples]
            )
        return out.getvalue()
