"""Run metrics: one JSON object per line, plus the aggregation the report uses.

A record row is flat and self-describing so files from different runs can be
concatenated and regrouped later. The config hash identifies "the same cell":
two runs with identical configuration hash identically no matter how the dict
was assembled.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path


class MetricsError(Exception):
    """Raised when a metrics file does not parse or a record is malformed."""


def config_hash(config: dict) -> str:
    """Hash of a JSON-able config dict, invariant to key order."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


@dataclass
class MetricsRecord:
    run_id: str
    method: str
    domains: str             # "source->target"
    step: int                # optimization step, or batch index online
    seed: int
    config_hash: str
    wallclock_ms: float = 0.0
    ot_value: float | None = None
    mean_entropy: float | None = None
    accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d.update(d.pop("extra"))
        return json.dumps(d, sort_keys=True)


_REQUIRED = ("run_id", "method", "domains", "step", "seed", "config_hash")


def record_from_json(line: str) -> MetricsRecord:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as e:
        raise MetricsError(f"bad metrics line: {e}") from None
    if not isinstance(d, dict):
        raise MetricsError("metrics line is not an object")
    missing = [k for k in _REQUIRED if k not in d]
    if missing:
        raise MetricsError(f"metrics record missing fields: {missing}")
    known = {k: d.pop(k) for k in list(d)
             if k in MetricsRecord.__dataclass_fields__ and k != "extra"}
    return MetricsRecord(extra=d, **known)


def append_records(path, records) -> None:
    """Append records to a JSONL file, creating it if needed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path) -> list[MetricsRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(record_from_json(line))
            except MetricsError as e:
                raise MetricsError(f"{path}:{lineno}: {e}") from None
    return out


def completed_hashes(path) -> set[str]:
    """Config hashes of runs whose final record exists in the file."""
    path = Path(path)
    if not path.exists():
        return set()
    done = set()
    for rec in read_records(path):
        if rec.extra.get("final"):
            done.add(rec.config_hash)
    return done


def _mean_std(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


def aggregate(records, group_keys=("method", "domains"),
              value_keys=("accuracy", "ot_value", "mean_entropy")):
    """Group records and report mean/std/count per numeric field.

    Returns a list of flat dicts, one per group, sorted by the group key
    tuple so output order is reproducible.
    """
    groups: dict[tuple, list[MetricsRecord]] = {}
    for rec in records:
        d = asdict(rec)
        d.update(d.pop("extra"))
        key = tuple(d.get(k) for k in group_keys)
        groups.setdefault(key, []).append(rec)
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        row = dict(zip(group_keys, key))
        row["count"] = len(groups[key])
        for vk in value_keys:
            vals = []
            for rec in groups[key]:
                d = asdict(rec)
                d.update(d.pop("extra"))
                v = d.get(vk)
                if v is not None:
                    vals.append(float(v))
            if vals:
                mean, std = _mean_std(vals)
                row[f"{vk}_mean"] = mean
                row[f"{vk}_std"] = std
        rows.append(row)
    return rows
