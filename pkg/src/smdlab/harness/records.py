"""Metrics (tab-separated, header line, %.17g floats) and trajectory dumps (JSON lines)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

METRIC_FIELDS = (
    "step", "reward_mean", "reward_std", "ratio_mean", "ratio_var",
    "loss_pg", "loss_ref_kl", "loss_distill", "loss_total",
    "peak_mem_ratio", "consumed", "generated", "clip_fraction", "evicted_fraction",
)


@dataclass
class MetricRecord:
    step: int
    reward_mean: float
    reward_std: float
    ratio_mean: float
    ratio_var: float
    loss_pg: float
    loss_ref_kl: float
    loss_distill: float
    loss_total: float
    peak_mem_ratio: float
    consumed: int
    generated: int
    clip_fraction: float
    evicted_fraction: float


assert tuple(f.name for f in fields(MetricRecord)) == METRIC_FIELDS


def _fmt(v):
    if isinstance(v, str):
        if "\t" in v or "\n" in v:
            raise ValueError(f"field value {v!r} contains a tab or newline")
        return v
    if isinstance(v, int) and not isinstance(v, bool):
        return str(v)
    return format(float(v), ".17g")


class MetricsWriter:
    """Append-only, single-writer table; one record per line."""

    def __init__(self, path, columns=METRIC_FIELDS):
        self.columns = tuple(columns)
        self._f = open(path, "w")
        self._f.write("\t".join(self.columns) + "\n")

    def write(self, record):
        row = asdict(record) if hasattr(record, "__dataclass_fields__") else dict(record)
        self._f.write("\t".join(_fmt(row[c]) for c in self.columns) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_table(path):
    """One-pass reader: list of dicts with ints/floats restored."""
    with open(path) as f:
        header = f.readline().rstrip("\n").split("\t")
        rows = []
        for line in f:
            vals = line.rstrip("\n").split("\t")
            row = {}
            for k, v in zip(header, vals):
                try:
                    row[k] = int(v)
                except ValueError:
                    try:
                        row[k] = float(v)
                    except ValueError:
                        row[k] = v
            rows.append(row)
    return rows


def write_jsonl(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
