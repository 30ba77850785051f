"""Per-run metric records and their CSV form."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

METRICS_SCHEMA = "b3c-metrics/1"


@dataclass
class MetricsRecord:
    step: int
    eval_return: float
    critic_loss: float = math.nan
    policy_loss_rl: float = math.nan
    policy_loss_bc: float = math.nan
    w: float = math.nan
    target_q_mean: float = math.nan
    target_q_max: float = math.nan
    clip_active_fraction: float = 0.0
    diverged_at: int | None = None


COLUMNS = [f.name for f in fields(MetricsRecord)]


class MetricsLog:
    def __init__(self, records: list[MetricsRecord] | None = None, meta: dict | None = None):
        self.records: list[MetricsRecord] = []
        self.meta: dict = dict(meta or {})
        for r in records or []:
            self.append(r)

    def append(self, rec: MetricsRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError(f"metric steps must increase: {rec.step} after {self.records[-1].step}")
        if not 0.0 <= rec.clip_active_fraction <= 1.0:
            raise ValueError(f"clip_active_fraction out of range: {rec.clip_active_fraction}")
        if rec.diverged_at is not None and self.diverged_at is not None:
            raise ValueError("divergence already recorded for this run")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def diverged_at(self) -> int | None:
        for r in self.records:
            if r.diverged_at is not None:
                return r.diverged_at
        return None

    @property
    def final_return(self) -> float:
        return self.records[-1].eval_return if self.records else math.nan

    def max_target_q(self) -> float:
        vals = [r.target_q_max for r in self.records if not math.isnan(r.target_q_max)]
        return max(vals) if vals else math.nan

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema={METRICS_SCHEMA}\n")
        for k in sorted(self.meta):
            buf.write(f"# {k}={self.meta[k]}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in self.records:
            row = asdict(r)
            writer.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                             for c in COLUMNS])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def from_csv(cls, text: str) -> "MetricsLog":
        meta, body = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key] = val
            elif line.strip():
                body.append(line)
        if meta.pop("schema", None) != METRICS_SCHEMA:
            raise ValueError(f"not a {METRICS_SCHEMA} file")
        rows = list(csv.DictReader(body))
        recs = []
        for row in rows:
            kw = {}
            for f in fields(MetricsRecord):
                v = row[f.name]
                if f.name in ("step",):
                    kw[f.name] = int(v)
                elif f.name == "diverged_at":
                    kw[f.name] = int(v) if v else None
                else:
                    kw[f.name] = float(v)
            recs.append(MetricsRecord(**kw))
        return cls(recs, meta)

    @classmethod
    def read(cls, path) -> "MetricsLog":
        return cls.from_csv(Path(path).read_text())
