"""Result tables with provenance, serialised as RFC-4180 CSV and JSON."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17g}"
    return str(v)


@dataclass
class ExperimentTable:
    """Named columns of equal length.

    Every column listed in ``stochastic`` must be accompanied by a
    ``<name>_se`` column; no other column may end in ``_se``.
    """

    name: str
    columns: dict
    stochastic: tuple = ()
    config_digest: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise DomainError(f"columns of table {self.name!r} have unequal lengths {sorted(lengths)}")
        self.stochastic = tuple(self.stochastic)
        for c in self.stochastic:
            if c not in self.columns or f"{c}_se" not in self.columns:
                raise DomainError(f"stochastic column {c!r} needs a {c}_se companion")
        for c in self.columns:
            if c.endswith("_se") and c[:-3] not in self.stochastic:
                raise DomainError(f"column {c!r} is an SE of a non-stochastic column")

    def __len__(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def __getitem__(self, name: str) -> np.ndarray:
        return np.asarray(self.columns[name])

    def rows(self):
        names = list(self.columns)
        for i in range(len(self)):
            yield {n: self.columns[n][i] for n in names}

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(list(self.columns))
        for row in self.rows():
            w.writerow([fmt(v) for v in row.values()])
        return buf.getvalue()

    @property
    def content_digest(self) -> str:
        return hashlib.sha256(self.csv_text().encode()).hexdigest()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.csv_text())

    def provenance(self) -> dict:
        return {
            "table": self.name,
            "config_digest": self.config_digest,
            "content_sha256": self.content_digest,
            "stochastic": list(self.stochastic),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        doc = self.provenance()
        doc["columns"] = {k: [_json_value(v) for v in vals] for k, vals in self.columns.items()}
        return json.dumps(doc, sort_keys=True, indent=2)


def _json_value(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else fmt(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v
