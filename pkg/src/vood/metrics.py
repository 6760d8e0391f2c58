"""AUROC / FPR@TPR for ID-vs-OOD score separation, and evaluation reports.

Scores follow the higher-is-more-ID convention; a sample is called ID when
``score >= threshold``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptySet

REPORT_COLUMNS = ("id_set", "ood_set", "postprocessor", "fpr_at_95", "auroc", "n_id", "n_ood")


def _check(scores_id, scores_ood) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(scores_id, dtype=np.float64).ravel()
    b = np.asarray(scores_ood, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptySet("AUROC/FPR need non-empty ID and OOD score sets")
    return a, b


def auroc(scores_id, scores_ood) -> float:
    """P(ID score > OOD score) + 0.5 * P(tie), in percent (Mann-Whitney U)."""
    a, b = _check(scores_id, scores_ood)
    b_sorted = np.sort(b)
    below = np.searchsorted(b_sorted, a, side="left")
    at_or_below = np.searchsorted(b_sorted, a, side="right")
    u = below.sum() + 0.5 * (at_or_below - below).sum()
    return 100.0 * float(u) / (a.size * b.size)


def tpr_rank(n: int, tpr: float) -> int:
    """Smallest k with k / n >= tpr."""
    k = min(n, max(0, math.ceil(tpr * n)))
    while k > 0 and (k - 1) / n >= tpr:
        k -= 1
    while k < n and k / n < tpr:
        k += 1
    return k


def fpr_at_tpr(scores_id, scores_ood, tpr: float = 0.95) -> float:
    """Percent of OOD scores >= the largest threshold that keeps ``tpr`` of ID."""
    a, b = _check(scores_id, scores_ood)
    if not 0.0 < tpr <= 1.0:
        raise ValueError(f"tpr must lie in (0, 1], got {tpr}")
    k = tpr_rank(a.size, tpr)
    beta = np.sort(a)[::-1][k - 1]
    return 100.0 * float((b >= beta).sum()) / b.size


@dataclass
class ReportEntry:
    id_set: str
    ood_set: str
    postprocessor: str
    fpr_at_95: float
    auroc: float
    n_id: int
    n_ood: int

    def __post_init__(self):
        for name in ("fpr_at_95", "auroc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")


def evaluate_scores(id_set: str, ood_set: str, postprocessor: str,
                    scores_id, scores_ood) -> ReportEntry:
    a, b = _check(scores_id, scores_ood)
    return ReportEntry(id_set, ood_set, postprocessor, fpr_at_tpr(a, b, 0.95),
                       auroc(a, b), int(a.size), int(b.size))


@dataclass
class EvalReport:
    entries: list[ReportEntry] = field(default_factory=list)
    seed: int | None = None
    config_digest: str = ""
    metadata: dict = field(default_factory=dict)

    def add(self, entry: ReportEntry) -> None:
        self.entries.append(entry)

    def get(self, ood_set: str, postprocessor: str) -> ReportEntry:
        for e in self.entries:
            if e.ood_set == ood_set and e.postprocessor == postprocessor:
                return e
        raise KeyError((ood_set, postprocessor))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "config_digest": self.config_digest,
                "metadata": self.metadata, "columns": list(REPORT_COLUMNS),
                "entries": [asdict(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(entries=[ReportEntry(**e) for e in d["entries"]], seed=d.get("seed"),
                   config_digest=d.get("config_digest", ""), metadata=d.get("metadata", {}))

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        """Write ``<stem>.json`` (full report) and ``<stem>.csv`` (entries, fixed column order)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        json_path, csv_path = out / f"{stem}.json", out / f"{stem}.csv"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with csv_path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(REPORT_COLUMNS)
            for e in self.entries:
                row = asdict(e)
                w.writerow([row[c] for c in REPORT_COLUMNS])
        return json_path, csv_path

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def summary(self) -> str:
        lines = [f"{'ood_set':<20} {'postprocessor':<14} {'FPR@95':>8} {'AUROC':>8}"]
        for e in self.entries:
            lines.append(f"{e.ood_set:<20} {e.postprocessor:<14} {e.fpr_at_95:8.2f} {e.auroc:8.2f}")
        return "\n".join(lines)


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
