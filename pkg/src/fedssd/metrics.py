"""Evaluation, forgetting measurements and CSV/JSON emission."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fedssd.nn import ModelParams, predict

CSV_SCHEMA_VERSION = 1
JSON_SCHEMA_VERSION = 1


def confusion_counts(params: ModelParams, ds) -> np.ndarray:
    """``(K, K)`` integer counts; rows are true classes, columns predictions."""
    k = ds.n_classes
    pred = predict(params, ds.features) if len(ds) else np.empty(0, dtype=np.int64)
    return np.bincount(ds.labels * k + pred, minlength=k * k).reshape(k, k)


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    class_accuracy: np.ndarray
    confusion: np.ndarray


def evaluate(params: ModelParams, test) -> Evaluation:
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    cm = confusion_counts(params, test)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, np.diag(cm) / np.maximum(support, 1), np.nan)
    return Evaluation(float(np.trace(cm) / cm.sum()), recall, cm)


def forgetting_gap(acc_global: float, acc_local_mean: float) -> float:
    """Positive when local training lost accuracy relative to its starting point."""
    for v in (acc_global, acc_local_mean):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"accuracy {v} outside [0, 1]")
    return acc_global - acc_local_mean


def rounds_to_target(series: Sequence[float], target: float) -> int | None:
    if len(series) == 0:
        raise ValueError("empty accuracy series")
    for t, acc in enumerate(series):
        if acc >= target:
            return t
    return None


@dataclass
class RoundMetrics:
    acc_global: float
    acc_global_start: float
    acc_local: dict[int, float]
    class_accuracy: np.ndarray
    confusion: np.ndarray
    losses: dict[int, tuple[float, float]] = field(default_factory=dict)

    @property
    def acc_local_mean(self) -> float:
        if not self.acc_local:
            return float("nan")
        return float(np.mean([self.acc_local[c] for c in sorted(self.acc_local)]))

    @property
    def gap(self) -> float:
        """Round-start global accuracy minus mean local accuracy."""
        return forgetting_gap(self.acc_global_start, self.acc_local_mean)

    @property
    def gap_post(self) -> float:
        return forgetting_gap(self.acc_global, self.acc_local_mean)

    def mean_losses(self) -> tuple[float, float]:
        if not self.losses:
            return float("nan"), float("nan")
        vals = np.array([self.losses[c] for c in sorted(self.losses)])
        return float(vals[:, 0].mean()), float(vals[:, 1].mean())


@dataclass
class RoundRecord:
    round: int
    clients: tuple[int, ...]
    credibility: object | None
    params_digest: str
    metrics: RoundMetrics


def csv_header(n_classes: int) -> list[str]:
    return [
        "schema_version",
        "round",
        "acc_global",
        "acc_global_start",
        "acc_local_mean",
        "gap",
        "gap_post",
        *[f"class_acc_{k}" for k in range(n_classes)],
        "loss_ce",
        "loss_distill",
    ]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def metrics_csv(records: Iterable[RoundRecord], n_classes: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_header(n_classes))
    for rec in records:
        m = rec.metrics
        ce, dl = m.mean_losses()
        writer.writerow(
            [
                CSV_SCHEMA_VERSION,
                rec.round,
                _fmt(m.acc_global),
                _fmt(m.acc_global_start),
                _fmt(m.acc_local_mean),
                _fmt(m.gap),
                _fmt(m.gap_post),
                *[_fmt(v) for v in m.class_accuracy],
                _fmt(ce),
                _fmt(dl),
            ]
        )
    return buf.getvalue()


def results_document(records: Sequence[RoundRecord], meta: dict | None = None) -> dict:
    rounds = []
    for rec in records:
        m = rec.metrics
        rounds.append(
            {
                "round": rec.round,
                "clients": list(rec.clients),
                "params_sha256": rec.params_digest,
                "acc_global": m.acc_global,
                "acc_global_start": m.acc_global_start,
                "acc_local": {str(c): m.acc_local[c] for c in sorted(m.acc_local)},
                "acc_local_mean": m.acc_local_mean,
                "gap": m.gap,
                "gap_post": m.gap_post,
                "class_accuracy": [float(v) for v in m.class_accuracy],
                "confusion": m.confusion.tolist(),
                "losses": {
                    str(c): {"ce": m.losses[c][0], "distill": m.losses[c][1]}
                    for c in sorted(m.losses)
                },
                "credibility": rec.credibility.to_dict() if rec.credibility is not None else None,
            }
        )
    return {"schema_version": JSON_SCHEMA_VERSION, **(meta or {}), "rounds": rounds}


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit(
    records: Sequence[RoundRecord],
    csv_path,
    json_path,
    *,
    n_classes: int,
    meta: dict | None = None,
) -> tuple[Path, Path]:
    """Write the per-round CSV and the full JSON results document."""
    csv_path, json_path = Path(csv_path), Path(json_path)
    _write(csv_path, metrics_csv(records, n_classes))
    doc = results_document(records, meta)
    _write(json_path, json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n")
    return csv_path, json_path


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    """Column name -> values; empty arrays for a header-only file."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if header[0] != "schema_version":
        raise ValueError(f"{path}: not a metrics CSV")
    cols = {}
    for j, name in enumerate(header):
        dtype = np.int64 if name in ("schema_version", "round") else np.float64
        cols[name] = np.array([row[j] for row in body], dtype=dtype)
    return cols
