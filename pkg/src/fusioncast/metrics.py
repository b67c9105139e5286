"""Forecast verification: continuous errors, contingency tables and CSI by lead time."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

THRESHOLDS = (0.1, 1.0, 4.0)
LEAD_FRAMES = (1, 4, 8, 12)
CADENCE_MIN = 10
UNDEFINED = float("nan")


class MetricsError(ValueError):
    pass


def _pair(p, g) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise MetricsError(f"prediction shape {p.shape} != truth shape {g.shape}")
    if p.size == 0:
        raise MetricsError("no pixels to evaluate")
    return p, g


def mae(p, g) -> float:
    p, g = _pair(p, g)
    return float(np.mean(np.abs(p - g)))


def rmse(p, g) -> float:
    p, g = _pair(p, g)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def binarize(grid, tau: float) -> np.ndarray:
    """Positive where value >= tau (inclusive)."""
    return np.asarray(grid) >= tau


@dataclass
class ContingencyTable:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ContingencyTable") -> "ContingencyTable":
        return ContingencyTable(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def contingency(pred_bin, truth_bin) -> ContingencyTable:
    pred_bin, truth_bin = np.asarray(pred_bin, dtype=bool), np.asarray(truth_bin, dtype=bool)
    if pred_bin.shape != truth_bin.shape:
        raise MetricsError(f"shape mismatch {pred_bin.shape} vs {truth_bin.shape}")
    tp = int(np.count_nonzero(pred_bin & truth_bin))
    fp = int(np.count_nonzero(pred_bin & ~truth_bin))
    fn = int(np.count_nonzero(~pred_bin & truth_bin))
    return ContingencyTable(tp, fp, fn, pred_bin.size - tp - fp - fn)


def csi(t: ContingencyTable) -> float:
    """TP / (TP + FP + FN); NaN when nothing was forecast or observed."""
    denom = t.tp + t.fp + t.fn
    return t.tp / denom if denom else UNDEFINED


def is_undefined(x: float) -> bool:
    return isinstance(x, float) and math.isnan(x)


@dataclass
class MetricsReport:
    thresholds: tuple[float, ...]
    lead_frames: tuple[int, ...]
    csi: dict[tuple[float, int], float]
    tables: dict[tuple[float, int], ContingencyTable]
    mae: float
    rmse: float
    n_samples: int
    aggregation: str = "pooled"
    fingerprint: str = ""
    undefined: list[tuple[float, int]] = field(default_factory=list)

    def csi_at(self, tau: float, lead_frame: int) -> float:
        return self.csi[(tau, lead_frame)]


def evaluate(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray], thresholds=THRESHOLDS,
             lead_frames=LEAD_FRAMES, aggregation: str = "pooled", fingerprint: str = "") -> MetricsReport:
    """Score forecasts of shape (T_out, n, n) against aligned truths, in physical units.

    ``pooled`` sums contingency counts over samples before taking CSI; ``mean``
    averages per-sample CSI, skipping samples where it is undefined.
    """
    if len(preds) != len(truths) or not preds:
        raise MetricsError(f"{len(preds)} predictions vs {len(truths)} truths")
    if aggregation not in ("pooled", "mean"):
        raise MetricsError(f"unknown aggregation {aggregation!r}")
    P = np.stack([np.asarray(p, dtype=np.float64) for p in preds])
    G = np.stack([np.asarray(g, dtype=np.float64) for g in truths])
    if P.shape != G.shape:
        raise MetricsError(f"prediction stack {P.shape} != truth stack {G.shape}")
    if P.ndim != 4:
        raise MetricsError(f"expected (samples, T_out, n, n), got {P.shape}")
    if max(lead_frames) > P.shape[1]:
        raise MetricsError(f"lead frame {max(lead_frames)} beyond forecast length {P.shape[1]}")
    tables, scores, undefined = {}, {}, []
    for tau in thresholds:
        for lead in lead_frames:
            per = [contingency(binarize(P[s, lead - 1], tau), binarize(G[s, lead - 1], tau)) for s in range(len(P))]
            pooled = sum(per, ContingencyTable())
            tables[(tau, lead)] = pooled
            if aggregation == "pooled":
                score = csi(pooled)
            else:
                vals = [csi(t) for t in per if not is_undefined(csi(t))]
                score = float(np.mean(vals)) if vals else UNDEFINED
            scores[(tau, lead)] = score
            if is_undefined(score):
                undefined.append((tau, lead))
    return MetricsReport(tuple(thresholds), tuple(lead_frames), scores, tables, mae(P, G), rmse(P, G), len(P),
                         aggregation, fingerprint, undefined)


# -- CSV layout -------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "NA" if is_undefined(x) else f"{x:.6f}"


def categorical_header(lead_frames=LEAD_FRAMES) -> list[str]:
    return ["threshold", "variant"] + [f"csi_t{lead * CADENCE_MIN}" for lead in lead_frames]


def write_report(reports: dict[str, MetricsReport] | MetricsReport, path, variant: str = "full") -> tuple[Path, Path]:
    """Write ``categorical.csv`` and ``continuous.csv`` into directory ``path``.

    Rows are grouped by threshold, then by variant in the given order.
    """
    if isinstance(reports, MetricsReport):
        reports = {variant: reports}
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    first = next(iter(reports.values()))
    cat, con = out / "categorical.csv", out / "continuous.csv"
    with open(cat, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(categorical_header(first.lead_frames))
        for tau in first.thresholds:
            for name, rep in reports.items():
                w.writerow([f"{tau:g}", name] + [_fmt(rep.csi[(tau, lead)]) for lead in rep.lead_frames])
    with open(con, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "rmse", "mae"])
        for name, rep in reports.items():
            w.writerow([name, _fmt(rep.rmse), _fmt(rep.mae)])
    return cat, con


def read_categorical(path) -> dict[tuple[str, float], list[float]]:
    """Parse ``categorical.csv`` into {(variant, threshold): [csi per lead column]}."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    out = {}
    for row in rows[1:]:
        out[(row[1], float(row[0]))] = [UNDEFINED if v == "NA" else float(v) for v in row[2:]]
    return out


def read_continuous(path) -> dict[str, tuple[float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {r[0]: (float(r[1]), float(r[2])) for r in rows[1:]}
