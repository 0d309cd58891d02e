"""Tolerance curves, AUC and zone accuracy for rink-coordinate predictions."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .rink import FIVE_ZONES, THREE_ZONES, RinkPoint, ZonePartition, zone_indices

AXES = ("both", "x", "y")
AXIS_NAMES = {"both": "overall", "x": "x", "y": "y"}
DEFAULT_PARTITIONS = {"3": THREE_ZONES, "5": FIVE_ZONES}


@dataclass(frozen=True)
class PredictionPair:
    predicted: RinkPoint
    truth: RinkPoint
    clip_id: str = ""


def _check_axis(axis: str) -> None:
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")


def correct_at(pair: PredictionPair, t: float, axis: str = "both") -> bool:
    """Strictly-within-tolerance test: distance < t (not <=)."""
    _check_axis(axis)
    dx = pair.predicted.x - pair.truth.x
    dy = pair.predicted.y - pair.truth.y
    if axis == "x":
        return abs(dx) < t
    if axis == "y":
        return abs(dy) < t
    return float(np.hypot(dx, dy)) < t


def errors(pairs: Sequence[PredictionPair], axis: str = "both") -> np.ndarray:
    _check_axis(axis)
    d = np.array([[p.predicted.x - p.truth.x, p.predicted.y - p.truth.y] for p in pairs], dtype=np.float64)
    d = d.reshape(-1, 2)
    if axis == "x":
        return np.abs(d[:, 0])
    if axis == "y":
        return np.abs(d[:, 1])
    return np.hypot(d[:, 0], d[:, 1])


def phi_curve(pairs: Sequence[PredictionPair], t_grid: Sequence[float], axis: str = "both") -> list[tuple[float, float]]:
    """Fraction of pairs correct at each tolerance in ``t_grid``."""
    if not pairs:
        raise ValueError("phi_curve needs at least one prediction pair")
    ts = np.asarray(t_grid, dtype=np.float64)
    if ts.ndim != 1 or np.any(np.diff(ts) < 0):
        raise ValueError("tolerance grid must be a 1-D ascending sequence")
    err = errors(pairs, axis)
    frac = (err[:, None] < ts[None, :]).mean(axis=0)
    return [(float(t), float(f)) for t, f in zip(ts, frac)]


def tolerance_grid(t_min: float = 5.0, t_max: float = 50.0, step: float = 1.0) -> np.ndarray:
    if not t_min < t_max:
        raise ValueError(f"t_min must be below t_max, got {t_min} >= {t_max}")
    n = (t_max - t_min) / step
    if step <= 0 or abs(n - round(n)) > 1e-9:
        raise ValueError(f"step {step} must evenly divide [{t_min}, {t_max}]")
    return t_min + step * np.arange(int(round(n)) + 1)


def auc(
    pairs: Sequence[PredictionPair],
    t_min: float = 5.0,
    t_max: float = 50.0,
    axis: str = "both",
    step: float = 1.0,
) -> float:
    """Trapezoidal area under phi(t) over [t_min, t_max], normalised to a percentage."""
    ts = tolerance_grid(t_min, t_max, step)
    phi = np.array([f for _, f in phi_curve(pairs, ts, axis)])
    area = float(np.sum(0.5 * (phi[1:] + phi[:-1]) * np.diff(ts)))
    return 100.0 * area / (t_max - t_min)


@dataclass(frozen=True)
class ZoneRow:
    index: int
    label: str
    n: int
    accuracy: Optional[float]  # None when no ground truth falls in the zone


def zone_accuracy(pairs: Sequence[PredictionPair], zp: ZonePartition) -> list[ZoneRow]:
    if not pairs:
        raise ValueError("zone_accuracy needs at least one prediction pair")
    truth = zone_indices([p.truth.x for p in pairs], zp)
    pred = zone_indices([p.predicted.x for p in pairs], zp)
    rows = []
    for k, label in enumerate(zp.labels):
        mask = truth == k
        n = int(mask.sum())
        acc = float((pred[mask] == k).mean()) if n else None
        rows.append(ZoneRow(k, label, n, acc))
    return rows


def zone_confusion(pairs: Sequence[PredictionPair], zp: ZonePartition) -> np.ndarray:
    """Counts indexed [truth zone, predicted zone]."""
    k = len(zp.labels)
    out = np.zeros((k, k), dtype=np.int64)
    truth = zone_indices([p.truth.x for p in pairs], zp)
    pred = zone_indices([p.predicted.x for p in pairs], zp)
    np.add.at(out, (truth, pred), 1)
    return out


@dataclass
class EvalReport:
    n: int
    phi: dict[str, list[tuple[float, float]]]
    auc: dict[str, float]
    zones: dict[str, list[ZoneRow]] = field(default_factory=dict)
    mean_error_ft: float = float("nan")

    @property
    def auc_overall(self) -> float:
        return self.auc["overall"]


def evaluate(
    pairs: Sequence[PredictionPair],
    partitions: Mapping[str, ZonePartition] = DEFAULT_PARTITIONS,
    t_grid: Optional[Sequence[float]] = None,
    auc_step: float = 1.0,
) -> EvalReport:
    if not pairs:
        raise ValueError("cannot evaluate an empty prediction set")
    grid = tolerance_grid() if t_grid is None else t_grid
    phi = {AXIS_NAMES[a]: phi_curve(pairs, grid, a) for a in AXES}
    aucs = {AXIS_NAMES[a]: auc(pairs, axis=a, step=auc_step) for a in AXES}
    zones = {name: zone_accuracy(pairs, zp) for name, zp in partitions.items()}
    return EvalReport(len(pairs), phi, aucs, zones, float(errors(pairs).mean()))


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_report(
    pairs: Sequence[PredictionPair],
    partitions: Mapping[str, ZonePartition] = DEFAULT_PARTITIONS,
    out: str | Path = ".",
    t_grid: Optional[Sequence[float]] = None,
) -> EvalReport:
    """Evaluate and write ``phi_<axis>.csv``, ``auc.csv``, ``zones_<name>.csv`` and ``predictions.csv``."""
    report = evaluate(pairs, partitions, t_grid)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for axis, curve in report.phi.items():
        _write_csv(out / f"phi_{axis}.csv", ("tolerance_ft", "fraction"), [(_fmt(t), _fmt(f)) for t, f in curve])
    _write_csv(out / "auc.csv", ("axis", "auc_percent"), [(a, _fmt(v)) for a, v in report.auc.items()])
    for name, rows in report.zones.items():
        _write_csv(
            out / f"zones_{name}.csv",
            ("zone", "label", "n", "accuracy"),
            [(r.index, r.label, r.n, "" if r.accuracy is None else _fmt(r.accuracy)) for r in rows],
        )
    _write_csv(
        out / "predictions.csv",
        ("clip_id", "x_true", "y_true", "x_pred", "y_pred"),
        [(p.clip_id, _fmt(p.truth.x), _fmt(p.truth.y), _fmt(p.predicted.x), _fmt(p.predicted.y)) for p in pairs],
    )
    return report


def read_csv_rows(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
