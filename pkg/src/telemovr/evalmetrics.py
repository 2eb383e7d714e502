"""Evaluation measures: location error, weight distance, loglik, and
dataset-level aggregation across seeds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec


@dataclass
class EvalReport:
    """Metrics for one run or an aggregate over runs.

    weight_l2_distance is None when no ground-truth weights are available
    (real data); breakdown keeps the per-seed rows behind an aggregate.
    """

    mean_location_error: float
    observed_loglik: float
    weight_l2_distance: float | None = None
    breakdown: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mean_location_error": self.mean_location_error,
            "observed_loglik": self.observed_loglik,
            "weight_l2_distance": self.weight_l2_distance,
            "breakdown": self.breakdown,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    def csv_row(self) -> str:
        w = "" if self.weight_l2_distance is None else repr(self.weight_l2_distance)
        return f"{self.mean_location_error!r},{w},{self.observed_loglik!r}"

    @staticmethod
    def csv_header() -> str:
        return "mean_location_error,weight_l2_distance,observed_loglik"


def location_error(estimated, truth, grid: GridSpec) -> float:
    """Arithmetic mean Euclidean distance between the cell centers of two
    equally long paths, meters."""
    est = np.asarray(estimated, dtype=np.int64)
    tru = np.asarray(truth, dtype=np.int64)
    if est.shape != tru.shape:
        raise ValueError(f"path lengths differ: {est.shape} vs {tru.shape}")
    d = grid.centers[est] - grid.centers[tru]
    return float(np.sqrt((d * d).sum(axis=1)).mean())


def location_error_points(estimated, points: dict[int, tuple[float, float]],
                          grid: GridSpec) -> float:
    """Mean distance between estimated cell centers and labeled positions,
    evaluated only at the labeled time steps."""
    est = np.asarray(estimated, dtype=np.int64)
    if not points:
        raise ValueError("no labeled positions")
    total = 0.0
    for t, (x, y) in points.items():
        if not 0 <= t < len(est):
            raise ValueError(f"labeled step {t} outside the path")
        cx, cy = grid.centers[est[t]]
        total += float(np.hypot(cx - x, cy - y))
    return total / len(points)


def weight_distance(learned, truth) -> float:
    """Euclidean distance between two weight matrices, compared as the
    zone-concatenated vectors."""
    a = np.atleast_2d(np.asarray(learned, dtype=float))
    b = np.atleast_2d(np.asarray(truth, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"weight shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a.ravel() - b.ravel()))


def aggregate(reports: list[EvalReport]) -> EvalReport:
    """Arithmetic mean of each metric over runs; keeps per-run rows."""
    if not reports:
        raise ValueError("nothing to aggregate")
    breakdown = []
    for i, r in enumerate(reports):
        breakdown.append({"index": i, **r.to_json(), "breakdown": None})
    wd = [r.weight_l2_distance for r in reports]
    wmean = None if any(v is None for v in wd) else float(np.mean(wd))
    return EvalReport(
        mean_location_error=float(np.mean([r.mean_location_error for r in reports])),
        observed_loglik=float(np.mean([r.observed_loglik for r in reports])),
        weight_l2_distance=wmean,
        breakdown=breakdown,
    )
