"""Benchmark metrics and the corpus evaluation harness."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .nnops import ContractViolation

MISS_THRESHOLD_M = 2.0


def _check(predictions: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    predictions = np.asarray(predictions, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if predictions.ndim != 3 or gt.ndim != 2:
        raise ContractViolation("expected (K, t_f, 2) predictions and (t_f, 2) gt")
    if predictions.shape[1] != gt.shape[0]:
        raise ContractViolation(
            f"prediction length {predictions.shape[1]} != gt length {gt.shape[0]}")
    return predictions, gt


def min_ade(predictions: np.ndarray, gt: np.ndarray) -> float:
    """Minimum over candidates of the mean pointwise l2 distance."""
    predictions, gt = _check(predictions, gt)
    d = np.linalg.norm(predictions - gt[None], axis=2).mean(axis=1)
    return float(d.min())


def min_fde(predictions: np.ndarray, gt: np.ndarray) -> float:
    """Minimum over candidates of the endpoint distance."""
    predictions, gt = _check(predictions, gt)
    d = np.linalg.norm(predictions[:, -1, :] - gt[-1], axis=1)
    return float(d.min())


def miss_rate(predictions: np.ndarray, gt: np.ndarray,
              threshold: float = MISS_THRESHOLD_M) -> int:
    """1 if every endpoint is farther than `threshold` from the gt endpoint."""
    return int(min_fde(predictions, gt) > threshold)


def brier_min_fde(predictions: np.ndarray, probabilities: np.ndarray,
                  gt: np.ndarray) -> float:
    """minFDE plus (1 - P_best)^2, P_best being the minFDE candidate's
    probability (ties to the lowest index)."""
    predictions, gt = _check(predictions, gt)
    probabilities = np.asarray(probabilities, dtype=float)
    if probabilities.shape[0] != predictions.shape[0]:
        raise ContractViolation("one probability per candidate required")
    d = np.linalg.norm(predictions[:, -1, :] - gt[-1], axis=1)
    best = int(np.argmin(d))
    return float(d[best] + (1.0 - probabilities[best]) ** 2)


def p_best(predictions: np.ndarray, probabilities: np.ndarray,
           gt: np.ndarray) -> float:
    predictions, gt = _check(predictions, gt)
    d = np.linalg.norm(predictions[:, -1, :] - gt[-1], axis=1)
    return float(np.asarray(probabilities, dtype=float)[int(np.argmin(d))])


@dataclass
class MetricReport:
    k: int
    rows: list = field(default_factory=list)   # per-scenario dicts
    skipped: int = 0

    def mean(self, key: str) -> float:
        if not self.rows:
            return float("nan")
        return float(np.mean([row[key] for row in self.rows]))

    def summary(self) -> dict:
        return {
            "count": len(self.rows),
            "skipped": self.skipped,
            "minADE": self.mean("minADE"),
            "minFDE": self.mean("minFDE"),
            "MR": self.mean("MR"),
            "brier_minFDE": self.mean("brier_minFDE"),
        }


CSV_COLUMNS = ("scenario_id", "K", "minADE", "minFDE", "MR", "brier_minFDE",
               "P_best", "wall_ms")


def evaluate_corpus(predictor, scenarios: list, k: int, seed: int,
                    csv_path: str | None = None,
                    record_timing: bool = False) -> MetricReport:
    """Full-pipeline inference per scenario with a fixed seed.

    Scenarios without a ground-truth future are skipped (counted).  Rows
    are emitted in scenario order; wall_ms stays 0 unless timing recording
    is enabled, keeping the CSV byte-stable across identical runs.
    """
    report = MetricReport(k=k)
    for scenario in scenarios:
        if scenario.gt_future is None:
            report.skipped += 1
            continue
        t0 = time.perf_counter()
        pred = predictor.predict(scenario, seed=seed, k=k)
        wall = (time.perf_counter() - t0) * 1000.0 if record_timing else 0.0
        gt = pred.gt_future
        row = {
            "scenario_id": scenario.id,
            "K": k,
            "minADE": min_ade(pred.trajectories, gt),
            "minFDE": min_fde(pred.trajectories, gt),
            "MR": miss_rate(pred.trajectories, gt),
            "brier_minFDE": brier_min_fde(pred.trajectories, pred.probabilities, gt),
            "P_best": p_best(pred.trajectories, pred.probabilities, gt),
            "wall_ms": wall,
        }
        report.rows.append(row)
    if csv_path is not None:
        write_metric_csv(report, csv_path)
    return report


def write_metric_csv(report: MetricReport, path: str) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for row in report.rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in CSV_COLUMNS))
    mean = report.summary()
    lines.append(",".join([
        "corpus_mean", str(report.k), repr(mean["minADE"]), repr(mean["minFDE"]),
        repr(mean["MR"]), repr(mean["brier_minFDE"]), "", "",
    ]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
