"""
Aggregate metrics over benchmark runs.
"""
from typing import Dict, List

import numpy as np


def calculate_error_statistics(values: List[float]) -> Dict:
    """
    Calculate distribution statistics of a per-run error or timing.

    Args:
        values: One measurement per successful run

    Returns:
        Dictionary with p50, p95, mean, max, min
    """
    if not values:
        return {"p50": 0, "p95": 0, "mean": 0, "max": 0, "min": 0}

    return {
        "p50": round(float(np.percentile(values, 50)), 4),
        "p95": round(float(np.percentile(values, 95)), 4),
        "mean": round(float(np.mean(values)), 4),
        "max": round(float(max(values)), 4),
        "min": round(float(min(values)), 4),
    }


def calculate_improvement(localized: float, baseline: float) -> Dict:
    """
    Compare a localized error against the odometry-only error of the same run.

    Returns:
        Dictionary with the absolute delta and the reduction factor (baseline / localized)
    """
    factor = baseline / localized if localized > 0 else float("inf")
    return {
        "delta": round(localized - baseline, 4),
        "reduction_factor": round(factor, 2) if np.isfinite(factor) else None,
    }


def calculate_metrics_by_category(results: List[Dict]) -> Dict:
    """
    Mean ATE and success rate per category.

    Args:
        results: Output of run_single_evaluation for every case

    Returns:
        {category: {cases, succeeded, ate_mean, odometry_ate_mean}}
    """
    by_category: Dict[str, List[Dict]] = {}
    for result in results:
        by_category.setdefault(result["category"], []).append(result)

    metrics = {}
    for category, rows in by_category.items():
        ok = [r for r in rows if r["success"]]
        metrics[category] = {
            "cases": len(rows),
            "succeeded": len(ok),
            "ate_mean": round(float(np.mean([r["ate_translation_rmse"] for r in ok])), 4) if ok else None,
            "odometry_ate_mean": (
                round(float(np.mean([r["odometry_ate_translation_rmse"] for r in ok])), 4) if ok else None
            ),
        }
    return metrics


def scale_errors(results: List[Dict]) -> List[float]:
    """|recovered scale - 1| of every successful run that reports a scale."""
    return [
        abs(r["recovered_scale"] - 1.0)
        for r in results
        if r["success"] and r.get("recovered_scale") is not None
    ]
