"""
Baseline comparison: SDF-coupled localization against reprojection-only (lambda = 0)
and odometry-only (localization disabled) runs on the same sequences.
"""
import sys
import os
from typing import Dict, List, Sequence

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from evaluation.datasets import STANDARD_DRIFT
from evaluation.metrics import calculate_error_statistics
from sdfloc.errors import SdfLocError
from sdfloc.pipeline import PipelineConfig, prepare_sequence, run_localization

VARIANTS = {
    "odometry": {"localization": False},
    "reprojection_only": {"solver": {"lambda": 0.0}},
    "sdf_coupled": {"solver": {"lambda": 1.0}},
}


def compare_variants(seeds: Sequence[int] = range(5), base: Dict = None) -> Dict:
    """
    Run every variant on the same seeds, reusing one sequence per seed.

    Args:
        seeds: Sequence seeds
        base: PipelineConfig fields shared by every run

    Returns:
        {variant: {"ate": [...], "failures": int, "stats": {...}}} plus a paired
        "sdf_not_worse" count
    """
    seeds = list(seeds)
    base = dict(base or {"odometry": STANDARD_DRIFT})
    runs: Dict[str, Dict[str, List]] = {name: {"ate": [], "failures": 0} for name in VARIANTS}
    sdf_not_worse = 0
    shared_map = None

    for seed in seeds:
        sequence = prepare_sequence(PipelineConfig.model_validate({**base, "seed": seed}), shared_map)
        shared_map = sequence.sdf_map
        paired = {}
        for name, overrides in VARIANTS.items():
            config = PipelineConfig.model_validate({**base, **overrides, "seed": seed})
            try:
                report = run_localization(config, sequence, write_outputs=False)
            except SdfLocError:
                runs[name]["failures"] += 1
                continue
            runs[name]["ate"].append(report.ate_translation_rmse)
            paired[name] = report.ate_translation_rmse
        if "sdf_coupled" in paired and "reprojection_only" in paired:
            sdf_not_worse += paired["sdf_coupled"] <= paired["reprojection_only"] + 1e-9

    for name, run in runs.items():
        run["stats"] = calculate_error_statistics(run["ate"])
    return {"variants": runs, "sdf_not_worse": sdf_not_worse, "seeds": len(seeds)}


def print_comparison(comparison: Dict):
    """Print formatted comparison results."""
    print("=" * 70)
    print("BASELINE COMPARISON: odometry vs reprojection-only vs SDF-coupled")
    print("=" * 70)
    print()

    print(f"{'Variant':<20} {'Mean ATE (m)':<15} {'P95 (m)':<15} {'Failures':<10}")
    print("-" * 70)
    for name, run in comparison["variants"].items():
        stats = run["stats"]
        print(f"{name:<20} {stats['mean']:<15.4f} {stats['p95']:<15.4f} {run['failures']:<10}")

    print()
    print(f"SDF-coupled not worse than reprojection-only: "
          f"{comparison['sdf_not_worse']}/{comparison['seeds']} seeds")
    print()


if __name__ == "__main__":
    print_comparison(compare_variants())
