"""
Main evaluation runner for SDF-based localization.

Runs the benchmark suite through the pipeline and calculates aggregate metrics.
"""
import sys
import os
import json
import time
from datetime import datetime
from typing import Dict, Optional

# Add parent directory to path to import sdfloc modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from evaluation.datasets import BENCHMARK_CASES, get_statistics
from evaluation.metrics import (
    calculate_error_statistics, calculate_improvement, calculate_metrics_by_category, scale_errors
)
from sdfloc.errors import ConfigError, SdfLocError
from sdfloc.pipeline import PipelineConfig, prepare_sequence, run_localization
from sdfloc.sdf_map import SdfMap


def build_config(case: Dict) -> PipelineConfig:
    """PipelineConfig for a benchmark case; raises ConfigError on invalid overrides."""
    try:
        return PipelineConfig.model_validate(case["overrides"])
    except ValueError as e:
        raise ConfigError(f"case {case['id']}: {e}") from e


def run_single_evaluation(case: Dict, sdf_map: Optional[SdfMap] = None) -> Dict:
    """
    Run evaluation on a single benchmark case.

    Args:
        case: Benchmark case
        sdf_map: Map shared across cases with the same scene and voxel size

    Returns:
        Dictionary with evaluation results
    """
    start_time = time.time()

    try:
        config = build_config(case)
        sequence = prepare_sequence(config, sdf_map)
        report = run_localization(config, sequence, write_outputs=False)
        runtime = time.time() - start_time

        return {
            "case_id": case["id"],
            "success": True,
            "runtime": round(runtime, 3),
            "category": case["category"],
            "frames": len(report.frames),
            "ate_translation_rmse": report.ate_translation_rmse,
            "ate_rotation_rmse": report.ate_rotation_rmse,
            "odometry_ate_translation_rmse": report.odometry_ate_translation_rmse,
            "structure_rmse": report.structure_rmse,
            "recovered_scale": report.recovered_scale,
            "outliers": report.outliers,
            "not_converged_frames": report.not_converged_frames,
            "improvement": calculate_improvement(
                report.ate_translation_rmse, report.odometry_ate_translation_rmse or 0.0
            ),
        }

    except SdfLocError as e:
        return {
            "case_id": case["id"],
            "success": False,
            "error": f"{type(e).__name__}: {e}",
            "runtime": 0,
            "category": case["category"],
        }


def run_evaluation(verbose: bool = True) -> Dict:
    """
    Run complete evaluation on all benchmark cases.

    Args:
        verbose: Print progress

    Returns:
        Dictionary with comprehensive evaluation results
    """
    if verbose:
        print("=" * 70)
        print("SDF LOCALIZATION EVALUATION")
        print("=" * 70)
        print()

    stats = get_statistics()
    if verbose:
        print(f"Benchmark Suite: {stats['total_cases']} sequences")
        print(f"  - Total frames: {stats['total_frames']}")
        for category, count in stats["categories"].items():
            print(f"  - {category}: {count}")
        print()
        print("Running evaluation...")
        print()

    # All cases share the default room and voxel size, so the map is built once
    shared_map = prepare_sequence(PipelineConfig()).sdf_map
    if verbose:
        print(f"✓ SDF map built ({len(shared_map.blocks)} blocks)")
        print()

    results = []
    for i, case in enumerate(BENCHMARK_CASES):
        result = run_single_evaluation(case, shared_map)
        results.append(result)

        if verbose:
            status = "✓" if result["success"] else "✗"
            detail = (
                f"ATE {result['ate_translation_rmse']:.4f} m"
                if result["success"] else result["error"]
            )
            print(f"  {status} [{i + 1}/{len(BENCHMARK_CASES)}] {case['id']}: {detail}")

    if verbose:
        print()

    succeeded = [r for r in results if r["success"]]
    ate_metrics = calculate_error_statistics([r["ate_translation_rmse"] for r in succeeded])
    odometry_metrics = calculate_error_statistics(
        [r["odometry_ate_translation_rmse"] for r in succeeded if r["odometry_ate_translation_rmse"] is not None]
    )
    runtime_metrics = calculate_error_statistics([r["runtime"] for r in succeeded])
    category_metrics = calculate_metrics_by_category(results)
    scale_metrics = calculate_error_statistics(scale_errors(results))

    evaluation_results = {
        "timestamp": datetime.now().isoformat(),
        "suite_statistics": stats,
        "ate_metrics": ate_metrics,
        "odometry_ate_metrics": odometry_metrics,
        "runtime_metrics": runtime_metrics,
        "scale_error_metrics": scale_metrics,
        "category_metrics": category_metrics,
        "failed_cases": [r["case_id"] for r in results if not r["success"]],
        "individual_results": results
    }

    if verbose:
        print("=" * 70)
        print("EVALUATION RESULTS")
        print("=" * 70)
        print()
        print(f"ATE translation RMSE (m):")
        print(f"  Localized: mean {ate_metrics['mean']}, P95 {ate_metrics['p95']}, max {ate_metrics['max']}")
        print(f"  Odometry:  mean {odometry_metrics['mean']}, P95 {odometry_metrics['p95']}, max {odometry_metrics['max']}")
        print()
        print(f"Scale error |s - 1|:")
        print(f"  Mean: {scale_metrics['mean']}, Max: {scale_metrics['max']}")
        print()
        print(f"Runtime (seconds):")
        print(f"  P50:  {runtime_metrics['p50']}s")
        print(f"  P95:  {runtime_metrics['p95']}s")
        print(f"  Mean: {runtime_metrics['mean']}s")
        print()
        print(f"Performance by Category:")
        for category, metrics in category_metrics.items():
            print(f"  {category}: {metrics['succeeded']}/{metrics['cases']} succeeded, "
                  f"ATE {metrics['ate_mean']} m (odometry {metrics['odometry_ate_mean']} m)")
        print()

    return evaluation_results


def save_results(results: Dict, output_file: str = "evaluation/results/benchmark_results.json"):
    """
    Save evaluation results to JSON file.

    Args:
        results: Evaluation results dictionary
        output_file: Output file path
    """
    os.makedirs(os.path.dirname(output_file), exist_ok=True)

    with open(output_file, 'w') as f:
        json.dump(results, f, indent=2)

    print(f"✓ Results saved to {output_file}")
    print()


def main():
    """Main evaluation entry point."""
    print()
    results = run_evaluation(verbose=True)
    save_results(results)

    print("=" * 70)
    print("SUMMARY")
    print("=" * 70)
    print()
    print(f"**Benchmark Suite**: {results['suite_statistics']['total_cases']} sequences")
    print(f"   - {len(results['suite_statistics']['categories'])} categories")
    print(f"   - {len(results['failed_cases'])} failed")
    print()
    print(f"**Localized ATE**: mean {results['ate_metrics']['mean']} m")
    print(f"**Odometry ATE**:  mean {results['odometry_ate_metrics']['mean']} m")
    print()
    print("=" * 70)


if __name__ == "__main__":
    main()
