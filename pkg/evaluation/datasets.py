"""
Benchmark sequences for evaluating localization accuracy.

Each case includes:
- id: Unique identifier
- overrides: PipelineConfig fields replacing the defaults
- category: Type of case (standard, noise, drift, coupling, long)
"""

# 5 mm and 0.1 deg per frame
STANDARD_DRIFT = {"translation_sigma": 0.005, "rotation_sigma": 0.001745}

BENCHMARK_CASES = [
    # ========== STANDARD ==========
    {
        "id": "room_default",
        "overrides": {"seed": 0, "odometry": STANDARD_DRIFT},
        "category": "standard"
    },
    {
        "id": "room_seed_1",
        "overrides": {"seed": 1, "odometry": STANDARD_DRIFT},
        "category": "standard"
    },
    {
        "id": "room_seed_2",
        "overrides": {"seed": 2, "odometry": STANDARD_DRIFT},
        "category": "standard"
    },

    # ========== PIXEL NOISE ==========
    {
        "id": "noise_clean",
        "overrides": {"seed": 0, "pixel_sigma": 0.0, "odometry": STANDARD_DRIFT},
        "category": "noise"
    },
    {
        "id": "noise_high",
        "overrides": {"seed": 0, "pixel_sigma": 2.0, "odometry": STANDARD_DRIFT},
        "category": "noise"
    },

    # ========== ODOMETRY DRIFT ==========
    {
        "id": "drift_scale_short",
        "overrides": {"seed": 0, "odometry": {"scale": 0.8}},
        "category": "drift"
    },
    {
        "id": "drift_scale_long",
        "overrides": {"seed": 0, "odometry": {"scale": 1.2}},
        "category": "drift"
    },
    {
        "id": "drift_noisy",
        "overrides": {"seed": 0, "odometry": {"translation_sigma": 0.02, "rotation_sigma": 0.01}},
        "category": "drift"
    },

    # ========== COUPLING ==========
    {
        "id": "coupling_off",
        "overrides": {"seed": 0, "odometry": STANDARD_DRIFT, "solver": {"lambda": 0.0}},
        "category": "coupling"
    },
    {
        "id": "coupling_weak",
        "overrides": {"seed": 0, "odometry": STANDARD_DRIFT, "solver": {"lambda": 0.1}},
        "category": "coupling"
    },
    {
        "id": "coupling_strong",
        "overrides": {"seed": 0, "odometry": STANDARD_DRIFT, "solver": {"lambda": 10.0}},
        "category": "coupling"
    },

    # ========== LONG SEQUENCES ==========
    {
        "id": "long_windowed",
        "overrides": {"seed": 0, "n_frames": 150, "odometry": STANDARD_DRIFT, "solver": {"window_size": 10}},
        "category": "long"
    },
    {
        "id": "long_sparse_keyframes",
        "overrides": {"seed": 0, "n_frames": 150, "odometry": STANDARD_DRIFT, "keyframe_every": 3, "solver": {"window_size": 10}},
        "category": "long"
    },
]


def get_benchmark_cases(category=None):
    """
    Get benchmark cases, optionally filtered by category.

    Args:
        category: Optional category filter (standard, noise, drift, coupling, long)

    Returns:
        List of cases
    """
    if category is None:
        return BENCHMARK_CASES
    return [case for case in BENCHMARK_CASES if case["category"] == category]


def get_categories():
    """Get all unique categories in the benchmark, in suite order."""
    return list(dict.fromkeys(case["category"] for case in BENCHMARK_CASES))


def get_statistics():
    """Get statistics about the benchmark suite."""
    categories = get_categories()
    return {
        "total_cases": len(BENCHMARK_CASES),
        "categories": {cat: len(get_benchmark_cases(cat)) for cat in categories},
        "total_frames": sum(case["overrides"].get("n_frames", 60) for case in BENCHMARK_CASES),
    }


if __name__ == "__main__":
    stats = get_statistics()
    print("=== Benchmark Suite Statistics ===")
    print(f"Total cases: {stats['total_cases']}")
    print(f"Total frames: {stats['total_frames']}")
    print("\nCases by category:")
    for cat, count in stats['categories'].items():
        print(f"  {cat}: {count}")
