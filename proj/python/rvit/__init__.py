"""Python bindings for the rvit core library."""

from ._rvit import (
    ConfigError,
    ParseError,
    ShapeError,
    compare_to_full,
    estimate_cost,
    generate_scene,
    lag1_autocorrelation,
    ms1_plan,
    retained_count,
    run_experiment,
    sample_seed,
    similarity_plan,
    spearman,
    sweep_csv,
)

__all__ = [
    "ConfigError",
    "ParseError",
    "ShapeError",
    "compare_to_full",
    "estimate_cost",
    "generate_scene",
    "lag1_autocorrelation",
    "ms1_plan",
    "retained_count",
    "run_experiment",
    "sample_seed",
    "similarity_plan",
    "spearman",
    "sweep_csv",
]
