"""Probing transformers trained on damped oscillators for numerical-method intermediates."""

from ._core import (
    FormatError,
    OscParams,
    UsageError,
    classify_set_w,
    closed_form_state,
    dataset,
    evaluate_model,
    fit_linear,
    fit_reverse,
    fit_taylor_cca,
    mat_exp,
    method_features,
    pearson_correlation,
    query,
    run_stepper,
    synthetic_byproduct,
    system_matrix,
    trajectory,
)

__all__ = [
    "FormatError",
    "OscParams",
    "UsageError",
    "classify_set_w",
    "closed_form_state",
    "dataset",
    "evaluate_model",
    "fit_linear",
    "fit_reverse",
    "fit_taylor_cca",
    "mat_exp",
    "method_features",
    "pearson_correlation",
    "query",
    "run_stepper",
    "synthetic_byproduct",
    "system_matrix",
    "trajectory",
]
