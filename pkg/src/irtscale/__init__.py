"""Calibration, diagnostics, scoring and short-form construction for dichotomous IRT."""

from .diagnostics import (
    FitIndices,
    ItemFitReport,
    M2Report,
    Q3Report,
    fit_indices,
    independence_m2,
    infit_outfit,
    m2_degrees_of_freedom,
    m2_statistic,
    q3_matrix,
    srmsr,
)
from .estimation import (
    CalibrationConfig,
    CalibrationResult,
    DegenerateItemError,
    compare_models,
    fit,
    marginal_log_likelihood,
)
from .io import bundled_aicos_bank, bundled_aicos_short_form, load_bank, load_responses, save_bank
from .model import (
    ItemBank,
    ItemParameters,
    ResponseMatrix,
    ThetaGrid,
    irf,
    item_information,
    log_likelihood,
    simulate_responses,
    test_information,
    tif_summary,
)
from .scale import (
    EliminationRules,
    build_short_form,
    compare_forms,
    flag_items,
    resolve_local_dependence,
    run_reduction_pipeline,
)
from .scoring import (
    AbilityEstimate,
    composite_reliability,
    conditional_reliability,
    cronbach_alpha,
    eap_marginal_reliability,
    empirical_reliability,
    score_eap,
    score_responses,
    wright_map_data,
)

__version__ = "0.1.0"
