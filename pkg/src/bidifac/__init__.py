"""Structured nuclear-norm decomposition of bidimensionally linked matrices."""
from .diagnostics import (
    alternating_factorized_fit,
    balanced_factors,
    factorized_objective,
    uniqueness_probe,
    variance_explained,
    verify_identifiability,
)
from .grid import LinkedMatrixGrid, MissingMask, center_blocks, load_grid, save_grid, scale_blocks
from .imputation import impute, impute_baseline
from .linalg import SvdTriple, marchenko_pastur_median, noise_operator_bound, sigma_mad, soft_svd, svd
from .penalty import ModuleSpec, check_penalty_conditions, enumerate_modules, lambda_for
from .simulation import SimConfig, rosr, rse_per_module, simulate_bidirectional, simulate_vertical
from .solver import (
    Decomposition,
    FitOptions,
    ModuleEstimate,
    fit_adaptive,
    fit_fixed,
    load_decomposition,
    objective,
    save_decomposition,
    temper_schedule,
)

__version__ = "0.1.0"
