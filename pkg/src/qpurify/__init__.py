"""Continuous-measurement state purification with permutation feedback."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    BasisTransform,
    DensityMatrix,
    Observable,
    build_observable,
    eig_hermitian,
    expectation,
    impurity,
    is_unbiased,
    maximally_mixed,
    unbiased_basis,
)
from .sme import SmeConfig, draw_noise, simulate_unassisted, sme_step  # noqa: E402
from .feedback import decay_rate, restore_basis, select_permutation, simulate_feedback  # noqa: E402
from .analytics import (  # noqa: E402
    closed_form_state,
    constants,
    feedback_impurity_bound,
    mean_impurity_unassisted,
    record_density,
    speedup_lower_bound,
    two_level_bound_L2,
    verify_lemma1,
)

__all__ = [
    "BasisTransform",
    "DensityMatrix",
    "Observable",
    "build_observable",
    "eig_hermitian",
    "expectation",
    "impurity",
    "is_unbiased",
    "maximally_mixed",
    "unbiased_basis",
    "SmeConfig",
    "draw_noise",
    "simulate_unassisted",
    "sme_step",
    "decay_rate",
    "restore_basis",
    "select_permutation",
    "simulate_feedback",
    "closed_form_state",
    "constants",
    "feedback_impurity_bound",
    "mean_impurity_unassisted",
    "record_density",
    "speedup_lower_bound",
    "two_level_bound_L2",
    "verify_lemma1",
]
