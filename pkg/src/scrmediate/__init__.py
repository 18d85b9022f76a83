"""Randomized interventional direct and indirect effects for semicompeting
risks with a binary time-varying confounder.

Workflow: build a :class:`Dataset` (or read a subjects CSV), fit per-arm
multistate proportional-hazards models with :func:`fit_multistate`
(optionally adding a shared normal frailty with :func:`fit_frailty`),
then evaluate counterfactual cumulative incidence curves and the six
effect estimands, with bootstrap intervals via :func:`bootstrap_effects`.
"""

__version__ = "0.1.0"

from .bootstrap import BootstrapConfig, BootstrapError, bootstrap_effects
from .cif import (ArmIncrements, CifCurve, CounterfactualIncrements,
                  DRAW_MODES, ESTIMANDS, EffectTable, build_fit_grid,
                  counterfactual_cif, direct_cif, effect_curves,
                  effect_table, forward_cif, marginal_draw_hazard,
                  population_cif)
from .cox import (ConvergenceError, MultistateFit, TransitionModelFit,
                  fit_multistate, fit_transition)
from .data import (Dataset, SchemaError, SubjectRecord, TimeGrid,
                   build_dataset, pooled_event_grid, read_subjects_csv,
                   write_subjects_csv)
from .datasets import make_hct_synthetic
from .frailty import FrailtySpec, fit_frailty
from .simulate import (DgpSpec, ReplicationReport, mc_counterfactual_oracle,
                       replication_study, simulate_dataset,
                       true_effect_table, true_population_cif)

__all__ = [
    "ArmIncrements", "BootstrapConfig", "BootstrapError", "CifCurve",
    "ConvergenceError", "CounterfactualIncrements", "DRAW_MODES", "Dataset",
    "DgpSpec", "ESTIMANDS", "EffectTable", "FrailtySpec", "MultistateFit",
    "ReplicationReport", "SchemaError", "SubjectRecord", "TimeGrid",
    "TransitionModelFit", "bootstrap_effects", "build_dataset",
    "build_fit_grid", "counterfactual_cif", "direct_cif", "effect_curves",
    "effect_table", "fit_frailty", "fit_multistate", "fit_transition",
    "forward_cif", "make_hct_synthetic", "marginal_draw_hazard",
    "mc_counterfactual_oracle", "pooled_event_grid", "population_cif",
    "read_subjects_csv", "replication_study", "simulate_dataset",
    "true_effect_table", "true_population_cif", "write_subjects_csv",
]
