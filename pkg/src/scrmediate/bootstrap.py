"""Nonparametric bootstrap confidence intervals for the effect estimands.

Subjects are the resampling unit.  Each resample refits the requested
estimator from scratch and re-evaluates the effect curves; intervals are
percentile intervals of the resampled estimates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .cif import ESTIMANDS, EffectTable, effect_table
from .cox import ConvergenceError, fit_multistate
from .data import Dataset
from .frailty import FrailtySpec, fit_frailty

MAX_FAILURE_FRACTION = 0.2


@dataclass(frozen=True)
class BootstrapConfig:
    resamples: int = 300
    seed: Optional[int] = None
    level: float = 0.95

    def __post_init__(self):
        if self.resamples < 1:
            raise ValueError("resamples must be positive")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must be in (0, 1)")


class BootstrapError(RuntimeError):
    """Raised when too many resample refits fail to converge."""


def _fit_and_evaluate(ds: Dataset, variant: str, times,
                      frailty_spec: FrailtySpec) -> Dict[str, np.ndarray]:
    fit = fit_multistate(ds)
    nodes = None
    if variant == "frailty":
        fit = fit_frailty(ds, frailty_spec, init=fit)
        nodes = frailty_spec.node_count
    tab = effect_table(fit, ds, times, frailty_nodes=nodes)
    return tab.estimates


def bootstrap_effects(dataset: Dataset, times: Sequence[float],
                      variant: str = "npmle",
                      config: BootstrapConfig = BootstrapConfig(),
                      frailty_spec: Optional[FrailtySpec] = None,
                      workers: int = 1) -> EffectTable:
    """Point estimates with percentile bootstrap intervals.

    ``variant`` is "npmle" or "frailty".  Resample b draws its seed from
    ``(config.seed, b)`` so any single resample can be replayed in
    isolation.  Aborts if more than 20 percent of refits fail.

    ``workers`` is accepted for interface stability; evaluation is serial.
    """
    if variant not in ("npmle", "frailty"):
        raise ValueError(f"unknown estimator variant {variant!r}")
    del workers
    frailty_spec = frailty_spec or FrailtySpec()
    times = np.asarray(times, dtype=float)

    point = _fit_and_evaluate(dataset, variant, times, frailty_spec)

    root = np.random.SeedSequence(config.seed)
    draws = {name: [] for name in ESTIMANDS}
    n_failed = 0
    for b in range(config.resamples):
        rng = np.random.default_rng(root.spawn(1)[0] if config.seed is None
                                    else np.random.SeedSequence((config.seed, b)))
        idx = rng.integers(0, dataset.n, size=dataset.n)
        try:
            est = _fit_and_evaluate(dataset.subset(idx), variant, times,
                                    frailty_spec)
        except (ConvergenceError, ValueError, FloatingPointError):
            n_failed += 1
            if n_failed > MAX_FAILURE_FRACTION * config.resamples:
                raise BootstrapError(
                    f"{n_failed} of {b + 1} bootstrap refits failed "
                    f"(limit {MAX_FAILURE_FRACTION:.0%} of "
                    f"{config.resamples})")
            continue
        for name in ESTIMANDS:
            draws[name].append(est[name])

    lo_q = (1.0 - config.level) / 2.0
    hi_q = 1.0 - lo_q
    ci_lower, ci_upper = {}, {}
    for name in ESTIMANDS:
        arr = np.asarray(draws[name])
        ci_lower[name] = np.quantile(arr, lo_q, axis=0)
        ci_upper[name] = np.quantile(arr, hi_q, axis=0)
    return EffectTable(times=times, estimates=point,
                       ci_lower=ci_lower, ci_upper=ci_upper)
