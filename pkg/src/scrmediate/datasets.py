"""Bundled example data: a synthetic allogeneic-transplant-shaped cohort.

The generator mimics the shape of a two-arm registry sample on a months
time scale: 636 subjects split 528 / 108 across arms, six baseline
covariates, a relapse-style intermediate event, a graft-versus-host-style
binary time-varying confounder and death as the terminal event.  A shared
lognormal-style frailty acts on all three event hazards so the
frailty-model variant has signal to find.  All values are simulated; no
real patient data is involved.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .data import Dataset, build_dataset
from .simulate import _next_transition

HCT_N = 636
HCT_ARM_COUNTS = (528, 108)
HCT_HORIZON = 123.0
HCT_COVARIATES = ["age", "sex", "kps", "prophylaxis", "disease", "graft"]
# strong enough that the frailty-model variant finds an interior maximum
# at this sample size (weak frailty signals pile up at the alpha = 0
# boundary in samples of a few hundred subjects)
HCT_FRAILTY_SD = 1.0


def make_hct_synthetic(seed: int = 20260828) -> Dataset:
    """Simulate the bundled transplant-shaped cohort (deterministic in seed)."""
    rng = np.random.default_rng(seed)
    n = HCT_N
    age = np.clip(rng.normal(40.0, 12.0, size=n), 18.0, 70.0) / 10.0
    sex = rng.binomial(1, 0.55, size=n).astype(float)
    kps = rng.binomial(1, 0.7, size=n).astype(float)
    prophylaxis = rng.binomial(1, 0.45, size=n).astype(float)
    disease = rng.binomial(1, 0.35, size=n).astype(float)
    graft = rng.binomial(1, 0.6, size=n).astype(float)
    x = np.column_stack([age, sex, kps, prophylaxis, disease, graft])

    z = np.zeros(n, dtype=int)
    z[rng.choice(n, size=HCT_ARM_COUNTS[1], replace=False)] = 1
    u = rng.normal(0.0, HCT_FRAILTY_SD, size=n)

    def lin(coefs):
        return x @ np.asarray(coefs)

    # months scale: rates chosen so most events land well inside 123 months
    conf_mult = np.exp(-0.03 * age + 0.1 * sex - 0.2 * kps - 0.3 * prophylaxis
                       + 0.15 * disease - 0.2 * z + u)
    inter_mult = np.exp(0.04 * age - 0.1 * sex - 0.25 * kps + 0.4 * disease
                        + 0.15 * graft - 0.35 * z + u)
    term_mult = np.exp(0.05 * age - 0.3 * kps + 0.3 * disease - 0.15 * z + u)
    cens_mult = np.exp(-0.05 * sex)

    tau = np.zeros(n)
    l = np.zeros(n, dtype=bool)
    n1 = np.zeros(n, dtype=bool)
    l_time = np.full(n, np.nan)
    t1_obs = np.full(n, np.nan)
    exit_time = np.full(n, np.nan)
    died = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    zeros = np.zeros(n)

    while active.any():
        idx = np.flatnonzero(active)
        la, na = l[idx], n1[idx]
        cq = (np.where(la, 0.0, 0.04 * conf_mult[idx]
                       * np.where(na, 0.8, 1.0)),
              zeros[idx], zeros[idx])
        ci = (np.where(na, 0.0, 0.015 * inter_mult[idx]
                       * np.where(la, 1.4, 1.0)),
              zeros[idx], zeros[idx])
        ct = (0.006 * term_mult[idx] * np.where(na, 2.2, 1.0)
              * np.where(la, 1.5, 1.0),
              zeros[idx], zeros[idx])
        cc = (0.008 * cens_mult[idx], zeros[idx], zeros[idx])
        t_ev, cause = _next_transition(rng, tau[idx], HCT_HORIZON,
                                       [cq, ci, ct, cc])
        tau[idx] = t_ev
        jump_l = cause == 0
        jump_i = cause == 1
        dead = cause == 2
        cens = (cause == 3) | (cause == -1)
        l_time[idx[jump_l]] = t_ev[jump_l]
        l[idx[jump_l]] = True
        t1_obs[idx[jump_i]] = t_ev[jump_i]
        n1[idx[jump_i]] = True
        died[idx[dead]] = True
        exit_time[idx[dead | cens]] = t_ev[dead | cens]
        active[idx[dead | cens]] = False

    delta1 = ~np.isnan(t1_obs)
    rows = []
    for i in range(n):
        rows.append(dict(
            id=i + 1, z=int(z[i]), x=tuple(np.round(x[i], 4)),
            l_time=None if np.isnan(l_time[i]) else round(float(l_time[i]), 4),
            t1=round(float(t1_obs[i]) if delta1[i] else float(exit_time[i]), 4),
            delta1=int(delta1[i]),
            t2=round(float(exit_time[i]), 4), delta2=int(died[i]),
        ))
    return build_dataset(rows, covariate_names=HCT_COVARIATES)
