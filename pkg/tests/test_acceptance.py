"""Acceptance gate: one test (and one printed PASS/FAIL line) per criterion.

Heavy criteria (replication studies, 10^6-path Monte-Carlo) run at the
pinned scales and take tens of minutes in total on one core.  Details of
every check are also appended to ``acceptance_report.txt`` next to this
file so the outcome survives pytest's output capture.
"""

import dataclasses
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from scrmediate.bootstrap import BootstrapConfig, bootstrap_effects
from scrmediate.cif import (CifCurve, assemble_counterfactual, build_fit_grid,
                            direct_cif, effect_curve_values, effect_curves,
                            effect_table, fitted_arm_increments, forward_cif,
                            marginal_draw_increments)
from scrmediate.cli import EXIT_OK, main as cli_main
from scrmediate.cox import RiskStructure, fit_multistate, partial_loglik
from scrmediate.data import build_dataset, write_subjects_csv
from scrmediate.datasets import make_hct_synthetic
from scrmediate.frailty import (FrailtySpec, _workspace_from_fit, e_step,
                                fit_frailty, m_step, observed_loglik)
from scrmediate.simulate import (DgpSpec, mc_counterfactual_oracle,
                                 replication_study, simulate_dataset,
                                 true_arm_increments, true_effect_table,
                                 true_population_cif, uniform_grid)

TIMES = (2.0, 4.0, 6.0, 8.0, 10.0)
_REPORT = Path(__file__).with_name("acceptance_report.txt")

# Reference SDs (published rounded to 3 decimals), Setting 1, no-frailty
# estimator, at t = 2, 4, 6, 8, 10.
REFERENCE_SD_SETTING1 = {
    "TE": (0.017, 0.026, 0.031, 0.032, 0.033),
    "OE": (0.017, 0.026, 0.031, 0.032, 0.033),
    "IDE": (0.017, 0.026, 0.031, 0.032, 0.033),
    "IIE": (0.001, 0.002, 0.004, 0.005, 0.005),
    "DCE": (0.017, 0.026, 0.031, 0.032, 0.033),
    "ICE": (0.001, 0.002, 0.004, 0.005, 0.005),
}


def _line(criterion: str, ok: bool, detail: str):
    msg = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(msg)
    with _REPORT.open("a") as fh:
        fh.write(msg + "\n")
    return msg


@pytest.fixture(scope="module")
def setting1_report():
    spec = DgpSpec(n=1000, frailty_sd=0.0, seed=20260823)
    return replication_study(spec, B=200,
                             estimator_variant="unconfoundedness",
                             times=TIMES, seed=20260823)


@pytest.fixture(scope="module")
def setting2_report():
    spec = DgpSpec(n=1000, frailty_sd=0.4, seed=20260824)
    return replication_study(spec, B=200, estimator_variant="frailty",
                             times=TIMES, seed=20260824)


def test_criterion_1_setting1_bias(setting1_report):
    worst = max(float(np.max(np.abs(setting1_report.bias[name])))
                for name in setting1_report.bias)
    ok = worst <= 0.01
    msg = _line("1 (Setting 1 bias)", ok,
                f"max |bias| = {worst:.4f} over 6 estimands x 5 times "
                f"(tol 0.01, B=200, n=1000)")
    assert ok, msg


def test_criterion_1_setting1_sd_band(setting1_report):
    # reference SDs are rounded to 3 decimals, so the +/-30% band is taken
    # around the rounding interval [v - 0.0005, v + 0.0005]
    worst = ""
    ok = True
    ratios = []
    for name, ref in REFERENCE_SD_SETTING1.items():
        for j, v in enumerate(ref):
            sd = float(setting1_report.sd[name][j])
            lo, hi = 0.7 * (v - 0.0005), 1.3 * (v + 0.0005)
            ratios.append(sd / v)
            if not lo <= sd <= hi:
                ok = False
                worst += f" {name}@t={TIMES[j]}: {sd:.4f} not in [{lo:.4f},{hi:.4f}];"
    msg = _line("1 (Setting 1 SDs)", ok,
                f"SD/reference ratios in [{min(ratios):.2f}, {max(ratios):.2f}] "
                f"(band 0.7-1.3 around rounded values){worst}")
    assert ok, msg


def test_criterion_2_setting2_bias(setting2_report):
    worst = max(float(np.max(np.abs(setting2_report.bias[name])))
                for name in setting2_report.bias)
    ok = worst <= 0.012 and setting2_report.n_failed <= 10
    msg = _line("2 (Setting 2 bias)", ok,
                f"max |bias| = {worst:.4f} (tol 0.012), "
                f"{setting2_report.n_failed} failed fits of 200")
    assert ok, msg


def test_criterion_2_alpha_recovery(setting2_report):
    """Known finite-sample limitation: at n = 1000 the loading estimate
    piles up at the alpha = 0 boundary in a large fraction of samples, so
    its mean is biased toward 0 even though the estimator is consistent
    (the bias shrinks visibly at n = 4000).  This check is expected to
    fail honestly; the likelihood and its maximization are independently
    verified in the frailty unit tests."""
    a_mean = float(np.mean(setting2_report.alpha_mean))
    a_sd = float(np.mean(setting2_report.alpha_sd))
    se = a_sd / np.sqrt(200.0)
    ok = abs(a_mean - 0.4) < 3.0 * se
    msg = _line("2 (alpha recovery)", ok,
                f"mean alpha-hat = {a_mean:.3f} (true 0.4), "
                f"|diff| = {abs(a_mean - 0.4):.3f} vs 3 SE = {3 * se:.3f}")
    assert ok, msg


def _true_increment_pairs(n_grid=2000):
    spec = DgpSpec()
    grid = uniform_grid(spec.horizon, n_grid)
    x = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
    u = np.zeros(x.shape[0])
    inc = {z: true_arm_increments(spec, z, x, u, grid) for z in (0, 1)}
    return spec, grid, inc


def test_criterion_3_forward_vs_direct():
    _, grid, inc = _true_increment_pairs()
    worst = 0.0
    for z1, z2 in ((0, 0), (0, 1), (1, 0), (1, 1)):
        for mode in ("conditional", "marginal"):
            cf = assemble_counterfactual(inc[z1], inc[z2], mode)
            fwd = forward_cif(cf)
            fv = np.stack([CifCurve(times=grid, values=fwd[i], z1=z1, z2=z2,
                                    draw_mode=mode).at(TIMES)
                           for i in range(fwd.shape[0])])
            dv = direct_cif(cf, TIMES)
            worst = max(worst, float(np.max(np.abs(fv - dv))))
    ok = worst < 1e-3
    msg = _line("3 (forward vs direct)", ok,
                f"max |difference| = {worst:.2e} over all (z1,z2) pairs and "
                f"both draw modes at t in {{2,4,6,8,10}} (tol 1e-3)")
    assert ok, msg


def test_criterion_3_forward_vs_monte_carlo():
    spec = DgpSpec()
    worst = 0.0
    detail = []
    for i, (z1, z2) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        for j, mode in enumerate(("conditional", "marginal")):
            res = mc_counterfactual_oracle(spec, z1, z2, mode,
                                           n_paths=1_000_000, times=TIMES,
                                           seed=52_000 + 10 * i + j)
            truth = true_population_cif(spec, z1, z2, mode, TIMES)
            z = np.abs(res["cif"] - truth) / np.maximum(res["se"], 1e-12)
            worst = max(worst, float(z.max()))
            detail.append(f"({z1},{z2},{mode[0]}): {z.max():.2f}")
    ok = worst < 3.0
    msg = _line("3 (forward vs MC)", ok,
                f"max |z-score| = {worst:.2f} over 8 configs x 5 times, "
                f"10^6 paths each (limit 3); " + ", ".join(detail))
    assert ok, msg


def test_criterion_4_decomposition_identities():
    worst = 0.0
    for seed in (1, 7, 23, 101, 555):
        ds = simulate_dataset(DgpSpec(n=150, seed=seed))
        tab = effect_table(fit_multistate(ds), ds, times=TIMES)
        e = tab.estimates
        worst = max(worst,
                    float(np.max(np.abs(e["OE"] - e["IDE"] - e["IIE"]))),
                    float(np.max(np.abs(e["TE"] - e["DCE"] - e["ICE"]))))
    ok = worst <= 1e-12
    msg = _line("4 (decompositions)", ok,
                f"max identity residual = {worst:.2e} over 5 random fitted "
                f"datasets (tol 1e-12)")
    assert ok, msg


def test_criterion_5_no_confounder_collapse():
    ds = simulate_dataset(DgpSpec(n=300, seed=61))
    fit = fit_multistate(ds)
    grid = build_fit_grid(fit)
    inc0 = fitted_arm_increments(fit, 0, ds.x[:6], grid)
    inc1 = fitted_arm_increments(fit, 1, ds.x[:6], grid)
    for inc in (inc0, inc1):
        inc.q = np.zeros_like(inc.q)
    vals = effect_curve_values(inc0, inc1)
    worst = max(float(np.max(np.abs(vals["M00"] - vals["C00"]))),
                float(np.max(np.abs(vals["M11"] - vals["C11"]))),
                float(np.max(np.abs(vals["M01"] - vals["C01"]))))
    ok = worst <= 1e-10
    msg = _line("5 (no-confounder collapse)", ok,
                f"max |marginal - natural/conditional| = {worst:.2e} with "
                f"zeroed confounder intensity (tol 1e-10)")
    assert ok, msg


def test_criterion_6_nelson_aalen_exact():
    # data whose time-varying indicator columns are identically zero for
    # the transition under test, so Breslow reduces to Nelson-Aalen
    rng = np.random.default_rng(3)
    rows = []
    for i in range(300):
        t2 = rng.exponential(5.0)
        cens = rng.exponential(8.0)
        e = min(t2, cens)
        rows.append(dict(id=i, z=i % 2, x=(), l_time=None, t1=e, delta1=0,
                         t2=e, delta2=int(t2 < cens)))
    ds = build_dataset(rows)
    exact = True
    for arm in (0, 1):
        from scrmediate.cox import fit_transition
        fit = fit_transition(ds, arm, "terminal")
        idx = ds.arm_indices(arm)
        na = np.array([np.sum((ds.t2[idx] == t) & (ds.delta2[idx] == 1))
                       / np.sum(ds.t2[idx] >= t) for t in fit.times])
        exact = exact and np.array_equal(fit.jumps, na)
    msg = _line("6 (Nelson-Aalen exact)", exact,
                "fitted baseline jumps identical to Nelson-Aalen increments "
                "on no-covariate data (bitwise)")
    assert exact, msg


def test_criterion_6_coefficient_recovery():
    true = {
        ("confounder", "x1"): 0.2, ("confounder", "x2"): 0.2,
        ("confounder", "x3"): -0.2, ("confounder", "n1"): -0.2,
        ("intermediate", "x1"): 0.2, ("intermediate", "x2"): -0.2,
        ("intermediate", "x3"): -0.2, ("intermediate", "l"): -0.3,
        ("terminal", "x1"): 0.1, ("terminal", "x2"): 0.1,
        ("terminal", "x3"): 0.1, ("terminal", "l"): 0.0,
        ("terminal", "n1"): 0.5,
    }
    reps = 100
    acc = {k: [] for k in true}
    for r in range(reps):
        ds = simulate_dataset(DgpSpec(n=1000, seed=30_000 + r))
        fit = fit_multistate(ds)
        for kind, name in true:
            acc[(kind, name)].append(np.mean(
                [fit[(arm, kind)].coefficient(name) for arm in (0, 1)]))
    ok = True
    worst_z = 0.0
    for key, vals in acc.items():
        vals = np.asarray(vals)
        se = vals.std(ddof=1) / np.sqrt(reps)
        z = abs(vals.mean() - true[key]) / se
        worst_z = max(worst_z, z)
        if z >= 3.0:
            ok = False
    msg = _line("6 (coefficient recovery)", ok,
                f"max |z| = {worst_z:.2f} over 13 coefficients, "
                f"100 replications of n=1000 (limit 3 MC SEs)")
    assert ok, msg


def test_criterion_6_newton_monotone():
    ds = simulate_dataset(DgpSpec(n=500, seed=8))
    ok = True
    for arm in (0, 1):
        for kind in ("confounder", "intermediate", "terminal"):
            struct = RiskStructure(ds, arm, kind)
            beta = np.zeros(struct.n_params)
            prev = -np.inf
            for _ in range(8):
                ll, score, hess = partial_loglik(struct, beta)
                ok = ok and ll >= prev - 1e-12
                prev = ll
                try:
                    beta = beta + np.linalg.solve(-hess, score)
                except np.linalg.LinAlgError:
                    break
    msg = _line("6 (Newton monotone)", ok,
                "profile log-likelihood non-decreasing along the Newton "
                "path for all six transition models")
    assert ok, msg


@pytest.fixture(scope="module")
def frailty_fit_small():
    ds = simulate_dataset(DgpSpec(n=400, seed=11, frailty_sd=0.6))
    return ds, fit_frailty(ds, FrailtySpec(node_count=20))


def test_criterion_7_em_loglik_nondecreasing(frailty_fit_small):
    _, fit = frailty_fit_small
    ll = fit.em_trace["loglik"].to_numpy()
    worst = float(np.min(np.diff(ll)))
    ok = worst >= -1e-9
    msg = _line("7 (EM ascent)", ok,
                f"min loglik increment across accepted iterations = "
                f"{worst:.2e} (must be >= 0 up to round-off)")
    assert ok, msg


def test_criterion_7_alpha_zero_one_pass_is_npmle():
    ds = simulate_dataset(DgpSpec(n=300, seed=13))
    fit = fit_multistate(ds)
    fit0 = dataclasses.replace(fit, alpha=(0.0, 0.0))
    spec = FrailtySpec()
    updated = m_step(ds, e_step(ds, fit0, spec), fit0, spec)
    worst = 0.0
    for key in fit.fits:
        worst = max(worst,
                    float(np.max(np.abs(updated[key].beta - fit[key].beta))),
                    float(np.max(np.abs(updated[key].jumps - fit[key].jumps)
                                 / np.abs(fit[key].jumps))))
    ok = worst < 1e-6
    msg = _line("7 (alpha=0 pass = NPMLE)", ok,
                f"max parameter/baseline deviation = {worst:.2e} "
                f"(tol 1e-6, the NPMLE Newton tolerance)")
    assert ok, msg


def test_criterion_7_node_refinement(frailty_fit_small):
    ds, fit = frailty_fit_small
    ws = _workspace_from_fit(ds, fit)
    betas = {k: f.beta for k, f in fit.fits.items()}
    jumps = {k: f.jumps for k, f in fit.fits.items()}
    alpha = np.asarray(fit.alpha)
    vals = {}
    for nc in (20, 40):
        nodes, prior = FrailtySpec(node_count=nc).nodes()
        vals[nc] = observed_loglik(ws, betas, jumps, alpha, nodes, prior)
    rel = abs(vals[40] - vals[20]) / abs(vals[20])
    ok = rel < 1e-6
    msg = _line("7 (node refinement)", ok,
                f"relative loglik change 20 -> 40 nodes = {rel:.2e} "
                f"(tol 1e-6)")
    assert ok, msg


def test_criterion_8_cif_shapes_and_mass():
    ds = simulate_dataset(DgpSpec(n=300, seed=31))
    fit = fit_multistate(ds)
    curves = effect_curves(fit, ds)
    shape_ok = True
    for c in curves.values():
        v = c.values
        shape_ok = shape_ok and v[0] >= 0.0 and np.all(v >= 0.0) \
            and np.all(v <= 1.0) and np.all(np.diff(v) >= -1e-15)
    grid = build_fit_grid(fit)
    inc0 = fitted_arm_increments(fit, 0, ds.x[:8], grid)
    inc1 = fitted_arm_increments(fit, 1, ds.x[:8], grid)
    worst_mass = 0.0
    for mode in ("natural", "conditional", "marginal"):
        draw = inc1 if mode == "natural" else inc0
        cf = assemble_counterfactual(draw, inc1, mode)
        _, states = forward_cif(cf, return_states=True)
        worst_mass = max(worst_mass,
                         float(np.max(np.abs(states.sum(axis=1) - 1.0))))
    ok = shape_ok and worst_mass <= 1e-10
    msg = _line("8 (CIF shape suite)", ok,
                f"all curves monotone in [0,1] starting at 0: {shape_ok}; "
                f"max |total mass - 1| = {worst_mass:.2e} (tol 1e-10)")
    assert ok, msg


def test_criterion_9_bootstrap_bitwise():
    ds = simulate_dataset(DgpSpec(n=250, seed=17))
    cfg = BootstrapConfig(resamples=50, seed=99)
    a = bootstrap_effects(ds, TIMES, variant="npmle", config=cfg)
    b = bootstrap_effects(ds, TIMES, variant="npmle", config=cfg)
    ok = all(np.array_equal(a.ci_lower[k], b.ci_lower[k])
             and np.array_equal(a.ci_upper[k], b.ci_upper[k])
             and np.array_equal(a.estimates[k], b.estimates[k])
             for k in a.estimates)
    msg = _line("9 (bootstrap bitwise)", ok,
                "two fixed-seed runs (50 resamples) bitwise identical "
                "in estimates and interval endpoints")
    assert ok, msg


def test_criterion_9_null_coverage():
    """Desk scale: n = 600 subjects, the default 300 resamples, evaluation
    at t = 6, 100 trials of the two-identical-arms null process.  Pass is
    judged on the joint event (all six intervals cover 0 simultaneously);
    per-effect coverage is reported alongside."""
    trials = 100
    times = (6.0,)
    covered = 0
    failed = 0
    by_effect = {k: 0 for k in ("TE", "OE", "IDE", "IIE", "DCE", "ICE")}
    for r in range(trials):
        ds = simulate_dataset(DgpSpec(n=600, seed=70_000 + r,
                                      null_arms=True))
        try:
            tab = bootstrap_effects(
                ds, times, variant="npmle",
                config=BootstrapConfig(resamples=300, seed=80_000 + r))
        except Exception:
            failed += 1
            continue
        hit = {k: tab.ci_lower[k][0] <= 0.0 <= tab.ci_upper[k][0]
               for k in by_effect}
        for k, h in hit.items():
            by_effect[k] += int(h)
        if all(hit.values()):
            covered += 1
    ok = covered >= 0.9 * (trials - failed) and failed <= 5
    per = ", ".join(f"{k}: {v}" for k, v in by_effect.items())
    msg = _line("9 (null coverage)", ok,
                f"all six 95% intervals covered 0 jointly in "
                f"{covered}/{trials - failed} trials ({failed} failed); "
                f"threshold 90%; per-effect counts: {per}")
    assert ok, msg


def test_hct_substitution_end_to_end(tmp_path):
    csv = tmp_path / "hct.csv"
    write_subjects_csv(make_hct_synthetic(), csv)
    out_n = tmp_path / "npmle"
    out_f = tmp_path / "frailty"
    code_n = cli_main(["analyze", "--input", str(csv), "--out", str(out_n),
                       "--resamples", "0", "--seed", "1"])
    code_f = cli_main(["analyze", "--input", str(csv), "--out", str(out_f),
                       "--variant", "frailty", "--resamples", "0",
                       "--seed", "1"])
    curves = pd.read_csv(out_f / "curves.csv")
    effects = pd.read_csv(out_f / "effects.csv")
    trace = pd.read_csv(out_f / "em_trace.csv")
    a0, a1 = float(trace["alpha0"].iloc[-1]), float(trace["alpha1"].iloc[-1])
    # strictly positive means an interior maximum, not the 1e-3 floor
    alpha_ok = a0 > 2e-3 and a1 > 2e-3
    ok = (code_n == EXIT_OK and code_f == EXIT_OK
          and curves["estimand"].nunique() == 6
          and set(effects["estimand"]) == {"TE", "OE", "IDE", "IIE",
                                           "DCE", "ICE"}
          and alpha_ok)
    msg = _line("HCT substitution", ok,
                f"analyze exit codes ({code_n}, {code_f}), all 6 curve "
                f"families and effect tables emitted, alpha-hat = "
                f"({a0:.3f}, {a1:.3f}) interior")
    assert ok, msg
