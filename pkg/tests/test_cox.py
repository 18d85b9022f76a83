import numpy as np
import pytest

from scrmediate.cox import (ConvergenceError, RiskStructure, fit_multistate,
                            fit_transition, partial_loglik)
from scrmediate.data import build_dataset
from scrmediate.simulate import DgpSpec, simulate_dataset


def no_covariate_dataset(seed=3, n=200, with_l=False, with_n1=False):
    """Dataset with p = 0 and, unless flagged, degenerate time-varying
    columns, so fitted baselines have closed Nelson-Aalen forms."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        lt = rng.exponential(4.0) if with_l else np.inf
        t1 = rng.exponential(3.0) if with_n1 else np.inf
        t2 = rng.exponential(5.0)
        cens = rng.exponential(8.0)
        exit_t = min(t2, cens)
        d1 = t1 < exit_t
        rows.append(dict(
            id=i, z=int(i % 2), x=(),
            l_time=float(lt) if lt < exit_t else None,
            t1=float(t1) if d1 else float(exit_t), delta1=int(d1),
            t2=float(exit_t), delta2=int(t2 < cens)))
    return build_dataset(rows)


def nelson_aalen(times, events, jump_times):
    """Increment form of the Nelson-Aalen estimator at given jump times."""
    out = []
    for t in jump_times:
        d = np.sum((times == t) & events)
        r = np.sum(times >= t)
        out.append(d / r)
    return np.array(out)


def test_terminal_baseline_equals_nelson_aalen_exactly():
    # no l jumps and no intermediate events, so the terminal model's
    # time-varying columns are identically zero
    ds = no_covariate_dataset()
    for arm in (0, 1):
        fit = fit_transition(ds, arm, "terminal")
        idx = ds.arm_indices(arm)
        expected = nelson_aalen(ds.t2[idx], ds.delta2[idx] == 1, fit.times)
        assert np.array_equal(fit.jumps, expected)


def test_confounder_baseline_equals_nelson_aalen_exactly():
    # l jumps present but no intermediate events, so n1 is identically zero
    ds = no_covariate_dataset(with_l=True)
    for arm in (0, 1):
        fit = fit_transition(ds, arm, "confounder")
        idx = ds.arm_indices(arm)
        exit_t = np.where(ds.has_l[idx], np.fmin(ds.l_time[idx], ds.t2[idx]),
                          ds.t2[idx])
        flags = ds.has_l[idx]
        d = np.array([np.sum((ds.l_time[idx] == t) & flags)
                      for t in fit.times])
        r = np.array([np.sum(exit_t >= t) for t in fit.times])
        assert np.array_equal(fit.jumps, d / r)


def test_intermediate_baseline_equals_nelson_aalen_exactly():
    # intermediate events present but no l jumps
    ds = no_covariate_dataset(with_n1=True)
    for arm in (0, 1):
        fit = fit_transition(ds, arm, "intermediate")
        idx = ds.arm_indices(arm)
        expected = nelson_aalen(ds.t1[idx], ds.delta1[idx] == 1, fit.times)
        assert np.array_equal(fit.jumps, expected)


def test_newton_ascent_is_monotone():
    ds = simulate_dataset(DgpSpec(n=400, seed=8))
    struct = RiskStructure(ds, 1, "terminal")
    beta = np.zeros(struct.n_params)
    ll_prev = -np.inf
    for _ in range(6):
        ll, score, hess = partial_loglik(struct, beta)
        assert ll >= ll_prev - 1e-12
        ll_prev = ll
        try:
            beta = beta + np.linalg.solve(-hess, score)
        except np.linalg.LinAlgError:
            break


def test_null_loglik_value():
    # with beta = 0 and one event per time, ll = -sum log(risk set size)
    rows = [dict(id=i, z=0, x=(), l_time=None, t1=float(i + 1), delta1=0,
                 t2=float(i + 1), delta2=1) for i in range(5)]
    ds = build_dataset(rows)
    struct = RiskStructure(ds, 0, "terminal")
    ll, _, _ = partial_loglik(struct, np.zeros(struct.n_params))
    assert ll == pytest.approx(-np.sum(np.log(np.arange(5, 0, -1))))


def test_coefficient_recovery_within_mc_error():
    """Average fitted coefficients over replications against the truth."""
    true = {
        ("intermediate", "l"): -0.3,
        ("terminal", "n1"): 0.5,
        ("confounder", "n1"): -0.2,
    }
    reps = 40
    acc = {k: [] for k in true}
    for r in range(reps):
        ds = simulate_dataset(DgpSpec(n=1000, seed=1000 + r))
        fit = fit_multistate(ds)
        for (kind, name) in true:
            acc[(kind, name)].append(np.mean(
                [fit[(arm, kind)].coefficient(name) for arm in (0, 1)]))
    for key, vals in acc.items():
        vals = np.asarray(vals)
        se = vals.std(ddof=1) / np.sqrt(reps)
        assert abs(vals.mean() - true[key]) < 3 * se + 1e-12, \
            f"{key}: mean {vals.mean():.4f} vs true {true[key]}"


def test_fit_is_deterministic():
    ds = simulate_dataset(DgpSpec(n=300, seed=21))
    f1 = fit_multistate(ds)
    f2 = fit_multistate(ds)
    for key in f1.fits:
        assert np.array_equal(f1[key].beta, f2[key].beta)
        assert np.array_equal(f1[key].jumps, f2[key].jumps)


def test_covariate_permutation_invariance():
    ds = simulate_dataset(DgpSpec(n=300, seed=22))
    fit = fit_multistate(ds)
    perm = [2, 0, 1]
    ds_perm = build_dataset(
        [dict(id=ds.ids[i], z=int(ds.z[i]), x=tuple(ds.x[i, perm]),
              l_time=None if np.isnan(ds.l_time[i]) else float(ds.l_time[i]),
              t1=float(ds.t1[i]), delta1=int(ds.delta1[i]),
              t2=float(ds.t2[i]), delta2=int(ds.delta2[i]))
         for i in range(ds.n)],
        covariate_names=[ds.covariate_names[j] for j in perm])
    fit_perm = fit_multistate(ds_perm)
    for key in fit.fits:
        orig = fit[key]
        new = fit_perm[key]
        assert np.allclose(new.beta[:3], orig.beta[perm], atol=1e-8)
        assert np.allclose(new.jumps, orig.jumps, atol=1e-10)


def test_empty_arm_rejected():
    rows = [dict(id=i, z=0, x=(), l_time=None, t1=1.0 + i, delta1=0,
                 t2=1.0 + i, delta2=1) for i in range(4)]
    ds = build_dataset(rows)
    with pytest.raises(ValueError):
        fit_multistate(ds)


def test_no_events_of_kind_rejected():
    rows = [dict(id=i, z=i % 2, x=(), l_time=None, t1=1.0 + i, delta1=0,
                 t2=1.0 + i, delta2=1) for i in range(6)]
    ds = build_dataset(rows)
    with pytest.raises(ValueError):
        fit_transition(ds, 0, "confounder")


def test_complete_separation_raises():
    rows = []
    for i in range(40):
        x = 1.0 if i < 20 else 0.0
        t = 1.0 + i if x == 1.0 else 100.0 + i
        rows.append(dict(id=i, z=0, x=(x,), l_time=None, t1=t, delta1=0,
                         t2=t, delta2=1))
    ds = build_dataset(rows)
    with pytest.raises(ConvergenceError):
        fit_transition(ds, 0, "terminal")
