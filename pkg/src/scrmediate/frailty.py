"""Sensitivity analysis: shared latent normal frailty fitted by EM.

A standard-normal frailty ``b`` multiplies every transition hazard of a
subject in arm ``z`` by ``exp(alpha_z * b)``, with loadings constrained
positive via a log parameterization.  The observed-data likelihood
integrates ``b`` out with Gauss-Hermite quadrature; estimation treats ``b``
as missing data:

* E-step: posterior masses of ``b`` at the quadrature nodes per subject;
* M-step: one Newton-Raphson step on the profiled expected complete-data
  log-likelihood for the regression coefficients and log-loadings, then
  frailty-weighted Breslow updates of the step baselines.

The observed-data log-likelihood is monitored and must not decrease at any
accepted iteration (generalized-EM safeguard with step halving).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .cox import (KINDS, ConvergenceError, MultistateFit, RiskStructure,
                  TransitionModelFit, breslow_jumps, fit_multistate,
                  partial_loglik)
from .data import Dataset

EM_MAX_ITER = 500
EM_LOGLIK_TOL = 1e-7
EM_PARAM_TOL = 1e-5
EM_HALVING_BUDGET = 30
# loadings this small multiply hazards by exp(ALPHA_FLOOR * b) ~ 1 for any
# plausible b; boundary solutions pin here so the log scale terminates
ALPHA_FLOOR = 1e-3
ALPHA_CEILING_LOG = np.log(5.0)
PROFILE_SEARCH_EVERY = 25


@dataclass
class FrailtySpec:
    """Configuration of the frailty EM."""

    node_count: int = 20
    alpha_init: float = 0.1
    # additional EM starting loadings; the best-loglik solution wins
    extra_starts: tuple = (0.6,)
    max_iter: int = EM_MAX_ITER
    loglik_tol: float = EM_LOGLIK_TOL
    param_tol: float = EM_PARAM_TOL

    def __post_init__(self):
        if self.node_count < 5:
            raise ValueError("node_count must be at least 5")
        if self.alpha_init <= 0:
            raise ValueError("alpha must stay positive")

    def nodes(self) -> Tuple[np.ndarray, np.ndarray]:
        g, w = np.polynomial.hermite.hermgauss(self.node_count)
        return g * np.sqrt(2.0), w / np.sqrt(np.pi)


@dataclass
class PosteriorWeights:
    """Per-subject posterior masses of the frailty at the quadrature nodes."""

    nodes: np.ndarray
    prior: np.ndarray
    w: np.ndarray                       # (n, K), rows sum to 1

    def exp_alpha_b(self, alpha_by_subject: np.ndarray) -> np.ndarray:
        """Posterior mean of ``exp(alpha_z b)`` per subject."""
        return (self.w * np.exp(np.outer(alpha_by_subject, self.nodes))).sum(1)

    def mean_b(self) -> np.ndarray:
        return self.w @ self.nodes


class _EmWorkspace:
    """Shared risk structures plus per-subject likelihood ingredients."""

    def __init__(self, ds: Dataset, structs: Dict[Tuple[int, str], RiskStructure]):
        self.ds = ds
        self.structs = structs
        self.n = ds.n
        # total event count per subject across the three transitions
        self.n_events = np.zeros(ds.n)
        for key, st in structs.items():
            counts = st.event_counts()
            self.n_events[st.subject_index] += counts
        self._collinearity_check()

    def _collinearity_check(self):
        x = self.ds.x
        if x.shape[1] == 0:
            return
        xc = np.column_stack([np.ones(x.shape[0]), x])
        if np.linalg.matrix_rank(xc) < xc.shape[1]:
            import warnings
            warnings.warn("baseline covariates are collinear; frailty "
                          "loadings may not be identifiable", RuntimeWarning)

    def subject_parts(self, betas, jumps):
        """Per-subject (const, A): event terms and cumulative risk integrals.

        The individual complete-data log-likelihood at frailty value b is
        ``const_i + n_events_i * alpha_z b - exp(alpha_z b) * A_i``.
        """
        const = np.zeros(self.n)
        A = np.zeros(self.n)
        for key, st in self.structs.items():
            beta, jmp = betas[key], jumps[key]
            const[st.subject_index] += st.event_linear_terms(beta, jmp)
            A[st.subject_index] += st.risk_integrals(beta, jmp)
        return const, A

    def alpha_by_subject(self, alpha: np.ndarray) -> np.ndarray:
        return alpha[self.ds.z]


def _log_integrand(const, A, n_events, alpha_i, nodes, prior):
    """(n, K) matrix: log prior mass + complete-data loglik at each node."""
    ab = np.outer(alpha_i, nodes)                       # (n, K)
    return (np.log(prior)[None, :] + const[:, None]
            + n_events[:, None] * ab - np.exp(ab) * A[:, None])


def observed_loglik(ws: _EmWorkspace, betas, jumps, alpha,
                    nodes, prior) -> float:
    const, A = ws.subject_parts(betas, jumps)
    M = _log_integrand(const, A, ws.n_events, ws.alpha_by_subject(alpha),
                       nodes, prior)
    return float(logsumexp(M, axis=1).sum())


def _posterior(ws: _EmWorkspace, betas, jumps, alpha, nodes, prior
               ) -> Tuple[PosteriorWeights, float]:
    const, A = ws.subject_parts(betas, jumps)
    M = _log_integrand(const, A, ws.n_events, ws.alpha_by_subject(alpha),
                       nodes, prior)
    norm = logsumexp(M, axis=1)
    if not np.all(np.isfinite(norm)):
        raise FloatingPointError("posterior weights vanished for some subject")
    w = np.exp(M - norm[:, None])
    return PosteriorWeights(nodes=nodes, prior=prior, w=w), float(norm.sum())


def _alpha_newton_step(ws: _EmWorkspace, betas, weights: PosteriorWeights,
                       arm: int, alpha_z: float) -> float:
    """One Newton step on the profiled expected objective, in log alpha."""
    alpha_z = max(alpha_z, ALPHA_FLOOR)
    nodes = weights.nodes
    eab = np.exp(alpha_z * nodes)
    w = weights.w
    c0 = w @ eab
    c1 = w @ (nodes * eab)
    c2 = w @ (nodes ** 2 * eab)
    arm_mask = ws.ds.z == arm
    lin = float((ws.n_events * weights.mean_b())[arm_mask].sum())
    d1 = lin
    d2 = 0.0
    for kind in KINDS:
        st = ws.structs[(arm, kind)]
        Wb = st.weight_matrix(betas[(arm, kind)])
        loc = st.subject_index
        S0 = np.maximum(c0[loc] @ Wb, 1e-300)
        S1 = c1[loc] @ Wb
        S2 = c2[loc] @ Wb
        u = S1 / S0
        d1 -= float(st.d @ u)
        d2 -= float(st.d @ (S2 / S0 - u ** 2))
    # chain rule to a = log(alpha)
    g = alpha_z * d1
    h = alpha_z ** 2 * d2 + alpha_z * d1
    if h >= 0 or not np.isfinite(h):
        step = np.sign(g) * 0.1 if np.isfinite(g) else 0.0
    else:
        step = np.clip(-g / h, -1.0, 1.0)
    return float(max(np.exp(np.log(alpha_z) + step), ALPHA_FLOOR))


def _profile_alpha_search(ws: _EmWorkspace, betas, weights: PosteriorWeights,
                          alpha: np.ndarray, nodes, prior):
    """Exact 1-D maximization of the observed loglik over each log-loading.

    Baselines are re-profiled at every trial value through the current
    posterior weights.  Escapes the slow linear EM rate in the loading
    directions; the caller accepts the result only if the observed loglik
    does not decrease.
    """
    from scipy.optimize import minimize_scalar

    out = alpha.copy()
    for arm in (0, 1):
        def neg_ll(log_a, arm=arm):
            trial = out.copy()
            trial[arm] = np.exp(log_a)
            jumps = _baselines(ws, betas, trial, weights)
            return -observed_loglik(ws, betas, jumps, trial, nodes, prior)

        res = minimize_scalar(neg_ll, bounds=(np.log(ALPHA_FLOOR),
                                              ALPHA_CEILING_LOG),
                              method="bounded",
                              options={"xatol": 1e-6, "maxiter": 40})
        if res.success:
            out[arm] = max(np.exp(res.x), ALPHA_FLOOR)
    return out


def _inner_em(ws: _EmWorkspace, betas, jumps, alpha, nodes, prior,
              n_passes: int):
    """A few EM passes with the loadings held fixed; returns the new state.

    Approximates the profile likelihood over alpha by letting the
    regression coefficients and baselines re-adapt to a trial loading.
    """
    b_ = {k: v.copy() for k, v in betas.items()}
    j_ = jumps
    for _ in range(n_passes):
        weights, _ = _posterior(ws, b_, j_, alpha, nodes, prior)
        c = weights.exp_alpha_b(ws.alpha_by_subject(alpha))
        for key, st in ws.structs.items():
            _, score, hess = partial_loglik(st, b_[key],
                                            subject_weights=c[st.subject_index])
            try:
                b_[key] = b_[key] + np.linalg.solve(-hess, score)
            except np.linalg.LinAlgError:
                pass
        j_ = _baselines(ws, b_, alpha, weights)
    ll = observed_loglik(ws, b_, j_, alpha, nodes, prior)
    return ll, b_, j_


def _polish_alpha(ws: _EmWorkspace, betas, jumps, alpha, nodes, prior,
                  inner: int = 6):
    """Profile-likelihood line search in each loading with inner EM passes.

    The plain EM rate in the loading directions can be arbitrarily close
    to one (a moving-target creep); this searches the actual profile.
    """
    from scipy.optimize import minimize_scalar

    best_ll, best_b, best_j = _inner_em(ws, betas, jumps, alpha, nodes,
                                        prior, inner)
    best_a = alpha.copy()
    for arm in (0, 1):
        def neg_pll(log_a, arm=arm):
            trial = best_a.copy()
            trial[arm] = max(np.exp(log_a), ALPHA_FLOOR)
            ll, _, _ = _inner_em(ws, best_b, best_j, trial, nodes, prior,
                                 inner)
            return -ll

        res = minimize_scalar(neg_pll, bounds=(np.log(ALPHA_FLOOR),
                                               ALPHA_CEILING_LOG),
                              method="bounded",
                              options={"xatol": 1e-4, "maxiter": 12})
        cand = best_a.copy()
        cand[arm] = max(np.exp(res.x), ALPHA_FLOOR)
        ll, b_, j_ = _inner_em(ws, best_b, best_j, cand, nodes, prior, inner)
        if ll > best_ll:
            best_ll, best_b, best_j, best_a = ll, b_, j_, cand
    return best_a, best_b, best_j, best_ll


def _m_step_params(ws: _EmWorkspace, betas, alpha, weights: PosteriorWeights):
    """One-step Newton updates of all regression coefficients and loadings."""
    alpha_i = ws.alpha_by_subject(alpha)
    c = weights.exp_alpha_b(alpha_i)
    new_betas = {}
    for key, st in ws.structs.items():
        cw = c[st.subject_index]
        _, score, hess = partial_loglik(st, betas[key], subject_weights=cw)
        try:
            step = np.linalg.solve(-hess, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, score, rcond=None)[0]
        new_betas[key] = betas[key] + step
    new_alpha = np.array([
        _alpha_newton_step(ws, new_betas, weights, arm, alpha[arm])
        for arm in (0, 1)])
    return new_betas, new_alpha


def _baselines(ws: _EmWorkspace, betas, alpha, weights: PosteriorWeights):
    alpha_i = ws.alpha_by_subject(alpha)
    c = weights.exp_alpha_b(alpha_i)
    return {key: breslow_jumps(st, betas[key], c[st.subject_index])
            for key, st in ws.structs.items()}


def _pack(betas, alpha):
    return np.concatenate([betas[k] for k in sorted(betas)] + [np.log(alpha)])


def _pack_full(betas, jumps, alpha):
    keys = sorted(betas)
    return np.concatenate([betas[k] for k in keys]
                          + [np.log(jumps[k]) for k in keys]
                          + [np.log(alpha)])


def _unpack_full(vec, betas, jumps):
    keys = sorted(betas)
    out_b, out_j = {}, {}
    pos = 0
    for k in keys:
        m = betas[k].size
        out_b[k] = vec[pos:pos + m].copy()
        pos += m
    for k in keys:
        m = jumps[k].size
        out_j[k] = np.exp(vec[pos:pos + m])
        pos += m
    out_a = np.maximum(np.exp(vec[pos:pos + 2]), ALPHA_FLOOR)
    return out_b, out_j, out_a


def _workspace_from_fit(ds: Dataset, fit: MultistateFit) -> _EmWorkspace:
    structs = {key: f.struct for key, f in fit.fits.items()}
    if any(st is None for st in structs.values()):
        structs = {(arm, kind): RiskStructure(ds, arm, kind)
                   for arm in (0, 1) for kind in KINDS}
    return _EmWorkspace(ds, structs)


def subject_complete_loglik(ds: Dataset, i: int, fit: MultistateFit,
                            b: float) -> float:
    """Complete-data log-likelihood of subject ``i`` at fixed frailty ``b``.

    At ``b = 0`` (or loadings 0) this is the no-frailty individual
    log-likelihood contribution.
    """
    ws = _workspace_from_fit(ds, fit)
    betas = {k: f.beta for k, f in fit.fits.items()}
    jumps = {k: f.jumps for k, f in fit.fits.items()}
    const, A = ws.subject_parts(betas, jumps)
    alpha = np.asarray(fit.alpha if fit.alpha is not None else (0.0, 0.0))
    a = alpha[ds.z[i]]
    return float(const[i] + ws.n_events[i] * a * b - np.exp(a * b) * A[i])


def e_step(ds: Dataset, fit: MultistateFit, spec: FrailtySpec
           ) -> PosteriorWeights:
    """Posterior node masses per subject under the current fit."""
    ws = _workspace_from_fit(ds, fit)
    betas = {k: f.beta for k, f in fit.fits.items()}
    jumps = {k: f.jumps for k, f in fit.fits.items()}
    alpha = np.asarray(fit.alpha if fit.alpha is not None else (0.0, 0.0))
    nodes, prior = spec.nodes()
    weights, _ = _posterior(ws, betas, jumps, alpha, nodes, prior)
    return weights


def m_step(ds: Dataset, weights: PosteriorWeights, fit: MultistateFit,
           spec: FrailtySpec) -> MultistateFit:
    """One EM M-step from the given posterior weights; returns the update."""
    ws = _workspace_from_fit(ds, fit)
    betas = {k: f.beta for k, f in fit.fits.items()}
    alpha = np.asarray(fit.alpha if fit.alpha is not None
                       else (spec.alpha_init, spec.alpha_init))
    new_betas, new_alpha = _m_step_params(ws, betas, alpha, weights)
    new_jumps = _baselines(ws, new_betas, new_alpha, weights)
    return _build_fit(ws, fit, new_betas, new_jumps, new_alpha, trace=None)


def _build_fit(ws: _EmWorkspace, base: MultistateFit, betas, jumps, alpha,
               trace) -> MultistateFit:
    fits = {}
    for key, st in ws.structs.items():
        old = base.fits[key]
        fits[key] = TransitionModelFit(
            arm=key[0], kind=key[1], names=list(st.names), beta=betas[key],
            times=st.event_times.copy(), jumps=jumps[key],
            loglik=np.nan, converged=True, n_iter=old.n_iter,
            score_norm=np.nan, struct=st)
    return MultistateFit(fits=fits, covariate_names=base.covariate_names,
                         alpha=(float(alpha[0]), float(alpha[1])),
                         em_trace=trace)


def fit_frailty(ds: Dataset, spec: Optional[FrailtySpec] = None,
                init: Optional[MultistateFit] = None) -> MultistateFit:
    """EM fit of the frailty model, initialized from the no-frailty NPMLE.

    Returns a :class:`MultistateFit` with loadings ``alpha`` and the EM
    trace (iteration, observed log-likelihood, alpha_0, alpha_1).  The
    observed-data log-likelihood is asserted non-decreasing across accepted
    iterations.

    The likelihood surface can be multimodal in the loadings: alpha = 0 is
    always a stationary point of the EM map (the likelihood is even in
    alpha), so a single small start can be trapped at the boundary even
    when an interior maximum exists.  The fit therefore runs from
    ``spec.alpha_init`` and each entry of ``spec.extra_starts``, keeping
    the solution with the highest observed log-likelihood.
    """
    spec = spec or FrailtySpec()
    base = init if init is not None else fit_multistate(ds)
    ws = _workspace_from_fit(ds, base)
    best = None
    last_error = None
    for a_init in (spec.alpha_init,) + tuple(spec.extra_starts):
        try:
            fit, ll = _fit_frailty_single(ds, spec, base, ws, a_init)
        except (ConvergenceError, FloatingPointError) as exc:
            last_error = exc
            continue
        if best is None or ll > best[1]:
            best = (fit, ll)
    if best is None:
        raise last_error
    return best[0]


def _fit_frailty_single(ds: Dataset, spec: FrailtySpec, base: MultistateFit,
                        ws: _EmWorkspace, alpha_init: float):
    betas = {k: f.beta.copy() for k, f in base.fits.items()}
    jumps = {k: f.jumps.copy() for k, f in base.fits.items()}
    alpha = np.array([alpha_init, alpha_init])
    nodes, prior = spec.nodes()

    ll = observed_loglik(ws, betas, jumps, alpha, nodes, prior)
    trace_rows = [(0, ll, alpha[0], alpha[1])]
    params = _pack(betas, alpha)
    history = [_pack_full(betas, jumps, alpha)]
    alpha_hist = [np.log(alpha)]
    converged = False
    for it in range(1, spec.max_iter + 1):
        weights, _ = _posterior(ws, betas, jumps, alpha, nodes, prior)
        cand_betas, cand_alpha = _m_step_params(ws, betas, alpha, weights)
        scale = 1.0
        accepted = False
        for _ in range(EM_HALVING_BUDGET):
            try_betas = {k: betas[k] + scale * (cand_betas[k] - betas[k])
                         for k in betas}
            try_alpha = np.exp(np.log(alpha)
                               + scale * (np.log(cand_alpha) - np.log(alpha)))
            try_jumps = _baselines(ws, try_betas, try_alpha, weights)
            ll_new = observed_loglik(ws, try_betas, try_jumps, try_alpha,
                                     nodes, prior)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-10:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            raise ConvergenceError(
                f"EM step halving exhausted at iteration {it} "
                f"(loglik {ll:.6f} -> {ll_new:.6f})")
        betas, jumps, alpha = try_betas, try_jumps, try_alpha
        new_params = _pack(betas, alpha)
        d_ll, ll = ll_new - ll, ll_new
        d_par = float(np.abs(new_params - params).max())
        params = new_params
        trace_rows.append((it, ll, alpha[0], alpha[1]))
        if abs(d_ll) < spec.loglik_tol and d_par < spec.param_tol:
            converged = True
            break
        # Acceleration, gated on not decreasing the observed loglik so the
        # ascent guarantee is preserved.  Scalar Aitken extrapolation of
        # each log-loading handles the slow linear EM rate in alpha,
        # including geometric marches toward the alpha = 0 boundary (where
        # it extrapolates straight to the floor).  A vector extrapolation
        # through the last three full iterates covers the remaining
        # directions.
        alpha_hist.append(np.log(alpha))
        if len(alpha_hist) >= 3:
            a0_, a1_, a2_ = alpha_hist[-3], alpha_hist[-2], alpha_hist[-1]
            d1_, d2_ = a1_ - a0_, a2_ - a1_
            cand_log = a2_.copy()
            moved = False
            for arm in (0, 1):
                if abs(d2_[arm]) > 1e-8 and d1_[arm] * d2_[arm] > 0:
                    rho = min(d2_[arm] / d1_[arm], 0.9999)
                    if rho > 0:
                        cand_log[arm] = min(
                            a2_[arm] + d2_[arm] * rho / (1.0 - rho),
                            ALPHA_CEILING_LOG)
                        moved = True
            if moved:
                x_alpha = np.maximum(np.exp(cand_log), ALPHA_FLOOR)
                x_jumps = _baselines(ws, betas, x_alpha, weights)
                with np.errstate(over="ignore", invalid="ignore"):
                    ll_x = observed_loglik(ws, betas, x_jumps, x_alpha,
                                           nodes, prior)
                if np.isfinite(ll_x) and ll_x >= ll:
                    jumps, alpha, ll = x_jumps, x_alpha, ll_x
                    params = _pack(betas, alpha)
                    alpha_hist = [np.log(alpha)]
                    history = []
            alpha_hist = alpha_hist[-3:]
        history.append(_pack_full(betas, jumps, alpha))
        if len(history) >= 3:
            r = history[-2] - history[-3]
            v = history[-1] - history[-2] - r
            vn = float(np.linalg.norm(v))
            if vn > 0:
                a = -float(np.linalg.norm(r)) / vn
                if a < -1.0:
                    cand = history[-3] - 2.0 * a * r + a * a * v
                    x_betas, x_jumps, x_alpha = _unpack_full(cand, betas,
                                                             jumps)
                    with np.errstate(over="ignore", invalid="ignore"):
                        ll_x = observed_loglik(ws, x_betas, x_jumps,
                                               x_alpha, nodes, prior)
                    if np.isfinite(ll_x) and ll_x >= ll:
                        betas, jumps, alpha = x_betas, x_jumps, x_alpha
                        ll = ll_x
                        params = _pack(betas, alpha)
                        history = []
                        alpha_hist = [np.log(alpha)]
            if len(history) > 3:
                history = history[-3:]
        if it % PROFILE_SEARCH_EVERY == 0:
            x_alpha = _profile_alpha_search(ws, betas, weights, alpha,
                                            nodes, prior)
            if np.any(x_alpha != alpha):
                x_jumps = _baselines(ws, betas, x_alpha, weights)
                ll_x = observed_loglik(ws, betas, x_jumps, x_alpha,
                                       nodes, prior)
                if np.isfinite(ll_x) and ll_x >= ll:
                    jumps, alpha, ll = x_jumps, x_alpha, ll_x
                    params = _pack(betas, alpha)
                    alpha_hist = [np.log(alpha)]
                    history = []
        stuck = (abs(d_ll) < 50.0 * spec.loglik_tol
                 and d_par >= spec.param_tol)
        if stuck and it % 20 == 0:
            x_alpha, x_betas, x_jumps, ll_x = _polish_alpha(
                ws, betas, jumps, alpha, nodes, prior)
            if np.isfinite(ll_x) and ll_x >= ll:
                betas, jumps, alpha, ll = x_betas, x_jumps, x_alpha, ll_x
                params = _pack(betas, alpha)
                alpha_hist = [np.log(alpha)]
                history = []
    trace = pd.DataFrame(trace_rows,
                         columns=["iteration", "loglik", "alpha0", "alpha1"])
    if not converged:
        raise ConvergenceError(
            f"frailty EM did not converge in {spec.max_iter} iterations "
            f"(last delta loglik {d_ll:.3e})")
    return _build_fit(ws, base, betas, jumps, alpha, trace), ll
