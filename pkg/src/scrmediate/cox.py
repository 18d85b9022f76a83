"""Per-arm proportional-hazards transition models fitted by NPMLE.

Three transition kinds are modelled in each treatment arm:

* ``confounder``   -- intensity of the binary confounder's 0->1 jump, with
  the intermediate-event status ``n1(t)`` as a time-varying covariate;
* ``intermediate`` -- hazard of the intermediate event, with the confounder
  status ``l(t)`` as a time-varying covariate;
* ``terminal``     -- hazard of the terminal event, with both ``l(t)`` and
  ``n1(t)`` as time-varying covariates.

Regression coefficients are estimated by Newton-Raphson on the profile
(partial) log-likelihood; cumulative baselines are step functions with
Breslow jumps at observed transition times of their own kind.  Ties are
handled by the Breslow approximation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from .data import Dataset, SubjectRecord

KINDS = ("confounder", "intermediate", "terminal")

#: Extra time-varying indicator columns per transition kind, in design order.
EXTRA_COLUMNS = {
    "confounder": ("n1",),
    "intermediate": ("l",),
    "terminal": ("l", "n1"),
}

MAX_NEWTON_ITER = 100
LOGLIK_RTOL = 1e-9
SCORE_TOL = 1e-6
# A log-hazard-ratio of 15 corresponds to a hazard ratio above 3e6; a Newton
# path exceeding this signals separation (the score underflows like exp(-b),
# so a pure gradient criterion would "converge" on separated data).
SEPARATION_BOUND = 15.0

# Above this many distinct covariate rows, risk-set moments fall back from
# pattern grouping to direct per-subject einsums.
GROUPING_LIMIT = 64


class ConvergenceError(RuntimeError):
    """Newton-Raphson failed to converge; carries the last iterate."""

    def __init__(self, message, beta=None, score_norm=None):
        super().__init__(message)
        self.beta = beta
        self.score_norm = score_norm


def _exit_times(ds: Dataset, kind: str) -> np.ndarray:
    if kind == "confounder":
        return np.where(ds.has_l, np.fmin(ds.l_time, ds.t2), ds.t2)
    if kind == "intermediate":
        return ds.t1
    if kind == "terminal":
        return ds.t2
    raise ValueError(f"unknown transition kind {kind!r}")


def _event_times_flags(ds: Dataset, kind: str):
    if kind == "confounder":
        flag = ds.has_l
        times = np.where(flag, ds.l_time, np.nan)
    elif kind == "intermediate":
        flag = ds.delta1 == 1
        times = ds.t1
    else:
        flag = ds.delta2 == 1
        times = ds.t2
    return times, flag


class RiskStructure:
    """Precomputed risk-set arrays for one (arm, kind) partial likelihood.

    All matrices are (n_arm, m) with m the number of distinct event times of
    this kind in this arm; they are built once per dataset and reused across
    Newton and EM iterations.
    """

    def __init__(self, ds: Dataset, arm: int, kind: str,
                 confounder_jump_first: bool = True):
        if kind not in KINDS:
            raise ValueError(f"unknown transition kind {kind!r}")
        self.arm = arm
        self.kind = kind
        idx = ds.arm_indices(arm)
        if idx.size == 0:
            raise ValueError(f"arm {arm} has no subjects")
        self.subject_index = idx
        self.X = ds.x[idx]
        self.names = list(ds.covariate_names) + list(EXTRA_COLUMNS[kind])

        ev_times_all, ev_flag_all = _event_times_flags(ds, kind)
        ev_flag = ev_flag_all[idx]
        ev_times = ev_times_all[idx]
        if not ev_flag.any():
            raise ValueError(
                f"no {kind} events in arm {arm}; cannot fit this transition")
        self.event_times, self.d = np.unique(
            ev_times[ev_flag], return_counts=True)
        m = self.event_times.size
        na = idx.size

        exit_t = _exit_times(ds, kind)[idx]
        # at risk through the event/censor exit time (>=, standard convention)
        self.at_risk = exit_t[:, None] >= self.event_times[None, :]

        l_time = ds.l_time[idx]
        t1 = ds.t1[idx]
        d1 = ds.delta1[idx] == 1
        tk = self.event_times[None, :]
        self.extra = {}
        if "l" in EXTRA_COLUMNS[kind]:
            has_l = ~np.isnan(l_time)
            # confounder jumps are applied before same-time intermediate
            # events when confounder_jump_first (analyst-visible setting)
            if kind == "intermediate" and not confounder_jump_first:
                lv = has_l[:, None] & (l_time[:, None] < tk)
            else:
                lv = has_l[:, None] & (l_time[:, None] <= tk)
            self.extra["l"] = lv.astype(float)
        if "n1" in EXTRA_COLUMNS[kind]:
            if kind == "confounder" and confounder_jump_first:
                nv = d1[:, None] & (t1[:, None] < tk)
            else:
                nv = d1[:, None] & (t1[:, None] <= tk)
            self.extra["n1"] = nv.astype(float)

        # event rows: subject local index, event-time column, covariate row
        order = []
        for i in np.flatnonzero(ev_flag):
            k = int(np.searchsorted(self.event_times, ev_times[i]))
            order.append((i, k))
        self.event_subject = np.array([i for i, _ in order], dtype=int)
        self.event_col = np.array([k for _, k in order], dtype=int)
        rows = np.empty((len(order), len(self.names)))
        rows[:, : self.X.shape[1]] = self.X[self.event_subject]
        for e, name in enumerate(EXTRA_COLUMNS[kind]):
            rows[:, self.X.shape[1] + e] = self.extra[name][
                self.event_subject, self.event_col]
        self.event_cov = rows
        self.sum_event_cov = rows.sum(axis=0)

        # grouping of identical baseline-covariate rows speeds up risk-set
        # moments dramatically when covariates are discrete
        uniq, inv = np.unique(self.X, axis=0, return_inverse=True)
        if uniq.shape[0] <= GROUPING_LIMIT:
            self.group_rows = uniq
            self.group_of = inv
            self.indicator = np.zeros((na, uniq.shape[0]))
            self.indicator[np.arange(na), inv] = 1.0
        else:
            self.group_rows = None
            self.group_of = None
            self.indicator = None

    @property
    def n_params(self) -> int:
        return len(self.names)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def weight_matrix(self, beta: np.ndarray,
                      subject_weights: Optional[np.ndarray] = None) -> np.ndarray:
        """Risk-set weights ``R * w_i * exp(xi_i(t_k) beta)`` as (n_arm, m)."""
        p = self.p
        eta = self.X @ beta[:p]
        if subject_weights is not None:
            eta = eta + np.log(np.maximum(subject_weights, 1e-300))
        W = self.at_risk * np.exp(eta)[:, None]
        for e, name in enumerate(EXTRA_COLUMNS[self.kind]):
            b = beta[p + e]
            if b != 0.0:
                W = W * np.exp(b * self.extra[name])
        return W

    def moments(self, W: np.ndarray):
        """Risk-set moments S0 (m,), S1 (m,q), S2 (m,q,q) for given weights."""
        p, q, m = self.p, self.n_params, self.event_times.size
        extras = [self.extra[name] for name in EXTRA_COLUMNS[self.kind]]
        S0 = W.sum(axis=0)
        S1 = np.empty((m, q))
        S2 = np.empty((m, q, q))
        if self.indicator is not None:
            Xg = self.group_rows
            WG = self.indicator.T @ W                       # (g, m)
            S1[:, :p] = WG.T @ Xg
            S2[:, :p, :p] = np.einsum("gm,gp,gq->mpq", WG, Xg, Xg,
                                      optimize=True)
            for e, E in enumerate(extras):
                WE = W * E
                WEG = self.indicator.T @ WE
                S1[:, p + e] = WE.sum(axis=0)
                S2[:, :p, p + e] = S2[:, p + e, :p] = WEG.T @ Xg
                for f, Ef in enumerate(extras[: e + 1]):
                    val = (WE * Ef).sum(axis=0)
                    S2[:, p + e, p + f] = S2[:, p + f, p + e] = val
        else:
            X = self.X
            S1[:, :p] = W.T @ X
            S2[:, :p, :p] = np.einsum("nm,np,nq->mpq", W, X, X,
                                      optimize=True)
            for e, E in enumerate(extras):
                WE = W * E
                S1[:, p + e] = WE.sum(axis=0)
                S2[:, :p, p + e] = S2[:, p + e, :p] = WE.T @ X
                for f, Ef in enumerate(extras[: e + 1]):
                    val = (WE * Ef).sum(axis=0)
                    S2[:, p + e, p + f] = S2[:, p + f, p + e] = val
        return S0, S1, S2

    def risk_integrals(self, beta: np.ndarray, jumps: np.ndarray,
                       subject_weights: Optional[np.ndarray] = None
                       ) -> np.ndarray:
        """Per-subject cumulative terms ``A_i = sum_k R_ik dQ_k exp(xi_ik beta)``."""
        W = self.weight_matrix(beta, subject_weights)
        return W @ jumps

    def event_linear_terms(self, beta: np.ndarray, jumps: np.ndarray
                           ) -> np.ndarray:
        """Per-subject sum of ``log dQ(T) + xi(T) beta`` over own events."""
        vals = np.log(jumps[self.event_col]) + self.event_cov @ beta
        out = np.zeros(self.subject_index.size)
        np.add.at(out, self.event_subject, vals)
        return out

    def event_counts(self) -> np.ndarray:
        out = np.zeros(self.subject_index.size)
        np.add.at(out, self.event_subject, 1.0)
        return out


def partial_loglik(struct: RiskStructure, beta: np.ndarray,
                   subject_weights: Optional[np.ndarray] = None):
    """Profile (partial) log-likelihood with its score and Hessian.

    Jump sizes are profiled out analytically; with ``subject_weights``
    (posterior means of the frailty multiplier) this is the profiled
    expected complete-data objective used inside the EM M-step.
    """
    beta = np.asarray(beta, dtype=float)
    W = struct.weight_matrix(beta, subject_weights)
    S0, S1, S2 = struct.moments(W)
    d = struct.d
    if np.any(S0 <= 0):
        warnings.warn(
            f"empty risk set for {struct.kind} events in arm {struct.arm}; "
            "positivity may be violated", RuntimeWarning)
        S0 = np.maximum(S0, 1e-300)
    ll = float(struct.sum_event_cov @ beta - d @ np.log(S0))
    u = S1 / S0[:, None]
    score = struct.sum_event_cov - d @ u
    hess = -(np.einsum("m,mpq->pq", d, S2 / S0[:, None, None])
             - np.einsum("m,mp,mq->pq", d, u, u))
    return ll, score, hess


def breslow_jumps(struct: RiskStructure, beta: np.ndarray,
                  subject_weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Baseline jump sizes: event multiplicity over the risk-set weight sum."""
    W = struct.weight_matrix(np.asarray(beta, dtype=float), subject_weights)
    S0 = np.maximum(W.sum(axis=0), 1e-300)
    return struct.d / S0


@dataclass
class TransitionModelFit:
    """One fitted proportional-hazards transition model.

    ``times``/``jumps`` define the step-function cumulative baseline; jumps
    are strictly positive and located only at observed transition times of
    this kind and arm.
    """

    arm: int
    kind: str
    names: list
    beta: np.ndarray
    times: np.ndarray
    jumps: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    score_norm: float
    struct: RiskStructure = field(repr=False, default=None)

    def cumulative_baseline(self, t) -> np.ndarray:
        """Step-function cumulative baseline hazard at times ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        csum = np.concatenate([[0.0], np.cumsum(self.jumps)])
        return csum[idx]

    def coefficient(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "arm": self.arm, "kind": self.kind,
            "term": self.names, "estimate": self.beta,
        })

    def baseline_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "time": self.times,
            "cumulative_hazard": np.cumsum(self.jumps),
        })


def fit_transition(ds: Dataset, arm: int, kind: str,
                   subject_weights: Optional[np.ndarray] = None,
                   beta0: Optional[np.ndarray] = None,
                   confounder_jump_first: bool = True,
                   struct: Optional[RiskStructure] = None,
                   max_iter: int = MAX_NEWTON_ITER) -> TransitionModelFit:
    """Fit one transition by Newton-Raphson with step halving.

    The profile log-likelihood increases at every accepted iterate;
    convergence requires both a relative log-likelihood change below
    ``1e-9`` and a score sup-norm below ``1e-6``.
    """
    if struct is None:
        struct = RiskStructure(ds, arm, kind,
                               confounder_jump_first=confounder_jump_first)
    q = struct.n_params
    beta = np.zeros(q) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    ll, score, hess = partial_loglik(struct, beta, subject_weights)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(-hess, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, score, rcond=None)[0]
        scale = 1.0
        for _ in range(40):
            cand = beta + scale * step
            ll_new, score_new, hess_new = partial_loglik(
                struct, cand, subject_weights)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        else:
            raise ConvergenceError(
                f"step halving exhausted for {kind} model, arm {arm}",
                beta=beta, score_norm=float(np.abs(score).max()))
        rel_change = abs(ll_new - ll) / (abs(ll) + 1.0)
        beta, ll, score, hess = cand, ll_new, score_new, hess_new
        if np.abs(beta).max() > SEPARATION_BOUND:
            raise ConvergenceError(
                f"diverging coefficients in {kind} model, arm {arm} "
                "(possible complete separation)",
                beta=beta, score_norm=float(np.abs(score).max()))
        if rel_change < LOGLIK_RTOL and np.abs(score).max() < SCORE_TOL:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"no convergence after {max_iter} iterations for {kind} model, "
            f"arm {arm} (score sup-norm {np.abs(score).max():.3e})",
            beta=beta, score_norm=float(np.abs(score).max()))
    jumps = breslow_jumps(struct, beta, subject_weights)
    return TransitionModelFit(
        arm=arm, kind=kind, names=list(struct.names), beta=beta,
        times=struct.event_times.copy(), jumps=jumps, loglik=ll,
        converged=True, n_iter=it, score_norm=float(np.abs(score).max()),
        struct=struct,
    )


@dataclass
class MultistateFit:
    """Bundle of the six fitted transition models (three kinds x two arms).

    ``alpha`` holds the frailty loadings (alpha_0, alpha_1) when the model
    was fitted with a shared latent normal frailty, else None.
    """

    fits: Dict[Tuple[int, str], TransitionModelFit]
    covariate_names: list
    alpha: Optional[Tuple[float, float]] = None
    em_trace: Optional[pd.DataFrame] = None

    def __getitem__(self, key) -> TransitionModelFit:
        return self.fits[key]

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def has_frailty(self) -> bool:
        return self.alpha is not None

    def summary_frame(self) -> pd.DataFrame:
        frames = [f.summary_frame() for f in self.fits.values()]
        df = pd.concat(frames, ignore_index=True)
        if self.alpha is not None:
            df = pd.concat([df, pd.DataFrame({
                "arm": [0, 1], "kind": "frailty", "term": "alpha",
                "estimate": list(self.alpha),
            })], ignore_index=True)
        return df


def fit_multistate(ds: Dataset, confounder_jump_first: bool = True
                   ) -> MultistateFit:
    """Fit all six (arm x kind) transition models by NPMLE.

    The factorized likelihood makes the six fits independent; errors are
    re-raised with the offending (arm, kind) label.
    """
    fits = {}
    for arm in (0, 1):
        if ds.arm_indices(arm).size == 0:
            raise ValueError(f"arm {arm} has no subjects")
        for kind in KINDS:
            try:
                fits[(arm, kind)] = fit_transition(
                    ds, arm, kind, confounder_jump_first=confounder_jump_first)
            except (ValueError, ConvergenceError) as exc:
                raise type(exc)(f"arm {arm}, {kind} model: {exc}") from exc
    return MultistateFit(fits=fits, covariate_names=list(ds.covariate_names))


def risk_design(subject: SubjectRecord, t: float, kind: str,
                confounder_jump_first: bool = True):
    """Covariate row and at-risk indicator of one subject at time ``t``.

    Returns ``(row, at_risk)`` where the row appends the kind's time-varying
    indicator columns to the baseline covariates.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown transition kind {kind!r}")
    has_l = subject.l_time is not None
    if kind == "intermediate" and not confounder_jump_first:
        l_val = 1.0 if has_l and subject.l_time < t else 0.0
    else:
        l_val = 1.0 if has_l and subject.l_time <= t else 0.0
    if kind == "confounder" and confounder_jump_first:
        n1_val = 1.0 if subject.delta1 and subject.t1 < t else 0.0
    else:
        n1_val = 1.0 if subject.delta1 and subject.t1 <= t else 0.0
    if kind == "confounder":
        row = subject.x + (n1_val,)
        at_risk = (not has_l or subject.l_time >= t) and subject.t2 >= t
    elif kind == "intermediate":
        row = subject.x + (l_val,)
        at_risk = subject.t1 >= t
    else:
        row = subject.x + (l_val, n1_val)
        at_risk = subject.t2 >= t
    return row, at_risk
