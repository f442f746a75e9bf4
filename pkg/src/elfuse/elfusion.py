"""Empirical-likelihood fusion: moment constraints, profile pseudo-likelihood,
inner multiplier solver, and the fused stationary-point estimator.

The fused objective in the enlarged parameter gamma = (lam, theta, phi_free) is

    loglik(theta) - mean_i log(1 + v_i(theta, phi_free)' lam) - tau * ||lam||^2

where row v_i collects the grouped moment functions
(sum_{k in C_l} p_k(X_i | phi) - qhat_l(Z_i)) * h(Z_i), ordered group-major.
The estimator is the stationary point nearest the primary MLE with lam near 0:
the objective is convex in lam wherever the moment curvature beats the
penalty and concave otherwise, so a joint maximum over gamma need not exist
and ascent methods are not reliable. The solver therefore runs damped Newton
on the full stationarity system, moving all blocks jointly (at a mismatched
(theta, phi_free) the lam equation alone may have no root near zero while
the coupled system does), refines the cheap lam block after every accepted
step, and falls back to continuation from a stiffer penalty when the target
basin is too narrow. Globalization is by backtracking on the residual norm;
every iterate keeps all weight denominators positive.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import BoundaryError, ConvergenceError, ValidationError
from .mnlogit import fit_mle, log_lik, probs_matrix, score_and_hessian
from .types import (
    BasisSet,
    CoarseningMap,
    ExternalPredictionSet,
    FusedParams,
    ParamLayout,
    PrimaryDataset,
    eval_basis,
)

__all__ = [
    "MomentMatrix",
    "FmleFit",
    "FusionProblem",
    "moment_matrix",
    "el_weights",
    "profile_objective",
    "penalized_objective",
    "solve_lambda",
    "fit_fmle",
]

_POSITIVITY_FLOOR = 1e-10
_DEGENERATE_COLUMN_VAR = 1e-14
_MAX_STEP = 5.0
_PARAM_BOUND = 1e3


@dataclass(frozen=True)
class MomentMatrix:
    """n x (L-1)H matrix of moment-function values; columns group-major."""

    values: np.ndarray
    column_labels: tuple  # ((group l, basis h), ...) both 1-based

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(self.column_labels):
            raise ValidationError("values/column_labels shape mismatch", field="values")
        if not np.all(np.isfinite(values)):
            raise ValidationError("moment matrix has non-finite entries", field="values")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class FmleFit:
    """Fused fit: parameters, normalized weights, and solver diagnostics.

    ``el_weights`` are the profile weights 1/(n(1 + v_i'lam)) normalized to
    sum to one; with tau = 0 the normalization is a no-op up to solver
    tolerance, while the quadratic penalty otherwise shifts the raw sum by
    2*tau*||lam||^2.
    """

    params: FusedParams
    el_weights: np.ndarray
    objective: float
    inner_iterations: int
    outer_iterations: int
    converged: bool
    tau: float
    gradient_norm: float
    dropped_columns: tuple = ()


class FusionProblem:
    """Precomputed quantities and calculus for one fused-estimation problem.

    Exposes the moment matrix, objective, analytic gradient and Hessian of
    the profile pseudo-likelihood in gamma = (lam, theta, phi_free), and
    per-observation scores (all without the penalty term unless stated).
    """

    def __init__(
        self,
        dataset: PrimaryDataset,
        predictions: ExternalPredictionSet,
        cmap: CoarseningMap,
        basis: BasisSet,
        layout: ParamLayout,
    ):
        if predictions.n != dataset.n:
            raise ValidationError(
                f"predictions have {predictions.n} rows, dataset has {dataset.n}",
                field="predictions",
            )
        if cmap.n_classes != dataset.n_classes:
            raise ValidationError(
                "coarsening map and dataset disagree on the class count",
                field="map",
            )
        if predictions.n_groups_minus_1 != cmap.n_groups - 1:
            raise ValidationError(
                f"predictions have {predictions.n_groups_minus_1} columns, "
                f"expected {cmap.n_groups - 1}",
                field="predictions",
            )
        if layout.p != dataset.p or layout.n_classes != dataset.n_classes:
            raise ValidationError(
                "layout dimensions do not match the dataset", field="layout"
            )
        self.dataset = dataset
        self.layout = layout
        self.cmap = cmap
        self.basis = basis
        self.X = dataset.design
        self.q = predictions.values
        self.H = eval_basis(basis, dataset)
        self.ind = cmap.indicator  # (L-1, K)
        self.Mt = layout.theta_to_phi
        self.Mf = layout.free_to_phi
        self.n = dataset.n
        self.n_lam = (cmap.n_groups - 1) * basis.size
        self.n_theta = layout.dim
        self.n_free = layout.dim - layout.m
        self.dim_gamma = self.n_lam + self.n_theta + self.n_free
        self.column_labels = tuple(
            (l, h)
            for l in range(1, cmap.n_groups)
            for h in range(1, basis.size + 1)
        )

    # -- state -------------------------------------------------------------

    class _State:
        __slots__ = (
            "theta", "phi_free", "phi", "P", "Pl", "resid", "v",
            "_loglik", "u", "mle_grad", "mle_scores",
        )

    def state(self, theta: np.ndarray, phi_free: np.ndarray) -> "_State":
        """Moment values and first-order pieces at one (theta, phi_free)."""
        st = FusionProblem._State()
        st.theta = np.asarray(theta, dtype=float)
        st.phi_free = np.asarray(phi_free, dtype=float)
        st.phi = self.Mt @ st.theta + self.Mf @ st.phi_free
        st.P = probs_matrix(self.X, st.phi)
        st.Pl = st.P @ self.ind.T
        st.resid = st.Pl - self.q
        st.v = (st.resid[:, :, None] * self.H[:, None, :]).reshape(self.n, self.n_lam)
        st._loglik = None
        st.u = None
        st.mle_grad = None
        st.mle_scores = None
        return st

    def loglik(self, st) -> float:
        if st._loglik is None:
            st._loglik = log_lik(self.dataset, st.theta)
        return st._loglik

    def _ensure_first_order(self, st):
        if st.u is not None:
            return
        K = self.dataset.n_classes
        Ph = st.P[:, : K - 1]
        ind_h = self.ind[:, : K - 1]
        # dPl[i,l,a] = p_a (1(a in C_l) - Pl)
        dPl = Ph[:, None, :] * (ind_h[None, :, :] - st.Pl[:, :, None])
        # u[i,l,:] = gradient of the grouped probability w.r.t. phi
        st.u = (dPl[:, :, :, None] * self.X[:, None, None, :]).reshape(
            self.n, self.ind.shape[0], self.n_theta
        )
        onehot = np.zeros((self.n, K - 1))
        mask = self.dataset.labels <= K - 1
        onehot[np.flatnonzero(mask), self.dataset.labels[mask] - 1] = 1.0
        # the likelihood part differentiates the theta-based probabilities,
        # the moment part the phi-based ones
        P_theta = probs_matrix(self.X, st.theta)
        eres = onehot - P_theta[:, : K - 1]
        st.mle_scores = (eres[:, :, None] * self.X[:, None, :]).reshape(
            self.n, self.n_theta
        )
        st.mle_grad = st.mle_scores.mean(axis=0)

    def _second_order(self, st, s):
        """mean_i w_i * Hessian wrt phi of sum_l s[i,l]*(grouped prob), plus
        the lam-weighted group curvature tensor; s[i,l] = sum_h lam_lh H[i,h]."""
        K = self.dataset.n_classes
        Ph = st.P[:, : K - 1]
        ind_h = self.ind[:, : K - 1]
        dPl = Ph[:, None, :] * (ind_h[None, :, :] - st.Pl[:, :, None])
        # c2[i,l,a,b]: second logit-derivative of the grouped probability
        cross = (
            Ph[:, None, :, None]
            * Ph[:, None, None, :]
            * (
                ind_h[None, :, :, None]
                + ind_h[None, :, None, :]
                - 2.0 * st.Pl[:, :, None, None]
            )
        )
        c2 = -cross
        ii = np.arange(K - 1)
        c2[:, :, ii, ii] += dPl
        return np.einsum("il,ilab->iab", s, c2)

    # -- moment matrix -----------------------------------------------------

    def moments(self, theta, phi_free) -> np.ndarray:
        return self.state(theta, phi_free).v

    def denominators(self, st, lam) -> np.ndarray:
        return 1.0 + st.v @ lam

    # -- objective / gradient / hessian ------------------------------------

    def objective(self, st, lam, tau=0.0):
        lam = np.asarray(lam, dtype=float)
        if not lam.any():
            base = self.loglik(st)
        else:
            D = self.denominators(st, lam)
            if D.min() <= 0.0:
                return -np.inf
            base = self.loglik(st) - float(np.mean(np.log(D)))
        if tau:
            base -= tau * float(lam @ lam)
        return base

    def gradient(self, st, lam, tau=0.0) -> np.ndarray:
        """Analytic gradient in gamma order (lam, theta, phi_free)."""
        self._ensure_first_order(st)
        lam = np.asarray(lam, dtype=float)
        D = self.denominators(st, lam)
        if D.min() <= 0.0:
            raise BoundaryError(
                "weight denominator not positive", row=int(np.argmin(D))
            )
        w = 1.0 / D
        g_lam = -(w @ st.v) / self.n - 2.0 * tau * lam
        s = self.H @ lam.reshape(self.ind.shape[0], -1).T  # (n, L-1)
        b_phi = (s[:, :, None] * st.u).sum(axis=1)
        wb = (w @ b_phi) / self.n
        g_theta = st.mle_grad - wb @ self.Mt
        g_free = -wb @ self.Mf
        return np.concatenate([g_lam, g_theta, g_free])

    def per_obs_scores(self, st, lam) -> np.ndarray:
        """n x dim(gamma) matrix of per-observation profile scores (no penalty)."""
        self._ensure_first_order(st)
        lam = np.asarray(lam, dtype=float)
        D = self.denominators(st, lam)
        if D.min() <= 0.0:
            raise BoundaryError(
                "weight denominator not positive", row=int(np.argmin(D))
            )
        w = 1.0 / D
        s = self.H @ lam.reshape(self.ind.shape[0], -1).T
        b_phi = (s[:, :, None] * st.u).sum(axis=1)
        s_lam = -st.v * w[:, None]
        s_theta = st.mle_scores - w[:, None] * (b_phi @ self.Mt)
        s_free = -w[:, None] * (b_phi @ self.Mf)
        return np.concatenate([s_lam, s_theta, s_free], axis=1)

    def hessian(self, st, lam, tau=0.0) -> np.ndarray:
        """Analytic Hessian of the (optionally penalized) profile objective."""
        self._ensure_first_order(st)
        lam = np.asarray(lam, dtype=float)
        n, dl, dt, df = self.n, self.n_lam, self.n_theta, self.n_free
        D = self.denominators(st, lam)
        if D.min() <= 0.0:
            raise BoundaryError(
                "weight denominator not positive", row=int(np.argmin(D))
            )
        w = 1.0 / D
        w2 = w * w
        L1 = self.ind.shape[0]
        s = self.H @ lam.reshape(L1, -1).T
        b_phi = (s[:, :, None] * st.u).sum(axis=1)
        b_t = b_phi @ self.Mt
        b_f = b_phi @ self.Mf
        # T[i,(l,h),:] = H[i,h] * u[i,l,:] mapped through the layout
        T_phi = (self.H[:, None, :, None] * st.u[:, :, None, :]).reshape(n, dl, dt)

        H_ll = (st.v * w2[:, None]).T @ st.v / n - 2.0 * tau * np.eye(dl)

        wT = np.tensordot(w, T_phi, axes=(0, 0)) / n
        corr = (st.v * w2[:, None]).T @ b_phi / n
        H_lphi = -(wT - corr)  # d(lam-grad)/d(phi directions)
        H_lt = H_lphi @ self.Mt
        H_lf = H_lphi @ self.Mf

        # curvature of the lam-weighted grouped probabilities
        c2s = self._second_order(st, s)
        K1 = c2s.shape[1]
        p = self.X.shape[1]
        Cw = np.empty((dt, dt))
        for a in range(K1):
            for b in range(K1):
                scaled = self.X * (w * c2s[:, a, b])[:, None]
                Cw[a * p:(a + 1) * p, b * p:(b + 1) * p] = scaled.T @ self.X
        Cw /= n
        _, mle_hess = score_and_hessian(self.dataset, st.theta)
        wb_t = b_t * w2[:, None]
        H_tt = mle_hess - self.Mt.T @ Cw @ self.Mt + wb_t.T @ b_t / n
        H_tf = -self.Mt.T @ Cw @ self.Mf + wb_t.T @ b_f / n
        H_ff = -self.Mf.T @ Cw @ self.Mf + (b_f * w2[:, None]).T @ b_f / n

        full = np.zeros((self.dim_gamma, self.dim_gamma))
        sl_l = slice(0, dl)
        sl_t = slice(dl, dl + dt)
        sl_f = slice(dl + dt, dl + dt + df)
        full[sl_l, sl_l] = H_ll
        full[sl_l, sl_t] = H_lt
        full[sl_t, sl_l] = H_lt.T
        full[sl_l, sl_f] = H_lf
        full[sl_f, sl_l] = H_lf.T
        full[sl_t, sl_t] = H_tt
        full[sl_t, sl_f] = H_tf
        full[sl_f, sl_t] = H_tf.T
        full[sl_f, sl_f] = H_ff
        return full


# -- public operations -----------------------------------------------------


def moment_matrix(
    dataset, predictions, cmap, basis, layout, theta, phi_free
) -> MomentMatrix:
    """Evaluate all grouped moment functions over the primary sample."""
    problem = FusionProblem(dataset, predictions, cmap, basis, layout)
    from .types import build_phi_full  # dimension checks with named fields

    build_phi_full(layout, np.asarray(theta, float), np.asarray(phi_free, float))
    return MomentMatrix(
        values=problem.moments(theta, phi_free),
        column_labels=problem.column_labels,
    )


def el_weights(moments, lam) -> np.ndarray:
    """Profile weights 1/(n(1 + g_i'lam)); requires positive denominators."""
    G = moments.values if isinstance(moments, MomentMatrix) else np.asarray(moments)
    lam = np.asarray(lam, dtype=float)
    D = 1.0 + G @ lam
    if D.min() <= 0.0:
        raise BoundaryError(
            f"denominator not positive at row {int(np.argmin(D))}",
            row=int(np.argmin(D)),
        )
    return 1.0 / (G.shape[0] * D)


def _problem_and_state(dataset, predictions, cmap, basis, layout, gamma):
    problem = FusionProblem(dataset, predictions, cmap, basis, layout)
    if isinstance(gamma, FusedParams):
        fp = gamma
    else:
        fp = FusedParams.unpack(np.asarray(gamma, float), problem.n_lam, problem.n_theta)
    st = problem.state(fp.theta, fp.phi_free)
    return problem, st, fp


def profile_objective(dataset, predictions, cmap, basis, layout, gamma) -> float:
    """Profile pseudo-log-likelihood; -inf outside the positivity region."""
    problem, st, fp = _problem_and_state(dataset, predictions, cmap, basis, layout, gamma)
    return problem.objective(st, fp.lam, tau=0.0)


def penalized_objective(dataset, predictions, cmap, basis, layout, gamma, tau) -> float:
    """Profile objective minus tau * ||lam||^2."""
    if tau < 0:
        raise ValidationError("tau must be nonnegative", field="tau")
    problem, st, fp = _problem_and_state(dataset, predictions, cmap, basis, layout, gamma)
    return problem.objective(st, fp.lam, tau=tau)


def _lambda_residual(G, lam, tau):
    D = 1.0 + G @ lam
    return -(G / D[:, None]).mean(axis=0) - 2.0 * tau * lam, D


def _solve_lambda_impl(G_full, tau, tol, max_iter, start):
    """Core multiplier Newton solve; returns (lam, dropped column indices)."""
    n, d = G_full.shape
    scale = max(1.0, float(np.mean(G_full * G_full)))
    col_var = G_full.var(axis=0)
    keep = col_var > _DEGENERATE_COLUMN_VAR * scale
    dropped = np.flatnonzero(~keep)
    G = G_full[:, keep]
    lam_k = np.zeros(G.shape[1])
    if start is not None:
        cand = np.asarray(start, dtype=float)[keep]
        if (1.0 + G @ cand).min() > _POSITIVITY_FLOOR:
            lam_k = cand.copy()

    r, D = _lambda_residual(G, lam_k, tau)
    rnorm = np.linalg.norm(r)
    mu = 0.0
    for _ in range(max_iter + 1):
        if np.max(np.abs(r), initial=0.0) < tol:
            break
        w2 = 1.0 / (D * D)
        J = (G * w2[:, None]).T @ G / n - 2.0 * tau * np.eye(G.shape[1])
        try:
            step = np.linalg.solve(J + mu * np.eye(G.shape[1]), -r)
        except np.linalg.LinAlgError:
            mu = max(mu * 10.0, 1e-8)
            continue
        alpha = 1.0
        accepted = False
        for _ in range(50):
            cand = lam_k + alpha * step
            D_cand = 1.0 + G @ cand
            if D_cand.min() > _POSITIVITY_FLOOR:
                r_cand, _ = _lambda_residual(G, cand, tau)
                if np.linalg.norm(r_cand) <= (1.0 - 1e-4 * alpha) * rnorm:
                    lam_k, r, D, rnorm = cand, r_cand, D_cand, np.linalg.norm(r_cand)
                    accepted = True
                    mu *= 0.1
                    break
            alpha *= 0.5
        if not accepted:
            mu = max(mu * 10.0, 1e-8)
            if mu > 1e8:
                raise ConvergenceError(
                    "multiplier solve stalled", last=lam_k, residual=float(rnorm)
                )
    else:
        raise ConvergenceError(
            f"multiplier solve did not converge in {max_iter} iterations",
            last=lam_k,
            residual=float(rnorm),
        )
    lam = np.zeros(d)
    lam[keep] = lam_k
    return lam, tuple(int(i) for i in dropped)


def solve_lambda(
    moments,
    tau: float,
    tol: float = 1e-9,
    max_iter: int = 100,
    start: np.ndarray = None,
) -> np.ndarray:
    """Newton solve of the multiplier stationarity equation.

    Finds lam with || d/dlam [objective - tau||lam||^2] ||_inf < tol while
    keeping every denominator 1 + g_i'lam strictly positive. Columns with
    (numerically) zero variance are dropped with a warning and get lam = 0.
    """
    if tau < 0:
        raise ValidationError("tau must be nonnegative", field="tau")
    G = moments.values if isinstance(moments, MomentMatrix) else np.asarray(moments, float)
    lam, dropped = _solve_lambda_impl(G, tau, tol, max_iter, start)
    if dropped:
        warnings.warn(
            f"dropped {len(dropped)} degenerate moment column(s): {list(dropped)}",
            stacklevel=2,
        )
    return lam


def _polish_lambda(problem, st, lam, tau, grad, tol, max_steps=8):
    """Newton refinement of the lam block at fixed (theta, phi_free).

    Reuses the current state (the moments do not depend on lam). Only an
    update that shrinks the full stationarity residual is kept, so a fold
    in the lam equation (no nearby root) degrades gracefully to a no-op.
    """
    n = problem.n
    v = st.v
    best_norm = np.linalg.norm(grad)
    cur = lam
    moved_any = False
    for _ in range(max_steps):
        D = 1.0 + v @ cur
        r = -(D ** -1 @ v) / n - 2.0 * tau * cur
        if np.max(np.abs(r), initial=0.0) < tol:
            break
        w2 = 1.0 / (D * D)
        J = (v * w2[:, None]).T @ v / n - 2.0 * tau * np.eye(v.shape[1])
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            break
        alpha, moved = 1.0, False
        rnorm = np.linalg.norm(r)
        for _ in range(30):
            cand = cur + alpha * step
            D_c = 1.0 + v @ cand
            if D_c.min() > _POSITIVITY_FLOOR:
                r_c = -(D_c ** -1 @ v) / n - 2.0 * tau * cand
                if np.linalg.norm(r_c) <= (1.0 - 1e-4 * alpha) * rnorm:
                    cur, moved = cand, True
                    moved_any = True
                    break
            alpha *= 0.5
        if not moved:
            break
    if moved_any:
        g_c = problem.gradient(st, cur, tau)
        if np.linalg.norm(g_c) < best_norm:
            return cur, g_c
    return lam, grad


def fit_fmle(
    dataset: PrimaryDataset,
    predictions: ExternalPredictionSet,
    cmap: CoarseningMap,
    basis: BasisSet,
    layout: ParamLayout,
    tau: float = 0.1,
    tol: float = 1e-8,
    max_outer: int = 200,
    inner_tol: float = 1e-9,
    start: FusedParams = None,
) -> FmleFit:
    """Fused estimation: stationary point of the penalized profile objective.

    Runs damped Newton on the full stationarity system in gamma from the
    primary MLE (free coordinates copied into phi_free, lam = 0), moving
    all blocks jointly; each accepted step is followed by a guarded Newton
    refinement of the lam block alone. Joint steps matter: at a mismatched
    (theta, phi_free) the lam equation on its own may have no root near 0,
    while the coupled system does. Steps are kept inside the positivity
    region and must shrink the residual norm; rejected steps trigger
    Levenberg damping and are never fatal. If the direct solve stalls, the
    solver retries by continuation from a stiffer penalty down to tau.
    Converged when the penalized gradient has sup-norm below tol.
    """
    if tau < 0:
        raise ValidationError("tau must be nonnegative", field="tau")
    problem = FusionProblem(dataset, predictions, cmap, basis, layout)
    K = dataset.n_classes
    if basis.size * (K - 1) <= layout.dim - layout.m:
        warnings.warn(
            "basis too small for any efficiency gain: "
            f"H(K-1)={basis.size * (K - 1)} <= free dimension {layout.dim - layout.m}",
            stacklevel=2,
        )
    if start is None:
        mle = fit_mle(dataset)
        theta = mle.theta_hat.copy()
        phi_free = theta[layout._free0].copy()
        lam = np.zeros(problem.n_lam)
    else:
        theta = np.asarray(start.theta, float).copy()
        phi_free = np.asarray(start.phi_free, float).copy()
        lam = np.asarray(start.lam, float).copy()

    # degenerate moment columns cannot move and keep lam pinned at zero
    v0 = problem.moments(theta, phi_free)
    scale = max(1.0, float(np.mean(v0 * v0)))
    active = v0.var(axis=0) > _DEGENERATE_COLUMN_VAR * scale
    dropped = tuple(int(i) for i in np.flatnonzero(~active))
    if dropped:
        warnings.warn(
            f"dropped {len(dropped)} degenerate moment column(s): {list(dropped)}",
            stacklevel=2,
        )
        lam[~active] = 0.0
    mask = np.ones(problem.dim_gamma, dtype=bool)
    mask[: problem.n_lam] = active

    counters = {"inner": 0, "outer": 0}
    try:
        theta, phi_free, lam, st, grad = _newton_joint(
            problem, theta, phi_free, lam, mask, tau, tol, max_outer,
            inner_tol, counters,
        )
    except ConvergenceError as direct_error:
        # continuation fallback: a stiffer penalty pins lam near zero where
        # Newton is robust; tracking the branch down recovers solutions whose
        # basin is too narrow for a cold start
        theta, phi_free, lam, st, grad = _continuation_solve(
            problem, layout, start, tau, tol, max_outer, inner_tol, mask,
            counters, direct_error,
        )

    weights = el_weights(st.v, lam)
    weights = weights / weights.sum()
    return FmleFit(
        params=FusedParams(lam=lam, theta=theta, phi_free=phi_free),
        el_weights=weights,
        objective=float(problem.objective(st, lam, tau)),
        inner_iterations=counters["inner"],
        outer_iterations=counters["outer"],
        converged=True,
        tau=tau,
        gradient_norm=float(np.max(np.abs(grad[mask]))),
        dropped_columns=dropped,
    )


def _continuation_solve(
    problem, layout, start, tau, tol, max_outer, inner_tol, mask,
    counters, direct_error,
):
    ladder = [t for t in (0.2, 0.05, 0.01, 2e-3, 4e-4) if t > 4.0 * max(tau, 1e-12)]
    ladder.append(tau)
    if start is None:
        mle = fit_mle(problem.dataset)
        theta = mle.theta_hat.copy()
        phi_free = theta[layout._free0].copy()
        lam = np.zeros(problem.n_lam)
    else:
        theta = np.asarray(start.theta, float).copy()
        phi_free = np.asarray(start.phi_free, float).copy()
        lam = np.asarray(start.lam, float).copy()
    result = None
    for stage_tau in ladder:
        try:
            theta, phi_free, lam, st, grad = _newton_joint(
                problem, theta, phi_free, lam, mask, stage_tau, tol,
                max_outer, inner_tol, counters,
            )
            result = (theta, phi_free, lam, st, grad)
        except ConvergenceError:
            raise direct_error from None
    return result


def _newton_joint(
    problem, theta, phi_free, lam, mask, tau, tol, max_outer, inner_tol, counters
):
    """Damped Newton on the joint stationarity system; see fit_fmle."""
    dl = problem.n_lam
    st = problem.state(theta, phi_free)
    grad = problem.gradient(st, lam, tau)
    rnorm = np.linalg.norm(grad[mask])
    trace = []
    mu = 0.0
    stalled = 0
    for outer in range(1, max_outer + 2):
        if np.max(np.abs(grad[mask])) < tol:
            extreme = max(
                np.max(np.abs(theta), initial=0.0),
                np.max(np.abs(phi_free), initial=0.0),
                np.max(np.abs(lam), initial=0.0),
            )
            if extreme > _PARAM_BOUND:
                counters["outer"] += outer - 1
                raise ConvergenceError(
                    "fused solve diverged into a saturated region",
                    last=FusedParams(lam, theta, phi_free),
                    residual=float(rnorm),
                    trace=trace,
                )
            counters["outer"] += outer - 1
            return theta, phi_free, lam, st, grad
        if stalled >= 8:
            # residual plateau: accepted steps no longer make real progress,
            # so no stationary point is reachable from here
            counters["outer"] += outer - 1
            raise ConvergenceError(
                "fused solve stalled on a residual plateau",
                last=FusedParams(lam, theta, phi_free),
                residual=float(rnorm),
                trace=trace,
            )
        hess = problem.hessian(st, lam, tau)
        H = hess[np.ix_(mask, mask)]
        g = grad[mask]
        accepted = False
        for _ in range(40):
            try:
                step_m = np.linalg.solve(H + mu * np.eye(H.shape[0]), -g)
            except np.linalg.LinAlgError:
                mu = max(mu * 10.0, 1e-8)
                continue
            step = np.zeros(problem.dim_gamma)
            step[mask] = step_m
            biggest = np.max(np.abs(step_m), initial=0.0)
            if biggest > _MAX_STEP:
                # cap runaway directions: a near-singular Hessian can
                # otherwise jump into saturated regions where the gradient
                # vanishes without a stationary point
                step *= _MAX_STEP / biggest
            alpha = 1.0
            for _ in range(40):
                lam_c = lam + alpha * step[:dl]
                th_c = theta + alpha * step[dl : dl + problem.n_theta]
                pf_c = phi_free + alpha * step[dl + problem.n_theta :]
                try:
                    st_c = problem.state(th_c, pf_c)
                    grad_c = problem.gradient(st_c, lam_c, tau)
                except (BoundaryError, FloatingPointError):
                    alpha *= 0.5
                    continue
                if np.linalg.norm(grad_c[mask]) <= (1.0 - 1e-4 * alpha) * rnorm:
                    lam_p, grad_p = _polish_lambda(
                        problem, st_c, lam_c, tau, grad_c, inner_tol
                    )
                    counters["inner"] += 1
                    theta, phi_free, lam = th_c, pf_c, lam_p
                    st, grad = st_c, grad_p
                    new_norm = np.linalg.norm(grad[mask])
                    stalled = stalled + 1 if new_norm > (1.0 - 1e-9) * rnorm else 0
                    rnorm = new_norm
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                mu *= 0.25
                break
            mu = max(mu * 10.0, 1e-8)
            if mu > 1e10:
                break
        if not accepted:
            counters["outer"] += outer
            raise ConvergenceError(
                "fused solve stalled: no step reduced the stationarity residual",
                last=FusedParams(lam, theta, phi_free),
                residual=float(rnorm),
                trace=trace,
            )
        trace.append((outer, float(rnorm), float(problem.objective(st, lam, tau))))
    counters["outer"] += max_outer
    raise ConvergenceError(
        f"fused solve did not converge in {max_outer} outer iterations",
        last=FusedParams(lam, theta, phi_free),
        residual=float(np.max(np.abs(grad))),
        trace=trace,
    )
