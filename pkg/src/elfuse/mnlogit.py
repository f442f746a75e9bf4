"""Multinomial logistic model: probabilities, likelihood, derivatives, MLE.

Class K is the reference: logits are x'theta_k for k < K and 0 for k = K.
All likelihood quantities are per-observation averages.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ValidationError
from .types import PrimaryDataset

__all__ = ["MleFit", "class_probs", "probs_matrix", "log_lik", "score_and_hessian", "fit_mle"]

SEPARATION_LOGIT = 30.0


def _coef_matrix(theta: np.ndarray, p: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.size % p != 0:
        raise ValidationError(
            f"theta length {theta.size} is not a multiple of p={p}", field="theta"
        )
    return theta.reshape(-1, p)


def probs_matrix(design: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """n x K class-probability matrix, overflow-safe via max subtraction."""
    design = np.asarray(design, dtype=float)
    coef = _coef_matrix(theta, design.shape[1])
    logits = np.concatenate(
        [design @ coef.T, np.zeros((design.shape[0], 1))], axis=1
    )
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits


def class_probs(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Probability vector (p_1..p_K) at a single covariate row."""
    x = np.asarray(x, dtype=float)
    return probs_matrix(x[None, :], theta)[0]


def log_lik(dataset: PrimaryDataset, theta: np.ndarray) -> float:
    """Average full multinomial log-likelihood (all K classes contribute)."""
    design = dataset.design
    coef = _coef_matrix(theta, dataset.p)
    if coef.shape[0] != dataset.n_classes - 1:
        raise ValidationError(
            f"theta implies {coef.shape[0] + 1} classes, dataset has {dataset.n_classes}",
            field="theta",
        )
    logits = np.concatenate([design @ coef.T, np.zeros((dataset.n, 1))], axis=1)
    mx = logits.max(axis=1)
    lse = mx + np.log(np.exp(logits - mx[:, None]).sum(axis=1))
    own = logits[np.arange(dataset.n), dataset.labels - 1]
    return float(np.mean(own - lse))


def score_and_hessian(dataset: PrimaryDataset, theta: np.ndarray):
    """Gradient and Hessian of log_lik with respect to stacked theta.

    The Hessian is symmetric and negative semi-definite.
    """
    X = dataset.design
    n, p = X.shape
    K = dataset.n_classes
    P = probs_matrix(X, theta)
    onehot = np.zeros((n, K - 1))
    mask = dataset.labels <= K - 1
    onehot[np.flatnonzero(mask), dataset.labels[mask] - 1] = 1.0
    resid = onehot - P[:, : K - 1]
    grad = (resid.T @ X / n).ravel()
    # W[i,a,b] = p_a (delta_ab - p_b)
    Pm = P[:, : K - 1]
    W = -Pm[:, :, None] * Pm[:, None, :]
    idx = np.arange(K - 1)
    W[:, idx, idx] += Pm
    dim = p * (K - 1)
    H = np.empty((dim, dim))
    for a in range(K - 1):
        for b in range(K - 1):
            scaled = X * W[:, a, b][:, None]
            H[a * p:(a + 1) * p, b * p:(b + 1) * p] = -(scaled.T @ X) / n
    return grad, H


@dataclass(frozen=True)
class MleFit:
    """Primary-only maximum likelihood fit."""

    theta_hat: np.ndarray
    loglik: float
    info: np.ndarray
    iterations: int
    converged: bool
    separation: bool = False


def fit_mle(
    dataset: PrimaryDataset,
    tol: float = 1e-8,
    max_iter: int = 200,
    start: np.ndarray = None,
) -> MleFit:
    """Damped Newton MLE; converges when the score sup-norm drops below tol.

    Raises ConvergenceError (carrying the last iterate) after max_iter.
    A separation flag is set when the fitted logits are extreme.
    """
    dim = dataset.p * (dataset.n_classes - 1)
    if dataset.n <= dim:
        warnings.warn(
            f"n={dataset.n} <= p(K-1)={dim}: MLE may be poorly determined",
            stacklevel=2,
        )
    theta = np.zeros(dim) if start is None else np.asarray(start, dtype=float).copy()
    ll = log_lik(dataset, theta)
    iterations = 0
    for iterations in range(1, max_iter + 2):
        grad, hess = score_and_hessian(dataset, theta)
        if np.max(np.abs(grad)) < tol:
            iterations -= 1
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        alpha = 1.0
        for _ in range(60):
            cand = theta + alpha * step
            ll_cand = log_lik(dataset, cand)
            if np.isfinite(ll_cand) and ll_cand >= ll - 1e-15:
                break
            alpha *= 0.5
        else:
            raise ConvergenceError(
                "MLE line search failed to locate an ascent step",
                last=theta,
                residual=float(np.max(np.abs(grad))),
            )
        theta, ll = cand, ll_cand
    else:
        grad, _ = score_and_hessian(dataset, theta)
        raise ConvergenceError(
            f"MLE did not converge in {max_iter} iterations",
            last=theta,
            residual=float(np.max(np.abs(grad))),
        )
    grad, hess = score_and_hessian(dataset, theta)
    info = -0.5 * (hess + hess.T)
    logits = dataset.design @ _coef_matrix(theta, dataset.p).T
    separated = bool(np.max(np.abs(logits)) > SEPARATION_LOGIT)
    if separated:
        warnings.warn("fitted logits exceed the separation threshold", stacklevel=2)
    return MleFit(
        theta_hat=theta,
        loglik=ll,
        info=info,
        iterations=iterations,
        converged=True,
        separation=separated,
    )
