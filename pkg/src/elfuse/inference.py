"""Covariance estimation, bootstrap standard errors, Wald intervals, and
efficiency-gain diagnostics for the fused estimator.

Two covariance routes are provided and cross-checked: the plug-in sandwich
G^{-1} J G^{-1} over the full enlarged parameter, and the algebraically
equivalent decomposition info^{-1} + L' D L that isolates the gain from the
moment constraints. ``D`` is negative definite whenever fusion helps, and
``L = 0`` exactly when the shared-coordinate cross term lies in the column
space of the free-coordinate cross term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .elfusion import FmleFit, FusionProblem, fit_fmle
from .errors import ConvergenceError, FusionError, SingularMatrixError, ValidationError
from .types import (
    BasisSet,
    CoarseningMap,
    ExternalPredictionSet,
    FusedParams,
    ParamLayout,
    PrimaryDataset,
)

__all__ = [
    "BlockMatrices",
    "CovDecomposition",
    "EfficiencyDiagnostic",
    "BootstrapResult",
    "WaldCI",
    "empirical_blocks",
    "sigma_sandwich",
    "sigma_decomposition",
    "efficiency_diagnostic",
    "bootstrap_se",
    "wald_ci",
    "normal_quantile",
]

_RANK_CUTOFF = 1e-10
_COND_LIMIT = 1e12
_PATTERN_TOL = 1e-10


@dataclass(frozen=True)
class BlockMatrices:
    """Empirical curvature (G) and score-covariance (J) matrices with the
    (lam, theta, phi_free) partition and the shared/free split within theta.

    The (theta, phi_free) and (phi_free, phi_free) blocks of G and every
    J block except the lam and theta diagonals are structurally zero.
    """

    G: np.ndarray
    J: np.ndarray
    n_lam: int
    n_theta: int
    n_free: int
    shared_pos: tuple  # 0-based positions of shared coordinates within theta
    free_pos: tuple

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        J = np.asarray(self.J, dtype=float)
        dim = self.n_lam + self.n_theta + self.n_free
        if G.shape != (dim, dim) or J.shape != (dim, dim):
            raise ValidationError(
                f"G and J must be {dim}x{dim}", field="G"
            )
        scale = max(1.0, float(np.abs(G).max(initial=0.0)))
        if np.abs(G - G.T).max(initial=0.0) > _PATTERN_TOL * scale:
            raise ValidationError("G must be symmetric", field="G")
        sl_t, sl_f = self._slice_theta, self._slice_free
        if np.abs(G[sl_t, sl_f]).max(initial=0.0) > _PATTERN_TOL * scale:
            raise ValidationError(
                "theta/phi_free block of G must be zero", field="G"
            )
        if np.abs(G[sl_f, sl_f]).max(initial=0.0) > _PATTERN_TOL * scale:
            raise ValidationError("phi_free block of G must be zero", field="G")
        jscale = max(1.0, float(np.abs(J).max(initial=0.0)))
        mask = np.ones((dim, dim), dtype=bool)
        mask[self._slice_lam, self._slice_lam] = False
        mask[sl_t, sl_t] = False
        if np.abs(J[mask]).max(initial=0.0) > _PATTERN_TOL * jscale:
            raise ValidationError(
                "J must vanish outside the lam and theta diagonal blocks",
                field="J",
            )
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "shared_pos", tuple(self.shared_pos))
        object.__setattr__(self, "free_pos", tuple(self.free_pos))

    @property
    def _slice_lam(self):
        return slice(0, self.n_lam)

    @property
    def _slice_theta(self):
        return slice(self.n_lam, self.n_lam + self.n_theta)

    @property
    def _slice_free(self):
        return slice(self.n_lam + self.n_theta, self.n_lam + self.n_theta + self.n_free)

    @property
    def G_ll(self):
        return self.G[self._slice_lam, self._slice_lam]

    @property
    def G_lt(self):
        return self.G[self._slice_lam, self._slice_theta]

    @property
    def G_lf(self):
        return self.G[self._slice_lam, self._slice_free]

    @property
    def G_tt(self):
        return self.G[self._slice_theta, self._slice_theta]

    @property
    def info(self):
        """Observed information of the primary coefficients."""
        return self.G_tt

    @property
    def J_l(self):
        return self.J[self._slice_lam, self._slice_lam]

    @property
    def J_t(self):
        return self.J[self._slice_theta, self._slice_theta]

    @classmethod
    def from_blocks(
        cls, G_ll, G_lt, G_lf, G_tt, J_l, J_t, shared_pos=None, free_pos=None
    ) -> "BlockMatrices":
        """Assemble full matrices from the nonzero blocks (tests, checks)."""
        G_ll = np.atleast_2d(np.asarray(G_ll, float))
        G_lt = np.atleast_2d(np.asarray(G_lt, float))
        G_lf = np.asarray(G_lf, float)
        G_tt = np.atleast_2d(np.asarray(G_tt, float))
        nl, nt = G_lt.shape
        G_lf = G_lf.reshape(nl, -1)
        nf = G_lf.shape[1]
        dim = nl + nt + nf
        G = np.zeros((dim, dim))
        G[:nl, :nl] = G_ll
        G[:nl, nl : nl + nt] = G_lt
        G[nl : nl + nt, :nl] = G_lt.T
        G[:nl, nl + nt :] = G_lf
        G[nl + nt :, :nl] = G_lf.T
        G[nl : nl + nt, nl : nl + nt] = G_tt
        J = np.zeros((dim, dim))
        J[:nl, :nl] = np.atleast_2d(np.asarray(J_l, float))
        J[nl : nl + nt, nl : nl + nt] = np.atleast_2d(np.asarray(J_t, float))
        if shared_pos is None:
            shared_pos = tuple(range(nt))
        if free_pos is None:
            free_pos = tuple(i for i in range(nt) if i not in set(shared_pos))
        return cls(
            G=G, J=J, n_lam=nl, n_theta=nt, n_free=nf,
            shared_pos=shared_pos, free_pos=free_pos,
        )


def empirical_blocks(
    fit: FmleFit,
    dataset: PrimaryDataset,
    predictions: ExternalPredictionSet,
    cmap: CoarseningMap,
    basis: BasisSet,
    layout: ParamLayout,
    allow_singular: bool = False,
) -> BlockMatrices:
    """Plug-in curvature and score-covariance blocks at the fitted parameter.

    G averages the analytic per-observation Hessian of the profile
    objective (no penalty) with the structural zero pattern imposed; the
    J blocks are centered sample covariances of the per-observation lam
    and theta scores. A singular G is an error unless ``allow_singular``:
    with no shared coordinates G is structurally singular (the free block
    outnumbers the constraints) and only the decomposition route applies.
    """
    if not fit.converged:
        raise ValidationError("fit did not converge", field="fit")
    problem = FusionProblem(dataset, predictions, cmap, basis, layout)
    fp = fit.params
    st = problem.state(fp.theta, fp.phi_free)
    hess = problem.hessian(st, fp.lam, tau=0.0)
    G = -hess
    nl, nt, nf = problem.n_lam, problem.n_theta, problem.n_free
    G[nl : nl + nt, nl + nt :] = 0.0
    G[nl + nt :, nl : nl + nt] = 0.0
    G[nl + nt :, nl + nt :] = 0.0
    G = 0.5 * (G + G.T)
    svals = np.linalg.svd(G, compute_uv=False)
    if not allow_singular and svals[-1] <= 1e-12 * svals[0]:
        rank = int(np.sum(svals > 1e-12 * svals[0]))
        raise SingularMatrixError(
            f"curvature matrix is singular (rank {rank} of {G.shape[0]})",
            detail={"rank": rank, "singular_values": svals.tolist()},
        )
    scores = problem.per_obs_scores(st, fp.lam)
    J = np.zeros_like(G)
    s_l = scores[:, :nl] - scores[:, :nl].mean(axis=0)
    s_t = scores[:, nl : nl + nt] - scores[:, nl : nl + nt].mean(axis=0)
    J[:nl, :nl] = s_l.T @ s_l / problem.n
    J[nl : nl + nt, nl : nl + nt] = s_t.T @ s_t / problem.n
    return BlockMatrices(
        G=G, J=J, n_lam=nl, n_theta=nt, n_free=nf,
        shared_pos=tuple(int(i) for i in layout._shared0),
        free_pos=tuple(int(i) for i in layout._free0),
    )


def sigma_sandwich(blocks: BlockMatrices):
    """Sandwich covariance G^{-1} J G^{-1} and its theta sub-block.

    Computed as M M' with M = G^{-1} J^{1/2}, so the result is symmetric
    positive semi-definite by construction.
    """
    G, J = blocks.G, blocks.J
    svals = np.linalg.svd(G, compute_uv=False)
    if svals.size and (svals[-1] == 0.0 or svals[0] / svals[-1] > _COND_LIMIT):
        raise SingularMatrixError(
            "curvature matrix too ill-conditioned for the sandwich",
            detail={"condition_number": float(np.inf if svals[-1] == 0 else svals[0] / svals[-1])},
        )
    evals, evecs = np.linalg.eigh(0.5 * (J + J.T))
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    M = np.linalg.solve(G, root)
    sigma_gamma = M @ M.T
    sl = blocks._slice_theta
    return sigma_gamma, sigma_gamma[sl, sl]


@dataclass(frozen=True)
class CovDecomposition:
    sigma_theta: np.ndarray
    D: np.ndarray
    L: np.ndarray


def sigma_decomposition(blocks: BlockMatrices) -> CovDecomposition:
    """Theta covariance via info^{-1} + L' D L with the free-block projection.

    D = -J_l - G_lt info^{-1} G_tl must be negative definite; the middle
    factor of L removes the part of the cross term absorbed by phi_free.
    """
    info = blocks.G_tt
    info_inv = np.linalg.inv(info)
    G_lt, G_lf = blocks.G_lt, blocks.G_lf
    D = -blocks.J_l - G_lt @ info_inv @ G_lt.T
    if blocks.n_lam:
        evals = np.linalg.eigvalsh(0.5 * (D + D.T))
        if evals.max(initial=-np.inf) >= 0.0:
            raise SingularMatrixError(
                "D is not negative definite", detail={"eigenvalues": evals.tolist()}
            )
        if np.abs(G_lt).max(initial=0.0) <= 1e-12 * max(1.0, np.abs(blocks.G).max()):
            # no cross term at all (disconnected layout): L vanishes without
            # touching the possibly unidentified free-block projection
            L = np.zeros((blocks.n_lam, blocks.n_theta))
        else:
            D_inv = np.linalg.inv(D)
            B = D_inv
            if blocks.n_free:
                inner = G_lf.T @ D_inv @ G_lf
                s = np.linalg.svd(inner, compute_uv=False)
                if s.size and s[-1] <= 1e-12 * max(s[0], 1e-300):
                    raise SingularMatrixError(
                        "free-parameter identification failure",
                        detail={"singular_values": s.tolist()},
                    )
                B = D_inv - D_inv @ G_lf @ np.linalg.solve(inner, G_lf.T @ D_inv)
            L = B @ G_lt @ info_inv
    else:
        D = np.zeros((0, 0))
        L = np.zeros((0, blocks.n_theta))
    sigma_theta = info_inv + L.T @ D @ L
    return CovDecomposition(sigma_theta=sigma_theta, D=D, L=L)


@dataclass(frozen=True)
class EfficiencyDiagnostic:
    """Dimension conditions and the column-space test for efficiency gain."""

    necessary_holds: bool
    sufficient_holds: bool
    colspace_residual: float
    gain_expected: bool
    n_basis: int
    n_shared: int
    n_free: int

    def __post_init__(self):
        if self.sufficient_holds and not self.necessary_holds:
            raise ValidationError(
                "sufficient condition cannot hold without the necessary one",
                field="sufficient_holds",
            )


def efficiency_diagnostic(
    blocks: BlockMatrices,
    layout: ParamLayout,
    basis: BasisSet,
    cmap: CoarseningMap,
    residual_threshold: float = 1e-6,
) -> EfficiencyDiagnostic:
    """Integer dimension checks plus the numeric column-space inclusion test.

    The gain vanishes exactly when the shared-coordinate columns of the
    lam/theta cross block lie inside the span of the lam/phi_free block;
    the reported residual is the relative Frobenius distance from that span.
    """
    H = basis.size
    K = layout.n_classes
    p = layout.p
    m = layout.m
    n_free = p * (K - 1) - m
    necessary = H * (K - 1) > n_free
    sufficient = min(m, H * (K - 1)) > n_free
    G_psi = blocks.G_lt[:, list(blocks.shared_pos)]
    norm_psi = np.linalg.norm(G_psi)
    if norm_psi == 0.0:
        residual = 0.0
    elif blocks.n_free == 0:
        residual = 1.0
    else:
        U, s, _ = np.linalg.svd(blocks.G_lf, full_matrices=False)
        rank = int(np.sum(s > _RANK_CUTOFF * s[0])) if s.size else 0
        Ur = U[:, :rank]
        residual = float(
            np.linalg.norm(G_psi - Ur @ (Ur.T @ G_psi)) / norm_psi
        )
    return EfficiencyDiagnostic(
        necessary_holds=bool(necessary),
        sufficient_holds=bool(sufficient),
        colspace_residual=residual,
        gain_expected=bool(residual > residual_threshold),
        n_basis=H,
        n_shared=m,
        n_free=n_free,
    )


@dataclass(frozen=True)
class BootstrapResult:
    se: np.ndarray
    cov: np.ndarray
    n_requested: int
    n_failed: int


def _bootstrap_replicate(args):
    (labels, design, z_columns, n_classes, q_values, groups,
     basis, layout, tau, start, seed_tuple) = args
    rng = np.random.default_rng(np.random.SeedSequence(seed_tuple))
    n = labels.shape[0]
    idx = rng.integers(0, n, size=n)
    dataset = PrimaryDataset(
        labels=labels[idx], design=design[idx], z_columns=z_columns,
        n_classes=n_classes,
    )
    predictions = ExternalPredictionSet(values=q_values[idx])
    cmap = CoarseningMap(groups=groups, n_classes=n_classes)
    fit = fit_fmle(
        dataset, predictions, cmap, basis, layout, tau=tau, start=start
    )
    return fit.params.pack()


def bootstrap_se(
    dataset: PrimaryDataset,
    predictions: ExternalPredictionSet,
    cmap: CoarseningMap,
    basis: BasisSet,
    layout: ParamLayout,
    B: int = 200,
    seed: int = 0,
    tau: float = 0.1,
    start: Optional[FusedParams] = None,
    replicate_seeds=None,
    workers: Optional[int] = None,
) -> BootstrapResult:
    """Row-resampling bootstrap covariance of the fused estimate.

    Labels, design rows, and the aligned prediction rows are resampled
    jointly; the external predictor itself is fixed. Replicates get
    deterministic seeds derived from (seed, replicate index); failed fits
    are dropped, and more than 10% failures is an error. Results do not
    depend on the degree of parallelism.
    """
    if B < 2:
        raise ValidationError("need B >= 2 bootstrap replicates", field="B")
    if start is None:
        start = fit_fmle(dataset, predictions, cmap, basis, layout, tau=tau).params
    if replicate_seeds is None:
        base = tuple(int(s) for s in seed) if isinstance(seed, (tuple, list)) else (int(seed),)
        seed_tuples = [base + (b,) for b in range(B)]
    else:
        if len(replicate_seeds) != B:
            raise ValidationError(
                "replicate_seeds must have length B", field="replicate_seeds"
            )
        seed_tuples = [(int(s),) for s in replicate_seeds]
    args = [
        (
            dataset.labels, dataset.design, dataset.z_columns, dataset.n_classes,
            predictions.values, cmap.groups, basis, layout, tau, start, st,
        )
        for st in seed_tuples
    ]
    from ._parallel import parallel_map

    results = parallel_map(_bootstrap_safe_replicate, args, workers=workers)
    estimates = [r for r in results if r is not None]
    n_failed = B - len(estimates)
    if n_failed > 0.1 * B:
        raise ConvergenceError(
            f"{n_failed}/{B} bootstrap replicates failed", residual=n_failed / B
        )
    est = np.asarray(estimates)
    center = est.mean(axis=0)
    dev = est - center
    cov = dev.T @ dev / (est.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    return BootstrapResult(
        se=np.sqrt(np.clip(np.diag(cov), 0.0, None)),
        cov=cov,
        n_requested=B,
        n_failed=n_failed,
    )


def _bootstrap_safe_replicate(arg):
    try:
        return _bootstrap_replicate(arg)
    except FusionError:
        return None


@dataclass(frozen=True)
class WaldCI:
    lower: np.ndarray
    upper: np.ndarray
    level: float
    degenerate: np.ndarray


def wald_ci(estimates, ses, level: float) -> WaldCI:
    """Per-coordinate normal-theory intervals estimate +- z * se.

    Nonpositive standard errors produce degenerate single-point intervals,
    flagged per coordinate.
    """
    if not (0.0 < level < 1.0):
        raise ValidationError("level must lie in (0,1)", field="level")
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    if est.shape != se.shape:
        raise ValidationError("estimates and ses must align", field="ses")
    z = normal_quantile(0.5 * (1.0 + level))
    degenerate = se <= 0.0
    half = np.where(degenerate, 0.0, z * se)
    return WaldCI(lower=est - half, upper=est + half, level=level, degenerate=degenerate)


# Rational minimax approximation of the standard normal quantile
# (Wichura's PPND16); absolute error below 1e-15 on (0,1).
_PPND_A = (
    3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
    1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
    3.3430575583588128105e4, 2.5090809287301226727e3,
)
_PPND_B = (
    1.0, 4.2313330701600911252e1, 6.8718700749205790830e2,
    5.3941960214247511077e3, 2.1213794301586595867e4, 3.9307895800092710610e4,
    2.8729085735721942674e4, 5.2264952788528545610e3,
)
_PPND_C = (
    1.42343711074968357734e0, 4.63033784615654529590e0,
    5.76949722146069140550e0, 3.64784832476320460504e0,
    1.27045825245236838258e0, 2.41780725177450611770e-1,
    2.27238449892691845833e-2, 7.74545014278341407640e-4,
)
_PPND_D = (
    1.0, 2.05319162663775882187e0, 1.67638483018380384940e0,
    6.89767334985100004550e-1, 1.48103976427480074590e-1,
    1.51986665636164571966e-2, 5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
_PPND_E = (
    6.65790464350110377720e0, 5.46378491116411436990e0,
    1.78482653991729133580e0, 2.96560571828504891230e-1,
    2.65321895265761230930e-2, 1.24266094738807843860e-3,
    2.71155556874348757815e-5, 2.01033439929228813265e-7,
)
_PPND_F = (
    1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
    1.48753612908506148525e-2, 7.86869131145613259100e-4,
    1.84631831751005468180e-5, 1.42151175831644588870e-7,
    2.04426310338993978564e-15,
)


def _poly(coeffs, x):
    acc = coeffs[-1]
    for c in reversed(coeffs[:-1]):
        acc = acc * x + c
    return acc


def normal_quantile(p: float) -> float:
    """Standard normal quantile via rational approximation (error < 1e-8)."""
    if not (0.0 < p < 1.0):
        raise ValidationError("quantile argument must lie in (0,1)", field="p")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_PPND_A, r) / _poly(_PPND_B, r)
    r = p if q < 0 else 1.0 - p
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _poly(_PPND_C, r) / _poly(_PPND_D, r)
    else:
        r -= 5.0
        val = _poly(_PPND_E, r) / _poly(_PPND_F, r)
    return -val if q < 0 else val
