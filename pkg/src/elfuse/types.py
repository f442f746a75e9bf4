"""Shared data model: datasets, coarsening, parameter layout, basis functions.

Conventions used across the package:

* Class labels live in ``{1..K}`` and coarse labels in ``{1..L}``.
* Column and coordinate indices exposed in public types are 1-based, matching
  the file formats (``x1..x{p-1}``, ``q1..q{L-1}``); internals are 0-based.
* A stacked coefficient vector ``theta`` of length ``p*(K-1)`` holds the
  per-class coefficient rows back to back: coordinate ``(k-1)*p + j`` is the
  j-th coefficient of class k (both 1-based).
* The external-model coefficient vector ``phi`` has the same stacked layout.
  Its coordinates at ``shared_index`` equal ``A @ theta[shared_index]``; the
  remaining coordinates are the free vector ``phi_free``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Union

import numpy as np

from .errors import ValidationError

__all__ = [
    "PrimaryDataset",
    "CoarseningMap",
    "ParamLayout",
    "Constant",
    "Coordinate",
    "SplineColumn",
    "Spline",
    "BasisSet",
    "ExternalPredictionSet",
    "FusedParams",
    "EstimateReport",
    "build_phi_full",
    "coarsen_label",
    "eval_basis",
    "eval_basis_matrix",
]

_MIN_SINGULAR = 1e-12


def _as_readonly(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PrimaryDataset:
    """Individual-level primary sample: labels, design matrix, Z columns.

    ``design`` is n x p with an all-ones first column (the intercept).
    ``z_columns`` lists the 1-based design columns that the external
    predictions condition on; it always contains column 1.
    """

    labels: np.ndarray
    design: np.ndarray
    z_columns: tuple
    n_classes: int

    def __post_init__(self):
        labels = _as_readonly(self.labels, dtype=np.int64)
        design = _as_readonly(self.design)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "z_columns", tuple(int(c) for c in self.z_columns))
        if design.ndim != 2:
            raise ValidationError("design must be a 2-d matrix", field="design")
        n, p = design.shape
        if n < 1 or p < 2:
            raise ValidationError(
                f"need n >= 1 and p >= 2, got n={n}, p={p}", field="design"
            )
        if self.n_classes < 2:
            raise ValidationError("need at least two classes", field="n_classes")
        if labels.shape != (n,):
            raise ValidationError(
                f"labels must have length n={n}, got {labels.shape}", field="labels"
            )
        if labels.min() < 1 or labels.max() > self.n_classes:
            raise ValidationError(
                f"labels must lie in 1..{self.n_classes}", field="labels"
            )
        if not np.all(design[:, 0] == 1.0):
            raise ValidationError("first design column must be all ones", field="design")
        if not np.all(np.isfinite(design)):
            raise ValidationError("design contains non-finite entries", field="design")
        zc = self.z_columns
        if not zc or 1 not in zc:
            raise ValidationError("z_columns must contain column 1", field="z_columns")
        if list(zc) != sorted(set(zc)):
            raise ValidationError(
                "z_columns must be sorted and duplicate-free", field="z_columns"
            )
        if zc[0] < 1 or zc[-1] > p:
            raise ValidationError(f"z_columns must lie in 1..{p}", field="z_columns")

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    @property
    def z_matrix(self) -> np.ndarray:
        """The n x |Z| covariate sub-matrix seen by the external source."""
        return self.design[:, [c - 1 for c in self.z_columns]]


@dataclass(frozen=True)
class CoarseningMap:
    """Disjoint label groups C_1..C_L defining the coarse label U."""

    groups: tuple
    n_classes: int

    def __post_init__(self):
        groups = tuple(frozenset(int(y) for y in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if len(groups) < 2:
            raise ValidationError("need at least two groups", field="groups")
        seen = set()
        for i, g in enumerate(groups):
            if not g:
                raise ValidationError(f"group {i + 1} is empty", field="groups")
            if g & seen:
                raise ValidationError("groups must be pairwise disjoint", field="groups")
            seen |= g
        if min(seen) < 1 or max(seen) > self.n_classes:
            raise ValidationError(
                f"group labels must lie in 1..{self.n_classes}", field="groups"
            )

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @cached_property
    def indicator(self) -> np.ndarray:
        """(L-1) x K 0/1 matrix; row l marks the members of C_{l+1}."""
        ind = np.zeros((self.n_groups - 1, self.n_classes))
        for l, g in enumerate(self.groups[:-1]):
            for y in g:
                ind[l, y - 1] = 1.0
        ind.flags.writeable = False
        return ind

    @cached_property
    def full_indicator(self) -> np.ndarray:
        """L x K 0/1 membership matrix over all groups."""
        ind = np.zeros((self.n_groups, self.n_classes))
        for l, g in enumerate(self.groups):
            for y in g:
                ind[l, y - 1] = 1.0
        ind.flags.writeable = False
        return ind


def coarsen_label(cmap: CoarseningMap, y: int) -> Optional[int]:
    """Group index l with y in C_l, or None when y lies in no group."""
    if y < 1 or y > cmap.n_classes:
        raise ValidationError(f"label {y} outside 1..{cmap.n_classes}", field="y")
    for l, g in enumerate(cmap.groups, start=1):
        if y in g:
            return l
    return None


@dataclass(frozen=True)
class ParamLayout:
    """Shared/free split of the stacked coefficient vectors.

    ``shared_index`` selects the m shared coordinates (1-based positions in
    the stacked vector); on them the external coefficients equal
    ``A @ theta[shared_index]``. The complement is free on each side.
    """

    p: int
    n_classes: int
    shared_index: tuple
    A: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(
            self, "shared_index", tuple(int(i) for i in self.shared_index)
        )
        dim = self.dim
        si = self.shared_index
        if list(si) != sorted(set(si)):
            raise ValidationError(
                "shared_index must be sorted and duplicate-free", field="shared_index"
            )
        if si and (si[0] < 1 or si[-1] > dim):
            raise ValidationError(
                f"shared_index must lie in 1..{dim}", field="shared_index"
            )
        m = len(si)
        if m == 0:
            if self.A is not None and np.size(self.A) > 0:
                raise ValidationError("A must be empty when m=0", field="A")
            object.__setattr__(self, "A", None)
            return
        A = _as_readonly(np.eye(m) if self.A is None else self.A)
        if A.shape != (m, m):
            raise ValidationError(f"A must be {m}x{m}, got {A.shape}", field="A")
        svals = np.linalg.svd(A, compute_uv=False)
        if not np.all(np.isfinite(svals)) or svals[-1] <= _MIN_SINGULAR:
            raise ValidationError("A is not invertible", field="A")
        object.__setattr__(self, "A", A)

    @property
    def dim(self) -> int:
        """Length p*(K-1) of a stacked coefficient vector."""
        return self.p * (self.n_classes - 1)

    @property
    def m(self) -> int:
        return len(self.shared_index)

    @cached_property
    def free_index(self) -> tuple:
        shared = set(self.shared_index)
        return tuple(i for i in range(1, self.dim + 1) if i not in shared)

    @cached_property
    def _shared0(self) -> np.ndarray:
        return np.array([i - 1 for i in self.shared_index], dtype=np.intp)

    @cached_property
    def _free0(self) -> np.ndarray:
        return np.array([i - 1 for i in self.free_index], dtype=np.intp)

    @cached_property
    def theta_to_phi(self) -> np.ndarray:
        """dim x dim matrix M with (M @ theta) = shared block of phi."""
        M = np.zeros((self.dim, self.dim))
        if self.m:
            M[np.ix_(self._shared0, self._shared0)] = self.A
        M.flags.writeable = False
        return M

    @cached_property
    def free_to_phi(self) -> np.ndarray:
        """dim x (dim-m) selector embedding phi_free into phi."""
        M = np.zeros((self.dim, self.dim - self.m))
        M[self._free0, np.arange(self.dim - self.m)] = 1.0
        M.flags.writeable = False
        return M

    @classmethod
    def full_transportability(cls, p: int, n_classes: int) -> "ParamLayout":
        """Every coordinate shared with A = identity (theta equals phi)."""
        dim = p * (n_classes - 1)
        return cls(p=p, n_classes=n_classes, shared_index=tuple(range(1, dim + 1)))

    @classmethod
    def shared_slopes(cls, p: int, n_classes: int) -> "ParamLayout":
        """All non-intercept coordinates shared; intercepts free per source."""
        shared = tuple(
            k * p + j
            for k in range(n_classes - 1)
            for j in range(2, p + 1)
        )
        return cls(p=p, n_classes=n_classes, shared_index=shared)

    @classmethod
    def disconnected(cls, p: int, n_classes: int) -> "ParamLayout":
        """No shared coordinates: external information cannot transfer."""
        return cls(p=p, n_classes=n_classes, shared_index=())


def build_phi_full(
    layout: ParamLayout, theta: np.ndarray, phi_free: np.ndarray
) -> np.ndarray:
    """Assemble the full external coefficient vector from theta and phi_free."""
    theta = np.asarray(theta, dtype=float)
    phi_free = np.asarray(phi_free, dtype=float)
    if theta.shape != (layout.dim,):
        raise ValidationError(
            f"theta must have length {layout.dim}, got {theta.shape}", field="theta"
        )
    n_free = layout.dim - layout.m
    if phi_free.shape != (n_free,):
        raise ValidationError(
            f"phi_free must have length {n_free}, got {phi_free.shape}",
            field="phi_free",
        )
    phi = np.zeros(layout.dim)
    if layout.m:
        phi[layout._shared0] = layout.A @ theta[layout._shared0]
    phi[layout._free0] = phi_free
    return phi


@dataclass(frozen=True)
class Constant:
    """The all-ones basis function."""


@dataclass(frozen=True)
class Coordinate:
    """The j-th Z coordinate (1-based position within z_columns)."""

    index: int


@dataclass(frozen=True)
class SplineColumn:
    """One natural-cubic-spline basis function of a Z coordinate.

    ``quantiles`` are the interior-knot quantile levels; ``column`` picks
    one of the len(quantiles) nonlinear basis functions (1-based).
    """

    index: int
    quantiles: tuple
    column: int


@dataclass(frozen=True)
class Spline:
    """Construction-time shorthand: expands to one SplineColumn per knot."""

    index: int
    quantiles: tuple = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class BasisSet:
    """An ordered set of H single-column basis functions over Z."""

    descriptors: tuple

    def __post_init__(self):
        object.__setattr__(self, "descriptors", tuple(self.descriptors))
        if not self.descriptors:
            raise ValidationError("need at least one basis function", field="descriptors")
        for d in self.descriptors:
            if isinstance(d, Constant):
                continue
            if isinstance(d, Coordinate):
                if d.index < 1:
                    raise ValidationError(
                        f"coordinate index {d.index} must be >= 1", field="descriptors"
                    )
            elif isinstance(d, SplineColumn):
                q = tuple(d.quantiles)
                if not q or any(not (0.0 < x < 1.0) for x in q):
                    raise ValidationError(
                        "spline quantiles must lie in (0,1)", field="descriptors"
                    )
                if any(b <= a for a, b in zip(q, q[1:])):
                    raise ValidationError(
                        "spline quantiles must be strictly increasing",
                        field="descriptors",
                    )
                if not (1 <= d.column <= len(q)):
                    raise ValidationError(
                        f"spline column {d.column} outside 1..{len(q)}",
                        field="descriptors",
                    )
            else:
                raise ValidationError(
                    f"unknown basis descriptor {d!r}", field="descriptors"
                )

    @property
    def size(self) -> int:
        return len(self.descriptors)

    @classmethod
    def build(cls, specs) -> "BasisSet":
        """Expand Spline shorthands into per-column descriptors."""
        out = []
        for s in specs:
            if isinstance(s, Spline):
                q = tuple(s.quantiles)
                out.extend(SplineColumn(s.index, q, c) for c in range(1, len(q) + 1))
            else:
                out.append(s)
        return cls(tuple(out))

    @classmethod
    def default(cls, z_columns) -> "BasisSet":
        """Constant plus each non-intercept Z coordinate."""
        descs = [Constant()]
        for pos, col in enumerate(z_columns, start=1):
            if col != 1:
                descs.append(Coordinate(pos))
        return cls(tuple(descs))


def _natural_spline_columns(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Nonlinear natural-cubic-spline basis on the given knots.

    With M knots t_1 < ... < t_M the natural spline space is spanned by
    {1, x, N_1..N_{M-2}} where N_j = d_j - d_{M-1} and
    d_j(x) = [(x-t_j)_+^3 - (x-t_M)_+^3] / (t_M - t_j).
    Returns the M-2 nonlinear columns; constant and linear terms are
    separate descriptors.
    """
    t = np.asarray(knots, dtype=float)
    M = t.size

    def d(j):
        num = np.clip(x - t[j], 0.0, None) ** 3 - np.clip(x - t[M - 1], 0.0, None) ** 3
        return num / (t[M - 1] - t[j])

    d_last = d(M - 2)
    return np.stack([d(j) - d_last for j in range(M - 2)], axis=1)


def eval_basis_matrix(basis: BasisSet, z: np.ndarray) -> np.ndarray:
    """Evaluate the basis on a raw n x |Z| covariate matrix."""
    z = np.asarray(z, dtype=float)
    n, nz = z.shape
    cols = []
    spline_cache = {}
    for d in basis.descriptors:
        if isinstance(d, Constant):
            cols.append(np.ones(n))
            continue
        if isinstance(d, Coordinate):
            if d.index > nz:
                raise ValidationError(
                    f"coordinate {d.index} outside the {nz} Z columns",
                    field="descriptors",
                )
            cols.append(z[:, d.index - 1].copy())
            continue
        key = (d.index, d.quantiles)
        if key not in spline_cache:
            if d.index > nz:
                raise ValidationError(
                    f"spline coordinate {d.index} outside the {nz} Z columns",
                    field="descriptors",
                )
            col = z[:, d.index - 1]
            interior = np.quantile(col, d.quantiles)
            knots = np.concatenate(([col.min()], interior, [col.max()]))
            if np.any(np.diff(knots) <= 0):
                raise ValidationError(
                    f"degenerate spline knots on Z coordinate {d.index}",
                    field="descriptors",
                )
            spline_cache[key] = _natural_spline_columns(col, knots)
        cols.append(spline_cache[key][:, d.column - 1])
    return np.stack(cols, axis=1)


def eval_basis(basis: BasisSet, dataset: PrimaryDataset) -> np.ndarray:
    """n x H matrix of basis values h_j(Z_i) over the primary sample."""
    return eval_basis_matrix(basis, dataset.z_matrix)


@dataclass(frozen=True)
class ExternalPredictionSet:
    """Row-aligned grouped external predictions at the primary Z rows.

    ``values`` is n x (L-1); row i holds the predicted probabilities of
    coarse groups 1..L-1 at Z_i (group L absorbs the remainder).
    ``variance`` optionally carries a per-entry predictor-variance
    diagnostic of the same shape; it plays no role in estimation.
    """

    values: np.ndarray
    variance: Optional[np.ndarray] = None

    def __post_init__(self):
        values = _as_readonly(self.values)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise ValidationError("values must be 2-d", field="values")
        tol = 1e-12
        if values.min() < -tol or values.max() > 1.0 + tol:
            raise ValidationError("prediction entries must lie in [0,1]", field="values")
        rows = values.sum(axis=1)
        if rows.min() < -tol or rows.max() > 1.0 + tol:
            raise ValidationError("prediction row sums must lie in [0,1]", field="values")
        if self.variance is not None:
            var = _as_readonly(self.variance)
            if var.shape != values.shape:
                raise ValidationError(
                    "variance must match values' shape", field="variance"
                )
            object.__setattr__(self, "variance", var)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def n_groups_minus_1(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FusedParams:
    """Enlarged parameter (lam, theta, phi_free) of the fused objective."""

    lam: np.ndarray
    theta: np.ndarray
    phi_free: np.ndarray

    def __post_init__(self):
        for name in ("lam", "theta", "phi_free"):
            arr = _as_readonly(getattr(self, name))
            if arr.ndim != 1:
                raise ValidationError(f"{name} must be a vector", field=name)
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite entries", field=name)
            object.__setattr__(self, name, arr)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.lam, self.theta, self.phi_free])

    @classmethod
    def unpack(cls, gamma: np.ndarray, n_lam: int, n_theta: int) -> "FusedParams":
        gamma = np.asarray(gamma, dtype=float)
        return cls(
            lam=gamma[:n_lam],
            theta=gamma[n_lam : n_lam + n_theta],
            phi_free=gamma[n_lam + n_theta :],
        )


@dataclass(frozen=True)
class EstimateReport:
    """Point estimates with SEs, CIs, and diagnostics, as emitted by fits."""

    theta_hat: np.ndarray
    phi_free_hat: np.ndarray
    lambda_hat: np.ndarray
    se: np.ndarray
    se_method: str
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    ci_level: float
    diagnostics: dict
    config_hash: str
    seed: Optional[int]

    def __post_init__(self):
        for name in ("theta_hat", "phi_free_hat", "lambda_hat", "se", "ci_lower", "ci_upper"):
            object.__setattr__(self, name, _as_readonly(getattr(self, name)))
        if self.se_method not in ("hessian", "bootstrap"):
            raise ValidationError(
                f"se_method must be hessian|bootstrap, got {self.se_method}",
                field="se_method",
            )
        est = self.theta_hat
        if self.ci_lower.shape != est.shape or self.ci_upper.shape != est.shape:
            raise ValidationError("ci arrays must match theta_hat", field="ci_lower")
        if np.any(self.ci_lower > est) or np.any(self.ci_upper < est):
            raise ValidationError(
                "ci must bracket the estimate coordinate-wise", field="ci_lower"
            )

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "phi_free_hat": self.phi_free_hat.tolist(),
            "lambda_hat": self.lambda_hat.tolist(),
            "se": self.se.tolist(),
            "se_method": self.se_method,
            "ci_lower": self.ci_lower.tolist(),
            "ci_upper": self.ci_upper.tolist(),
            "ci_level": self.ci_level,
            "diagnostics": self.diagnostics,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }
