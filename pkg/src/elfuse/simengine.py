"""Monte Carlo study engine: scenario generation under covariate shift,
label coarsening, a built-in k-NN external predictor, replication running
with bootstrap-based intervals, and the moment-validity diagnostic.

Everything is reproducible: replicate r of a scenario draws all its
randomness from SeedSequence((seed, r)), and aggregation runs in replicate
order, so results are bit-identical at any parallelism level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._parallel import parallel_map
from .elfusion import fit_fmle
from .errors import ConvergenceError, FusionError, ValidationError
from .inference import bootstrap_se, wald_ci
from .mnlogit import fit_mle, probs_matrix
from .types import (
    BasisSet,
    CoarseningMap,
    ExternalPredictionSet,
    ParamLayout,
    PrimaryDataset,
    build_phi_full,
    eval_basis_matrix,
)

__all__ = [
    "ScenarioConfig",
    "ReplicationTable",
    "KnnPredictor",
    "OraclePredictor",
    "gen_covariates",
    "gen_labels",
    "train_knn_predictor",
    "run_replications",
    "class_prob_mse",
    "mar_moment_check",
    "MarCheckResult",
]

# Stream tag for the scenario-level evaluation grid; replicate indices are
# always < 2**32 so this cannot collide with a replicate stream.
_EVAL_STREAM = 2**33 + 17

DEFAULT_MEAN_SHIFT = (0.06, -0.04, 0.08, 0.0)
GH_NODES = 40


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario: sizes, truth, shift regime, predictor, seeds."""

    n: int
    N: int
    p: int
    n_classes: int
    theta_true: tuple
    phi_free_true: tuple
    groups: tuple
    shared: object = "slopes"  # "all" | "slopes" | "none" | explicit index tuple
    shift: str = "none"  # none | mean | variance | mean_and_variance
    shift_mean: Optional[tuple] = None
    shift_variance: float = 2.0
    drop_column: Optional[int] = None  # None keeps Z = X; j drops design column j
    correlation: float = 0.8
    predictor: str = "knn"  # knn | oracle | file
    knn_k: Optional[int] = None  # default ceil(sqrt(N))
    knn_method: str = "frequency"  # frequency | local_linear | local_quadratic
    predictor_path: Optional[str] = None
    basis: object = "default"  # "default" or a tuple of descriptor dicts
    tau: float = 0.1
    B: int = 200
    reps: int = 1
    seed: int = 0
    level: float = 0.95
    eval_grid_size: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "theta_true", tuple(float(x) for x in self.theta_true))
        object.__setattr__(
            self, "phi_free_true", tuple(float(x) for x in self.phi_free_true)
        )
        object.__setattr__(
            self, "groups", tuple(tuple(int(y) for y in g) for g in self.groups)
        )
        if isinstance(self.shared, (list, tuple)):
            object.__setattr__(self, "shared", tuple(int(i) for i in self.shared))
        if self.shift_mean is not None:
            object.__setattr__(
                self, "shift_mean", tuple(float(x) for x in self.shift_mean)
            )
        if self.n < 1 or self.N < 1:
            raise ValidationError("sample sizes must be positive", field="n")
        if self.p < 2 or self.n_classes < 2:
            raise ValidationError("need p >= 2 and K >= 2", field="p")
        d = self.p - 1
        lo = -1.0 / (d - 1) if d > 1 else -1.0
        if not (lo < self.correlation < 1.0):
            raise ValidationError(
                f"correlation must lie in ({lo:.4f}, 1) for p={self.p}",
                field="correlation",
            )
        if self.reps < 1:
            raise ValidationError("reps must be >= 1", field="reps")
        if self.shift not in ("none", "mean", "variance", "mean_and_variance"):
            raise ValidationError(f"unknown shift {self.shift!r}", field="shift")
        if self.shift in ("mean", "mean_and_variance"):
            mu = self.shift_mean if self.shift_mean is not None else (
                DEFAULT_MEAN_SHIFT if d == len(DEFAULT_MEAN_SHIFT) else None
            )
            if mu is None or len(mu) != d:
                raise ValidationError(
                    f"mean shift needs a length-{d} vector", field="shift_mean"
                )
            object.__setattr__(self, "shift_mean", tuple(mu))
        if self.shift_variance <= 0:
            raise ValidationError("shift_variance must be positive", field="shift_variance")
        if self.drop_column is not None and not (2 <= self.drop_column <= self.p):
            raise ValidationError(
                f"drop_column must be a non-intercept column in 2..{self.p}",
                field="drop_column",
            )
        if self.predictor not in ("knn", "oracle", "file"):
            raise ValidationError(f"unknown predictor {self.predictor!r}", field="predictor")
        if self.predictor == "file" and not self.predictor_path:
            raise ValidationError("file predictor needs predictor_path", field="predictor_path")
        if self.knn_k is not None and self.knn_k < 1:
            raise ValidationError("knn_k must be >= 1", field="knn_k")
        if self.knn_method not in ("frequency", "local_linear", "local_quadratic"):
            raise ValidationError(
                f"unknown knn method {self.knn_method!r}", field="knn_method"
            )
        if self.basis not in (None, "default"):
            object.__setattr__(
                self, "basis", tuple(dict(d) for d in self.basis)
            )
            self.basis_set  # fail fast on malformed descriptors
        if not (0.0 < self.level < 1.0):
            raise ValidationError("level must lie in (0,1)", field="level")
        if len(self.theta_true) != self.p * (self.n_classes - 1):
            raise ValidationError(
                f"theta_true must have length {self.p * (self.n_classes - 1)}",
                field="theta_true",
            )
        layout = self.layout
        if len(self.phi_free_true) != layout.dim - layout.m:
            raise ValidationError(
                f"phi_free_true must have length {layout.dim - layout.m}",
                field="phi_free_true",
            )
        CoarseningMap(groups=self.groups, n_classes=self.n_classes)

    @property
    def layout(self) -> ParamLayout:
        if self.shared == "all":
            return ParamLayout.full_transportability(self.p, self.n_classes)
        if self.shared == "slopes":
            return ParamLayout.shared_slopes(self.p, self.n_classes)
        if self.shared == "none":
            return ParamLayout.disconnected(self.p, self.n_classes)
        return ParamLayout(p=self.p, n_classes=self.n_classes, shared_index=self.shared)

    @property
    def cmap(self) -> CoarseningMap:
        return CoarseningMap(groups=self.groups, n_classes=self.n_classes)

    @property
    def z_columns(self) -> tuple:
        cols = range(1, self.p + 1)
        if self.drop_column is None:
            return tuple(cols)
        return tuple(c for c in cols if c != self.drop_column)

    @property
    def basis_set(self) -> BasisSet:
        if self.basis in (None, "default"):
            return BasisSet.default(self.z_columns)
        from .types import Constant, Coordinate, Spline

        items = []
        for d in self.basis:
            if d["type"] == "constant":
                items.append(Constant())
            elif d["type"] == "coordinate":
                items.append(Coordinate(int(d["index"])))
            elif d["type"] == "spline":
                items.append(Spline(
                    int(d["index"]),
                    tuple(d.get("quantiles", (0.25, 0.5, 0.75))),
                ))
            else:
                raise ValidationError(
                    f"unknown basis descriptor type {d.get('type')!r}", field="basis"
                )
        return BasisSet.build(items)

    @property
    def knn_neighbors(self) -> int:
        return self.knn_k if self.knn_k is not None else math.ceil(math.sqrt(self.N))

    @property
    def phi_full(self) -> np.ndarray:
        return build_phi_full(
            self.layout, np.asarray(self.theta_true), np.asarray(self.phi_free_true)
        )


def _equicorrelation(d: int, rho: float) -> np.ndarray:
    return (1.0 - rho) * np.eye(d) + rho * np.ones((d, d))


def _feature_moments(config: ScenarioConfig, source: str):
    """Mean vector and covariance of the non-intercept features per source."""
    d = config.p - 1
    mean = np.zeros(d)
    var = 1.0
    if source == "external":
        if config.shift in ("mean", "mean_and_variance"):
            mean = np.asarray(config.shift_mean, dtype=float)
        if config.shift in ("variance", "mean_and_variance"):
            var = config.shift_variance
    elif source != "primary":
        raise ValidationError(f"unknown source {source!r}", field="source")
    cov = var * _equicorrelation(d, config.correlation)
    return mean, cov


def _gen_features(config: ScenarioConfig, source: str, size: int, rng) -> np.ndarray:
    mean, cov = _feature_moments(config, source)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValidationError("feature covariance is not positive definite") from exc
    feats = rng.standard_normal((size, mean.size)) @ L.T + mean
    return np.concatenate([np.ones((size, 1)), feats], axis=1)


def gen_covariates(config: ScenarioConfig, source: str, rng) -> np.ndarray:
    """Design matrix (intercept first) for the primary or external source."""
    size = config.n if source == "primary" else config.N
    return _gen_features(config, source, size, rng)


def gen_labels(X: np.ndarray, theta: np.ndarray, rng) -> np.ndarray:
    """Categorical labels via inverse CDF from one uniform per row."""
    P = probs_matrix(np.asarray(X, float), np.asarray(theta, float))
    cum = np.cumsum(P, axis=1)
    u = rng.random(X.shape[0])
    return 1 + (u[:, None] > cum[:, :-1]).sum(axis=1)


@dataclass
class KnnPredictor:
    """k-nearest-neighbour coarse-class prediction on standardized features.

    Ties at the k-th distance are broken by training index order. Three
    prediction rules are available: plain neighbourhood class frequencies,
    and local-linear or local-quadratic regression of the class indicators
    on the centred neighbour coordinates (the intercept of the local fit).
    The local polynomial fits remove the design-density smoothing bias,
    which dominates under strongly correlated covariates; the quadratic
    variant also removes the curvature bias and needs a larger k. The
    optional variance diagnostic is the binomial proxy q(1-q)/k.
    """

    features: np.ndarray  # standardized training features
    groups: np.ndarray  # coarse labels 1..L
    k: int
    n_groups: int
    mean: np.ndarray
    sd: np.ndarray
    used_cols: np.ndarray
    method: str = "frequency"  # frequency | local_linear | local_quadratic

    def __post_init__(self):
        self._sq = (self.features * self.features).sum(axis=1)
        self._onehot = np.stack(
            [(self.groups == l).astype(float) for l in range(1, self.n_groups)],
            axis=1,
        )

    def _neighbors(self, row, k):
        if k >= row.size:
            return np.arange(row.size)
        kth = np.partition(row, k - 1)[k - 1]
        less = np.flatnonzero(row < kth)
        return np.concatenate([less, np.flatnonzero(row == kth)[: k - less.size]])

    def _local_fit(self, nb, q_i, degree):
        d = self.features.shape[1]
        centred = self.features[nb] - q_i
        cols = [np.ones((nb.size, 1)), centred]
        if degree == 2:
            iu = np.triu_indices(d)
            cols.append((centred[:, :, None] * centred[:, None, :])[:, iu[0], iu[1]])
        design = np.concatenate(cols, axis=1)
        if nb.size <= design.shape[1]:
            return self._onehot[nb].mean(axis=0)
        coef, *_ = np.linalg.lstsq(design, self._onehot[nb], rcond=None)
        return coef[0]

    def predict(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        q = (z[:, self.used_cols] - self.mean) / self.sd
        d2 = (q * q).sum(axis=1)[:, None] + self._sq[None, :] - 2.0 * (q @ self.features.T)
        out = np.empty((z.shape[0], self.n_groups - 1))
        for i in range(z.shape[0]):
            nb = self._neighbors(d2[i], self.k)
            if self.method == "frequency":
                out[i] = self._onehot[nb].mean(axis=0)
            elif self.method == "local_linear":
                out[i] = self._local_fit(nb, q[i], degree=1)
            else:
                out[i] = self._local_fit(nb, q[i], degree=2)
        np.clip(out, 0.0, 1.0, out=out)
        rows = out.sum(axis=1)
        over = rows > 1.0
        if np.any(over):
            out[over] /= rows[over, None]
        return out

    __call__ = predict

    def variance_diagnostic(self, q: np.ndarray) -> np.ndarray:
        return q * (1.0 - q) / self.k


def train_knn_predictor(
    coarse_labels: np.ndarray,
    z: np.ndarray,
    k: int,
    n_groups: int,
    exclude_cols=(0,),
    method: str = "frequency",
) -> KnnPredictor:
    """Fit the built-in nonparametric predictor on external (U, Z) data.

    Distances are Euclidean on training-standardized coordinates with the
    intercept column excluded.
    """
    z = np.asarray(z, dtype=float)
    labels = np.asarray(coarse_labels, dtype=np.int64)
    N = z.shape[0]
    if k < 1:
        raise ValidationError("k must be >= 1", field="k")
    if k > N:
        raise ValidationError(f"k={k} exceeds the training size {N}", field="k")
    if method not in ("frequency", "local_linear", "local_quadratic"):
        raise ValidationError(f"unknown knn method {method!r}", field="method")
    used = np.array([j for j in range(z.shape[1]) if j not in set(exclude_cols)])
    mean = z[:, used].mean(axis=0)
    sd = z[:, used].std(axis=0)
    if np.any(sd == 0.0):
        bad = used[np.flatnonzero(sd == 0.0)]
        raise ValidationError(
            f"degenerate training feature column(s) {bad.tolist()}", field="z"
        )
    feats = (z[:, used] - mean) / sd
    return KnnPredictor(
        features=feats, groups=labels, k=k, n_groups=n_groups,
        mean=mean, sd=sd, used_cols=used, method=method,
    )


class OraclePredictor:
    """Exact grouped external probabilities under the scenario's truth.

    With full covariates the grouped model probabilities are returned
    directly; with a dropped column the omitted coordinate is integrated
    out against its conditional normal law under the external feature
    distribution (Gauss-Hermite quadrature).
    """

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.phi = config.phi_full
        self.ind = config.cmap.indicator
        self.z_columns = config.z_columns
        if config.drop_column is not None:
            mean, cov = _feature_moments(config, "external")
            jf = config.drop_column - 2  # feature index of the dropped column
            rest = [i for i in range(config.p - 1) if i != jf]
            Srr = cov[np.ix_(rest, rest)]
            Sjr = cov[jf, rest]
            self._coef = np.linalg.solve(Srr, Sjr)
            self._cond_sd = math.sqrt(cov[jf, jf] - Sjr @ self._coef)
            self._mean_rest = mean[rest]
            self._mean_j = mean[jf]

    def predict(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        cfg = self.config
        if cfg.drop_column is None:
            P = probs_matrix(z, self.phi)
            return P @ self.ind.T
        cond_mean = self._mean_j + (z[:, 1:] - self._mean_rest) @ self._coef
        return _gh_grouped_probs(
            z, self.z_columns, cfg.drop_column, cond_mean, self._cond_sd,
            self.phi, self.ind, cfg.p,
        )

    __call__ = predict


def _gh_grouped_probs(z, z_columns, drop_column, cond_mean, cond_sd, phi, ind, p):
    """Integrate grouped model probabilities over the omitted coordinate."""
    nodes, weights = np.polynomial.hermite.hermgauss(GH_NODES)
    n = z.shape[0]
    X = np.empty((n, p))
    X[:, [c - 1 for c in z_columns]] = z
    acc = np.zeros((n, ind.shape[0]))
    for t, w in zip(nodes, weights):
        X[:, drop_column - 1] = cond_mean + math.sqrt(2.0) * cond_sd * t
        acc += w * (probs_matrix(X, phi) @ ind.T)
    return acc / math.sqrt(math.pi)


class FilePredictor:
    """Row-aligned predictions loaded from a CSV file (header q1..q{L-1})."""

    def __init__(self, path: str, n_groups: int):
        from .cli import read_predictions_csv

        self.values = read_predictions_csv(path, n_groups - 1)

    def predict(self, z: np.ndarray) -> np.ndarray:
        if z.shape[0] != self.values.shape[0]:
            raise ValidationError(
                f"prediction file has {self.values.shape[0]} rows, need {z.shape[0]}",
                field="predictor_path",
            )
        return self.values

    __call__ = predict


def _make_predictor(config: ScenarioConfig, rng_ext):
    """Generate external data as needed and return the prediction rule."""
    if config.predictor == "oracle":
        return OraclePredictor(config)
    if config.predictor == "file":
        return FilePredictor(config.predictor_path, config.cmap.n_groups)
    Xe = _gen_features(config, "external", config.N, rng_ext)
    ye = gen_labels(Xe, config.phi_full, rng_ext)
    ind_full = config.cmap.full_indicator  # (L, K)
    group_of = np.zeros(config.n_classes, dtype=np.int64)
    for l in range(ind_full.shape[0]):
        group_of[ind_full[l] > 0] = l + 1
    Ue = group_of[ye - 1]
    observed = Ue > 0
    zcols = [c - 1 for c in config.z_columns]
    return train_knn_predictor(
        Ue[observed], Xe[np.ix_(np.flatnonzero(observed), zcols)],
        config.knn_neighbors, config.cmap.n_groups,
        method=config.knn_method,
    )


def class_prob_mse(fit_theta, truth_theta, eval_X) -> np.ndarray:
    """Per-class mean squared error of fitted class probabilities."""
    P_hat = probs_matrix(np.asarray(eval_X, float), np.asarray(fit_theta, float))
    P_true = probs_matrix(np.asarray(eval_X, float), np.asarray(truth_theta, float))
    return ((P_hat - P_true) ** 2).mean(axis=0)


def _coordinate_labels(p: int, n_classes: int) -> tuple:
    return tuple(
        f"theta_{k}_{j}" for k in range(1, n_classes) for j in range(1, p + 1)
    )


@dataclass(frozen=True)
class ReplicationTable:
    """Aggregated bias/SD/SE/CP per coordinate plus class-probability MSE."""

    coordinates: tuple
    truth: np.ndarray
    bias_mle: np.ndarray
    sd_mle: np.ndarray
    se_mle: np.ndarray
    cp_mle: np.ndarray
    bias_fmle: np.ndarray
    sd_fmle: np.ndarray
    se_fmle: np.ndarray
    cp_fmle: np.ndarray
    mse_mle: np.ndarray
    mse_fmle: np.ndarray
    reps: int
    n_failed: int

    def __post_init__(self):
        for name in ("cp_mle", "cp_fmle"):
            arr = np.asarray(getattr(self, name), float)
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValidationError("coverage must lie in [0,1]", field=name)
        for name in ("sd_mle", "sd_fmle", "mse_mle", "mse_fmle"):
            arr = np.asarray(getattr(self, name), float)
            if arr.size and arr.min() < 0.0:
                raise ValidationError(f"{name} must be nonnegative", field=name)

    def to_rows(self):
        """Flat records for CSV serialization: coefficients then MSE rows."""
        rows = []
        for i, name in enumerate(self.coordinates):
            for method, bias, sd, se, cp in (
                ("MLE", self.bias_mle, self.sd_mle, self.se_mle, self.cp_mle),
                ("FMLE", self.bias_fmle, self.sd_fmle, self.se_fmle, self.cp_fmle),
            ):
                rows.append({
                    "record": "coef",
                    "coordinate": name,
                    "truth": float(self.truth[i]),
                    "method": method,
                    "bias": float(bias[i]),
                    "sd": float(sd[i]),
                    "se": float(se[i]),
                    "cp": float(cp[i]),
                    "mse": "",
                })
        for k in range(self.mse_mle.size):
            for method, mse in (("MLE", self.mse_mle), ("FMLE", self.mse_fmle)):
                rows.append({
                    "record": "mse",
                    "coordinate": f"class_{k + 1}",
                    "truth": "",
                    "method": method,
                    "bias": "",
                    "sd": "",
                    "se": "",
                    "cp": "",
                    "mse": float(mse[k]),
                })
        return rows


def _run_replicate(args):
    config, rep = args
    ss = np.random.SeedSequence((config.seed, rep))
    rng_primary, rng_labels, rng_external = [
        np.random.default_rng(s) for s in ss.spawn(3)
    ]
    theta_true = np.asarray(config.theta_true)
    Xp = _gen_features(config, "primary", config.n, rng_primary)
    yp = gen_labels(Xp, theta_true, rng_labels)
    dataset = PrimaryDataset(
        labels=yp, design=Xp, z_columns=config.z_columns, n_classes=config.n_classes
    )
    predictor = _make_predictor(config, rng_external)
    qhat = np.clip(predictor.predict(dataset.z_matrix), 0.0, 1.0)
    variance = (
        predictor.variance_diagnostic(qhat)
        if isinstance(predictor, KnnPredictor)
        else None
    )
    predictions = ExternalPredictionSet(values=qhat, variance=variance)
    cmap, basis, layout = config.cmap, config.basis_set, config.layout

    mle = fit_mle(dataset)
    fmle = fit_fmle(dataset, predictions, cmap, basis, layout, tau=config.tau)
    se_mle = np.sqrt(np.diag(np.linalg.inv(mle.info)) / config.n)
    boot = bootstrap_se(
        dataset, predictions, cmap, basis, layout,
        B=config.B, seed=(config.seed, rep), tau=config.tau,
        start=fmle.params, workers=1,
    )
    nl = (cmap.n_groups - 1) * basis.size
    se_fmle = boot.se[nl : nl + layout.dim]
    ci_mle = wald_ci(mle.theta_hat, se_mle, config.level)
    ci_fmle = wald_ci(fmle.params.theta, se_fmle, config.level)
    return {
        "theta_mle": mle.theta_hat,
        "theta_fmle": fmle.params.theta,
        "se_mle": se_mle,
        "se_fmle": se_fmle,
        "cover_mle": (ci_mle.lower <= theta_true) & (theta_true <= ci_mle.upper),
        "cover_fmle": (ci_fmle.lower <= theta_true) & (theta_true <= ci_fmle.upper),
    }


def _safe_replicate(args):
    try:
        return _run_replicate(args)
    except FusionError:
        return None


def run_replications(config: ScenarioConfig, workers: Optional[int] = None) -> ReplicationTable:
    """Run the full scenario and aggregate the per-coordinate metrics.

    Per replicate: generate both sources, coarsen external labels, train
    the predictor, score the primary rows, fit the primary-only and fused
    estimators, and form Wald intervals (information SEs for the former,
    bootstrap SEs for the latter). Class-probability errors are evaluated
    on a fixed 2000-row grid drawn once per scenario.
    """
    theta_true = np.asarray(config.theta_true)
    rng_eval = np.random.default_rng(np.random.SeedSequence((config.seed, _EVAL_STREAM)))
    eval_X = _gen_features(config, "primary", config.eval_grid_size, rng_eval)

    results = parallel_map(
        _safe_replicate, [(config, r) for r in range(config.reps)], workers=workers
    )
    kept = [r for r in results if r is not None]
    n_failed = config.reps - len(kept)
    if n_failed > 0.1 * config.reps:
        raise ConvergenceError(
            f"{n_failed}/{config.reps} replicates failed", residual=n_failed / config.reps
        )
    theta_mle = np.array([r["theta_mle"] for r in kept])
    theta_fmle = np.array([r["theta_fmle"] for r in kept])
    ddof = 1 if len(kept) > 1 else 0
    mse_mle = np.mean([class_prob_mse(t, theta_true, eval_X) for t in theta_mle], axis=0)
    mse_fmle = np.mean([class_prob_mse(t, theta_true, eval_X) for t in theta_fmle], axis=0)
    return ReplicationTable(
        coordinates=_coordinate_labels(config.p, config.n_classes),
        truth=theta_true,
        bias_mle=theta_mle.mean(axis=0) - theta_true,
        sd_mle=theta_mle.std(axis=0, ddof=ddof),
        se_mle=np.mean([r["se_mle"] for r in kept], axis=0),
        cp_mle=np.mean([r["cover_mle"] for r in kept], axis=0),
        bias_fmle=theta_fmle.mean(axis=0) - theta_true,
        sd_fmle=theta_fmle.std(axis=0, ddof=ddof),
        se_fmle=np.mean([r["se_fmle"] for r in kept], axis=0),
        cp_fmle=np.mean([r["cover_fmle"] for r in kept], axis=0),
        mse_mle=mse_mle,
        mse_fmle=mse_fmle,
        reps=config.reps,
        n_failed=n_failed,
    )


@dataclass(frozen=True)
class MarCheckResult:
    """Monte Carlo means and standard errors of every moment function."""

    column_labels: tuple  # ((group l, basis h), ...)
    means: np.ndarray
    ses: np.ndarray
    draws: int
    violated: bool

    def max_abs_t(self) -> float:
        return float(np.max(np.abs(self.means) / self.ses))


def mar_moment_check(
    config: ScenarioConfig,
    violate: bool = False,
    draws: int = 10**5,
    seed: Optional[int] = None,
    shift: float = 1.0,
    basis_matrix=None,
) -> MarCheckResult:
    """Monte Carlo check that every moment has mean zero under the primary law.

    The omitted coordinate's conditional law is shared across sources
    (the missing-at-random construction); the oracle grouped prediction
    integrates the external model over that conditional via quadrature.
    With ``violate`` the external conditional mean is shifted by ``shift``,
    so at least one moment acquires a detectable nonzero mean.
    ``basis_matrix`` optionally overrides the basis evaluation (a callable
    of the Z matrix), e.g. to inject degenerate basis functions in tests.
    """
    if draws < 10**4:
        raise ValidationError("need at least 1e4 draws", field="draws")
    if config.drop_column is None:
        raise ValidationError(
            "the moment-validity check needs a dropped column", field="drop_column"
        )
    rng = np.random.default_rng(
        np.random.SeedSequence((config.seed if seed is None else seed, 0xA7))
    )
    X = _gen_features(config, "primary", draws, rng)
    zcols = [c - 1 for c in config.z_columns]
    Z = X[:, zcols]

    # conditional law of the omitted coordinate given the observed features,
    # identical across sources unless violated
    mean, cov = _feature_moments(config, "primary")
    jf = config.drop_column - 2
    rest = [i for i in range(config.p - 1) if i != jf]
    Srr = cov[np.ix_(rest, rest)]
    Sjr = cov[jf, rest]
    coef = np.linalg.solve(Srr, Sjr)
    cond_sd = math.sqrt(cov[jf, jf] - Sjr @ coef)
    cond_mean = mean[jf] + (Z[:, 1:] - mean[rest]) @ coef
    if violate:
        cond_mean = cond_mean + shift

    phi = config.phi_full
    ind = config.cmap.indicator
    q = _gh_grouped_probs(
        Z, config.z_columns, config.drop_column, cond_mean, cond_sd, phi, ind, config.p
    )
    P = probs_matrix(X, phi) @ ind.T
    H = basis_matrix(Z) if basis_matrix is not None else eval_basis_matrix(config.basis_set, Z)
    m = ((P - q)[:, :, None] * H[:, None, :]).reshape(draws, -1)
    labels = tuple(
        (l, h)
        for l in range(1, config.cmap.n_groups)
        for h in range(1, H.shape[1] + 1)
    )
    return MarCheckResult(
        column_labels=labels,
        means=m.mean(axis=0),
        ses=m.std(axis=0, ddof=1) / math.sqrt(draws),
        draws=draws,
        violated=violate,
    )
