import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elfuse import (
    BasisSet,
    CoarseningMap,
    Constant,
    Coordinate,
    ExternalPredictionSet,
    ParamLayout,
    PrimaryDataset,
    Spline,
    ValidationError,
    build_phi_full,
    coarsen_label,
    eval_basis,
)


def make_dataset(n=10, p=3, K=3, seed=0, z_columns=None):
    rng = np.random.default_rng(seed)
    design = np.concatenate([np.ones((n, 1)), rng.standard_normal((n, p - 1))], axis=1)
    labels = rng.integers(1, K + 1, size=n)
    return PrimaryDataset(
        labels=labels, design=design,
        z_columns=z_columns or tuple(range(1, p + 1)), n_classes=K,
    )


class TestPrimaryDataset:
    def test_valid_construction(self):
        ds = make_dataset()
        assert ds.n == 10 and ds.p == 3
        assert ds.z_matrix.shape == (10, 3)

    def test_rejects_missing_intercept(self):
        rng = np.random.default_rng(0)
        design = rng.standard_normal((5, 3))
        with pytest.raises(ValidationError):
            PrimaryDataset(labels=[1] * 5, design=design, z_columns=(1,), n_classes=2)

    def test_rejects_bad_labels(self):
        ds = make_dataset(K=3)
        with pytest.raises(ValidationError):
            PrimaryDataset(labels=[0] + [1] * 9, design=ds.design,
                           z_columns=ds.z_columns, n_classes=3)
        with pytest.raises(ValidationError):
            PrimaryDataset(labels=[4] + [1] * 9, design=ds.design,
                           z_columns=ds.z_columns, n_classes=3)

    def test_z_columns_must_contain_intercept(self):
        ds = make_dataset()
        with pytest.raises(ValidationError):
            PrimaryDataset(labels=ds.labels, design=ds.design,
                           z_columns=(2, 3), n_classes=3)


class TestCoarsening:
    def test_examples(self):
        cmap = CoarseningMap(groups=((1, 2), (3,)), n_classes=3)
        assert coarsen_label(cmap, 2) == 1
        assert coarsen_label(cmap, 3) == 2

    def test_absent_label(self):
        cmap = CoarseningMap(groups=((1,), (2,)), n_classes=3)
        assert coarsen_label(cmap, 3) is None

    def test_out_of_range(self):
        cmap = CoarseningMap(groups=((1,), (2,)), n_classes=3)
        with pytest.raises(ValidationError):
            coarsen_label(cmap, 4)
        with pytest.raises(ValidationError):
            coarsen_label(cmap, 0)

    def test_disjointness_enforced(self):
        with pytest.raises(ValidationError):
            CoarseningMap(groups=((1, 2), (2, 3)), n_classes=3)
        with pytest.raises(ValidationError):
            CoarseningMap(groups=((1,), ()), n_classes=3)


class TestParamLayout:
    def test_full_transportability_is_identity(self):
        layout = ParamLayout.full_transportability(p=3, n_classes=3)
        theta = np.arange(1.0, 7.0)
        phi = build_phi_full(layout, theta, np.zeros(0))
        np.testing.assert_array_equal(phi, theta)

    def test_shared_slopes_example(self):
        # five covariates, three classes, free intercepts per source
        layout = ParamLayout.shared_slopes(p=5, n_classes=3)
        theta = np.array([0.2, 1, -1, 1, -1, -0.1, -1, 1, 1, 1])
        phi = build_phi_full(layout, theta, np.array([0.35, -0.25]))
        np.testing.assert_allclose(phi[:5], [0.35, 1, -1, 1, -1])
        np.testing.assert_allclose(phi[5:], [-0.25, -1, 1, 1, 1])

    def test_disconnected_passthrough(self):
        layout = ParamLayout.disconnected(p=2, n_classes=3)
        phi_free = np.array([1.0, 2.0, 3.0, 4.0])
        phi = build_phi_full(layout, np.zeros(4), phi_free)
        np.testing.assert_array_equal(phi, phi_free)

    def test_dimension_errors_name_field(self):
        layout = ParamLayout.shared_slopes(p=3, n_classes=3)
        with pytest.raises(ValidationError) as err:
            build_phi_full(layout, np.zeros(5), np.zeros(2))
        assert err.value.field == "theta"
        with pytest.raises(ValidationError) as err:
            build_phi_full(layout, np.zeros(6), np.zeros(3))
        assert err.value.field == "phi_free"

    def test_singular_A_rejected(self):
        with pytest.raises(ValidationError):
            ParamLayout(p=2, n_classes=2, shared_index=(1, 2), A=np.zeros((2, 2)))

    def test_roundtrip_shared_free_split(self):
        layout = ParamLayout.shared_slopes(p=4, n_classes=3)
        rng = np.random.default_rng(1)
        theta = rng.standard_normal(layout.dim)
        rebuilt = np.zeros(layout.dim)
        rebuilt[layout._shared0] = theta[layout._shared0]
        rebuilt[layout._free0] = theta[layout._free0]
        np.testing.assert_array_equal(rebuilt, theta)

    @given(
        a=st.floats(-3, 3), b=st.floats(-3, 3),
        seed=st.integers(0, 10**6),
    )
    @settings(max_examples=60, deadline=None)
    def test_linearity(self, a, b, seed):
        layout = ParamLayout.shared_slopes(p=3, n_classes=3)
        rng = np.random.default_rng(seed)
        t1, t2 = rng.standard_normal((2, layout.dim))
        f1, f2 = rng.standard_normal((2, layout.dim - layout.m))
        left = build_phi_full(layout, a * t1 + b * t2, a * f1 + b * f2)
        right = a * build_phi_full(layout, t1, f1) + b * build_phi_full(layout, t2, f2)
        np.testing.assert_allclose(left, right, atol=1e-12)


def _natural_spline_oracle(x, knots):
    """Independent natural-cubic-spline evaluation: truncated-power basis
    written out term by term."""
    M = len(knots)
    tM, tM1 = knots[-1], knots[-2]

    def cube_plus(v):
        return np.where(v > 0, v**3, 0.0)

    cols = []
    for j in range(M - 2):
        dj = (cube_plus(x - knots[j]) - cube_plus(x - tM)) / (tM - knots[j])
        dlast = (cube_plus(x - tM1) - cube_plus(x - tM)) / (tM - tM1)
        cols.append(dj - dlast)
    return np.stack(cols, axis=1)


class TestBasis:
    def test_constant_column(self):
        ds = make_dataset()
        basis = BasisSet((Constant(),))
        np.testing.assert_array_equal(eval_basis(basis, ds), np.ones((10, 1)))

    def test_coordinate_column_copies_design(self):
        ds = make_dataset()
        basis = BasisSet((Coordinate(2),))
        np.testing.assert_array_equal(eval_basis(basis, ds)[:, 0], ds.design[:, 1])

    def test_spline_matches_oracle(self):
        ds = make_dataset(n=10, seed=4)
        quantiles = (0.25, 0.5, 0.75)
        basis = BasisSet.build([Spline(2, quantiles)])
        got = eval_basis(basis, ds)
        col = ds.design[:, 1]
        knots = np.concatenate([[col.min()], np.quantile(col, quantiles), [col.max()]])
        expected = _natural_spline_oracle(col, knots)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_spline_linear_beyond_boundaries(self):
        # second differences vanish outside the boundary knots
        ds = make_dataset(n=40, seed=5)
        basis = BasisSet.build([Spline(2, (0.5,))])
        col = ds.design[:, 1]
        knots = np.concatenate([[col.min()], np.quantile(col, [0.5]), [col.max()]])
        grid = np.linspace(col.max() + 0.5, col.max() + 2.5, 9)
        vals = _natural_spline_oracle(grid, knots)[:, 0]
        second = np.diff(vals, 2)
        np.testing.assert_allclose(second, 0.0, atol=1e-9)

    def test_degenerate_knots_error_names_coordinate(self):
        design = np.ones((8, 2))
        ds = PrimaryDataset(labels=[1] * 8, design=design, z_columns=(1, 2), n_classes=2)
        basis = BasisSet.build([Spline(2, (0.25, 0.75))])
        with pytest.raises(ValidationError, match="coordinate 2"):
            eval_basis(basis, ds)

    def test_identical_rows_identical_basis(self):
        design = np.array([[1.0, 2.0, 3.0]] * 4 + [[1.0, 0.0, 1.0]] * 4)
        ds = PrimaryDataset(labels=[1] * 8, design=design, z_columns=(1, 2, 3), n_classes=2)
        out = eval_basis(BasisSet.default(ds.z_columns), ds)
        assert np.all(out[0] == out[3]) and np.all(out[4] == out[7])

    def test_spline_expansion_count(self):
        basis = BasisSet.build([Constant(), Spline(2, (0.2, 0.5, 0.8))])
        assert basis.size == 4


class TestExternalPredictionSet:
    def test_valid(self):
        eps = ExternalPredictionSet(values=np.array([[0.2, 0.3], [0.0, 1.0]]))
        assert eps.n == 2 and eps.n_groups_minus_1 == 2

    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            ExternalPredictionSet(values=np.array([[1.2]]))
        with pytest.raises(ValidationError):
            ExternalPredictionSet(values=np.array([[-0.1]]))

    def test_rejects_row_sum_above_one(self):
        with pytest.raises(ValidationError):
            ExternalPredictionSet(values=np.array([[0.7, 0.7]]))

    def test_variance_shape_checked(self):
        with pytest.raises(ValidationError):
            ExternalPredictionSet(values=np.array([[0.5]]), variance=np.zeros((2, 1)))
