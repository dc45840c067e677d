import numpy as np
import pytest
from scipy.spatial.distance import cdist

from epimob.basis import (
    BasisBlock,
    BasisError,
    SmoothSpec,
    absorb_sum_to_zero,
    pspline_block,
    ridge_block,
    thinplate_block,
)


def deboor(t, j, d, x):
    # independent Cox-de Boor recursion
    if d == 0:
        return 1.0 if t[j] <= x < t[j + 1] else 0.0
    left = right = 0.0
    if t[j + d] > t[j]:
        left = (x - t[j]) / (t[j + d] - t[j]) * deboor(t, j, d - 1, x)
    if t[j + d + 1] > t[j + 1]:
        right = (t[j + d + 1] - x) / (t[j + d + 1] - t[j + 1]) * deboor(t, j + 1, d - 1, x)
    return left + right


def penalized_fitted(block, lam, y):
    X, S = block.design, block.penalty
    return X @ np.linalg.solve(X.T @ X + lam * S, X.T @ y)


class TestPsplineBlock:
    def test_partition_of_unity_including_endpoints(self):
        rng = np.random.default_rng(1)
        x = np.concatenate([[0.0, 10.0], rng.uniform(0, 10, 200)])
        block = pspline_block(x, SmoothSpec("pspline", k=12))
        assert block.design.sum(axis=1) == pytest.approx(np.ones(len(x)), abs=1e-12)
        assert block.ncol == 12

    def test_matches_deboor_recursion(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 7, 120)
        k, degree = 9, 3
        block = pspline_block(x, SmoothSpec("pspline", k=k))
        xmin, xmax = x.min(), x.max()
        h = (xmax - xmin) / (k - degree)
        knots = xmin + h * np.arange(-degree, k + 1)
        pts = rng.uniform(xmin + 1e-6, xmax - 1e-6, 50)
        rows = block.rows(pts)
        expected = np.array([[deboor(knots, j, degree, xv) for j in range(k)]
                             for xv in pts])
        assert rows == pytest.approx(expected, abs=1e-12)

    def test_linear_coefficients_unpenalized(self):
        x = np.linspace(0, 1, 60)
        block = pspline_block(x, SmoothSpec("pspline", k=10))
        theta = 2.0 + 3.0 * np.arange(10)
        assert theta @ block.penalty @ theta == pytest.approx(0.0, abs=1e-10)
        assert block.nullspace_dim == 2

    def test_too_many_basis_functions_rejected(self):
        x = np.array([0.0, 1.0, 2.0, 3.0, 0.0, 1.0])
        with pytest.raises(BasisError, match="distinct"):
            pspline_block(x, SmoothSpec("pspline", k=5))

    def test_prediction_clamps_to_range(self):
        x = np.linspace(0, 1, 30)
        block = pspline_block(x, SmoothSpec("pspline", k=6))
        assert block.rows([-5.0]) == pytest.approx(block.rows([0.0]))
        assert block.rows([9.0]) == pytest.approx(block.rows([1.0]))

    def test_deterministic(self):
        x = np.linspace(0, 4, 50) ** 1.3
        a = pspline_block(x, SmoothSpec("pspline", k=8))
        b = pspline_block(x, SmoothSpec("pspline", k=8))
        assert np.array_equal(a.design, b.design)
        assert np.array_equal(a.penalty, b.penalty)


def tps_eta(r):
    with np.errstate(divide="ignore", invalid="ignore"):
        v = r * r * np.log(r)
    return np.where(r > 0, v, 0.0) / (8 * np.pi)


def tps_bending_energy_quadrature(sites, delta):
    """Numerical integral of f_xx^2 + 2 f_xy^2 + f_yy^2 for the radial part."""
    sites = np.asarray(sites, float)
    c = np.asarray(delta, float) / (8 * np.pi)

    def chunk(pts):
        dx = pts[:, 0, None] - sites[None, :, 0]
        dy = pts[:, 1, None] - sites[None, :, 1]
        r2 = dx * dx + dy * dy
        with np.errstate(divide="ignore", invalid="ignore"):
            logr = 0.5 * np.log(r2)
            fxx = 2 * logr + 1 + 2 * dx * dx / r2
            fxy = 2 * dx * dy / r2
            fyy = 2 * logr + 1 + 2 * dy * dy / r2
        for A in (fxx, fxy, fyy):
            A[r2 == 0] = 0.0
        a, b, d = fxx @ c, fxy @ c, fyy @ c
        return np.sum(a * a + 2 * b * b + d * d)

    def integrate(lo, hi, h, exclude=None):
        total = 0.0
        for xv in np.arange(lo, hi, h) + h / 2:
            ys = np.arange(lo, hi, h) + h / 2
            pts = np.column_stack([np.full_like(ys, xv), ys])
            if exclude is not None:
                inner = ((pts[:, 0] > exclude[0]) & (pts[:, 0] < exclude[1])
                         & (pts[:, 1] > exclude[0]) & (pts[:, 1] < exclude[1]))
                pts = pts[~inner]
                if not len(pts):
                    continue
            total += chunk(pts) * h * h
        return total

    near = integrate(-2.5, 3.5, 0.01)
    far = integrate(-29.5, 30.5, 0.25, exclude=(-2.5, 3.5))
    return near + far


class TestThinplateBlock:
    def test_affine_functions_unpenalized(self):
        rng = np.random.default_rng(4)
        coords = rng.random((20, 2))
        block = thinplate_block(coords, SmoothSpec("thinplate", k=10))
        theta = np.zeros(block.ncol)
        theta[-3:] = [1.5, -2.0, 0.7]  # a + b1 x1 + b2 x2
        assert theta @ block.penalty @ theta == pytest.approx(0.0, abs=1e-12)
        assert block.nullspace_dim == 3

    def test_design_last_columns_are_polynomial(self):
        rng = np.random.default_rng(5)
        coords = rng.random((15, 2))
        block = thinplate_block(coords, SmoothSpec("thinplate", k=8))
        assert block.design[:, -3] == pytest.approx(np.ones(15))
        assert block.design[:, -2] == pytest.approx(coords[:, 0])
        assert block.design[:, -1] == pytest.approx(coords[:, 1])

    def test_penalty_matches_quadrature_oracle(self):
        # full rank (k = n): the quadratic form must equal the roughness
        # integral of the represented surface to 1% relative error
        rng = np.random.default_rng(5)
        n = 6
        coords = rng.random((n, 2))
        block = thinplate_block(coords, SmoothSpec("thinplate", k=n))
        E = tps_eta(cdist(coords, coords))
        lam, U = np.linalg.eigh(E)
        order = np.argsort(-np.abs(lam))
        lam, U = lam[order], U[:, order]
        T = np.column_stack([np.ones(n), coords])
        Q, _ = np.linalg.qr(U.T @ T, mode="complete")
        Z = Q[:, 3:]
        theta_spline = rng.normal(size=n - 3)
        delta = U @ Z @ theta_spline
        theta = np.concatenate([theta_spline, [0.3, -1.0, 2.0]])
        form = theta @ block.penalty @ theta
        integral = tps_bending_energy_quadrature(coords, delta)
        assert form == pytest.approx(integral, rel=0.01)

    def test_fit_invariant_under_rotation(self):
        rng = np.random.default_rng(6)
        coords = rng.random((25, 2)) * 3
        y = rng.normal(size=25)
        spec = SmoothSpec("thinplate", k=12)
        fitted = penalized_fitted(thinplate_block(coords, spec), 0.7, y)
        ang = 0.83
        R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        fitted_rot = penalized_fitted(thinplate_block(coords @ R.T, spec), 0.7, y)
        assert fitted_rot == pytest.approx(fitted, abs=1e-8)

    def test_fit_invariant_under_translation(self):
        rng = np.random.default_rng(7)
        coords = rng.random((20, 2))
        y = rng.normal(size=20)
        spec = SmoothSpec("thinplate", k=10)
        fitted = penalized_fitted(thinplate_block(coords, spec), 1.3, y)
        fitted_shift = penalized_fitted(
            thinplate_block(coords + np.array([5.0, -2.0]), spec), 1.3, y)
        assert fitted_shift == pytest.approx(fitted, abs=1e-8)

    def test_prediction_rows_reproduce_training_design(self):
        rng = np.random.default_rng(8)
        coords = rng.random((12, 2))
        block = thinplate_block(coords, SmoothSpec("thinplate", k=9))
        assert block.rows(coords) == pytest.approx(block.design, abs=1e-10)

    def test_coincident_sites_rejected(self):
        coords = np.ones((10, 2)) * 0.5
        coords[:3] = [[0, 0], [1, 0], [0, 1]]
        with pytest.raises(BasisError, match="distinct"):
            thinplate_block(coords, SmoothSpec("thinplate", k=8))


class TestRidgeBlock:
    def test_indicator_coding(self):
        block = ridge_block(["A", "B", "A"])
        assert np.array_equal(block.design, [[1, 0], [0, 1], [1, 0]])
        assert block.levels == ["A", "B"]
        assert block.nullspace_dim == 0

    def test_quadratic_form_is_sum_of_squares(self):
        rng = np.random.default_rng(9)
        labels = list(rng.integers(0, 6, 40))
        block = ridge_block(labels)
        a = rng.normal(size=block.ncol)
        assert a @ block.penalty @ a == pytest.approx(np.sum(a ** 2), rel=1e-14)

    def test_column_sums_are_level_frequencies(self):
        labels = ["x", "y", "x", "z", "x", "y"]
        block = ridge_block(labels)
        assert block.design.sum(axis=0) == pytest.approx([3, 2, 1])

    def test_single_level_rejected(self):
        with pytest.raises(BasisError, match="2 levels"):
            ridge_block(["A", "A", "A"])

    def test_unseen_level_in_prediction_rejected(self):
        block = ridge_block(["A", "B"])
        with pytest.raises(BasisError, match="unseen"):
            block.rows(["C"])


class TestSumToZeroAbsorption:
    def test_column_count_drops_by_one(self):
        x = np.linspace(0, 1, 40)
        block = pspline_block(x, SmoothSpec("pspline", k=8))
        absorbed = absorb_sum_to_zero(block)
        assert absorbed.ncol == block.ncol - 1

    def test_every_representable_term_sums_to_zero(self):
        rng = np.random.default_rng(10)
        block = thinplate_block(rng.random((18, 2)), SmoothSpec("thinplate", k=8))
        absorbed = absorb_sum_to_zero(block)
        for _ in range(5):
            theta = rng.normal(size=absorbed.ncol)
            assert abs((absorbed.design @ theta).sum()) < 1e-10

    def test_matches_lagrange_constrained_fit(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(0, 5, 45)
        y = np.sin(x) + rng.normal(0, 0.2, 45)
        block = pspline_block(x, SmoothSpec("pspline", k=9))
        lam = 2.5
        absorbed = absorb_sum_to_zero(block)
        fitted_absorbed = penalized_fitted(absorbed, lam, y)
        X, S, c = block.design, block.penalty, block.design.sum(axis=0)
        q = X.shape[1]
        kkt = np.zeros((q + 1, q + 1))
        kkt[:q, :q] = X.T @ X + lam * S
        kkt[:q, q] = c
        kkt[q, :q] = c
        rhs = np.concatenate([X.T @ y, [0.0]])
        theta = np.linalg.solve(kkt, rhs)[:q]
        assert fitted_absorbed == pytest.approx(X @ theta, abs=1e-8)

    def test_nullspace_shrinks_with_constraint(self):
        x = np.linspace(0, 2, 30)
        block = pspline_block(x, SmoothSpec("pspline", k=7))
        assert absorb_sum_to_zero(block).nullspace_dim == 1
        rng = np.random.default_rng(12)
        tp = thinplate_block(rng.random((16, 2)), SmoothSpec("thinplate", k=7))
        assert absorb_sum_to_zero(tp).nullspace_dim == 2

    def test_prediction_rule_composed(self):
        x = np.linspace(0, 1, 25)
        block = absorb_sum_to_zero(pspline_block(x, SmoothSpec("pspline", k=6)))
        assert block.rows(x) == pytest.approx(block.design, abs=1e-12)


class TestBlockValidation:
    def test_asymmetric_penalty_rejected(self):
        S = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(BasisError, match="symmetric"):
            BasisBlock(np.ones((3, 2)), S, nullspace_dim=0, label="bad")

    def test_indefinite_penalty_rejected(self):
        S = np.diag([1.0, -1.0])
        with pytest.raises(BasisError, match="semidefinite"):
            BasisBlock(np.ones((3, 2)), S, nullspace_dim=0, label="bad")

    def test_wrong_nullspace_declaration_rejected(self):
        with pytest.raises(BasisError, match="null space"):
            BasisBlock(np.ones((3, 2)), np.eye(2), nullspace_dim=1, label="bad")

    def test_spec_validation(self):
        with pytest.raises(BasisError):
            SmoothSpec("pspline", k=2)
        with pytest.raises(BasisError):
            SmoothSpec("pspline", k=5, diff_order=5)
        with pytest.raises(BasisError):
            SmoothSpec("wavelet")
