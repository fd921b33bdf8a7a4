import math

import numpy as np
import pytest
from scipy import stats

from ipsb.errors import OutOfWindow, WindowTooShort
from ipsb.splines import build_basis, diff_penalty, eval_trend


def deboor_basis(x, knots, degree):
    """Independent Cox-de Boor recursion, one basis value at a time."""

    def B(i, k):
        if k == 0:
            # closed right edge on the last interval
            if knots[i] <= x < knots[i + 1]:
                return 1.0
            if x == knots[-1] and knots[i] < knots[i + 1] == knots[-1]:
                return 1.0
            return 0.0
        left = 0.0
        if knots[i + k] != knots[i]:
            left = (x - knots[i]) / (knots[i + k] - knots[i]) * B(i, k - 1)
        right = 0.0
        if knots[i + k + 1] != knots[i + 1]:
            right = ((knots[i + k + 1] - x) / (knots[i + k + 1] - knots[i + 1])
                     * B(i + 1, k - 1))
        return left + right

    n = len(knots) - degree - 1
    return np.array([B(i, degree) for i in range(n)])


class TestBasisConstruction:
    def test_count_for_paper_window(self):
        basis = build_basis(2000, 2021)
        assert basis.n_coef == 24
        # independent count: intervals + degree
        assert basis.n_coef == (2021 - 2000) + 3
        # and the de Boor oracle agrees on the number of functions
        assert len(deboor_basis(2010.0, basis.knots, 3)) == 24

    def test_rows_match_de_boor_recursion(self):
        basis = build_basis(2000, 2006)
        for t in (2000.0, 2001.5, 2003.25, 2005.9, 2006.0):
            expected = deboor_basis(t, basis.knots, 3)
            np.testing.assert_allclose(basis.basis_row(t), expected, atol=1e-12)

    def test_partition_of_unity_on_grid(self):
        basis = build_basis(2000, 2021)
        np.testing.assert_allclose(basis.B.sum(axis=1), 1.0, atol=1e-12)

    def test_partition_of_unity_off_grid(self):
        basis = build_basis(2000, 2010)
        ts = np.linspace(2000, 2010, 101)
        sums = [basis.basis_row(t).sum() for t in ts]
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_local_support(self):
        basis = build_basis(2000, 2021)
        for h in range(basis.n_coef):
            left = basis.knots[h]
            for t in basis.grid:
                if t < left or t > left + 4.0:
                    assert basis.basis_row(float(t))[h] == 0.0

    def test_window_too_short(self):
        with pytest.raises(WindowTooShort):
            build_basis(2000, 2002)

    def test_out_of_window(self):
        basis = build_basis(2000, 2010)
        with pytest.raises(OutOfWindow):
            basis.basis_row(1999.9)
        with pytest.raises(OutOfWindow):
            eval_trend(basis, np.zeros(basis.n_coef - 1), 2010.1)


class TestConstraint:
    def test_zero_coefficients_zero_trend(self):
        basis = build_basis(2000, 2010)
        for t in (2000.0, 2004.5, 2010.0):
            assert eval_trend(basis, np.zeros(basis.n_coef - 1), t) == 0.0

    def test_sum_to_zero_exact(self):
        basis = build_basis(2000, 2021)
        rng = np.random.default_rng(0)
        for _ in range(20):
            u = rng.normal(size=basis.n_coef - 1)
            assert abs(basis.constrained(u).sum()) < 1e-10

    def test_null_space_shape_and_rank(self):
        basis = build_basis(2000, 2021)
        assert basis.Z.shape == (24, 23)
        assert np.linalg.matrix_rank(basis.Z) == 23
        np.testing.assert_allclose(basis.Z.sum(axis=0), 0.0, atol=1e-12)

    def test_differences_reproduced(self):
        basis = build_basis(2000, 2010)
        rng = np.random.default_rng(1)
        alpha = basis.constrained(rng.normal(size=basis.n_coef - 1))
        np.testing.assert_allclose(basis.D @ alpha, np.diff(alpha), atol=1e-14)

    def test_trend_matches_dense_oracle(self):
        basis = build_basis(2000, 2021)
        rng = np.random.default_rng(2)
        u = rng.normal(size=basis.n_coef - 1)
        t = 2010.0
        oracle = deboor_basis(t, basis.knots, 3) @ (basis.Z @ u)
        assert eval_trend(basis, u, t) == pytest.approx(oracle, abs=1e-12)

    def test_linearity(self):
        basis = build_basis(2000, 2010)
        rng = np.random.default_rng(3)
        u1 = rng.normal(size=basis.n_coef - 1)
        u2 = rng.normal(size=basis.n_coef - 1)
        for t in (2000.0, 2003.3, 2008.75):
            combined = eval_trend(basis, 2.5 * u1 - 0.75 * u2, t)
            parts = 2.5 * eval_trend(basis, u1, t) - 0.75 * eval_trend(basis, u2, t)
            assert combined == pytest.approx(parts, abs=1e-12)


class TestDiffPenalty:
    def test_zero_differences(self):
        basis = build_basis(2000, 2010)
        k = basis.n_coef - 1
        expected = k * stats.norm(0, 0.5).logpdf(0.0)
        assert diff_penalty(basis, np.zeros(k), 0.5) == pytest.approx(expected)

    def test_doubling_sigma_costs_log2_per_term(self):
        basis = build_basis(2000, 2010)
        k = basis.n_coef - 1
        at_1 = diff_penalty(basis, np.zeros(k), 1.0)
        at_2 = diff_penalty(basis, np.zeros(k), 2.0)
        assert at_1 - at_2 == pytest.approx(k * math.log(2.0))

    def test_matches_term_by_term_oracle(self):
        basis = build_basis(2000, 2010)
        rng = np.random.default_rng(4)
        u = rng.normal(size=basis.n_coef - 1)
        alpha = basis.constrained(u)
        oracle = sum(stats.norm(0, 0.5).logpdf(alpha[h] - alpha[h - 1])
                     for h in range(1, basis.n_coef))
        assert diff_penalty(basis, u, 0.5) == pytest.approx(oracle, abs=1e-10)

    def test_rejects_nonpositive_sigma(self):
        basis = build_basis(2000, 2010)
        with pytest.raises(ValueError):
            diff_penalty(basis, np.zeros(basis.n_coef - 1), 0.0)
