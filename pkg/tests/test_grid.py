import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from backstep_no.errors import GridMismatchError
from backstep_no.grid import (
    GridFunction1D,
    TriangularGridFunction,
    convolution_matrix,
    convolve,
    cumulative_trapezoid_rows,
    diagonal_lines,
    from_diagonal_lines,
    l2_norm,
    n_triangle_points,
    sup_norm,
    trapezoid_integrate,
    triangle_points,
)


def gf(fn, n):
    return GridFunction1D.from_callable(fn, n)


class TestGridFunction1D:
    def test_rejects_wrong_length(self):
        with pytest.raises(ValueError):
            GridFunction1D(4, np.zeros(4))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            GridFunction1D(2, [0.0, np.nan, 1.0])

    def test_rejects_zero_cells(self):
        with pytest.raises(ValueError):
            GridFunction1D(0, [1.0])

    def test_values_are_read_only_copies(self):
        src = np.arange(3.0)
        f = GridFunction1D(2, src)
        src[0] = 99
        assert f.values[0] == 0
        with pytest.raises(ValueError):
            f.values[0] = 1

    def test_arithmetic_checks_grids(self):
        with pytest.raises(GridMismatchError):
            GridFunction1D.constant(1, 4) + GridFunction1D.constant(1, 5)

    def test_restrict(self):
        f = gf(lambda x: x, 4)
        np.testing.assert_array_equal(f.restrict(2).values, [0, 0.5, 1])
        with pytest.raises(GridMismatchError):
            f.restrict(3)


class TestTriangularGridFunction:
    def test_layout_and_accessor(self):
        n = 3
        t = TriangularGridFunction.from_callable(lambda x, y: 10 * x + y, n)
        assert t.values.size == n_triangle_points(n) == 10
        assert t[2, 1] == pytest.approx(10 * 2 / 3 + 1 / 3)
        assert t[3, 0] == pytest.approx(10.0)

    def test_upper_access_is_an_error(self):
        t = TriangularGridFunction.constant(1.0, 3)
        with pytest.raises(IndexError):
            t[1, 2]

    def test_wrong_count_rejected(self):
        with pytest.raises(ValueError):
            TriangularGridFunction(2, np.zeros(5))

    def test_dense_round_trip(self):
        rng = np.random.default_rng(0)
        t = TriangularGridFunction(5, rng.normal(size=21))
        back = TriangularGridFunction.from_dense(t.to_dense())
        np.testing.assert_array_equal(back.values, t.values)

    def test_row_is_top_edge(self):
        t = TriangularGridFunction.from_callable(lambda x, y: y, 4)
        np.testing.assert_allclose(t.row(4), np.linspace(0, 1, 5))

    def test_triangle_points_match_packing(self):
        pts = triangle_points(2)
        np.testing.assert_allclose(pts, [[0, 0], [0.5, 0], [0.5, 0.5], [1, 0], [1, 0.5], [1, 1]])


class TestTrapezoid:
    def test_constant(self):
        assert trapezoid_integrate(GridFunction1D.constant(1.0, 10), 10) == pytest.approx(1.0)

    def test_affine_exact(self):
        assert trapezoid_integrate(gf(lambda x: x, 7), 7) == pytest.approx(0.5, abs=1e-15)

    def test_square(self):
        assert trapezoid_integrate(gf(lambda x: x ** 2, 100), 100) == pytest.approx(1 / 3, abs=1e-4)

    def test_partial_upper_limit(self):
        # int_0^{1/2} x dx
        assert trapezoid_integrate(gf(lambda x: x, 8), 4) == pytest.approx(0.125, abs=1e-15)

    @pytest.mark.parametrize("bad", [-1, 11])
    def test_out_of_range(self, bad):
        with pytest.raises(IndexError):
            trapezoid_integrate(GridFunction1D.constant(1.0, 10), bad)

    def test_second_order(self):
        errs = [abs(trapezoid_integrate(gf(lambda x: x ** 2, n), n) - 1 / 3) for n in (20, 40, 80)]
        for a, b in zip(errs, errs[1:]):
            assert 3.5 <= a / b <= 4.5


class TestConvolve:
    def test_ones(self):
        c = convolve(GridFunction1D.constant(1, 16), GridFunction1D.constant(1, 16))
        np.testing.assert_allclose(c.values, np.linspace(0, 1, 17), atol=1e-15)

    def test_zero(self):
        b = gf(np.sin, 8)
        assert sup_norm(convolve(GridFunction1D.constant(0, 8), b)) == 0

    def test_x_times_x(self):
        a = gf(lambda x: x, 100)
        assert convolve(a, a).values[-1] == pytest.approx(1 / 6, abs=1e-4)

    def test_value_at_zero(self):
        a = gf(np.cos, 10)
        assert convolve(a, a).values[0] == 0

    def test_mismatch(self):
        with pytest.raises(GridMismatchError):
            convolve(GridFunction1D.constant(1, 4), GridFunction1D.constant(1, 8))

    def test_matrix_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=6), rng.normal(size=6)
        h = 0.2
        m = convolution_matrix(a, h)
        for i in range(6):
            terms = np.array([a[i - j] * b[j] for j in range(i + 1)])
            direct = h * (terms.sum() - 0.5 * (terms[0] + terms[-1])) if i else 0.0
            assert (m @ b)[i] == pytest.approx(direct, abs=1e-14)


values = arrays(np.float64, 21, elements=st.floats(-5, 5))


@settings(max_examples=50, deadline=None)
@given(values, values)
def test_convolution_commutes(a, b):
    fa, fb = GridFunction1D(20, a), GridFunction1D(20, b)
    assert sup_norm(convolve(fa, fb) - convolve(fb, fa)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(values, values, values, st.floats(-3, 3))
def test_convolution_bilinear(a, b, c, s):
    fa, fb, fc = (GridFunction1D(20, v) for v in (a, b, c))
    lhs = convolve(fa * s + fb, fc)
    rhs = convolve(fa, fc) * s + convolve(fb, fc)
    assert sup_norm(lhs - rhs) <= 1e-12 * (1 + sup_norm(lhs))


@settings(max_examples=50, deadline=None)
@given(values, values)
def test_convolution_sup_bound(a, b):
    # the trapezoid sum over an interval of length <= 1 never exceeds the product of sups
    fa, fb = GridFunction1D(20, a), GridFunction1D(20, b)
    assert sup_norm(convolve(fa, fb)) <= sup_norm(fa) * sup_norm(fb) + 1e-12


class TestNorms:
    def test_sup(self):
        assert sup_norm(GridFunction1D.constant(-3, 5)) == 3
        assert sup_norm(GridFunction1D.constant(0, 5)) == 0

    def test_sup_chebyshev(self):
        f = gf(lambda x: 6 * np.cos(3 * np.arccos(x)), 200)
        assert sup_norm(f) == pytest.approx(6, abs=1e-12)

    def test_l2(self):
        assert l2_norm(GridFunction1D.constant(1, 9)) == pytest.approx(1)
        assert l2_norm(GridFunction1D.constant(0, 9)) == 0
        assert l2_norm(gf(lambda x: np.sin(np.pi * x), 200)) == pytest.approx(np.sqrt(0.5), abs=1e-4)

    def test_sup_of_triangle(self):
        assert sup_norm(TriangularGridFunction.constant(-2.5, 3)) == 2.5


def test_diagonal_lines_round_trip():
    rng = np.random.default_rng(2)
    dense = np.tril(rng.normal(size=(5, 5)))
    lines = diagonal_lines(dense)
    assert lines[1, 2] == dense[3, 2]
    np.testing.assert_array_equal(from_diagonal_lines(lines), dense)


def test_cumulative_trapezoid_rows_linear():
    h = 0.25
    a = np.array([[0, 1, 2, 3, 4.0]]) * h  # f(s) = s
    np.testing.assert_allclose(cumulative_trapezoid_rows(a, h)[0], (np.arange(5) * h) ** 2 / 2)
