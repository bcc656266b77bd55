import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from lithfrac import fem

DISTORTED = np.array([[0.0, 0.0], [2.0, 0.0], [2.5, 1.5], [0.0, 1.0]])
UNIT = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])

unit_coord = st.floats(-1.0, 1.0, allow_nan=False)


def bilinear_interpolant(coords, nodal):
    """Value of the element interpolant at a physical point, by Newton inversion of the map."""

    def value(x, y):
        xi = np.zeros(2)
        for _ in range(50):
            N, dN = fem.shape_eval(*xi)
            r = N @ coords - (x, y)
            J = dN @ coords
            xi -= np.linalg.solve(J.T, r)
            if np.linalg.norm(r) < 1e-15:
                break
        return fem.shape_eval(*xi)[0] @ nodal

    return value


class TestShapeFunctions:
    def test_nodal_interpolation(self):
        N, _ = fem.shape_eval(-1.0, -1.0)
        assert_allclose(N, [1, 0, 0, 0])

    def test_centroid(self):
        N, _ = fem.shape_eval(0.0, 0.0)
        assert_allclose(N, 0.25)

    @given(unit_coord, unit_coord)
    def test_partition_of_unity(self, xi, eta):
        N, dN = fem.shape_eval(xi, eta)
        assert abs(N.sum() - 1.0) <= 1e-15
        assert_allclose(dN.sum(axis=1), 0.0, atol=1e-15)


class TestGaussRule:
    def test_integrals(self):
        g = fem.gauss_rule(2)
        xi, eta, w = g.T
        assert w.sum() == pytest.approx(4.0)
        assert (w * xi**2 * eta**2).sum() == pytest.approx(4.0 / 9.0, rel=1e-14)
        assert abs((w * xi**3).sum()) < 1e-15

    @pytest.mark.parametrize("order", [1, 3, 0])
    def test_unsupported_order(self, order):
        with pytest.raises(ValueError):
            fem.gauss_rule(order)


class TestOperatorMatrices:
    def test_linear_reproduction(self):
        ops = fem.operator_matrices(fem.ElementGeometry(UNIT), 0.3, -0.2)
        u = np.zeros(8)
        u[0::2] = UNIT[:, 0]
        assert_allclose(ops.B_u @ u, [1.0, 0.0, 0.0], atol=1e-15)

    def test_constant_field_has_no_gradient(self):
        ops = fem.operator_matrices(fem.ElementGeometry(UNIT), 0.1, 0.7)
        assert_allclose(ops.B_c @ np.full(4, 3.7), 0.0, atol=1e-15)
        assert_allclose(ops.B_c.sum(axis=1), 0.0, atol=1e-15)
        assert ops.B_phi is ops.B_c

    def test_rigid_translation_gives_zero_strain(self):
        ops = fem.operator_matrices(fem.ElementGeometry(DISTORTED), 0.2, 0.4)
        u = np.tile([0.3, -1.1], 4)
        assert_allclose(ops.B_u @ u, 0.0, atol=1e-14)

    @pytest.mark.parametrize("xi,eta", [(-0.57735, -0.57735), (0.2, 0.6), (0.9, -0.3)])
    def test_second_derivatives_match_finite_differences(self, xi, eta):
        # field u_x = x*y interpolated on the distorted quad
        nodal_ux = DISTORTED[:, 0] * DISTORTED[:, 1]
        u = np.zeros(8)
        u[0::2] = nodal_ux
        ops = fem.operator_matrices(fem.ElementGeometry(DISTORTED), xi, eta)
        N, _ = fem.shape_eval(xi, eta)
        x0, y0 = N @ DISTORTED
        f = bilinear_interpolant(DISTORTED, nodal_ux)
        h = 1e-4
        fxx = (f(x0 + h, y0) - 2 * f(x0, y0) + f(x0 - h, y0)) / h**2
        fyy = (f(x0, y0 + h) - 2 * f(x0, y0) + f(x0, y0 - h)) / h**2
        fxy = (f(x0 + h, y0 + h) - f(x0 + h, y0 - h) - f(x0 - h, y0 + h) + f(x0 - h, y0 - h)) / (4 * h * h)
        got = ops.B_u_star @ u
        # rows: ux,xx  uy,yx  ux,xy  uy,yy
        assert_allclose(got[0], fxx, rtol=1e-6, atol=1e-6 * abs(fxy))
        assert_allclose(got[2], fxy, rtol=1e-6)
        assert got[1] == 0.0 and got[3] == 0.0
        # the same interpolant carried by u_y fills the other two rows
        v = np.zeros(8)
        v[1::2] = nodal_ux
        got = ops.B_u_star @ v
        assert_allclose(got[1], fxy, rtol=1e-6)
        assert_allclose(got[3], fyy, rtol=1e-6, atol=1e-6 * abs(fxy))

    def test_parallelogram_second_derivatives(self):
        # constant Jacobian (rows d/dxi): H_x = J^-1 H_xi J^-T exactly
        coords = np.array([[0.0, 0.0], [2.0, 0.3], [2.7, 1.5], [0.7, 1.2]])
        for xi, eta, _ in fem.gauss_rule():
            _, dNdx, d2N, _ = fem.batch_geometry(coords[None], xi, eta)
            _, dN = fem.shape_eval(xi, eta)
            J = dN @ coords
            inv = np.linalg.inv(J)
            n_xieta = 0.25 * np.array([1.0, -1.0, 1.0, -1.0])
            ref = np.zeros((4, 2, 2))
            ref[:, 0, 1] = ref[:, 1, 0] = n_xieta
            H = np.einsum("ia,nab,jb->nij", inv, ref, inv)
            expected = np.stack([H[:, 0, 0], H[:, 0, 1], H[:, 1, 1]])
            assert_allclose(d2N[0], expected, rtol=1e-13, atol=1e-13)

    def test_degenerate_element_is_rejected(self):
        inverted = UNIT[::-1].copy()
        with pytest.raises(fem.ElementQualityError):
            fem.operator_matrices(inverted, -0.5, -0.5, element=7)
        with pytest.raises(fem.ElementQualityError) as err:
            fem.build_quadrature(np.stack([UNIT, inverted]))
        assert err.value.element == 1


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.floats(-0.2, 0.2), min_size=8, max_size=8),
    st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6),
)
def test_patch_constant_strain(jitter, coeffs):
    coords = UNIT * 2.0 + np.reshape(jitter, (4, 2))
    a0, ax, ay, b0, bx, by = coeffs
    u = np.zeros(8)
    u[0::2] = a0 + ax * coords[:, 0] + ay * coords[:, 1]
    u[1::2] = b0 + bx * coords[:, 0] + by * coords[:, 1]
    quad = fem.build_quadrature(coords[None])
    eps = np.einsum("gij,j->gi", fem.strain_matrix(quad.dNdx[0]), u)
    scale = max(abs(ax), abs(by), abs(ay + bx), 1e-3)
    assert_allclose(eps, np.tile([ax, by, ay + bx], (4, 1)), atol=1e-12 * scale)
