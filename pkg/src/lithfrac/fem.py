"""Isoparametric 4-node quadrilateral: shape functions, operator matrices
and Gauss quadrature.

Node ordering follows the reference square counter-clockwise starting at
(-1, -1). All routines work on a single element or, through the ``batch_*``
variants, on a stack of elements at once (the solver path).
"""

from dataclasses import dataclass

import numpy as np

# reference coordinates of the four nodes
_XI_NODES = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA_NODES = np.array([-1.0, -1.0, 1.0, 1.0])


class ElementQualityError(ValueError):
    """Raised when an element has a non-positive Jacobian determinant."""

    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


def gauss_rule(order=2):
    """Tensor-product Gauss-Legendre rule on [-1, 1]^2.

    Returns an (n, 3) array of (xi, eta, weight) rows. Only the 2x2 rule
    is supported.
    """
    if order != 2:
        raise ValueError(f"unsupported quadrature order {order!r}; only 2 is available")
    g = 1.0 / np.sqrt(3.0)
    pts = [(-g, -g), (g, -g), (g, g), (-g, g)]
    return np.array([(xi, eta, 1.0) for xi, eta in pts])


def shape_eval(xi, eta):
    """Bilinear shape functions and their reference gradients.

    Returns
    -------
    N : (4,) array
    dN : (2, 4) array
        Row 0 holds dN/dxi, row 1 dN/deta.
    """
    N = 0.25 * (1.0 + _XI_NODES * xi) * (1.0 + _ETA_NODES * eta)
    dN = np.empty((2, 4))
    dN[0] = 0.25 * _XI_NODES * (1.0 + _ETA_NODES * eta)
    dN[1] = 0.25 * _ETA_NODES * (1.0 + _XI_NODES * xi)
    return N, dN


def _ref_second_derivatives():
    # d2N/dxi2 = d2N/deta2 = 0 for bilinear functions; only the cross term survives
    return 0.25 * _XI_NODES * _ETA_NODES


@dataclass(frozen=True)
class ElementGeometry:
    coords: np.ndarray
    gauss: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=float).reshape(4, 2))
        if self.gauss is None:
            object.__setattr__(self, "gauss", gauss_rule(2))


@dataclass(frozen=True)
class OperatorMatrices:
    """Operator matrices of one element at one quadrature point.

    ``B_u`` maps the 8 nodal displacements (ux0, uy0, ux1, ...) to the
    engineering strain (exx, eyy, 2exy); ``B_c`` maps nodal scalars to the
    physical gradient; ``B_u_star`` maps nodal displacements to
    (ux,xx, uy,yx, ux,xy, uy,yy).
    """

    N: np.ndarray
    B_u: np.ndarray
    B_c: np.ndarray
    B_u_star: np.ndarray
    detJ_w: float

    @property
    def B_phi(self):
        return self.B_c


def batch_geometry(coords, xi, eta):
    """Physical first and second derivatives of N for many elements.

    Parameters
    ----------
    coords : (E, 4, 2) array
    xi, eta : float
        Reference point shared by all elements.

    Returns
    -------
    N : (4,)
    dNdx : (E, 2, 4)
        Physical gradients, rows (d/dx, d/dy).
    d2N : (E, 3, 4)
        Physical second derivatives, rows (xx, xy, yy).
    detJ : (E,)
    """
    coords = np.asarray(coords, dtype=float)
    N, dN = shape_eval(xi, eta)
    # J[e, a, i] = dx_a / dxi_i
    J = np.einsum("eIa,iI->eai", coords, dN)
    detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    inv = np.empty_like(J)
    inv[:, 0, 0] = J[:, 1, 1]
    inv[:, 1, 1] = J[:, 0, 0]
    inv[:, 0, 1] = -J[:, 0, 1]
    inv[:, 1, 0] = -J[:, 1, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv /= detJ[:, None, None]
    # grad_xi N = J^T grad_x N  ->  grad_x N = J^{-T} grad_xi N
    dNdx = np.einsum("eia,iI->eaI", inv, dN)

    # Hessian chain rule:
    # H_xi(N) = J^T H_x(N) J + sum_a (dN/dx_a) H_xi(x_a)
    # only the xi-eta entry of the reference Hessians is nonzero
    n_xieta = _ref_second_derivatives()
    x_xieta = np.einsum("eIa,I->ea", coords, n_xieta)
    # corrected reference cross derivative for each node
    corr = n_xieta[None, :] - np.einsum("ea,eaI->eI", x_xieta, dNdx)
    # H_x = J^{-T} [[0, corr], [corr, 0]] J^{-1}
    # entry (a, b) = corr * (inv[0, a] inv[1, b] + inv[1, a] inv[0, b])
    def entry(a, b):
        return corr * (inv[:, 0, a] * inv[:, 1, b] + inv[:, 1, a] * inv[:, 0, b])[:, None]

    d2N = np.stack([entry(0, 0), entry(0, 1), entry(1, 1)], axis=1)
    return N, dNdx, d2N, detJ


def strain_matrix(dNdx):
    """Assemble B_u (..., 3, 8) from physical gradients (..., 2, 4)."""
    shape = dNdx.shape[:-2]
    B = np.zeros(shape + (3, 8))
    B[..., 0, 0::2] = dNdx[..., 0, :]
    B[..., 1, 1::2] = dNdx[..., 1, :]
    B[..., 2, 0::2] = dNdx[..., 1, :]
    B[..., 2, 1::2] = dNdx[..., 0, :]
    return B


def second_derivative_matrix(d2N):
    """Assemble B_u_star (..., 4, 8) from second derivatives (..., 3, 4).

    Rows are (ux,xx, uy,yx, ux,xy, uy,yy).
    """
    shape = d2N.shape[:-2]
    B = np.zeros(shape + (4, 8))
    B[..., 0, 0::2] = d2N[..., 0, :]
    B[..., 1, 1::2] = d2N[..., 1, :]
    B[..., 2, 0::2] = d2N[..., 1, :]
    B[..., 3, 1::2] = d2N[..., 2, :]
    return B


def operator_matrices(geom, xi, eta, element=None):
    """Operator matrices of a single element at (xi, eta)."""
    coords = geom.coords if isinstance(geom, ElementGeometry) else np.asarray(geom, dtype=float)
    N, dNdx, d2N, detJ = batch_geometry(coords[None], xi, eta)
    if not detJ[0] > 0.0:
        raise ElementQualityError(
            f"element {element if element is not None else '?'}: det J = {detJ[0]:.3e} at ({xi}, {eta})",
            element=element,
        )
    weight = 1.0
    if isinstance(geom, ElementGeometry):
        for gx, ge, gw in geom.gauss:
            if gx == xi and ge == eta:
                weight = gw
                break
    return OperatorMatrices(
        N=N,
        B_u=strain_matrix(dNdx[0]),
        B_c=dNdx[0],
        B_u_star=second_derivative_matrix(d2N[0]),
        detJ_w=float(detJ[0] * weight),
    )


@dataclass(frozen=True)
class QuadratureCache:
    """Mesh-constant operator data at every element quadrature point.

    Arrays are indexed (element, gauss point, ...).
    """

    N: np.ndarray  # (G, 4)
    dNdx: np.ndarray  # (E, G, 2, 4)
    d2N: np.ndarray  # (E, G, 3, 4)
    dV: np.ndarray  # (E, G)

    @property
    def n_elements(self):
        return self.dV.shape[0]


def build_quadrature(coords, order=2):
    """Evaluate operator data for a stack of elements ``coords`` (E, 4, 2)."""
    coords = np.asarray(coords, dtype=float)
    rule = gauss_rule(order)
    Ns, dNs, d2Ns, dVs = [], [], [], []
    for xi, eta, w in rule:
        N, dNdx, d2N, detJ = batch_geometry(coords, xi, eta)
        bad = np.flatnonzero(~(detJ > 0.0))
        if bad.size:
            e = int(bad[0])
            raise ElementQualityError(f"element {e}: det J = {detJ[e]:.3e} at ({xi:.3f}, {eta:.3f})", element=e)
        Ns.append(N)
        dNs.append(dNdx)
        d2Ns.append(d2N)
        dVs.append(detJ * w)
    return QuadratureCache(
        N=np.array(Ns),
        dNdx=np.stack(dNs, axis=1),
        d2N=np.stack(d2Ns, axis=1),
        dV=np.stack(dVs, axis=1),
    )
