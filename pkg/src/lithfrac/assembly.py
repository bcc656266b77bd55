"""Element residuals, tangents and damping matrices, and global assembly.

Element dof order is (ux, uy) for the four nodes, then the four nodal
concentrations, then the four nodal phase-field values. Global dofs are
blocked by field: all displacements (2 per node, interleaved), then all
concentrations, then all phase-field values.

The kernels are vectorised over elements and quadrature points; the
single-element functions are thin wrappers used mainly by the tests.
"""

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .material import coupling_derivatives, coupling_matrices, d3_star, degradation, moduli_of_concentration, tensile_energy

U = slice(0, 8)
C = slice(8, 12)
P = slice(12, 16)


class Formulation(enum.Enum):
    ISOTROPIC = "isotropic"
    HYBRID = "hybrid"


class PoisonedStateError(FloatingPointError):
    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class AssemblyError(RuntimeError):
    pass


@dataclass
class ElementSystem:
    R: np.ndarray
    K: np.ndarray = None
    D: np.ndarray = None


def _point_values(quad, u_e, c_e, phi_e):
    N = quad.N
    B = fem.strain_matrix(quad.dNdx)
    Bs = fem.second_derivative_matrix(quad.d2N)
    return dict(
        B=B,
        Bs=Bs,
        eps=np.einsum("egij,ej->egi", B, u_e),
        deps=np.einsum("egij,ej->egi", Bs, u_e),
        c=c_e @ N.T,
        gc=np.einsum("egai,ei->ega", quad.dNdx, c_e),
        phi=phi_e @ N.T,
        gphi=np.einsum("egai,ei->ega", quad.dNdx, phi_e),
    )


def _check_finite(name, arr):
    bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    if bad.any():
        e = int(np.flatnonzero(bad)[0])
        raise PoisonedStateError(f"non-finite {name} in element {e}", element=e)


def element_kernels(quad, u_e, c_e, phi_e, p, mode, formulation, moduli=None, tangent=True):
    """Static residual and tangent for a stack of elements.

    Parameters
    ----------
    quad : fem.QuadratureCache
    u_e : (E, 8), c_e : (E, 4), phi_e : (E, 4)
        Element nodal values.
    p : MaterialParams
        In whatever consistent unit system the caller works in.
    moduli : (E, nu), optional
        Freeze the elastic moduli instead of evaluating them from the
        local concentration. Without it the tangent includes the
        derivatives of the moduli with respect to c.

    Returns
    -------
    R : (E, 16)
    K : (E, 16, 16) or None
    """
    v = _point_values(quad, u_e, c_e, phi_e)
    for k in ("eps", "c", "phi"):
        _check_finite(k, v[k])
    dV = quad.dV
    N = quad.N
    dNdx = quad.dNdx
    B, Bs = v["B"], v["Bs"]
    c, gc, phi, gphi = v["c"], v["gc"], v["phi"], v["gphi"]

    if moduli is None:
        E, nu = moduli_of_concentration(c, p)
    else:
        E = np.full(c.shape, float(moduli[0]))
        nu = np.full(c.shape, float(moduli[1]))
    D1, D2, D3, D4 = coupling_matrices(E, nu, p.omega, mode)
    g, dg, d2g = degradation(phi, p.eta)

    sigma = np.einsum("egij,egj->egi", D1, v["eps"]) + D2 * c[..., None]
    sp_ = (np.einsum("egi,egi->eg", D3, v["eps"]) + D4 * c) / 3.0
    D3s = d3_star(D3)
    gsp = (np.einsum("egij,egj->egi", D3s, v["deps"]) + D4[..., None] * gc) / 3.0
    grad_gsp = g[..., None] * gsp + (dg * sp_)[..., None] * gphi

    if formulation is Formulation.HYBRID:
        xi, dxi = tensile_energy(sigma, E)
    else:
        dxi = np.linalg.solve(D1, sigma[..., None])[..., 0]
        xi = 0.5 * np.einsum("egi,egi->eg", sigma, dxi)
    _check_finite("stress", sigma)

    Dk, dr = p.diffusivity, p.drift
    Gc, l0 = p.G_cr, p.l0
    n_el = dV.shape[0]

    R = np.empty((n_el, 16))
    R[:, U] = np.einsum("egij,egi->ej", B, (dV * g)[..., None] * sigma)
    flux = Dk * gc - dr * c[..., None] * grad_gsp
    R[:, C] = np.einsum("egai,ega->ei", dNdx, dV[..., None] * flux)
    src = Gc / l0 * (1.0 - phi) - dg * xi
    R[:, P] = np.einsum("egai,ega->ei", dNdx, (dV * Gc * l0)[..., None] * gphi) - (dV * src) @ N
    _check_finite("residual", R)
    if not tangent:
        return R, None

    K = np.zeros((n_el, 16, 16))
    DB = np.matmul(D1, B)
    K[:, U, U] = _gram(B, (dV * g)[..., None, None] * DB)
    K[:, U, C] = _outer_N(np.einsum("egij,egi->egj", B, (dV * g)[..., None] * D2), N)
    K[:, U, P] = _outer_N(np.einsum("egij,egi->egj", B, (dV * dg)[..., None] * sigma), N)

    cw = -dr * dV * c
    # d(grad(g sigma_p))/du
    d3B = np.einsum("egi,egij->egj", D3, B) / 3.0
    dG_du = (g / 3.0)[..., None, None] * np.matmul(D3s, Bs) + dg[..., None, None] * gphi[
        ..., :, None
    ] * d3B[..., None, :]
    K[:, C, U] = _gram(dNdx, cw[..., None, None] * dG_du)

    dG_dc = (g * D4 / 3.0)[..., None, None] * dNdx + (dg * D4 / 3.0)[..., None, None] * gphi[..., :, None] * N[
        None, :, None, :
    ]
    K[:, C, C] = (
        _gram(dNdx, (dV * Dk)[..., None, None] * dNdx)
        + _outer_N(np.einsum("egai,ega->egi", dNdx, (-dr * dV)[..., None] * grad_gsp), N)
        + _gram(dNdx, cw[..., None, None] * dG_dc)
    )
    dG_dphi = (dg[..., None] * gsp + (d2g * sp_)[..., None] * gphi)[..., :, None] * N[None, :, None, :] + (
        dg * sp_
    )[..., None, None] * dNdx
    K[:, C, P] = _gram(dNdx, cw[..., None, None] * dG_dphi)

    w = (dV * dg)[..., None] * dxi
    K[:, P, U] = np.matmul(N.T, np.einsum("egk,egkj->egj", w, DB))
    K[:, P, C] = _N_weighted(N, np.einsum("egk,egk->eg", w, D2))
    K[:, P, P] = _gram(dNdx, (dV * Gc * l0)[..., None, None] * dNdx) + _N_weighted(N, dV * (Gc / l0 + d2g * xi))
    if moduli is None:
        _moduli_tangent(K, p, mode, formulation, quad, v, g, dg, sigma, xi, dxi, D1, E, cw)
    return R, K


def _gram(X, Y):
    """sum over (g, a) of X[e,g,a,i] Y[e,g,a,j] as a batched matmul."""
    E = X.shape[0]
    Xr = X.reshape(E, -1, X.shape[-1])
    Yr = Y.reshape(E, -1, Y.shape[-1])
    return np.matmul(Xr.transpose(0, 2, 1), Yr)


def _outer_N(a, N):
    """sum over g of a[e,g,i] N[g,j]."""
    return np.matmul(a.transpose(0, 2, 1), N)


def _N_weighted(N, w, M=None):
    """sum over g of N[g,i] w[e,g] M[g,j] (M defaults to N)."""
    M = N if M is None else M
    return np.matmul(N.T[None] * w[:, None, :], M)


def _moduli_tangent(K, p, mode, formulation, quad, v, g, dg, sigma, xi, dxi, D1, E, cw):
    """Add the terms from the concentration dependence of the moduli."""
    N, dNdx, dV = quad.N, quad.dNdx, quad.dV
    c = v["c"]
    dD1, dD2, dD3, dD4 = coupling_derivatives(c, p, mode)
    dsig = np.einsum("egij,egj->egi", dD1, v["eps"]) + dD2 * c[..., None]
    K[:, U, C] += _outer_N(np.einsum("egij,egi->egj", v["B"], (dV * g)[..., None] * dsig), N)

    dgsp = (np.einsum("egij,egj->egi", d3_star(dD3), v["deps"]) + dD4[..., None] * v["gc"]) / 3.0
    dsp = (np.einsum("egi,egi->eg", dD3, v["eps"]) + dD4 * c) / 3.0
    dgrad = g[..., None] * dgsp + (dg * dsp)[..., None] * v["gphi"]
    K[:, C, C] += _outer_N(np.einsum("egai,ega->egi", dNdx, cw[..., None] * dgrad), N)

    dxi_dc = np.einsum("egi,egi->eg", dxi, dsig)
    if formulation is Formulation.HYBRID:
        inside = (c >= 0.0) & (c <= p.c_max)
        dE = -(p.E_si - p.E_lisi) / p.c_max * inside
        dxi_dc = dxi_dc - xi / E * dE
    else:
        dxi_dc = dxi_dc - 0.5 * np.einsum("egi,egij,egj->eg", dxi, dD1, dxi)
    K[:, P, C] += _N_weighted(N, dV * dg * dxi_dc)


def mass_matrices(quad):
    """Consistent scalar mass matrices (E, 4, 4)."""
    return np.einsum("gi,eg,gj->eij", quad.N, quad.dV, quad.N)


def damping_blocks(quad, p):
    M = mass_matrices(quad)
    D = np.zeros((M.shape[0], 16, 16))
    D[:, C, C] = M
    D[:, P, P] = M / p.chi
    return D


def _single(geom):
    coords = geom.coords if isinstance(geom, fem.ElementGeometry) else np.asarray(geom, dtype=float)
    return fem.build_quadrature(coords[None])


def _split(q):
    q = np.asarray(q, dtype=float)
    return q[None, U], q[None, C], q[None, P]


def element_residual(geom, q, q_dot, p, mode, formulation, moduli=None):
    """Full residual (static part plus rate terms) of one element.

    ``q`` and ``q_dot`` are 16-vectors in element dof order; the
    displacement entries of ``q_dot`` are ignored.
    """
    quad = _single(geom)
    R, _ = element_kernels(quad, *_split(q), p, mode, formulation, moduli=moduli, tangent=False)
    D = damping_blocks(quad, p)[0]
    return R[0] + D @ np.asarray(q_dot, dtype=float)


def element_static_residual(geom, q, p, mode, formulation, moduli=None):
    quad = _single(geom)
    R, _ = element_kernels(quad, *_split(q), p, mode, formulation, moduli=moduli, tangent=False)
    return R[0]


def element_tangent(geom, q, p, mode, formulation, moduli=None):
    """Tangent K and damping D of one element."""
    quad = _single(geom)
    _, K = element_kernels(quad, *_split(q), p, mode, formulation, moduli=moduli)
    return K[0], damping_blocks(quad, p)[0]


class DofMap:
    """Blocked global numbering: u (2 per node), then c, then phi."""

    def __init__(self, n_nodes, quads):
        self.n_nodes = int(n_nodes)
        quads = np.asarray(quads, dtype=np.int64)
        if quads.ndim != 2 or quads.shape[1] != 4:
            raise AssemblyError("connectivity must be (E, 4)")
        if quads.size and (quads.min() < 0 or quads.max() >= self.n_nodes):
            raise AssemblyError("connectivity refers to nodes outside the mesh")
        n = self.n_nodes
        self.u = np.arange(2 * n)
        self.c = np.arange(2 * n, 3 * n)
        self.phi = np.arange(3 * n, 4 * n)
        dofs = np.empty((quads.shape[0], 16), dtype=np.int64)
        dofs[:, 0:8:2] = 2 * quads
        dofs[:, 1:8:2] = 2 * quads + 1
        dofs[:, C] = 2 * n + quads
        dofs[:, P] = 3 * n + quads
        self.element_dofs = dofs
        self.quads = quads

    @property
    def size(self):
        return 4 * self.n_nodes

    def split(self, Q):
        n = self.n_nodes
        return Q[: 2 * n], Q[2 * n : 3 * n], Q[3 * n :]

    def gather(self, Q):
        """Element nodal values (u_e, c_e, phi_e) from a global vector."""
        Qe = Q[self.element_dofs]
        return Qe[:, U], Qe[:, C], Qe[:, P]

    def csr_pattern(self):
        """(indptr, indices, slot): CSR structure of the assembled matrix and
        the data position of every element-matrix entry, row-major per element.
        """
        if getattr(self, "_pattern", None) is None:
            n = self.size
            rows = np.repeat(self.element_dofs, 16, axis=1).ravel()
            cols = np.tile(self.element_dofs, (1, 16)).ravel()
            keys, slot = np.unique(rows * n + cols, return_inverse=True)
            indptr = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(np.bincount(keys // n, minlength=n), out=indptr[1:])
            self._pattern = (indptr, keys % n, slot.ravel())
        return self._pattern


@dataclass
class GlobalSystem:
    R: np.ndarray
    K: sp.csr_matrix = None


def scatter_matrix(dofmap, Ke):
    """Sum element matrices into CSR; the sparsity pattern is cached on the dof map."""
    indptr, indices, slot = dofmap.csr_pattern()
    data = np.bincount(slot, weights=Ke.ravel(), minlength=indices.size)
    n = dofmap.size
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def scatter_vector(dofmap, Re):
    return np.bincount(dofmap.element_dofs.ravel(), weights=Re.ravel(), minlength=dofmap.size)


def assemble_global(dofmap, quad, Q, p, mode, formulation, moduli=None, tangent=True):
    """Global static residual and (optionally) tangent stiffness."""
    if Q.shape != (dofmap.size,):
        raise AssemblyError(f"state vector has shape {Q.shape}, expected ({dofmap.size},)")
    if quad.n_elements != dofmap.element_dofs.shape[0]:
        raise AssemblyError("quadrature cache and dof map disagree on element count")
    Re, Ke = element_kernels(quad, *dofmap.gather(Q), p, mode, formulation, moduli=moduli, tangent=tangent)
    R = scatter_vector(dofmap, Re)
    K = scatter_matrix(dofmap, Ke) if tangent else None
    return GlobalSystem(R=R, K=K)


def assemble_damping(dofmap, quad, p):
    return scatter_matrix(dofmap, damping_blocks(quad, p))
