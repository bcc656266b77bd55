"""Constitutive relations for lithiated silicon with a phase-field crack.

Everything here is unit-agnostic: pass SI values and get SI back, or pass
the solver's internal units (see :meth:`MaterialParams.to_internal`).
Functions accept scalars or arrays; array arguments broadcast over
quadrature points with the Voigt index last.
"""

import enum
import logging
from dataclasses import dataclass, fields, replace

import numpy as np

log = logging.getLogger(__name__)

_clamp_warned = False


class PlaneMode(enum.Enum):
    PLANE_STRESS = "stress"
    PLANE_STRAIN = "strain"


class SingularMaterialError(ValueError):
    pass


# solver working units: nm, GPa, s, kmol/m^3
LENGTH_UNIT = 1e-9
STRESS_UNIT = 1e9
CONC_UNIT = 1e3


@dataclass(frozen=True)
class MaterialParams:
    """Material and fracture constants (SI unless converted).

    Defaults are the silicon nanowire values; ``eta`` is the residual
    stiffness of fully broken material.
    """

    E_si: float = 80e9
    nu_si: float = 0.22
    E_lisi: float = 41e9
    nu_lisi: float = 0.24
    omega: float = 8.5e-6
    mobility: float = 500.0
    k_B: float = 1.38e-23
    T: float = 298.15
    N_A: float = 6.02e23
    c_max: float = 88.67e3
    chi: float = 1.25e-10
    G_cr: float = 7.0
    l0: float = 10e-9
    eta: float = 1e-3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise ValueError(f"{f.name} must be finite, got {v!r}")
        if self.omega < 0.0:
            raise ValueError(f"omega must be non-negative, got {self.omega!r}")
        for name in ("E_si", "E_lisi", "mobility", "k_B", "T", "N_A", "c_max", "chi", "G_cr", "l0"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("nu_si", "nu_lisi"):
            if not 0.0 < getattr(self, name) < 0.5:
                raise ValueError(f"{name} must lie in (0, 0.5), got {getattr(self, name)!r}")
        if not 0.0 < self.eta <= 0.01:
            raise ValueError(f"eta must lie in (0, 0.01], got {self.eta!r}")

    @property
    def diffusivity(self):
        """Fickian coefficient M k_B T."""
        return self.mobility * self.k_B * self.T

    @property
    def drift(self):
        """Stress-drift coefficient M Omega / N_A."""
        return self.mobility * self.omega / self.N_A

    def to_internal(self):
        """Same material expressed in nm / GPa / s / kmol m^-3.

        The three concentration-carrying constants (k_B, M, Omega) are
        rescaled together so that ``diffusivity`` and ``drift`` come out
        right; individually they are not meaningful in these units.
        """
        L, S, C = LENGTH_UNIT, STRESS_UNIT, CONC_UNIT
        mobility = self.mobility * S / (C * L * L)
        return replace(
            self,
            E_si=self.E_si / S,
            E_lisi=self.E_lisi / S,
            omega=self.omega * C,
            mobility=mobility,
            k_B=self.k_B * self.mobility / (L * L * mobility),
            c_max=self.c_max / C,
            chi=self.chi * S,
            G_cr=self.G_cr / (S * L),
            l0=self.l0 / L,
        )


def moduli_of_concentration(c, p):
    """Young's modulus and Poisson ratio from a linear rule of mixtures.

    Concentrations outside [0, c_max] are clamped with a warning.
    """
    c = np.asarray(c, dtype=float)
    lo, hi = np.min(c, initial=0.0), np.max(c, initial=0.0)
    # round-off at the bounds is clipped silently
    slack = 1e-12 * p.c_max
    if lo < -slack or hi > p.c_max + slack:
        global _clamp_warned
        # first occurrence as a warning, the rest at debug level
        emit = log.debug if _clamp_warned else log.warning
        _clamp_warned = True
        emit("concentration outside [0, c_max]: range [%g, %g] clamped", lo, hi)
    c = np.clip(c, 0.0, p.c_max)
    w = 1.0 - c / p.c_max
    E = p.E_lisi + w * (p.E_si - p.E_lisi)
    nu = p.nu_lisi + w * (p.nu_si - p.nu_lisi)
    if E.ndim == 0:
        return float(E), float(nu)
    return E, nu


def elasticity_matrix(E, nu, mode):
    """Plane elasticity matrix D1 with shape (..., 3, 3)."""
    E = np.asarray(E)
    nu = np.asarray(nu)
    D = np.zeros(np.broadcast(E, nu).shape + (3, 3), dtype=np.result_type(E, nu, float))
    if mode is PlaneMode.PLANE_STRAIN:
        if np.any(np.real(nu) >= 0.5):
            raise SingularMaterialError("plane strain requires nu < 0.5")
        f = E / ((1.0 + nu) * (1.0 - 2.0 * nu))
        D[..., 0, 0] = D[..., 1, 1] = f * (1.0 - nu)
        D[..., 0, 1] = D[..., 1, 0] = f * nu
        D[..., 2, 2] = f * (1.0 - 2.0 * nu) / 2.0
    else:
        f = E / (1.0 - nu * nu)
        D[..., 0, 0] = D[..., 1, 1] = f
        D[..., 0, 1] = D[..., 1, 0] = f * nu
        D[..., 2, 2] = f * (1.0 - nu) / 2.0
    return D


def coupling_matrices(E, nu, omega, mode):
    """Elasticity matrix and chemical coupling terms.

    Returns ``(D1, D2, D3, D4)`` with stress ``D1 @ eps + D2 * c`` and
    hydrostatic stress ``(D3 @ eps + D4 * c) / 3``. D2 and D3 are
    3-vectors, D4 a scalar (all broadcast over leading axes).
    """
    E = np.asarray(E)
    nu = np.asarray(nu)
    D1 = elasticity_matrix(E, nu, mode)
    ones = np.array([1.0, 1.0, 0.0])
    if mode is PlaneMode.PLANE_STRAIN:
        k = E / (1.0 - 2.0 * nu)
        D2 = -(k * omega / 3.0)[..., None] * ones
        D4 = -k * omega
    else:
        k = E / (1.0 - nu)
        D2 = -(k * omega / 3.0)[..., None] * ones
        D4 = -2.0 * k * omega / 3.0
    D3 = k[..., None] * ones
    return D1, D2, D3, D4


def coupling_derivatives(c, p, mode):
    """Derivatives of (D1, D2, D3, D4) with respect to the concentration.

    Exact (complex-step) derivatives of the rule-of-mixtures moduli pushed
    through :func:`coupling_matrices`; zero where c is clamped.
    """
    c = np.asarray(c, dtype=float)
    inside = (c >= 0.0) & (c <= p.c_max)
    E, nu = moduli_of_concentration(np.clip(c, 0.0, p.c_max), p)
    h = 1e-30
    dE = -(p.E_si - p.E_lisi) / p.c_max * inside
    dnu = -(p.nu_si - p.nu_lisi) / p.c_max * inside
    D = coupling_matrices(E + 1j * h * dE, nu + 1j * h * dnu, p.omega, mode)
    return tuple(np.imag(d) / h for d in D)


def d3_star(D3):
    """2x4 operator turning (ux,xx, uy,yx, ux,xy, uy,yy) into grad(D3 . eps)."""
    k = np.asarray(D3)[..., 0]
    out = np.zeros(k.shape + (2, 4))
    out[..., 0, 0] = out[..., 0, 1] = k
    out[..., 1, 2] = out[..., 1, 3] = k
    return out


def free_swelling_strain(c, nu, omega, mode):
    """In-plane strain at which the chemical stress vanishes.

    Plane stress swells freely by Omega c / 3; plane strain is restrained
    out of plane and expands in-plane by (1 + nu) Omega c / 3.
    """
    c = np.asarray(c, dtype=float)
    nu = np.asarray(nu, dtype=float)
    a = omega * c / 3.0
    if mode is PlaneMode.PLANE_STRAIN:
        a = a * (1.0 + nu)
    return a[..., None] * np.array([1.0, 1.0, 0.0])


def degradation(phi, eta=1e-3):
    """Quartic degradation g = 4 phi^3 - 3 phi^4 + eta and two derivatives.

    phi is clamped to [0, 1].
    """
    phi = np.clip(phi, 0.0, 1.0)
    g = 4.0 * phi**3 - 3.0 * phi**4 + eta
    dg = 12.0 * phi**2 * (1.0 - phi)
    d2g = 24.0 * phi - 36.0 * phi**2
    return g, dg, d2g


@dataclass(frozen=True)
class StressState:
    sigma: np.ndarray
    sigma_p: np.ndarray
    xi_u: np.ndarray
    xi_u_plus: np.ndarray


def principal_angle(sigma):
    """Rotation angle of the major principal axis, from tan 2theta = 2 sxy / (sxx - syy).

    The quadrant is chosen so that the T1 direction carries the larger
    principal value; for sxx == syy this is pi/4 (or -pi/4 for sxy < 0).
    """
    sigma = np.asarray(sigma, dtype=float)
    return 0.5 * np.arctan2(2.0 * sigma[..., 2], sigma[..., 0] - sigma[..., 1])


def transformation_vectors(theta):
    c, s = np.cos(theta), np.sin(theta)
    T1 = np.stack([c * c, s * s, 2.0 * s * c], axis=-1)
    T2 = np.stack([s * s, c * c, -2.0 * s * c], axis=-1)
    return T1, T2


def max_principal_effective(sigma, return_direction=False):
    """Largest principal value of a plane stress vector (sxx, syy, sxy).

    With ``return_direction`` the transformation vector that selects it is
    returned as well; that vector is the gradient of the principal value
    with respect to the stress vector.
    """
    sigma = np.asarray(sigma, dtype=float)
    T1, T2 = transformation_vectors(principal_angle(sigma))
    s1 = np.einsum("...i,...i->...", T1, sigma)
    s2 = np.einsum("...i,...i->...", T2, sigma)
    pick = s1 >= s2
    s = np.where(pick, s1, s2)
    if not return_direction:
        return s
    return s, np.where(pick[..., None], T1, T2)


def tensile_energy(sigma, E):
    """Tension part <s1>^2 / (2E) of the elastic energy and its stress gradient."""
    s1, T = max_principal_effective(sigma, return_direction=True)
    pos = np.maximum(s1, 0.0)
    E = np.asarray(E, dtype=float)
    xi = pos * pos / (2.0 * E)
    grad = (pos / E)[..., None] * T
    return xi, grad


def elastic_energy(sigma, D1):
    """Elastic energy density 1/2 sigma . D1^-1 sigma.

    Equal to 1/2 sigma : eps_e, so a stress-free swelling state stores no
    energy.
    """
    compliance = np.linalg.inv(D1)
    return 0.5 * np.einsum("...i,...ij,...j->...", sigma, compliance, sigma)


def stress_of(eps, c, phi, p, mode, moduli=None):
    """Stress, hydrostatic stress and energy densities at a material point.

    ``moduli`` pins (E, nu); otherwise they follow from ``c``. ``phi`` only
    enters through the caller's use of the degradation function and is
    accepted for a uniform signature.
    """
    eps = np.asarray(eps, dtype=float)
    c = np.asarray(c, dtype=float)
    E, nu = moduli if moduli is not None else moduli_of_concentration(c, p)
    D1, D2, D3, D4 = coupling_matrices(E, nu, p.omega, mode)
    sigma = np.einsum("...ij,...j->...i", D1, eps) + D2 * c[..., None]
    sigma_p = (np.einsum("...i,...i->...", D3, eps) + D4 * c) / 3.0
    xi_u = elastic_energy(sigma, D1)
    xi_plus, _ = tensile_energy(sigma, E)
    return StressState(sigma=sigma, sigma_p=sigma_p, xi_u=xi_u, xi_u_plus=xi_plus)
