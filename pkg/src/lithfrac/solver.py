"""Time stepping and monolithic Newton solve for the coupled
displacement / concentration / phase-field problem.

Internally all quantities live in nm, GPa, s and kmol/m^3; states handed
out through :class:`Snapshot` are converted back to SI.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from . import assembly, fem, postprocess
from .assembly import Formulation
from .material import CONC_UNIT, LENGTH_UNIT, STRESS_UNIT, MaterialParams, PlaneMode

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "lithfrac-checkpoint-1"


class StepFailure(RuntimeError):
    """Newton did not converge; carries per-iteration diagnostics."""

    def __init__(self, message, t=None, residuals=(), trace=None):
        super().__init__(message)
        self.t = t
        self.residuals = list(residuals)
        self.trace = trace


class ConstraintError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    dt: float = 0.0025
    total_time: float = 6.0
    gamma: float = 0.5
    beta: float = 0.5
    newton_tol_rel: float = 1e-8
    newton_tol_abs: float = None
    max_newton_iters: int = 25
    divergence_factor: float = 10.0
    # reuse an old factorisation as a Krylov preconditioner
    reuse_factorization: bool = True
    krylov_rtol: float = 1e-3
    krylov_max_iters: int = 40
    # refactorise once a Krylov solve needs more iterations than this
    krylov_refresh: int = 8
    formulation: Formulation = Formulation.HYBRID
    mode: PlaneMode = PlaneMode.PLANE_STRAIN
    # test modes
    zero_flux: bool = False
    freeze_diffusion: bool = False
    crack_threshold: float = 0.5
    snapshot_times: tuple = ()

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if not (0.0 < self.beta <= 0.5 <= self.gamma <= 1.0):
            raise ValueError("Newmark constants must satisfy 0 < beta <= 0.5 <= gamma <= 1")
        if self.total_time < 0.0:
            raise ValueError("total_time must be non-negative")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be at least 1")

    @property
    def n_steps(self):
        return int(round(self.total_time / self.dt))


@dataclass
class FieldState:
    """Q = {u, c, phi} with first and second rates (internal units).

    Displacement rows of ``Qd`` and ``Qdd`` are kept at zero.
    """

    Q: np.ndarray
    Qd: np.ndarray
    Qdd: np.ndarray
    t: float = 0.0
    n: int = 0

    def copy(self):
        return FieldState(self.Q.copy(), self.Qd.copy(), self.Qdd.copy(), self.t, self.n)


def newmark_rates(Q_new, Q_old, Qd_old, Qdd_old, dt, gamma=0.5, beta=0.5, n_u=0):
    """First and second rates at the new time level.

    ``n_u`` leading rows (the displacement block) are forced to zero.
    """
    dQ = Q_new - Q_old
    Qd = gamma / (beta * dt) * dQ + (1.0 - gamma / beta) * Qd_old + (1.0 - gamma / (2.0 * beta)) * dt * Qdd_old
    Qdd = dQ / (beta * dt * dt) - Qd_old / (beta * dt) - (1.0 - 2.0 * beta) / (2.0 * beta) * Qdd_old
    if n_u:
        Qd[:n_u] = 0.0
        Qdd[:n_u] = 0.0
    return Qd, Qdd


def apply_irreversibility(dphi):
    """Block healing: positive phase-field increments are set to zero."""
    return -np.maximum(-np.asarray(dphi, dtype=float), 0.0)


@dataclass
class StepStats:
    t: float
    newton_iters: int
    residual: float
    residuals: list = field(default_factory=list)


@dataclass
class TraceRow:
    t: float
    newton_iters: int
    residual: float
    crack_length: float
    crack_thickness: float
    total_li: float
    sigma_p_min: float
    sigma_p_max: float


TRACE_FIELDS = [
    "t",
    "newton_iters",
    "residual",
    "crack_length",
    "crack_thickness",
    "total_li",
    "sigma_p_min",
    "sigma_p_max",
]


@dataclass
class Snapshot:
    """Nodal fields in SI units at one instant."""

    t: float
    node_coords: np.ndarray
    quads: np.ndarray
    u: np.ndarray
    c: np.ndarray
    phi: np.ndarray
    sigma_p_degraded: np.ndarray


class Simulation:
    """One mesh, one material, one configuration."""

    def __init__(self, mesh, params=None, config=None):
        self.mesh = mesh
        self.params_si = params or MaterialParams()
        self.config = config or SolverConfig()
        self.p = self.params_si.to_internal()
        self.coords = mesh.node_coords / LENGTH_UNIT
        self.quad = fem.build_quadrature(self.coords[mesh.quads])
        self.dofs = assembly.DofMap(mesh.n_nodes, mesh.quads)
        self.D = assembly.assemble_damping(self.dofs, self.quad, self.p)
        self.lumped = np.bincount(
            mesh.quads.ravel(), weights=(self.quad.dV @ self.quad.N).ravel(), minlength=mesh.n_nodes
        )
        self.pinned = self._rigid_body_dofs()
        self._fixed = self._fixed_dofs()
        self.tol_abs = self.config.newton_tol_abs
        self._lu = None
        self._lu_free = None
        self._lu_stale = False
        self.n_factorizations = 0
        self.krylov_iters = 0

    # -- setup -------------------------------------------------------------

    def _rigid_body_dofs(self):
        x = self.coords
        R = np.max(np.hypot(x[:, 0], x[:, 1]))
        centre = int(np.argmin(np.hypot(x[:, 0], x[:, 1])))
        right = int(np.argmin(np.hypot(x[:, 0] - R, x[:, 1])))
        if centre == right:
            raise ConstraintError("mesh too coarse to remove rigid body modes")
        return np.array([2 * centre, 2 * centre + 1, 2 * right + 1])

    def _fixed_dofs(self):
        fixed = [self.pinned]
        if self.config.freeze_diffusion:
            fixed.append(self.dofs.c)
        elif not self.config.zero_flux:
            fixed.append(self.dofs.c[self.mesh.boundary_nodes])
        return np.unique(np.concatenate(fixed))

    def seed_initial_state(self, crack, c0=1.0e3):
        """Intact disk at concentration c0, boundary at c_max, crack as phi = 0."""
        return seed_initial_state(self.mesh, crack, c0, self.params_si, zero_flux=self.config.zero_flux)

    def consistent_rates(self, state):
        """Copy of ``state`` whose c and phi rates satisfy the rate equations.

        Solves D Qd = -R and D Qdd = -K Qd on the free non-displacement
        dofs. The seeded state carries zero rates, which the gamma = beta =
        1/2 recurrences never forget: the even-step chain then converges
        only at first order in dt.
        """
        n_u = 2 * self.dofs.n_nodes
        free = np.ones(state.Q.size, dtype=bool)
        free[self._fixed] = False
        free[:n_u] = False
        idx = np.flatnonzero(free)
        lu = spla.splu(self.D.tocsr()[idx][:, idx].tocsc())
        sysm = self.residual(state.Q, np.zeros_like(state.Q))
        Qd = np.zeros_like(state.Q)
        Qd[idx] = lu.solve(-sysm.R[idx])
        Qdd = np.zeros_like(state.Q)
        Qdd[idx] = lu.solve(-(sysm.K @ Qd)[idx])
        return FieldState(state.Q.copy(), Qd, Qdd, state.t, state.n)

    # -- one time step -----------------------------------------------------

    def residual(self, Q, Qd, tangent=True, moduli=None):
        sysm = assembly.assemble_global(
            self.dofs, self.quad, Q, self.p, self.config.mode, self.config.formulation, moduli=moduli, tangent=tangent
        )
        sysm.R = sysm.R + self.D @ Qd
        return sysm

    def step(self, state):
        """Advance ``state`` by one time step. Returns (new_state, StepStats)."""
        cfg = self.config
        dt = cfg.dt
        n_u = 2 * self.dofs.n_nodes
        phi_sl = slice(3 * self.dofs.n_nodes, 4 * self.dofs.n_nodes)
        a = cfg.gamma / (cfg.beta * dt)

        Q_old = state.Q
        phi_old = Q_old[phi_sl]
        Q = Q_old.copy()
        free_base = np.ones(Q.size, dtype=bool)
        free_base[self._fixed] = False

        residuals = []
        r0 = None
        for it in range(1, cfg.max_newton_iters + 1):
            Qd, _ = newmark_rates(Q, Q_old, state.Qd, state.Qdd, dt, cfg.gamma, cfg.beta, n_u)
            sysm = self.residual(Q, Qd, tangent=False)
            R = sysm.R
            # dofs held on a bound carry a reaction, not an imbalance
            floor = 1e-3 * self.tol_abs if self.tol_abs is not None else 0.0
            active = self._active_set(Q[phi_sl], phi_old, R[phi_sl], floor)
            free = free_base.copy()
            free[phi_sl] &= ~active
            rn = float(np.linalg.norm(R[free]))
            residuals.append(rn)
            if r0 is None:
                r0 = rn
                if self.tol_abs is None:
                    # scaled by the very first residual of the run
                    self.tol_abs = 1e-10 * max(rn, 1.0)
            if not np.isfinite(rn):
                raise StepFailure(f"non-finite residual at t={state.t + dt:.6g}", t=state.t + dt, residuals=residuals)
            if rn <= self.tol_abs + cfg.newton_tol_rel * r0:
                Qd, Qdd = newmark_rates(Q, Q_old, state.Qd, state.Qdd, dt, cfg.gamma, cfg.beta, n_u)
                new = FieldState(Q, Qd, Qdd, state.t + dt, state.n + 1)
                return new, StepStats(new.t, it, rn, residuals)
            if it > 1 and rn > cfg.divergence_factor * max(r0, self.tol_abs):
                raise StepFailure(
                    f"Newton diverged at t={state.t + dt:.6g}: |R| grew from {r0:.3e} to {rn:.3e}",
                    t=state.t + dt,
                    residuals=residuals,
                )
            idx = np.flatnonzero(free)
            dQ_f = self._linear_solve(Q, Qd, free, idx, -R[idx], a, state.t + dt)
            Q = Q.copy()
            Q[idx] += dQ_f
            # irreversibility on the accumulated step increment, plus phi >= 0
            Q[phi_sl] = np.maximum(phi_old + apply_irreversibility(Q[phi_sl] - phi_old), 0.0)
        raise StepFailure(
            f"Newton did not converge in {cfg.max_newton_iters} iterations at t={state.t + dt:.6g}",
            t=state.t + dt,
            residuals=residuals,
        )

    def _linear_solve(self, Q, Qd, free, idx, rhs, a, t):
        """Solve the constrained Newton system for the current free dofs.

        The exact tangent is used every iteration. A previous LU
        factorisation serves as a GMRES preconditioner; when the Krylov
        solve stalls, or no factorisation exists yet, the current matrix is
        factorised directly.
        """
        cfg = self.config
        A = (a * self.D + self.residual(Q, Qd).K).tocsr()
        A_ff = A[idx][:, idx]
        if self._lu is not None and cfg.reuse_factorization and not self._lu_stale:
            M = self._preconditioner(A_ff, free, idx)
            its = [0]

            def count(_):
                its[0] += 1

            x, _ = spla.gmres(
                A_ff,
                rhs,
                rtol=0.1 * cfg.krylov_rtol,
                atol=0.0,
                restart=cfg.krylov_max_iters,
                maxiter=1,
                M=M,
                callback=count,
                callback_type="pr_norm",
            )
            self.krylov_iters += its[0]
            # inexact Newton: judge the step by its true linear residual
            if np.all(np.isfinite(x)) and np.linalg.norm(A_ff @ x - rhs) <= cfg.krylov_rtol * np.linalg.norm(rhs):
                # a slow solve marks the preconditioner for renewal
                self._lu_stale = its[0] > cfg.krylov_refresh
                return x
        self._factor(A_ff, free, t)
        return self._lu.solve(rhs)

    def _preconditioner(self, A_ff, free, idx):
        lu, lu_free = self._lu, self._lu_free
        pos = np.full(free.size, -1)
        pos[np.flatnonzero(lu_free)] = np.arange(int(lu_free.sum()))
        cur = pos[idx]
        known = cur >= 0
        src = cur[known]
        diag = A_ff.diagonal()
        diag = np.where(diag != 0.0, diag, 1.0)
        n0 = int(lu_free.sum())

        def apply(r):
            z = np.zeros(n0)
            z[src] = r[known]
            y = lu.solve(z)
            out = r / diag
            out[known] = y[src]
            return out

        return spla.LinearOperator(A_ff.shape, matvec=apply, dtype=float)

    def _factor(self, A_ff, free, t):
        """Factorise the constrained system matrix."""
        try:
            # diagonal pivots keep the symmetric fill-reducing order intact
            self._lu = spla.splu(
                A_ff.tocsc(),
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=1e-3,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise ConstraintError(f"singular system at t={t:.6g}: {exc}") from exc
        self._lu_free = free
        self._lu_stale = False
        self.n_factorizations += 1

    @staticmethod
    def _active_set(phi, phi_old, R_phi, floor=0.0):
        # dofs held on a bound: at the previous value and pushed to heal, or
        # at zero and pushed below; ``floor`` keeps round-off out of the set
        at_upper = (phi >= phi_old) & (R_phi < -floor)
        at_lower = (phi <= 0.0) & (R_phi > floor)
        return at_upper | at_lower

    # -- diagnostics -------------------------------------------------------

    def total_li(self, Q):
        """Integral of c over the cross-section, mol per metre of wire."""
        c = self.dofs.split(Q)[1]
        return float(self.lumped @ c) * CONC_UNIT * LENGTH_UNIT**2

    def gauss_fields(self, Q):
        """Degraded hydrostatic stress g(phi) sigma_p at quadrature points (GPa)."""
        from .material import coupling_matrices, degradation, moduli_of_concentration

        u_e, c_e, phi_e = self.dofs.gather(Q)
        N = self.quad.N
        B = fem.strain_matrix(self.quad.dNdx)
        eps = np.einsum("egij,ej->egi", B, u_e)
        c = c_e @ N.T
        E, nu = moduli_of_concentration(np.clip(c, 0.0, self.p.c_max), self.p)
        _, _, D3, D4 = coupling_matrices(E, nu, self.p.omega, self.config.mode)
        sp_ = (np.einsum("egi,egi->eg", D3, eps) + D4 * c) / 3.0
        g, _, _ = degradation(phi_e @ N.T, self.p.eta)
        return g * sp_

    def nodal_average(self, values_gp):
        """Lumped L2 projection of a quadrature-point field onto the nodes."""
        num = np.bincount(
            self.mesh.quads.ravel(),
            weights=np.einsum("eg,eg,gi->ei", values_gp, self.quad.dV, self.quad.N).ravel(),
            minlength=self.mesh.n_nodes,
        )
        return num / self.lumped

    def snapshot(self, state):
        u, c, phi = self.dofs.split(state.Q)
        gsp = self.gauss_fields(state.Q)
        return Snapshot(
            t=state.t,
            node_coords=self.mesh.node_coords.copy(),
            quads=self.mesh.quads.copy(),
            u=u.reshape(-1, 2) * LENGTH_UNIT,
            c=c * CONC_UNIT,
            phi=phi.copy(),
            sigma_p_degraded=self.nodal_average(gsp) * STRESS_UNIT,
        )

    def trace_row(self, state, stats):
        u, _, phi = self.dofs.split(state.Q)
        metrics = postprocess.crack_metrics(
            self.mesh, phi, self.config.crack_threshold, u=u.reshape(-1, 2) * LENGTH_UNIT
        )
        gsp = self.gauss_fields(state.Q)
        return TraceRow(
            t=state.t,
            newton_iters=stats.newton_iters if stats else 0,
            residual=stats.residual if stats else 0.0,
            crack_length=metrics.length,
            crack_thickness=metrics.thickness,
            total_li=self.total_li(state.Q),
            sigma_p_min=float(gsp.min()) * STRESS_UNIT,
            sigma_p_max=float(gsp.max()) * STRESS_UNIT,
        )

    def reactions(self, state):
        """Residual forces at the pinned displacement dofs (internal units)."""
        sysm = self.residual(state.Q, state.Qd, tangent=False)
        return sysm.R[self.pinned]

    def free_energy(self, Q):
        """Mechanical plus fracture free energy per unit thickness (internal units).

        The chemical terms are omitted; they are constant whenever c is.
        """
        from .material import coupling_matrices, degradation, elastic_energy, moduli_of_concentration

        u_e, c_e, phi_e = self.dofs.gather(Q)
        N, dNdx, dV = self.quad.N, self.quad.dNdx, self.quad.dV
        B = fem.strain_matrix(dNdx)
        eps = np.einsum("egij,ej->egi", B, u_e)
        c = c_e @ N.T
        phi = phi_e @ N.T
        gphi = np.einsum("egai,ei->ega", dNdx, phi_e)
        E, nu = moduli_of_concentration(c, self.p)
        D1, D2, _, _ = coupling_matrices(E, nu, self.p.omega, self.config.mode)
        sigma = np.einsum("egij,egj->egi", D1, eps) + D2 * c[..., None]
        g, _, _ = degradation(phi, self.p.eta)
        Gc, l0 = self.p.G_cr, self.p.l0
        dens = g * elastic_energy(sigma, D1) + Gc / (2 * l0) * (1 - phi) ** 2 + 0.5 * Gc * l0 * (gphi**2).sum(-1)
        return float((dens * dV).sum())

    # -- time loop ---------------------------------------------------------

    def run(self, state, out_dir=None, on_step=None):
        """March to ``config.total_time``.

        Returns (trace rows, snapshots). With ``out_dir`` the trace CSV is
        appended after every step so a failure leaves the completed prefix
        on disk.
        """
        cfg = self.config
        trace = []
        snaps = [self.snapshot(state)]
        pending = sorted(t for t in cfg.snapshot_times if t > state.t)
        csv_path = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            csv_path = out_dir / "trace.csv"
            postprocess.export_trace([], csv_path)
        n_steps = int(round((cfg.total_time - state.t) / cfg.dt))
        for _ in range(n_steps):
            try:
                state, stats = self.step(state)
            except StepFailure as exc:
                exc.trace = trace
                raise
            row = self.trace_row(state, stats)
            trace.append(row)
            if csv_path is not None:
                postprocess.append_trace_row(row, csv_path)
            while pending and state.t >= pending[0] - 0.5 * cfg.dt:
                snaps.append(self.snapshot(state))
                pending.pop(0)
            if on_step is not None:
                on_step(state, row)
        self.final_state = state
        return trace, snaps


def seed_initial_state(mesh, crack, c0, params, zero_flux=False):
    """Initial FieldState in internal units.

    Interior nodes start at ``c0`` and boundary nodes at c_max (unless the
    zero-flux test mode is used); nodes inside the crack band get phi = 0.
    """
    n = mesh.n_nodes
    Q = np.zeros(4 * n)
    c = np.full(n, c0 / CONC_UNIT)
    if not zero_flux:
        c[mesh.boundary_nodes] = params.c_max / CONC_UNIT
    phi = np.ones(n)
    if crack is not None and crack.length > 0.0:
        x, y = mesh.node_coords.T
        tol = 1e-9 * max(crack.length, crack.half_width, 1e-30)
        band = (np.abs(x) <= 0.5 * crack.length + tol) & (np.abs(y) <= crack.half_width + tol)
        phi[band] = 0.0
    Q[2 * n : 3 * n] = c
    Q[3 * n :] = phi
    return FieldState(Q, np.zeros_like(Q), np.zeros_like(Q), 0.0, 0)


def save_checkpoint(state, path):
    """Write a FieldState to an ``.npz`` archive (internal units)."""
    np.savez(
        path,
        version=np.array(CHECKPOINT_VERSION),
        t=np.array(state.t),
        n=np.array(state.n),
        Q=state.Q,
        Qd=state.Qd,
        Qdd=state.Qdd,
    )


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        version = str(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r}")
        return FieldState(
            Q=data["Q"].copy(),
            Qd=data["Qd"].copy(),
            Qdd=data["Qdd"].copy(),
            t=float(data["t"]),
            n=int(data["n"]),
        )
