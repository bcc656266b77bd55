"""Command line front end: configuration, single runs, sweeps, self-checks.

Configuration files are flat ``section.key = value`` text, one entry per
line, ``#`` starting a comment. Values resolve as built-in defaults, then
the file, then command-line flags. Lists are comma separated.

Exit codes: 0 success, 1 failed self-check, 2 invalid configuration,
3 solver failure, 4 file system error.
"""

import csv
import itertools
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import click
import numpy as np

from . import __version__, assembly, postprocess
from .assembly import Formulation
from .material import MaterialParams, PlaneMode, moduli_of_concentration
from .mesh import CrackSeed, MeshFormatError, generate_disk_mesh, load_mesh, save_mesh
from .solver import ConstraintError, Simulation, SolverConfig, StepFailure, save_checkpoint

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


def _auto_float(text):
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(item):
    def parse(text):
        return tuple(item(x) for x in text.split(",") if x.strip())

    return parse


def _str(text):
    return text.strip()


def _fmt(value):
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _schema():
    s = {
        "mesh.radius": (float, 60e-9),
        "mesh.h_far": (float, 6e-9),
        "mesh.h_near": (float, 2e-9),
        "mesh.band_width": (float, 30e-9),
        "mesh.file": (_str, ""),
        "crack.length": (float, 60e-9),
        # auto: one near-field element
        "crack.half_width": (_auto_float, None),
        "initial.c0": (float, 1e3),
        # accepted for completeness, unused by the model
        "material.k_c": (float, 0.0),
        "material.mu0": (float, 0.0),
        "solver.dt": (float, 0.0025),
        "solver.total_time": (float, 6.0),
        "solver.gamma": (float, 0.5),
        "solver.beta": (float, 0.5),
        "solver.newton_tol_rel": (float, 1e-8),
        "solver.newton_tol_abs": (_auto_float, None),
        "solver.max_newton_iters": (int, 25),
        "solver.model": (_str, "hybrid"),
        "solver.mode": (_str, "strain"),
        "solver.crack_threshold": (float, 0.5),
        "solver.zero_flux": (_bool, False),
        "solver.freeze_diffusion": (_bool, False),
        "output.snapshot_times": (_list(float), (0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0)),
        "output.vtk": (_bool, True),
        "sweep.crack_length": (_list(float), ()),
        "sweep.G_cr": (_list(float), ()),
        "sweep.l0": (_list(float), ()),
        "sweep.model": (_list(_str), ()),
    }
    for f in fields(MaterialParams):
        s[f"material.{f.name}"] = (float, f.default)
    return dict(sorted(s.items()))


SCHEMA = _schema()


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration; ``values`` maps every schema key."""

    values: tuple

    def __getitem__(self, key):
        return dict(self.values)[key]

    def as_dict(self):
        return dict(self.values)

    def material(self):
        return MaterialParams(**{f.name: self[f"material.{f.name}"] for f in fields(MaterialParams)})

    def crack(self):
        hw = self["crack.half_width"]
        return CrackSeed(self["crack.length"], self["mesh.h_near"] if hw is None else hw)

    def solver(self):
        return SolverConfig(
            dt=self["solver.dt"],
            total_time=self["solver.total_time"],
            gamma=self["solver.gamma"],
            beta=self["solver.beta"],
            newton_tol_rel=self["solver.newton_tol_rel"],
            newton_tol_abs=self["solver.newton_tol_abs"],
            max_newton_iters=self["solver.max_newton_iters"],
            formulation=Formulation(self["solver.model"]),
            mode=PlaneMode(self["solver.mode"]),
            zero_flux=self["solver.zero_flux"],
            freeze_diffusion=self["solver.freeze_diffusion"],
            crack_threshold=self["solver.crack_threshold"],
            snapshot_times=self["output.snapshot_times"],
        )

    def mesh(self):
        if self["mesh.file"]:
            return load_mesh(self["mesh.file"])
        return generate_disk_mesh(
            self["mesh.radius"],
            self.crack(),
            self["mesh.h_far"],
            self["mesh.h_near"],
            band_width=self["mesh.band_width"],
        )

    def sweep_points(self):
        """Every combination of the sweep axes, as configs with the axes applied."""
        axes = [
            ("crack.length", self["sweep.crack_length"] or (self["crack.length"],)),
            ("material.G_cr", self["sweep.G_cr"] or (self["material.G_cr"],)),
            ("material.l0", self["sweep.l0"] or (self["material.l0"],)),
            ("solver.model", self["sweep.model"] or (self["solver.model"],)),
        ]
        keys = [k for k, _ in axes]
        for combo in itertools.product(*(v for _, v in axes)):
            d = self.as_dict()
            d.update(zip(keys, combo))
            yield make_config(d)

    def dumps(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values)


def validate(values):
    """Raise ConfigError naming the offending field."""
    cfg = RunConfig(tuple(sorted(values.items())))
    for key in ("solver.model",):
        if values[key] not in {f.value for f in Formulation}:
            raise ConfigError(f"{key}: unknown model {values[key]!r} (isotropic or hybrid)")
    for m in values["sweep.model"]:
        if m not in {f.value for f in Formulation}:
            raise ConfigError(f"sweep.model: unknown model {m!r}")
    if values["solver.mode"] not in {m.value for m in PlaneMode}:
        raise ConfigError(f"solver.mode: unknown plane mode {values['solver.mode']!r} (strain or stress)")
    for key in ("mesh.radius", "mesh.h_far", "mesh.h_near"):
        if not values[key] > 0.0:
            raise ConfigError(f"{key} must be positive, got {values[key]!r}")
    if values["mesh.h_near"] > values["mesh.h_far"]:
        raise ConfigError("mesh.h_near must not exceed mesh.h_far")
    if values["initial.c0"] < 0.0:
        raise ConfigError(f"initial.c0 must be non-negative, got {values['initial.c0']!r}")
    if not 0.0 < values["solver.crack_threshold"] < 1.0:
        raise ConfigError("solver.crack_threshold must lie in (0, 1)")
    for key, parts in (("material", cfg.material), ("solver", cfg.solver), ("crack", cfg.crack)):
        try:
            parts()
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    for point in itertools.product(
        values["sweep.G_cr"] or (1.0,), values["sweep.l0"] or (1.0,), values["sweep.crack_length"] or (0.0,)
    ):
        g, l0, a = point
        if g <= 0.0 or l0 <= 0.0 or a < 0.0:
            raise ConfigError(f"sweep axes must be positive, got G_cr={g!r}, l0={l0!r}, crack_length={a!r}")
    if values["crack.length"] >= 2 * values["mesh.radius"]:
        raise ConfigError("crack.length must be shorter than the disk diameter")


def make_config(values):
    validate(values)
    return RunConfig(tuple(sorted(values.items())))


def parse_text(text, source="<string>"):
    """Parse ``key = value`` lines into a dict of typed values."""
    out = {}
    unknown = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in SCHEMA:
            unknown.append(key)
            continue
        try:
            out[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    if unknown:
        raise ConfigError(f"{source}: unknown keys: {', '.join(unknown)}")
    return out


def parse_config(path=None, overrides=None):
    """Resolve defaults <- file <- overrides into a validated RunConfig."""
    values = {k: default for k, (_, default) in SCHEMA.items()}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_text(text, str(path)))
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown keys: {key}")
        values[key] = value
    return make_config(values)


# -- runners -----------------------------------------------------------------


def _write(path, text):
    path.write_text(text, encoding="ascii")
    return path


def run_one(config, out_dir, echo=print):
    """Run one configuration into ``out_dir``. Returns the trace rows."""
    out_dir = Path(out_dir).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    _write(out_dir / "config.txt", config.dumps())
    mesh = config.mesh()
    save_mesh(mesh, out_dir / "mesh.txt")
    sim = Simulation(mesh, config.material(), config.solver())
    state = sim.seed_initial_state(config.crack(), c0=config["initial.c0"])
    trace, snaps = sim.run(state, out_dir=out_dir)
    written = [out_dir / "config.txt", out_dir / "mesh.txt", out_dir / "trace.csv"]
    if config["output.vtk"]:
        snap_dir = out_dir / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for s in snaps:
            written.append(
                postprocess.export_fields(s, snap_dir / f"t_{s.t:09.4f}.vtk", c_max=config["material.c_max"])
            )
    save_checkpoint(sim.final_state, out_dir / "final_state.npz")
    written.append(out_dir / "final_state.npz")
    for p in written:
        echo(str(p))
    return trace


SUMMARY_FIELDS = [
    "point",
    "crack_length",
    "G_cr",
    "l0",
    "model",
    "status",
    "final_crack_length",
    "final_crack_thickness",
    "error",
]


def _point_name(k, cfg):
    return f"{k:03d}_a{cfg['crack.length']:.4g}_G{cfg['material.G_cr']:.4g}_l{cfg['material.l0']:.4g}_{cfg['solver.model']}"


def run_sweep(config, out_dir, echo=print):
    """Run every sweep point; failures are recorded and skipped.

    Returns the summary rows as dicts.
    """
    out_dir = Path(out_dir).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    _write(out_dir / "config.txt", config.dumps())
    rows = []
    for k, point in enumerate(config.sweep_points()):
        name = _point_name(k, point)
        row = dict(
            point=name,
            crack_length=repr(point["crack.length"]),
            G_cr=repr(point["material.G_cr"]),
            l0=repr(point["material.l0"]),
            model=point["solver.model"],
        )
        try:
            trace = run_one(point, out_dir / name, echo=lambda _: None)
            last = trace[-1] if trace else None
            row.update(
                status="ok",
                final_crack_length=repr(last.crack_length) if last else "",
                final_crack_thickness=repr(last.crack_thickness) if last else "",
                error="",
            )
        except (StepFailure, ConstraintError, FloatingPointError) as exc:
            log.warning("sweep point %s failed: %s", name, exc)
            row.update(status="failed", final_crack_length="", final_crack_thickness="", error=str(exc))
        rows.append(row)
        echo(f"{name}: {row['status']}")
    summary = out_dir / "summary.csv"
    with open(summary, "w", newline="", encoding="ascii") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    echo(str(summary))
    return rows


# -- self-checks -------------------------------------------------------------


def tangent_check(n_states=64, seed=0, h=1e-6):
    """Worst relative Frobenius error of the element tangent against central
    differences over random states (both models and plane modes, frozen moduli).
    """
    rng = np.random.default_rng(seed)
    p = MaterialParams().to_internal()
    base = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    scale = np.r_[np.ones(8), np.full(4, p.c_max), np.ones(4)]
    combos = list(itertools.product(Formulation, PlaneMode))
    worst = 0.0
    for k in range(n_states):
        form, mode = combos[k % len(combos)]
        geom = base * rng.uniform(1.0, 10.0) + rng.uniform(-0.2, 0.2, (4, 2))
        q = np.r_[rng.uniform(-0.3, 0.3, 8), rng.uniform(0.0, p.c_max, 4), rng.uniform(0.05, 1.0, 4)]
        c = q[8:12].mean()
        moduli = moduli_of_concentration(c, p)
        K, _ = assembly.element_tangent(geom, q, p, mode, form, moduli)
        fd = np.empty_like(K)
        for j in range(16):
            e = np.zeros(16)
            e[j] = h * scale[j]
            rp = assembly.element_static_residual(geom, q + e, p, mode, form, moduli)
            rm = assembly.element_static_residual(geom, q - e, p, mode, form, moduli)
            fd[:, j] = (rp - rm) / (2 * e[j])
        worst = max(worst, np.linalg.norm(K - fd) / np.linalg.norm(fd))
    return worst


def conservation_check(steps=10):
    """Largest relative per-step change of total lithium in zero-flux mode."""
    crack = CrackSeed(60e-9, 4e-9)
    mesh = generate_disk_mesh(60e-9, crack, 12e-9, 4e-9)
    sim = Simulation(mesh, config=SolverConfig(zero_flux=True))
    state = sim.seed_initial_state(crack)
    r = np.hypot(*sim.coords.T)
    state.Q[sim.dofs.c] = sim.p.c_max * (r / r.max()) ** 2
    worst = 0.0
    total = sim.total_li(state.Q)
    for _ in range(steps):
        state, _ = sim.step(state)
        new = sim.total_li(state.Q)
        worst = max(worst, abs(new - total) / abs(total))
        total = new
    return worst


# -- click wiring --------------------------------------------------------------


def _overrides(model, dt, steps, seed_crack, base_dt):
    o = {}
    if model is not None:
        o["solver.model"] = model
    if dt is not None:
        o["solver.dt"] = dt
    if steps is not None:
        o["solver.total_time"] = steps * (dt if dt is not None else base_dt)
    if seed_crack is not None:
        o["crack.length"] = seed_crack
    return o


def _load(config_path, model=None, dt=None, steps=None, seed_crack=None):
    base = parse_config(config_path)
    return parse_config(config_path, _overrides(model, dt, steps, seed_crack, base["solver.dt"]))


def _guard(fn):
    """Map exceptions onto the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, MeshFormatError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (StepFailure, ConstraintError, FloatingPointError) as exc:
            click.echo(f"solver failure: {exc}", err=True)
            sys.exit(EXIT_SOLVER)
        except OSError as exc:
            click.echo(f"file error: {exc}", err=True)
            sys.exit(EXIT_IO)
        except ValueError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


_config_opt = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="key = value file")
_out_opt = click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
_model_opt = click.option("--model", type=click.Choice([f.value for f in Formulation]), help="override solver.model")
_dt_opt = click.option("--dt", type=float, help="time step in seconds")
_steps_opt = click.option("--steps", type=int, help="number of steps (sets solver.total_time)")
_crack_opt = click.option("--seed-crack", type=float, help="initial crack length in metres")


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="more logging")
def main(verbose):
    """Phase-field fracture of a lithiated silicon nanowire cross-section."""
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_config_opt
@_out_opt
@_model_opt
@_dt_opt
@_steps_opt
@_crack_opt
@_guard
def run(config_path, out_dir, model, dt, steps, seed_crack):
    """Run a single simulation."""
    cfg = _load(config_path, model, dt, steps, seed_crack)
    trace = run_one(cfg, out_dir, echo=click.echo)
    if trace:
        last = trace[-1]
        click.echo(f"final crack length {last.crack_length:.6e} m, thickness {last.crack_thickness:.6e} m")


@main.command()
@_config_opt
@_out_opt
@_model_opt
@_dt_opt
@_steps_opt
@_crack_opt
@_guard
def sweep(config_path, out_dir, model, dt, steps, seed_crack):
    """Run every combination of the sweep.* axes."""
    cfg = _load(config_path, model, dt, steps, seed_crack)
    rows = run_sweep(cfg, out_dir, echo=click.echo)
    if any(r["status"] != "ok" for r in rows):
        sys.exit(EXIT_SOLVER)


@main.command("mesh")
@_config_opt
@_out_opt
@_crack_opt
@_guard
def mesh_cmd(config_path, out_dir, seed_crack):
    """Generate the disk mesh only."""
    cfg = _load(config_path, seed_crack=seed_crack)
    out = Path(out_dir).resolve()
    out.mkdir(parents=True, exist_ok=True)
    mesh = cfg.mesh()
    path = out / "mesh.txt"
    save_mesh(mesh, path)
    click.echo(f"{mesh.n_nodes} nodes, {mesh.n_elements} elements")
    click.echo(str(path))


@main.command()
@click.option("--states", default=64, show_default=True, help="random element states for the tangent check")
@_guard
def check(states):
    """Finite-difference tangent and lithium conservation self-tests."""
    tangent = tangent_check(states)
    drift = conservation_check()
    ok_t, ok_c = tangent <= 1e-5, drift < 1e-8
    click.echo(f"tangent: worst relative error {tangent:.3e} ({'pass' if ok_t else 'FAIL'})")
    click.echo(f"conservation: worst relative drift per step {drift:.3e} ({'pass' if ok_c else 'FAIL'})")
    if not (ok_t and ok_c):
        sys.exit(EXIT_CHECK)


if __name__ == "__main__":
    main()
