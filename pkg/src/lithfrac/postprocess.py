"""Crack metrology, deformed extents and file exports.

All inputs and outputs here are SI.
"""

import csv
import logging
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TRACE_HEADER = "t,newton_iters,residual,crack_length,crack_thickness,total_li,sigma_p_min,sigma_p_max"


class ExportError(OSError):
    pass


@dataclass(frozen=True)
class CrackMetrics:
    length: float
    thickness: float
    threshold: float = 0.5


@dataclass(frozen=True)
class ExpansionLengths:
    L_x: float
    L_y: float


def mesh_edges(quads):
    """Unique undirected edges (n, 2) of a quad connectivity."""
    quads = np.asarray(quads)
    e = np.concatenate([quads[:, [i, (i + 1) % 4]] for i in range(4)])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def line_profile(coords, quads, values, axis, u=None, edges=None):
    """Nodal values sampled along the coordinate line ``x[1 - axis] = 0``.

    Samples are the nodes lying on the line plus the points where mesh
    edges cross it, with values interpolated linearly along the edge.

    Returns
    -------
    s : (m,) positions along ``axis`` (deformed if ``u`` is given), sorted
    v : (m,) sampled values
    """
    coords = np.asarray(coords, dtype=float)
    values = np.asarray(values, dtype=float)
    pos = coords if u is None else coords + np.asarray(u, dtype=float)
    other = 1 - axis
    scale = np.ptp(coords, axis=0).max() if len(coords) else 1.0
    tol = 1e-9 * scale
    d = coords[:, other]
    on = np.abs(d) <= tol
    s_list = [pos[on, axis]]
    v_list = [values[on]]
    edges = mesh_edges(quads) if edges is None else edges
    a, b = edges[:, 0], edges[:, 1]
    da, db = d[a], d[b]
    cross = (np.abs(da) > tol) & (np.abs(db) > tol) & (np.sign(da) != np.sign(db))
    a, b = a[cross], b[cross]
    w = (da[cross] / (da[cross] - db[cross]))[:, None]
    s_list.append((pos[a] * (1 - w) + pos[b] * w)[:, axis])
    v_list.append(values[a] * (1 - w[:, 0]) + values[b] * w[:, 0])
    s = np.concatenate(s_list)
    v = np.concatenate(v_list)
    order = np.argsort(s, kind="stable")
    return s[order], v[order]


def level_set_extent(s, v, threshold):
    """Distance between the outermost ``v = threshold`` crossings enclosing ``v < threshold``."""
    below = v < threshold
    if not below.any():
        return 0.0
    idx = np.flatnonzero(below)
    i, j = idx[0], idx[-1]

    def crossing(k_in, k_out):
        t = (threshold - v[k_in]) / (v[k_out] - v[k_in])
        return s[k_in] + t * (s[k_out] - s[k_in])

    lo = s[i] if i == 0 else crossing(i, i - 1)
    hi = s[j] if j == len(s) - 1 else crossing(j, j + 1)
    return float(hi - lo)


def crack_metrics(mesh, phi, threshold=0.5, u=None):
    """Crack length along y = 0 and thickness along x = 0.

    With ``u`` (nodal displacements, shape (n, 2)) both are measured in the
    deformed configuration.
    """
    coords, quads = mesh.node_coords, mesh.quads
    edges = mesh.edges()
    s, v = line_profile(coords, quads, phi, axis=0, u=u, edges=edges)
    length = level_set_extent(s, v, threshold)
    s, v = line_profile(coords, quads, phi, axis=1, u=u, edges=edges)
    thickness = level_set_extent(s, v, threshold)
    return CrackMetrics(length=length, thickness=thickness, threshold=threshold)


def expansion_lengths(mesh, u):
    """Bounding extents of the deformed boundary."""
    x = mesh.node_coords[mesh.boundary_nodes] + np.asarray(u, dtype=float)[mesh.boundary_nodes]
    ext = x.max(axis=0) - x.min(axis=0)
    return ExpansionLengths(L_x=float(ext[0]), L_y=float(ext[1]))


# -- VTK ---------------------------------------------------------------------


def _fmt(a):
    return "\n".join(" ".join(repr(float(x)) for x in row) for row in np.atleast_2d(a))


def export_fields(snapshot, path, c_max=None):
    """Write a snapshot as a legacy ASCII VTK unstructured grid."""
    path = Path(path)
    n = len(snapshot.node_coords)
    if c_max is not None:
        bad = (snapshot.c < 0.0) | (snapshot.c > c_max)
        if bad.any():
            log.warning(
                "%s: %d nodes with c outside [0, %g] (range [%g, %g])",
                path,
                int(bad.sum()),
                c_max,
                snapshot.c.min(),
                snapshot.c.max(),
            )
    pts = np.column_stack([snapshot.node_coords, np.zeros(n)])
    quads = np.asarray(snapshot.quads)
    cells = np.column_stack([np.full(len(quads), 4), quads])
    u3 = np.column_stack([snapshot.u, np.zeros(n)])
    parts = [
        "# vtk DataFile Version 3.0",
        f"lithfrac snapshot t={snapshot.t!r}",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {n} double",
        _fmt(pts),
        f"CELLS {len(quads)} {cells.size}",
        "\n".join(" ".join(str(int(x)) for x in row) for row in cells),
        f"CELL_TYPES {len(quads)}",
        "\n".join(["9"] * len(quads)),
        f"POINT_DATA {n}",
    ]
    for name in ("c", "phi", "sigma_p_degraded"):
        parts += [f"SCALARS {name} double 1", "LOOKUP_TABLE default", "\n".join(repr(float(x)) for x in getattr(snapshot, name))]
    parts += ["VECTORS u double", _fmt(u3)]
    try:
        with open(path, "w", newline="\n", encoding="ascii") as fh:
            fh.write("\n".join(p for p in parts if p != "") + "\n")
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return path


def read_vtk(path):
    """Parse a file written by :func:`export_fields`.

    Returns a dict with ``points`` (n, 3), ``cells`` (E, 4), the point
    scalars by name and ``u`` (n, 3).
    """
    path = Path(path)
    try:
        tokens = path.read_text(encoding="ascii").split("\n")
    except OSError as exc:
        raise ExportError(f"cannot read {path}: {exc}") from exc
    out = {}
    i = 4
    lines = [ln.strip() for ln in tokens]

    def take(k):
        nonlocal i
        block = lines[i : i + k]
        i += k
        return block

    while i < len(lines):
        head = lines[i].split()
        i += 1
        if not head:
            continue
        key = head[0]
        if key == "POINTS":
            n = int(head[1])
            out["points"] = np.array([[float(x) for x in ln.split()] for ln in take(n)])
        elif key == "CELLS":
            m = int(head[1])
            out["cells"] = np.array([[int(x) for x in ln.split()][1:] for ln in take(m)], dtype=np.int64)
        elif key == "CELL_TYPES":
            out["cell_types"] = np.array([int(x) for x in take(int(head[1]))])
        elif key == "POINT_DATA":
            n = int(head[1])
        elif key == "SCALARS":
            i += 1  # lookup table line
            out[head[1]] = np.array([float(x) for x in take(n)])
        elif key == "VECTORS":
            out[head[1]] = np.array([[float(x) for x in ln.split()] for ln in take(n)])
    return out


# -- trace CSV ---------------------------------------------------------------


def _row_values(row):
    vals = astuple(row) if hasattr(row, "__dataclass_fields__") else tuple(row)
    out = []
    for v in vals:
        out.append(str(int(v)) if isinstance(v, (int, np.integer)) else repr(float(v)))
    return out


def export_trace(trace, path):
    """Write the full trace as CSV (header plus one row per step)."""
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER.split(","))
            for row in trace:
                w.writerow(_row_values(row))
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return path


def append_trace_row(row, path):
    try:
        with open(path, "a", newline="", encoding="ascii") as fh:
            csv.writer(fh, lineterminator="\n").writerow(_row_values(row))
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc


def read_trace(path):
    """Read a trace CSV into a dict of column arrays."""
    with open(path, newline="", encoding="ascii") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [list(map(float, row)) for row in r]
    data = np.array(rows).reshape(-1, len(header))
    return {k: data[:, j] for j, k in enumerate(header)}
