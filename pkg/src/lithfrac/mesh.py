"""Structured quadrilateral mesh of a circular disk, refined in a band
along the x axis where the crack lives.

Each quadrant is an O-grid made of three mapped blocks: an inner square
[0, s]^2 and two blocks joining the square's right and top edges to the
arc. The first quadrant is mirrored into the other three, which makes the
node set exactly symmetric about both axes.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fem

MAGIC = "PFE-MESH 1"


class MeshGeometryError(ValueError):
    pass


class MeshFormatError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class CrackSeed:
    """Straight crack along +x centred at the origin."""

    length: float
    half_width: float
    axis: tuple = (1.0, 0.0)

    def __post_init__(self):
        if self.length < 0.0:
            raise ValueError("crack length must be non-negative")
        if self.half_width < 0.0:
            raise ValueError("crack half width must be non-negative")
        if tuple(self.axis) != (1.0, 0.0):
            raise ValueError("only cracks along +x are supported")


@dataclass
class Mesh:
    node_coords: np.ndarray
    quads: np.ndarray
    boundary_nodes: np.ndarray
    radius: float = float("nan")
    characteristic_sizes: np.ndarray = field(default=None, repr=False)
    _edges: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.node_coords = np.asarray(self.node_coords, dtype=float).reshape(-1, 2)
        self.quads = np.asarray(self.quads, dtype=np.int64).reshape(-1, 4)
        self.boundary_nodes = np.unique(np.asarray(self.boundary_nodes, dtype=np.int64))
        if self.characteristic_sizes is None:
            self.characteristic_sizes = element_sizes(self.node_coords, self.quads)

    @property
    def n_nodes(self):
        return self.node_coords.shape[0]

    @property
    def n_elements(self):
        return self.quads.shape[0]

    def edges(self):
        """Unique undirected edges (n, 2), computed once."""
        if self._edges is None:
            e = np.concatenate([self.quads[:, [i, (i + 1) % 4]] for i in range(4)])
            e.sort(axis=1)
            self._edges = np.unique(e, axis=0)
        return self._edges

    def element_coords(self):
        return self.node_coords[self.quads]

    def areas(self):
        xy = self.element_coords()
        x, y = xy[..., 0], xy[..., 1]
        return 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)

    def validate(self):
        """Raise if connectivity or element orientation is broken."""
        q = self.quads
        if q.size == 0:
            return
        if q.min() < 0 or q.max() >= self.n_nodes:
            raise MeshGeometryError("connectivity index out of range")
        s = np.sort(q, axis=1)
        if np.any(s[:, 1:] == s[:, :-1]):
            raise MeshGeometryError("element with repeated nodes")
        if self.boundary_nodes.size and (self.boundary_nodes.min() < 0 or self.boundary_nodes.max() >= self.n_nodes):
            raise MeshGeometryError("boundary node index out of range")
        fem.build_quadrature(self.element_coords())


def element_sizes(nodes, quads):
    """Longest edge of every element."""
    xy = np.asarray(nodes)[np.asarray(quads)]
    if xy.size == 0:
        return np.zeros(0)
    edges = np.roll(xy, -1, axis=1) - xy
    return np.sqrt((edges**2).sum(axis=2)).max(axis=1)


def graded_points(length, h_fine, h_coarse, fine_extent, growth=1.2):
    """Monotone points on [0, length]: spacing h_fine up to ``fine_extent``,
    then growing geometrically but never beyond h_coarse.
    """
    fine_extent = min(fine_extent, length)
    n_fine = max(1, math.ceil(fine_extent / h_fine - 1e-9)) if fine_extent > 0 else 0
    pts = list(np.linspace(0.0, fine_extent, n_fine + 1)) if n_fine else [0.0]
    step = fine_extent / n_fine if n_fine else h_fine
    x = pts[-1]
    rest = []
    while x < length - 1e-12 * length:
        step = min(step * growth, h_coarse)
        x += step
        rest.append(x)
    if rest:
        # stretch or shrink the graded part so that it ends on ``length``
        start = pts[-1]
        rest = np.asarray(rest)
        if rest[-1] - length > 0.5 * (rest[-1] - (rest[-2] if rest.size > 1 else start)):
            rest = rest[:-1] if rest.size > 1 else rest
        rest = start + (rest - start) * (length - start) / (rest[-1] - start)
        pts.extend(rest.tolist())
    return np.asarray(pts)


def _quadrant(R, s, xs, ys, radial, arc=None):
    """Node coordinates and connectivity of the first-quadrant O-grid.

    ``arc`` holds the arc angles of the right block, one per entry of
    ``ys``; by default they are spaced like ``ys``.
    """
    nodes = []
    index = {}

    def add(key, xy):
        if key not in index:
            index[key] = len(nodes)
            nodes.append(xy)
        return index[key]

    nx, ny, nr = len(xs) - 1, len(ys) - 1, len(radial) - 1
    quads = []
    # inner square
    for j in range(ny + 1):
        for i in range(nx + 1):
            add(("A", i, j), (xs[i], ys[j]))
    for j in range(ny):
        for i in range(nx):
            quads.append([index[("A", i, j)], index[("A", i + 1, j)], index[("A", i + 1, j + 1)], index[("A", i, j + 1)]])

    # right block: from edge x = s (nodes A(nx, j)) to the arc, theta in [0, pi/4]
    th = (math.pi / 4) * ys / s if arc is None else np.asarray(arc, dtype=float)
    for j in range(ny + 1):
        inner = np.array([s, ys[j]])
        outer = R * np.array([math.cos(th[j]), math.sin(th[j])])
        if j == 0:
            outer[1] = 0.0
        for k in range(nr + 1):
            key = ("A", nx, j) if k == 0 else ("B", k, j)
            if k == nr:
                xy = outer
            else:
                xy = (1 - radial[k]) * inner + radial[k] * outer
            add(key, tuple(xy))
    for j in range(ny):
        for k in range(nr):
            a = ("A", nx, j) if k == 0 else ("B", k, j)
            b = ("B", k + 1, j)
            c = ("B", k + 1, j + 1)
            d = ("A", nx, j + 1) if k == 0 else ("B", k, j + 1)
            quads.append([index[a], index[b], index[c], index[d]])

    # top block: from edge y = s (nodes A(i, ny)) to the arc, theta in [pi/2, pi/4]
    # the diagonal i = nx coincides with the right block's j = ny line
    for i in range(nx + 1):
        inner = np.array([xs[i], s])
        tt = math.pi / 2 - (math.pi / 4) * (xs[i] / s)
        outer = R * np.array([math.cos(tt), math.sin(tt)])
        if i == 0:
            outer[0] = 0.0
        for k in range(nr + 1):
            if k == 0:
                key = ("A", i, ny)
            elif i == nx:
                key = ("B", k, ny)
            else:
                key = ("C", k, i)
            if key in index:
                continue
            xy = outer if k == nr else (1 - radial[k]) * inner + radial[k] * outer
            add(key, tuple(xy))

    def ckey(k, i):
        if k == 0:
            return ("A", i, ny)
        if i == nx:
            return ("B", k, ny)
        return ("C", k, i)

    for i in range(nx):
        for k in range(nr):
            # counter-clockwise: going outward is +y, increasing i is +x
            quads.append([index[ckey(k, i)], index[ckey(k, i + 1)], index[ckey(k + 1, i + 1)], index[ckey(k + 1, i)]])

    boundary = [index[("B", nr, j)] for j in range(ny + 1)] + [index[ckey(nr, i)] for i in range(nx + 1)]
    return np.array(nodes, dtype=float), np.array(quads, dtype=np.int64), np.array(boundary, dtype=np.int64)


def _mirror(nodes, quads, boundary, R):
    """Reflect the first-quadrant patch into the full disk, merging axis nodes."""
    tol = 1e-12 * R
    all_nodes = []
    key_to_id = {}
    out_quads = []
    out_boundary = set()
    for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        xy = nodes * np.array([sx, sy], dtype=float)
        xy[np.abs(xy) < tol] = 0.0
        local = np.empty(len(xy), dtype=np.int64)
        for n, (x, y) in enumerate(xy):
            key = (round(x / tol), round(y / tol))
            if key not in key_to_id:
                key_to_id[key] = len(all_nodes)
                all_nodes.append((x, y))
            local[n] = key_to_id[key]
        q = local[quads]
        if sx * sy < 0:
            q = q[:, ::-1]
        out_quads.append(q)
        out_boundary.update(local[boundary].tolist())
    return np.array(all_nodes), np.vstack(out_quads), np.array(sorted(out_boundary), dtype=np.int64)


def generate_disk_mesh(R, crack, target_h_far, target_h_near, band_width=30e-9, inner_fraction=0.5):
    """Quadrilateral disk mesh with a refined band |y| <= band_width / 2.

    The band spans the full diameter so that a crack growing along x stays
    inside refined elements. Elements touching the band have their longest
    edge no larger than ``target_h_near``.
    """
    if not (0.0 < target_h_near <= target_h_far < R):
        raise MeshGeometryError("need 0 < h_near <= h_far < R")
    if crack is not None and crack.length >= 2 * R:
        raise MeshGeometryError("crack does not fit inside the disk")
    s = inner_fraction * R
    half_band = min(0.5 * band_width, s)
    h_near = target_h_near
    arc_len = math.pi * R / 4.0
    arc_band = R * math.asin(half_band / R)
    for _ in range(8):
        nx = max(1, math.ceil(s / h_near - 1e-9))
        xs = np.linspace(0.0, s, nx + 1)
        ys = graded_points(s, h_near, target_h_far, half_band)
        # arc angles: the band keeps its spacing, the rest of the arc is
        # stretched so that the right block stays conforming with the square
        if half_band > 0.0:
            arc_pos = np.where(
                ys <= half_band,
                ys * (arc_band / half_band),
                arc_band + (ys - half_band) * (arc_len - arc_band) / (s - half_band),
            )
        else:
            arc_pos = ys * (arc_len / s)
        # radial count resolves the band along y = 0
        nr = max(1, math.ceil((R - s) / h_near - 1e-9))
        radial = np.linspace(0.0, 1.0, nr + 1)
        qn, qq, qb = _quadrant(R, s, xs, ys, radial, arc=arc_pos / R)
        nodes, quads, boundary = _mirror(qn, qq, qb, R)
        sizes = element_sizes(nodes, quads)
        nearest_y = np.abs(nodes[quads][..., 1]).min(axis=1)
        in_band = nearest_y < half_band
        worst = sizes[in_band].max() if in_band.any() else 0.0
        if worst <= target_h_near * (1 + 1e-12):
            break
        h_near *= 0.98 * target_h_near / worst
    else:
        raise MeshGeometryError("could not meet the near-field size target")
    mesh = Mesh(nodes, quads, boundary, radius=R, characteristic_sizes=sizes)
    try:
        mesh.validate()
    except fem.ElementQualityError as exc:
        raise MeshGeometryError(f"inverted element produced by refinement: {exc}") from exc
    return mesh


def uniform_disk_mesh(R, h, inner_fraction=0.5):
    """Disk mesh with nominal element size h everywhere (no band)."""
    s = inner_fraction * R
    nx = max(1, round(s / h))
    xs = np.linspace(0.0, s, nx + 1)
    block_area = 0.5 * (math.pi * R * R / 4.0 - s * s)
    nr = max(1, round(block_area / (h * s)))
    qn, qq, qb = _quadrant(R, s, xs, xs, np.linspace(0.0, 1.0, nr + 1))
    nodes, quads, boundary = _mirror(qn, qq, qb, R)
    mesh = Mesh(nodes, quads, boundary, radius=R)
    mesh.validate()
    return mesh


def rectangle_mesh(width, height, nx, ny):
    """Structured nx-by-ny grid on the rectangle centred at the origin."""
    if nx < 1 or ny < 1 or not (width > 0 and height > 0):
        raise ValueError("rectangle needs positive size and at least one element per side")
    x = np.linspace(-0.5 * width, 0.5 * width, nx + 1)
    y = np.linspace(-0.5 * height, 0.5 * height, ny + 1)
    X, Y = np.meshgrid(x, y)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    n0 = (j * (nx + 1) + i).ravel()
    quads = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])
    on_edge = (X == x[0]) | (X == x[-1]) | (Y == y[0]) | (Y == y[-1])
    mesh = Mesh(nodes, quads, np.flatnonzero(on_edge.ravel()), radius=0.5 * math.hypot(width, height))
    mesh.validate()
    return mesh


def save_mesh(mesh, path):
    if mesh.n_elements == 0:
        raise ValueError("refusing to save a mesh without elements")
    path = Path(path)
    lines = [MAGIC, str(mesh.n_nodes)]
    lines += [f"{x:.17e} {y:.17e}" for x, y in mesh.node_coords]
    lines.append(str(mesh.n_elements))
    lines += [" ".join(str(int(i)) for i in q) for q in mesh.quads]
    lines.append("BOUNDARY")
    lines.append(str(len(mesh.boundary_nodes)))
    lines += [str(int(i)) for i in mesh.boundary_nodes]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path):
    with open(path, "r", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    pos = 0

    def take(what):
        nonlocal pos
        if pos >= len(lines):
            raise MeshFormatError(f"unexpected end of file, expected {what}", line=pos + 1)
        line = lines[pos].rstrip("\r")
        pos += 1
        return line

    def take_int(what):
        line = take(what)
        try:
            return int(line)
        except ValueError:
            raise MeshFormatError(f"expected {what}, got {line!r}", line=pos) from None

    if take("header") != MAGIC:
        raise MeshFormatError(f"missing {MAGIC!r} header", line=1)
    n_nodes = take_int("node count")
    nodes = np.empty((n_nodes, 2))
    for i in range(n_nodes):
        parts = take("node coordinates").split()
        try:
            if len(parts) != 2:
                raise ValueError
            nodes[i] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshFormatError(f"bad node line {lines[pos - 1]!r}", line=pos) from None
    n_el = take_int("element count")
    quads = np.empty((n_el, 4), dtype=np.int64)
    for e in range(n_el):
        parts = take("element connectivity").split()
        try:
            if len(parts) != 4:
                raise ValueError
            quads[e] = [int(v) for v in parts]
        except ValueError:
            raise MeshFormatError(f"bad element line {lines[pos - 1]!r}", line=pos) from None
        if quads[e].min() < 0 or quads[e].max() >= n_nodes:
            raise MeshFormatError("node index out of range", line=pos)
    if take("BOUNDARY") != "BOUNDARY":
        raise MeshFormatError("expected BOUNDARY section", line=pos)
    n_b = take_int("boundary node count")
    boundary = np.empty(n_b, dtype=np.int64)
    for k in range(n_b):
        boundary[k] = take_int("boundary node id")
    if pos != len(lines):
        raise MeshFormatError("trailing content", line=pos + 1)
    R = float(np.max(np.hypot(*nodes[boundary].T))) if n_b else float("nan")
    return Mesh(nodes, quads, boundary, radius=R)
