"""Specimens, synthetic experiments, noise, denoising, projection and dataset files.

Dataset directory layout (UTF-8, version "1")::

    mesh.json         {"version": "1", "nodes": [[x, y], ...], "elements": [[i, j, k], ...],
                       "boundaries": {"left": [...], ...}}
    snapshots.csv     header "t,node,ux,uy", one row per (t, node), 17 significant digits
    constraints.json  [{"name": "left_x", "dofs": [[node, dim], ...], "reactions": [...]}, ...]
    provenance.json   model id, noise level, seed, stage and pipeline parameters
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg
import triangle
from scipy.spatial import cKDTree

from .errors import (GeometryError, MeshingFailure, PointOutsideDomain, SchemaError,
                     SingularKernel)
from .fem import BoundaryCondition, solve_quasistatic
from .mesh import DofPartition, Mesh, partition_dofs

log = logging.getLogger(__name__)

FORMAT_VERSION = "1"

# (number of snapshots, delta increment) per benchmark
TRAINING_SCHEDULES = {
    "NH": (3, 0.1), "GT": (3, 0.1),
    "IH": (8, 0.1), "HW": (8, 0.1),
    "AB": (10, 0.05), "OG": (6, 0.05),
    "AI45": (8, 0.05), "AI60": (8, 0.05), "HZ": (8, 0.05),
}
VALIDATION_DELTAS = tuple(0.01 * t for t in range(1, 101))

DEFAULT_ELLIPSES = (
    (0.3, 0.65, 0.18, 0.09, 20.0),
    (0.7, 0.3, 0.10, 0.20, 0.0),
)


@dataclass(frozen=True)
class SpecimenConfig:
    """Geometry, mesh density and loading of a training or validation plate.

    Ellipses are ``(cx, cy, semi_a, semi_b, rotation_deg)``.
    """

    kind: str = "training"
    target_node_count: int = 6000
    hole_radius: float = 0.2
    ellipses: tuple = DEFAULT_ELLIPSES
    deltas: tuple | None = None
    biaxial_ratio: float = 0.5
    min_angle: float = 20.0

    def __post_init__(self):
        if self.kind not in ("training", "validation"):
            raise GeometryError(f"unknown specimen kind {self.kind!r}")
        if self.target_node_count < 100:
            raise GeometryError("target_node_count must be >= 100")

    def schedule(self, model_id: str | None = None) -> tuple:
        if self.deltas is not None:
            return tuple(self.deltas)
        if self.kind == "validation":
            return VALIDATION_DELTAS
        n_t, step = TRAINING_SCHEDULES[model_id or "NH"]
        return tuple(round(step * t, 12) for t in range(1, n_t + 1))


@dataclass(frozen=True, eq=False)
class SnapshotDataset:
    mesh: Mesh
    partition: DofPartition
    displacements: np.ndarray  # (n_t, n_n, 2)
    reactions: np.ndarray  # (n_t, n_groups)
    constraint_specs: tuple = ()
    deltas: tuple = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        u = np.asarray(self.displacements, dtype=float)
        R = np.asarray(self.reactions, dtype=float)
        if u.ndim != 3 or u.shape[1:] != (self.mesh.n_nodes, 2):
            raise SchemaError("displacements", f"shape {u.shape} inconsistent with mesh")
        if R.shape != (u.shape[0], self.partition.n_groups):
            raise SchemaError("reactions", f"shape {R.shape}, expected "
                              f"({u.shape[0]}, {self.partition.n_groups})")
        object.__setattr__(self, "displacements", u)
        object.__setattr__(self, "reactions", R)

    @property
    def n_snapshots(self) -> int:
        return self.displacements.shape[0]

    @property
    def stage(self) -> str:
        return self.provenance.get("stage", "raw")

    def evolve(self, stage: str, **changes) -> "SnapshotDataset":
        prov = dict(self.provenance)
        prov.update(changes.pop("provenance", {}))
        prov["stage"] = stage
        return replace(self, provenance=prov, **changes)


# --------------------------------------------------------------------------
# specimen meshing
# --------------------------------------------------------------------------

class _Boundary:
    """Closed polylines with per-vertex boundary tags, fed to Triangle."""

    def __init__(self):
        self.points: list[tuple[float, float]] = []
        self.tags: list[set] = []
        self.segments: list[tuple[int, int]] = []

    def add_loop(self, pieces):
        """``pieces`` is a list of (points array, tag); consecutive pieces share endpoints."""
        start = len(self.points)
        for pts, tag in pieces:
            for k, p in enumerate(pts):
                if k == 0 and len(self.points) > start:
                    self.tags[-1].add(tag)
                    continue
                self.points.append((float(p[0]), float(p[1])))
                self.tags.append({tag})
        # closing vertex duplicates the first one
        self.points.pop()
        last_tags = self.tags.pop()
        self.tags[start] |= last_tags
        n = len(self.points) - start
        self.segments += [(start + k, start + (k + 1) % n) for k in range(n)]


def _line(p, q, h):
    n = max(1, math.ceil(math.dist(p, q) / h))
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    pts = (1 - t) * np.asarray(p, float) + t * np.asarray(q, float)
    # exact coordinates on the axis-aligned edges
    for d in range(2):
        if p[d] == q[d]:
            pts[:, d] = p[d]
    return pts


def _ellipse_points(cx, cy, a, b, rot_deg, h):
    perim = math.pi * (3 * (a + b) - math.sqrt((3 * a + b) * (a + 3 * b)))
    n = max(8, math.ceil(perim / h))
    th = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    c, s = math.cos(math.radians(rot_deg)), math.sin(math.radians(rot_deg))
    x, y = a * np.cos(th), b * np.sin(th)
    return np.column_stack([cx + c * x - s * y, cy + s * x + c * y])


def _ellipse_inside_square(cx, cy, a, b, rot_deg):
    c, s = math.cos(math.radians(rot_deg)), math.sin(math.radians(rot_deg))
    ex = math.sqrt((a * c) ** 2 + (b * s) ** 2)
    ey = math.sqrt((a * s) ** 2 + (b * c) ** 2)
    return cx - ex > 0 and cx + ex < 1 and cy - ey > 0 and cy + ey < 1


def _ellipses_disjoint(e1, e2, n=720):
    for (cx, cy, a, b, rot), other in ((e1, e2), (e2, e1)):
        pts = _ellipse_points(cx, cy, a, b, rot, 2 * math.pi * max(a, b) / n)
        ox, oy, oa, ob, orot = other
        c, s = math.cos(math.radians(orot)), math.sin(math.radians(orot))
        dx, dy = pts[:, 0] - ox, pts[:, 1] - oy
        xl, yl = c * dx + s * dy, -s * dx + c * dy
        if np.any((xl / oa) ** 2 + (yl / ob) ** 2 <= 1.0):
            return False
    return True


def _boundary_for(config: SpecimenConfig, h: float) -> tuple[_Boundary, list]:
    bd = _Boundary()
    holes = []
    if config.kind == "training":
        r = config.hole_radius
        n_arc = max(4, math.ceil(0.5 * math.pi * r / h))
        th = np.linspace(0.5 * math.pi, 0.0, n_arc + 1)
        arc = np.column_stack([r * np.cos(th), r * np.sin(th)])
        arc[0] = (0.0, r)
        arc[-1] = (r, 0.0)
        bd.add_loop([
            (_line((r, 0.0), (1.0, 0.0), h), "bottom"),
            (_line((1.0, 0.0), (1.0, 1.0), h), "right"),
            (_line((1.0, 1.0), (0.0, 1.0), h), "top"),
            (_line((0.0, 1.0), (0.0, r), h), "left"),
            (arc, "hole"),
        ])
    else:
        bd.add_loop([
            (_line((0.0, 0.0), (1.0, 0.0), h), "bottom"),
            (_line((1.0, 0.0), (1.0, 1.0), h), "right"),
            (_line((1.0, 1.0), (0.0, 1.0), h), "top"),
            (_line((0.0, 1.0), (0.0, 0.0), h), "left"),
        ])
        for k, ell in enumerate(config.ellipses):
            pts = _ellipse_points(*ell, h)
            start = len(bd.points)
            bd.points += [tuple(p) for p in pts]
            bd.tags += [{f"hole{k}"} for _ in pts]
            n = len(pts)
            bd.segments += [(start + j, start + (j + 1) % n) for j in range(n)]
            holes.append(ell[:2])
    return bd, holes


def _domain_area(config: SpecimenConfig) -> float:
    if config.kind == "training":
        return 1.0 - 0.25 * math.pi * config.hole_radius ** 2
    return 1.0 - sum(math.pi * e[2] * e[3] for e in config.ellipses)


def _validate_geometry(config: SpecimenConfig):
    if config.kind == "training":
        if not 0.0 < config.hole_radius < 0.5:
            raise GeometryError(f"hole radius {config.hole_radius} must lie in (0, 0.5)")
        return
    for e in config.ellipses:
        if not _ellipse_inside_square(*e):
            raise GeometryError(f"ellipse {e} leaves the unit square")
    for i in range(len(config.ellipses)):
        for j in range(i + 1, len(config.ellipses)):
            if not _ellipses_disjoint(config.ellipses[i], config.ellipses[j]):
                raise GeometryError("ellipses overlap")


def min_angles(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    x = nodes[elements]
    out = np.full(len(elements), np.inf)
    for a in range(3):
        u = x[:, (a + 1) % 3] - x[:, a]
        v = x[:, (a + 2) % 3] - x[:, a]
        cosang = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        out = np.minimum(out, np.degrees(np.arccos(np.clip(cosang, -1, 1))))
    return out


def _triangulate(config: SpecimenConfig, h: float) -> Mesh:
    bd, holes = _boundary_for(config, h)
    pslg = {"vertices": np.array(bd.points), "segments": np.array(bd.segments)}
    if holes:
        pslg["holes"] = np.array(holes, dtype=float)
    max_area = 0.5 * math.sqrt(3) / 2 * h * h
    # q: quality, Y: no Steiner points on boundary segments
    try:
        out = triangle.triangulate(pslg, f"pq{config.min_angle + 8:.0f}Ya{max_area:.10f}")
    except Exception as exc:  # Triangle signals failure through generic errors
        raise MeshingFailure(str(exc)) from exc
    nodes = np.asarray(out["vertices"], dtype=float)
    elements = np.asarray(out["triangles"], dtype=np.int64)
    # Triangle preserves input vertex numbering, so boundary tags carry over
    n_b = len(bd.points)
    if not np.array_equal(nodes[:n_b], np.array(bd.points)):
        raise MeshingFailure("boundary vertices were moved")
    boundaries: dict[str, list] = {}
    for k, tags in enumerate(bd.tags):
        for t in tags:
            boundaries.setdefault(t, []).append(k)
    if config.kind == "validation":
        boundaries["corner"] = [0]
    # orient counter-clockwise
    x = nodes[elements]
    area = 0.5 * ((x[:, 1, 0] - x[:, 0, 0]) * (x[:, 2, 1] - x[:, 0, 1])
                  - (x[:, 1, 1] - x[:, 0, 1]) * (x[:, 2, 0] - x[:, 0, 0]))
    flip = area < 0
    elements[flip] = elements[flip][:, [0, 2, 1]]
    return Mesh(nodes, elements, boundaries)


def generate_specimen(config: SpecimenConfig) -> Mesh:
    """Quality triangulation of the unit plate minus its hole(s), near the target size."""
    _validate_geometry(config)
    target = config.target_node_count
    h = math.sqrt(_domain_area(config) / (target * math.sqrt(3) / 2))
    best = None
    for _ in range(12):
        mesh = _triangulate(config, h)
        err = mesh.n_nodes / target - 1.0
        if best is None or abs(err) < abs(best[0]):
            best = (err, mesh)
        if abs(err) <= 0.03:
            break
        h *= math.sqrt(mesh.n_nodes / target)
    mesh = best[1]
    angle = min_angles(mesh.nodes, mesh.elements).min()
    if angle < config.min_angle:
        raise MeshingFailure(f"minimum angle {angle:.1f} below {config.min_angle}")
    if abs(best[0]) > 0.1:
        raise MeshingFailure(f"node count {mesh.n_nodes} misses target {target}")
    log.info("%s specimen: %d nodes, %d elements, min angle %.1f",
             config.kind, mesh.n_nodes, mesh.n_elements, angle)
    return mesh


# --------------------------------------------------------------------------
# synthetic experiments
# --------------------------------------------------------------------------

def boundary_conditions(config: SpecimenConfig) -> list[BoundaryCondition]:
    if config.kind == "training":
        return [
            BoundaryCondition("left", "x", 0.0),
            BoundaryCondition("right", "x", config.biaxial_ratio),
            BoundaryCondition("bottom", "y", 0.0),
            BoundaryCondition("top", "y", 1.0),
        ]
    return [
        BoundaryCondition("bottom", "y", 0.0),
        BoundaryCondition("corner", "x", 0.0),
        BoundaryCondition("top", "y", 1.0),
    ]


def run_experiment(mesh: Mesh, config: SpecimenConfig, model, newton_tol: float = 1e-10,
                   deltas: Sequence[float] | None = None) -> SnapshotDataset:
    """Simulate the displacement-controlled test and record a raw dataset."""
    model_id = getattr(model, "model_id", "custom")
    deltas = tuple(deltas) if deltas is not None else config.schedule(model_id)
    bcs = boundary_conditions(config)
    result = solve_quasistatic(mesh, bcs, model, deltas, newton_tol=newton_tol)
    specs = tuple((bc.tag, bc.direction, bc.measured) for bc in bcs)
    partition = partition_dofs(mesh, specs)
    prov = {
        "model_id": model_id, "sigma_u": 0.0, "seed": None, "stage": "raw",
        "specimen": config.kind, "newton_tol": newton_tol,
        "newton_iterations": list(result.iterations),
    }
    if config.kind == "training":
        prov["biaxial_ratio"] = config.biaxial_ratio
    return SnapshotDataset(mesh, partition, result.displacements, result.reactions,
                           constraint_specs=specs, deltas=tuple(float(d) for d in deltas),
                           provenance=prov)


# --------------------------------------------------------------------------
# noise and denoising
# --------------------------------------------------------------------------

def snapshot_noise(seed: int, t: int, n_nodes: int) -> np.ndarray:
    """Standard normal draws for snapshot ``t``, one per (node, direction).

    A Philox counter-based stream keyed by (seed, t) makes every snapshot
    independent of generation order.
    """
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(t)])))
    return gen.standard_normal((n_nodes, 2))


def add_noise(ds: SnapshotDataset, sigma_u: float, seed: int) -> SnapshotDataset:
    u = ds.displacements.copy()
    if sigma_u > 0:
        for t in range(ds.n_snapshots):
            u[t] += sigma_u * snapshot_noise(seed, t, ds.mesh.n_nodes)
    return ds.evolve("noisy", displacements=u,
                     provenance={"sigma_u": float(sigma_u), "seed": int(seed)})


def gaussian_kernel(X: np.ndarray, Y: np.ndarray, bandwidth: float) -> np.ndarray:
    d2 = np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=-1)
    return np.exp(-0.5 * d2 / bandwidth ** 2)


def krr_smooth(X: np.ndarray, values: np.ndarray, bandwidth: float, ridge: float) -> np.ndarray:
    """Gaussian-kernel ridge regression of ``values`` (n, m) fitted and evaluated at X."""
    K = gaussian_kernel(X, X, bandwidth)
    A = K + ridge * np.eye(len(X))
    try:
        c, low = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise SingularKernel(str(exc)) from exc
    d = np.abs(np.diag(c))
    if d.min() ** 2 <= len(X) * np.finfo(float).eps * d.max() ** 2:
        raise SingularKernel(f"kernel system numerically singular (pivot {d.min():.2e})")
    alpha = scipy.linalg.cho_solve((c, low), values)
    return K @ alpha


def denoise_krr(ds: SnapshotDataset, bandwidth: float = 0.05,
                ridge: float | None = None) -> SnapshotDataset:
    """Smooth every snapshot and component with one shared kernel factorization."""
    X = ds.mesh.nodes
    n = len(X)
    ridge = 1e-8 * n if ridge is None else ridge
    Y = ds.displacements.transpose(1, 0, 2).reshape(n, -1)
    smooth = krr_smooth(X, Y, bandwidth, ridge)
    u = smooth.reshape(n, ds.n_snapshots, 2).transpose(1, 0, 2)
    return ds.evolve("denoised", displacements=u,
                     provenance={"krr_bandwidth": bandwidth, "krr_ridge": ridge})


# --------------------------------------------------------------------------
# projection onto a coarse mesh
# --------------------------------------------------------------------------

def locate_points(mesh: Mesh, points: np.ndarray, tol: float = 1e-9):
    """Containing element and barycentric coordinates of each point."""
    nodes, elements = mesh.nodes, mesh.elements
    x = nodes[elements]
    centroids = x.mean(axis=1)
    tree = cKDTree(centroids)
    T = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]], axis=-1)  # (n_e, 2, 2)
    Tinv = np.linalg.inv(T)

    def bary(e, p):
        lam = np.einsum("...ij,...j->...i", Tinv[e], p - x[e, 0])
        return np.concatenate([1.0 - lam.sum(axis=-1, keepdims=True), lam], axis=-1)

    k = min(12, len(elements))
    _, cand = tree.query(points, k=k)
    cand = cand.reshape(len(points), -1)
    elem = np.empty(len(points), dtype=np.int64)
    coords = np.empty((len(points), 3))
    for i, p in enumerate(points):
        b = bary(cand[i], p)
        score = b.min(axis=1)
        j = int(np.argmax(score))
        if score[j] < -tol:
            b = bary(np.arange(len(elements)), p)
            score = b.min(axis=1)
            j = int(np.argmax(score))
            if score[j] < -tol:
                raise PointOutsideDomain(f"point {p} lies outside the mesh")
            elem[i], coords[i] = j, b[j]
        else:
            elem[i], coords[i] = cand[i, j], b[j]
    coords = np.clip(coords, 0.0, None)
    coords /= coords.sum(axis=1, keepdims=True)
    return elem, coords


def interpolate(mesh: Mesh, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Linear shape-function interpolation of nodal ``values`` (..., n_n, d) at points."""
    elem, coords = locate_points(mesh, points)
    conn = mesh.elements[elem]  # (m, 3)
    return np.einsum("mk,...mkd->...md", coords, values[..., conn, :])


def project_to_coarse(fine: SnapshotDataset, coarse: Mesh) -> SnapshotDataset:
    u = interpolate(fine.mesh, fine.displacements, coarse.nodes)
    partition = partition_dofs(coarse, fine.constraint_specs)
    return fine.evolve("projected", mesh=coarse, partition=partition, displacements=u,
                       provenance={"fine_node_count": fine.mesh.n_nodes,
                                   "coarse_node_count": coarse.n_nodes})


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def write_mesh(mesh: Mesh, path: Path):
    _write_json(path, {
        "version": FORMAT_VERSION,
        "nodes": mesh.nodes.tolist(),
        "elements": mesh.elements.tolist(),
        "boundaries": {k: v.tolist() for k, v in mesh.boundaries.items()},
    })


def read_mesh(path: Path) -> Mesh:
    doc = _load_json(path)
    _check_version(doc, path.name)
    for key in ("nodes", "elements", "boundaries"):
        if key not in doc:
            raise SchemaError(f"{path.name}.{key}", "missing")
    try:
        return Mesh(np.array(doc["nodes"], dtype=float).reshape(-1, 2),
                    np.array(doc["elements"], dtype=np.int64).reshape(-1, 3),
                    {k: np.array(v, dtype=np.int64) for k, v in doc["boundaries"].items()})
    except ValueError as exc:
        raise SchemaError(path.name, str(exc)) from exc


def _load_json(path: Path):
    if not path.exists():
        raise SchemaError(path.name, "file missing")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(path.name, f"invalid JSON: {exc}") from exc


def _check_version(doc, where):
    if not isinstance(doc, dict) or doc.get("version") != FORMAT_VERSION:
        got = doc.get("version") if isinstance(doc, dict) else None
        raise SchemaError(f"{where}.version", f"unsupported version {got!r}, expected "
                                              f"{FORMAT_VERSION!r}")


def write_dataset(ds: SnapshotDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_mesh(ds.mesh, path / "mesh.json")
    n_t, n_n, _ = ds.displacements.shape
    with open(path / "snapshots.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("t,node,ux,uy\n")
        for t in range(n_t):
            for a in range(n_n):
                ux, uy = ds.displacements[t, a]
                fh.write(f"{t},{a},{ux:.17g},{uy:.17g}\n")
    constraints = []
    p = ds.partition
    specs = list(ds.constraint_specs)
    measured = [s for s in specs if (s[2] if len(s) > 2 else True)]
    for k, (name, dofs) in enumerate(zip(p.group_names, p.fixed_groups)):
        entry = {"name": name, "dofs": [[int(d // 2), int(d % 2)] for d in dofs],
                 "reactions": ds.reactions[:, k].tolist()}
        if k < len(measured):
            entry["tag"], entry["direction"] = measured[k][0], measured[k][1]
        constraints.append(entry)
    unmeasured = [s for s in specs if len(s) > 2 and not s[2]]
    if p.unmeasured.size:
        constraints.append({"name": "unmeasured",
                            "dofs": [[int(d // 2), int(d % 2)] for d in p.unmeasured],
                            "reactions": None, "measured": False,
                            "specs": [list(s[:2]) for s in unmeasured]})
    _write_json(path / "constraints.json", constraints)
    prov = dict(ds.provenance)
    prov["version"] = FORMAT_VERSION
    prov["deltas"] = list(ds.deltas)
    prov["constraint_specs"] = [list(s) for s in specs]
    _write_json(path / "provenance.json", prov)
    return path


def read_dataset(path) -> SnapshotDataset:
    path = Path(path)
    mesh = read_mesh(path / "mesh.json")
    snap = path / "snapshots.csv"
    if not snap.exists():
        raise SchemaError("snapshots.csv", "file missing")
    with open(snap, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "t,node,ux,uy":
            raise SchemaError("snapshots.csv.header", f"unexpected header {header!r}")
        rows = np.array([[float(v) for v in r] for r in csv.reader(fh) if r], dtype=float)
    rows = rows.reshape(-1, 4)
    n_t = int(rows[:, 0].max()) + 1 if len(rows) else 0
    if len(rows) != n_t * mesh.n_nodes:
        raise SchemaError("snapshots.csv", f"{len(rows)} rows for {n_t} snapshots of "
                                           f"{mesh.n_nodes} nodes")
    order = np.lexsort((rows[:, 1], rows[:, 0]))
    u = rows[order, 2:].reshape(n_t, mesh.n_nodes, 2)

    cons = _load_json(path / "constraints.json")
    if not isinstance(cons, list):
        raise SchemaError("constraints.json", "expected a list")
    groups, names, reactions, unmeasured = [], [], [], []
    for k, c in enumerate(cons):
        for key in ("name", "dofs", "reactions"):
            if key not in c:
                raise SchemaError(f"constraints.json[{k}].{key}", "missing")
        dofs = np.array([2 * a + i for a, i in c["dofs"]], dtype=np.int64)
        if c.get("measured", True) is False:
            unmeasured.append(dofs)
            continue
        if c["reactions"] is None or len(c["reactions"]) != n_t:
            raise SchemaError(f"constraints.json[{k}].reactions",
                              f"expected {n_t} values")
        groups.append(dofs)
        names.append(c["name"])
        reactions.append(c["reactions"])
    taken = np.zeros(2 * mesh.n_nodes, dtype=bool)
    for g in groups + unmeasured:
        if np.any(taken[g]):
            raise SchemaError("constraints.json", "constraint groups overlap")
        taken[g] = True
    partition = DofPartition(
        n_nodes=mesh.n_nodes, free=np.flatnonzero(~taken), fixed_groups=tuple(groups),
        group_names=tuple(names),
        unmeasured=np.sort(np.concatenate(unmeasured)) if unmeasured else np.zeros(0, np.int64))
    R = np.array(reactions, dtype=float).T.reshape(n_t, len(groups))

    prov = _load_json(path / "provenance.json")
    _check_version(prov, "provenance.json")
    prov = dict(prov)
    prov.pop("version")
    deltas = tuple(prov.pop("deltas", ()))
    specs = tuple(tuple(s) for s in prov.pop("constraint_specs", ()))
    return SnapshotDataset(mesh, partition, u, R, constraint_specs=specs, deltas=deltas,
                           provenance=prov)
