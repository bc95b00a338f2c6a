"""Linear triangle meshes, single-point quadrature and deformation gradients.

All indices are 0-based. A degree of freedom (node ``a``, direction ``i``) has the
flat index ``2 * a + i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateElement, UnknownBoundaryTag

AREA_TOL = 1e-14
DIRECTIONS = {"x": 0, "y": 1, 0: 0, 1: 1}


def _signed_areas(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (nodes[elements[:, k]] for k in range(3))
    e1 = p1 - p0
    e2 = p2 - p0
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


@dataclass(frozen=True, eq=False)
class Mesh:
    """Reference-configuration triangulation.

    ``nodes`` is (n_n, 2), ``elements`` is (n_e, 3) with counter-clockwise
    orientation, and ``boundaries`` maps a boundary name to sorted node indices.
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundaries: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise ValueError(f"nodes must be (n, 2), got {nodes.shape}")
        if elements.ndim != 2 or elements.shape[1] != 3:
            raise ValueError(f"elements must be (m, 3), got {elements.shape}")
        if elements.size and (elements.min() < 0 or elements.max() >= len(nodes)):
            raise ValueError("element connectivity references a missing node")
        boundaries = {}
        for name, idx in self.boundaries.items():
            idx = np.unique(np.asarray(idx, dtype=np.int64))
            if idx.size and (idx.min() < 0 or idx.max() >= len(nodes)):
                raise ValueError(f"boundary {name!r} references a missing node")
            boundaries[name] = idx
        nodes.flags.writeable = False
        elements.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "boundaries", boundaries)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def geometry(self) -> "MeshGeometry":
        return MeshGeometry.from_mesh(self)

    def signed_areas(self) -> np.ndarray:
        return _signed_areas(self.nodes, self.elements)


@dataclass(frozen=True)
class ElementGeometry:
    grad_N: np.ndarray  # (3, 2)
    area: float


@dataclass(frozen=True, eq=False)
class MeshGeometry:
    """Shape-function gradients and areas of every element, stacked."""

    elements: np.ndarray  # (n_e, 3)
    grad_N: np.ndarray  # (n_e, 3, 2)
    area: np.ndarray  # (n_e,)
    n_nodes: int

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "MeshGeometry":
        nodes, elements = mesh.nodes, mesh.elements
        area = _signed_areas(nodes, elements)
        bad = np.flatnonzero(area <= AREA_TOL)
        if bad.size:
            raise DegenerateElement(
                f"element {int(bad[0])} has signed area {area[bad[0]]:.3e}"
            )
        x = nodes[elements]  # (n_e, 3, 2)
        # grad N^a = perp(opposite edge) / (2A)
        grad = np.empty_like(x)
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            grad[:, a, 0] = x[:, b, 1] - x[:, c, 1]
            grad[:, a, 1] = x[:, c, 0] - x[:, b, 0]
        grad /= (2.0 * area)[:, None, None]
        return cls(elements=elements, grad_N=grad, area=area, n_nodes=mesh.n_nodes)

    def deformation_gradients(self, disp: np.ndarray) -> np.ndarray:
        """F = I + sum_a u^a (x) grad N^a for every element, plane-strain embedded.

        ``disp`` is (n_n, 2) or (n_t, n_n, 2); the result is (..., n_e, 3, 3).
        """
        disp = np.asarray(disp, dtype=float)
        ue = disp[..., self.elements, :]  # (..., n_e, 3, 2)
        H = np.einsum("...eai,eaj->...eij", ue, self.grad_N)
        F = np.zeros(H.shape[:-2] + (3, 3))
        F[..., :2, :2] = H
        F[..., 0, 0] += 1.0
        F[..., 1, 1] += 1.0
        F[..., 2, 2] = 1.0
        return F


def element_geometry(mesh: Mesh, element_index: int) -> ElementGeometry:
    if not 0 <= element_index < mesh.n_elements:
        raise IndexError(f"element {element_index} does not exist")
    x = mesh.nodes[mesh.elements[element_index]]
    area = 0.5 * ((x[1, 0] - x[0, 0]) * (x[2, 1] - x[0, 1])
                  - (x[1, 1] - x[0, 1]) * (x[2, 0] - x[0, 0]))
    if area <= AREA_TOL:
        raise DegenerateElement(f"element {element_index} has signed area {area:.3e}")
    grad = np.array([
        [x[1, 1] - x[2, 1], x[2, 0] - x[1, 0]],
        [x[2, 1] - x[0, 1], x[0, 0] - x[2, 0]],
        [x[0, 1] - x[1, 1], x[1, 0] - x[0, 0]],
    ]) / (2.0 * area)
    return ElementGeometry(grad_N=grad, area=float(area))


def deformation_gradient(geom: ElementGeometry, nodal_disp) -> np.ndarray:
    """Plane-strain 3x3 deformation gradient of one element.

    det F is not checked here.
    """
    u = np.asarray(nodal_disp, dtype=float).reshape(3, 2)
    F = np.eye(3)
    F[:2, :2] += u.T @ geom.grad_N
    return F


@dataclass(frozen=True, eq=False)
class DofPartition:
    """Split of observed DOFs into free DOFs and reaction-force groups.

    DOFs are stored as flat indices ``2 * node + direction``. Dirichlet DOFs
    whose reaction is not measured appear in ``unmeasured`` and take part in
    neither sum of the loss.
    """

    n_nodes: int
    free: np.ndarray
    fixed_groups: tuple[np.ndarray, ...]
    group_names: tuple[str, ...]
    unmeasured: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_groups(self) -> int:
        return len(self.fixed_groups)

    @property
    def constrained(self) -> np.ndarray:
        parts = [*self.fixed_groups, self.unmeasured]
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)

    def group_index(self) -> np.ndarray:
        """Per-DOF group id: -1 free, 0..n_groups-1 fixed, n_groups unmeasured."""
        gid = np.full(2 * self.n_nodes, -1, dtype=np.int64)
        for k, dofs in enumerate(self.fixed_groups):
            gid[dofs] = k
        gid[self.unmeasured] = self.n_groups
        return gid

    @staticmethod
    def as_pairs(dofs: np.ndarray) -> list[tuple[int, int]]:
        return [(int(d // 2), int(d % 2)) for d in dofs]


def partition_dofs(mesh: Mesh, dirichlet_specs: Iterable[Sequence]) -> DofPartition:
    """Build the DOF partition from ``(boundary_tag, direction, measured)`` specs.

    A DOF claimed by several specs stays with the first one listed.
    """
    taken = np.zeros(2 * mesh.n_nodes, dtype=bool)
    groups, names, unmeasured = [], [], []
    for spec in dirichlet_specs:
        tag, direction = spec[0], spec[1]
        measured = bool(spec[2]) if len(spec) > 2 else True
        if tag not in mesh.boundaries:
            raise UnknownBoundaryTag(tag)
        i = DIRECTIONS[direction]
        dofs = 2 * mesh.boundaries[tag] + i
        dofs = dofs[~taken[dofs]]
        taken[dofs] = True
        if measured:
            groups.append(dofs)
            names.append(f"{tag}_{'xy'[i]}")
        else:
            unmeasured.append(dofs)
    free = np.flatnonzero(~taken)
    um = np.sort(np.concatenate(unmeasured)) if unmeasured else np.zeros(0, dtype=np.int64)
    return DofPartition(n_nodes=mesh.n_nodes, free=free, fixed_groups=tuple(groups),
                        group_names=tuple(names), unmeasured=um)


def grid_mesh(nx: int, ny: int, width: float = 1.0, height: float = 1.0) -> Mesh:
    """Structured mesh of a rectangle, each cell split along its diagonal."""
    xs = np.linspace(0.0, width, nx)
    ys = np.linspace(0.0, height, ny)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    elements = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            n0 = j * nx + i
            n1, n2, n3 = n0 + 1, n0 + nx + 1, n0 + nx
            elements.append((n0, n1, n2))
            elements.append((n0, n2, n3))
    idx = np.arange(nx * ny).reshape(ny, nx)
    boundaries = {
        "bottom": idx[0, :], "top": idx[-1, :],
        "left": idx[:, 0], "right": idx[:, -1],
    }
    return Mesh(nodes, np.array(elements), boundaries)
