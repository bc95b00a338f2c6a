"""Quasi-static plane-strain finite elements on linear triangles.

The internal-force assembly and the free/fixed residual split below are the
single implementation used by the Newton solver, the dataset checks and the
training loss.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ElementInversion, NoConvergence, NonPositiveJacobian
from .mesh import DIRECTIONS, DofPartition, Mesh, MeshGeometry, partition_dofs

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# shared residual path
# --------------------------------------------------------------------------

@partial(jax.jit, static_argnames="n_nodes")
def assemble_forces(P, grad_N, area, elements, n_nodes):
    """Nodal internal forces f^a_i = sum_e A_e P_ij grad_j N^a for one state.

    ``P`` is (n_e, 3, 3); only the in-plane block contributes. Returns (n_nodes, 2).
    """
    fe = area[:, None, None] * jnp.einsum("eij,eaj->eai", P[:, :2, :2], grad_N)
    return jax.ops.segment_sum(fe.reshape(-1, 2), elements.reshape(-1),
                               num_segments=n_nodes)


def split_forces(f, free, group_ids, n_groups):
    """Free-DOF residuals and per-group force sums from nodal forces (n_nodes, 2).

    ``group_ids`` holds, for every constrained measured DOF, the group it
    belongs to; ``free`` and the DOF lists are flat indices.
    """
    flat = f.reshape(-1)
    free_res = flat[free]
    dofs, gid = group_ids
    sums = jax.ops.segment_sum(flat[dofs], gid, num_segments=n_groups)
    return free_res, sums


def group_layout(partition: DofPartition):
    if partition.n_groups:
        dofs = np.concatenate(partition.fixed_groups)
        gid = np.concatenate([np.full(len(g), k) for k, g in enumerate(partition.fixed_groups)])
    else:
        dofs = np.zeros(0, dtype=np.int64)
        gid = np.zeros(0, dtype=np.int64)
    return dofs.astype(np.int64), gid.astype(np.int64)


def _check_inversion(F: np.ndarray):
    J = np.linalg.det(F)
    bad = np.flatnonzero(~(J > 0))
    if bad.size:
        raise ElementInversion(bad[0])


def internal_forces(mesh: Mesh, nodal_disp, model) -> np.ndarray:
    geom = mesh.geometry
    F = geom.deformation_gradients(nodal_disp)
    _check_inversion(F)
    P = model.stress(F)
    return np.asarray(assemble_forces(jnp.asarray(P), geom.grad_N, geom.area,
                                      geom.elements, geom.n_nodes))


def residual_check(mesh: Mesh, nodal_disp, model, partition: DofPartition):
    """Return (free residuals, per-group force sums) for one displacement state."""
    f = internal_forces(mesh, nodal_disp, model)
    free_res, sums = split_forces(jnp.asarray(f), partition.free, group_layout(partition),
                                  partition.n_groups)
    return np.asarray(free_res), np.asarray(sums)


# --------------------------------------------------------------------------
# Newton solver
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryCondition:
    """Prescribed displacement ``value(delta)`` (or ``value * delta``) on one edge."""

    tag: str
    direction: str
    value: float | Callable[[float], float] = 0.0
    measured: bool = True

    def prescribed(self, delta: float) -> float:
        if callable(self.value):
            return float(self.value(delta))
        return float(self.value) * delta


@dataclass
class SolveResult:
    deltas: np.ndarray
    displacements: np.ndarray  # (n_t, n_n, 2)
    reactions: np.ndarray  # (n_t, n_groups)
    group_names: tuple
    iterations: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)  # per step, per iteration


def assemble_tangent(geom: MeshGeometry, Ct: np.ndarray) -> sp.csr_matrix:
    """Global stiffness from per-element tangents ``Ct`` (n_e, 3, 3, 3, 3)."""
    C2 = Ct[:, :2, :2, :2, :2]
    ke = np.einsum("e,eaj,eijkl,ebl->eaibk", geom.area, geom.grad_N, C2, geom.grad_N)
    ke = ke.reshape(len(geom.area), 6, 6)
    dofs = (2 * geom.elements[:, :, None] + np.arange(2)).reshape(-1, 6)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    n = 2 * geom.n_nodes
    return sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()


class _Problem:
    def __init__(self, mesh, bcs, model):
        self.mesh = mesh
        self.geom = mesh.geometry
        self.model = model
        self.bcs = list(bcs)
        specs = [(bc.tag, bc.direction, bc.measured) for bc in self.bcs]
        self.partition = partition_dofs(mesh, specs)
        # which bc owns each constrained dof (first listed wins, like the partition)
        owner = np.full(2 * mesh.n_nodes, -1)
        for k, bc in enumerate(self.bcs):
            d = 2 * mesh.boundaries[bc.tag] + DIRECTIONS[bc.direction]
            d = d[owner[d] < 0]
            owner[d] = k
        self.owner = owner
        self.fixed = np.flatnonzero(owner >= 0)
        self.free = np.flatnonzero(owner < 0)
        self.layout = group_layout(self.partition)

    def dirichlet(self, delta):
        vals = np.array([bc.prescribed(delta) for bc in self.bcs])
        return vals[self.owner[self.fixed]]

    def forces(self, u):
        F = self.geom.deformation_gradients(u.reshape(-1, 2))
        _check_inversion(F)
        return F, internal_forces_from_F(self.geom, F, self.model)

    def stiffness(self, F):
        return assemble_tangent(self.geom, self.model.tangent(F))

    def reactions(self, u):
        _, sums = residual_check(self.mesh, u.reshape(-1, 2), self.model, self.partition)
        return sums


def internal_forces_from_F(geom: MeshGeometry, F: np.ndarray, model) -> np.ndarray:
    P = model.stress(F)
    return np.asarray(assemble_forces(jnp.asarray(P), geom.grad_N, geom.area,
                                      geom.elements, geom.n_nodes)).reshape(-1)


def _newton_step(prob: _Problem, u0, delta, tol, max_iters):
    """Solve one load level starting from converged ``u0``. Returns (u, norms)."""
    u = u0.copy()
    free, fixed = prob.free, prob.fixed
    du_d = prob.dirichlet(delta) - u[fixed]
    norms = []
    # consistent predictor: carry the Dirichlet increment through the tangent
    F, f = prob.forces(u)
    K = prob.stiffness(F)
    if np.any(du_d != 0):
        rhs = -(f[free] + K[free][:, fixed] @ du_d)
        u[fixed] += du_d
        u[free] += spla.spsolve(K[free][:, free].tocsc(), rhs)
        F, f = prob.forces(u)
        K = None
    for it in range(max_iters + 1):
        r = f[free]
        norm = float(np.max(np.abs(r))) if r.size else 0.0
        norms.append(norm)
        if not np.isfinite(norm):
            raise NoConvergence(None, norm)
        if norm <= tol:
            return u, norms
        if it == max_iters:
            break
        if K is None:
            K = prob.stiffness(F)
        u[free] -= spla.spsolve(K[free][:, free].tocsc(), r)
        F, f = prob.forces(u)
        K = None
    raise NoConvergence(None, norms[-1])


def solve_quasistatic(mesh: Mesh, bcs: Sequence[BoundaryCondition], model,
                      deltas: Sequence[float], newton_tol: float = 1e-10,
                      max_iters: int = 25, max_bisections: int = 4) -> SolveResult:
    """Displacement-controlled load stepping with Newton-Raphson.

    A failed increment is retried as two half increments, recursively up to
    ``max_bisections`` levels.
    """
    deltas = np.asarray(deltas, dtype=float)
    if np.any(np.diff(deltas) < 0):
        raise ValueError("deltas must be ascending")
    prob = _Problem(mesh, bcs, model)
    n_dof = 2 * mesh.n_nodes
    u = np.zeros(n_dof)
    d_prev = 0.0
    disps, reacts, iters, norms_all = [], [], [], []

    def advance(u, d0, d1, depth, step):
        try:
            return _newton_step(prob, u, d1, newton_tol, max_iters)
        except (NoConvergence, ElementInversion, NonPositiveJacobian, np.linalg.LinAlgError) as exc:
            if depth >= max_bisections:
                if isinstance(exc, ElementInversion):
                    raise ElementInversion(exc.element_index, step) from exc
                res = exc.final_residual if isinstance(exc, NoConvergence) else float("nan")
                raise NoConvergence(step, res) from exc
            mid = 0.5 * (d0 + d1)
            log.debug("step %d: bisecting [%g, %g] (depth %d)", step, d0, d1, depth + 1)
            u_mid, n1 = advance(u, d0, mid, depth + 1, step)
            u_end, n2 = advance(u_mid, mid, d1, depth + 1, step)
            return u_end, n1 + n2

    for step, delta in enumerate(deltas):
        u, norms = advance(u, d_prev, delta, 0, step)
        d_prev = delta
        disps.append(u.reshape(-1, 2).copy())
        reacts.append(prob.reactions(u))
        iters.append(len(norms) - 1)
        norms_all.append(norms)
    n_g = prob.partition.n_groups
    return SolveResult(
        deltas=deltas,
        displacements=np.array(disps).reshape(len(deltas), mesh.n_nodes, 2),
        reactions=np.array(reacts).reshape(len(deltas), n_g),
        group_names=prob.partition.group_names,
        iterations=iters,
        residual_norms=norms_all,
    )
