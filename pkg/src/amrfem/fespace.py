"""Global finite element spaces on box meshes.

CG spaces number the Lagrange nodes of all cells on an integer lattice, so
that nodes shared by neighbouring cells coincide exactly. Nodes on a fine
facet that do not coincide with a node of the coarse neighbour are hanging;
their values are fixed linear combinations of the coarse facet nodes. DG
spaces give every cell its own set of nodes.

Functions passed to this module are vectorised: ``g(x)`` takes an array of
points of shape (n, d) and returns n values.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import CellTransferMap, ForestMesh, UnbalancedMeshError, region_set_id
from .reference import ReferenceElement

CG = "CG"
DG = "DG"


@dataclass
class StrongBoundaryConditions:
    """Dirichlet data attached to boundary regions (set ids 1 .. 3^d - 1)."""
    conditions: list = field(default_factory=list)

    def add(self, set_id: int, func) -> "StrongBoundaryConditions":
        if any(s == set_id for s, _ in self.conditions):
            raise ValueError(f"set id {set_id} already has a condition")
        self.conditions.append((int(set_id), func))
        return self

    @classmethod
    def everywhere(cls, dim: int, func) -> "StrongBoundaryConditions":
        """Same function on every boundary region of the box."""
        return cls([(s, func) for s in range(1, 3 ** dim)])

    @property
    def set_ids(self) -> list[int]:
        return [s for s, _ in self.conditions]

    def function(self, set_id: int):
        for s, f in self.conditions:
            if s == set_id:
                return f
        raise KeyError(set_id)


@dataclass(frozen=True)
class HangingConstraint:
    dof: int
    masters: tuple[int, ...]
    coefficients: tuple[float, ...]


class FeSpace:
    """Scalar Lagrange space of order ``order`` on ``mesh``.

    Global DoF ids are ordered free, then fixed, then hanging, so that
    ``num_free`` is the size of the linear system.

    Attributes
    ----------
    cell_dofs : ndarray, shape (num_cells, (q+1)^d)
        Local to global DoF map.
    dof_coords : ndarray, shape (num_dofs, d)
        Physical node locations.
    dof_set_ids : ndarray
        Region set id of every node (CG only, zeros for DG).
    constraint_matrix : scipy.sparse.csr_matrix
        Shape (num_hanging, num_free + num_fixed); hanging values are this
        matrix applied to the concatenated free and fixed values.
    """

    def __init__(self, mesh, order, conformity, cell_dofs, dof_coords, dof_set_ids,
                 num_free, num_fixed, constraints, bcs=None):
        self.mesh = mesh
        self.order = order
        self.conformity = conformity
        self.elem = ReferenceElement(mesh.dim, order)
        self.cell_dofs = cell_dofs
        self.dof_coords = dof_coords
        self.dof_set_ids = dof_set_ids
        self.num_free = num_free
        self.num_fixed = num_fixed
        self.constraints = constraints
        self.bcs = bcs
        for arr in (cell_dofs, dof_coords, dof_set_ids):
            arr.setflags(write=False)
        rows = np.repeat(np.arange(len(constraints)), [len(c.masters) for c in constraints])
        cols = np.array([m for c in constraints for m in c.masters], dtype=np.int64)
        vals = np.array([v for c in constraints for v in c.coefficients])
        self.constraint_matrix = sp.csr_matrix(
            (vals, (rows, cols)), shape=(len(constraints), num_free + num_fixed))

    def __repr__(self):
        return (f"FeSpace({self.conformity}, q={self.order}, free={self.num_free}, "
                f"fixed={self.num_fixed}, hanging={self.num_hanging})")

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @property
    def num_hanging(self) -> int:
        return len(self.constraints)

    @property
    def num_dofs(self) -> int:
        return self.num_free + self.num_fixed + self.num_hanging

    @property
    def free_dofs(self) -> np.ndarray:
        return np.arange(self.num_free)

    @property
    def fixed_dofs(self) -> np.ndarray:
        return np.arange(self.num_free, self.num_free + self.num_fixed)

    @property
    def hanging_dofs(self) -> np.ndarray:
        start = self.num_free + self.num_fixed
        return np.arange(start, start + self.num_hanging)

    def cells_with_hanging(self) -> np.ndarray:
        return np.any(self.cell_dofs >= self.num_free + self.num_fixed, axis=1)

    def prolongation(self) -> sp.csr_matrix:
        """Map from (free, fixed) values to all DoF values, shape (num_dofs, num_true)."""
        n = self.num_free + self.num_fixed
        return sp.vstack([sp.identity(n, format="csr"), self.constraint_matrix]).tocsr()


@dataclass
class FeFunction:
    space: FeSpace
    free_values: np.ndarray
    fixed_values: np.ndarray
    hanging_values: np.ndarray

    @classmethod
    def zeros(cls, space: FeSpace) -> "FeFunction":
        return cls(space, np.zeros(space.num_free), np.zeros(space.num_fixed),
                   np.zeros(space.num_hanging))

    @classmethod
    def from_values(cls, space: FeSpace, values) -> "FeFunction":
        values = np.asarray(values, dtype=float)
        nf, nd = space.num_free, space.num_fixed
        return cls(space, values[:nf].copy(), values[nf:nf + nd].copy(),
                   values[nf + nd:].copy())

    def values(self) -> np.ndarray:
        """All DoF values in global numbering."""
        return np.concatenate([self.free_values, self.fixed_values, self.hanging_values])

    def cell_values(self) -> np.ndarray:
        return self.values()[self.space.cell_dofs]

    def evaluate(self, cells, xi) -> np.ndarray:
        """Values at reference points ``xi`` (n, d) in each of ``cells``, shape (len(cells), n)."""
        phi = self.space.elem.values(xi)
        return self.cell_values()[np.asarray(cells)] @ phi.T


def _node_lattice(mesh: ForestMesh, order: int) -> np.ndarray:
    # Lattice coordinates (scaled by q) of every local node, shape (N, nloc, d).
    anchors, sizes, _ = mesh.lattice
    mi = ReferenceElement(mesh.dim, order).node_multi_index
    return order * anchors[:, None, :] + sizes[:, None, None] * mi[None, :, :]


def _node_set_ids(mesh: ForestMesh, pts: np.ndarray, order: int) -> np.ndarray:
    _, _, ext = mesh.lattice
    top = order * ext
    codes = np.where(pts == 0, 0, np.where(pts == top, 1, 2))
    table = {}
    out = np.empty(len(pts), dtype=np.int64)
    for k, code in enumerate(map(tuple, codes)):
        sid = table.get(code)
        if sid is None:
            sid = table[code] = region_set_id(code)
        out[k] = sid
    return out


def build_fe_space(mesh: ForestMesh, order: int, conformity: str = CG,
                   bcs: StrongBoundaryConditions | None = None) -> FeSpace:
    """Number the DoFs of a CG or DG space.

    Parameters
    ----------
    mesh : ForestMesh
    order : int
        Polynomial order q in 1..4.
    conformity : {"CG", "DG"}
    bcs : StrongBoundaryConditions
        Required for CG, ignored for DG (boundary data enters weakly).

    Raises
    ------
    UnbalancedMeshError
        CG on a mesh that violates 2:1 balance.
    ValueError
        Missing bcs for CG or a condition on a non-boundary set id.
    """
    conformity = conformity.upper()
    elem = ReferenceElement(mesh.dim, order)
    if conformity == DG:
        return _build_dg(mesh, elem)
    if conformity != CG:
        raise ValueError(f"unknown conformity {conformity!r}")
    if bcs is None:
        raise ValueError("CG spaces need strong boundary conditions")
    for s in bcs.set_ids:
        if not 1 <= s < 3 ** mesh.dim:
            raise ValueError(f"set id {s} is not a boundary region")
    if not mesh.is_balanced():
        raise UnbalancedMeshError("CG spaces require a 2:1 balanced mesh")

    nodes = _node_lattice(mesh, order)
    ncell, nloc, d = nodes.shape
    flat = nodes.reshape(-1, d)
    uniq, first, inverse = np.unique(flat, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # renumber unique nodes by first appearance in the SFC cell traversal
    order_first = np.argsort(first, kind="stable")
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[order_first] = np.arange(len(uniq))
    uniq = uniq[order_first]
    node_of = rank[inverse].reshape(ncell, nloc)
    nnode = len(uniq)

    set_ids = _node_set_ids(mesh, uniq, order)
    fixed = np.isin(set_ids, bcs.set_ids)

    # hanging nodes and their constraints on the coarse facet
    hang_rows: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    anchors, sizes, _ = mesh.lattice
    for fine, axis, side, coarse in mesh.find_hanging_vefs()["facet_pairs"]:
        local = elem.facet_nodes(axis, side)
        ids = node_of[fine, local]
        pts = nodes[fine, local]
        step = sizes[coarse]
        rel = pts - order * anchors[coarse]
        on_coarse = np.all(rel % step == 0, axis=1)
        cfacet = elem.facet_nodes(axis, 1 - side)
        for k in np.flatnonzero(~on_coarse):
            g = int(ids[k])
            if fixed[g] or g in hang_rows:
                continue
            xi = rel[k] / (order * step) * 2.0 - 1.0
            phi = elem.values(xi[None, :])[0, cfacet]
            keep = np.abs(phi) > 1e-14
            hang_rows[g] = (node_of[coarse, cfacet][keep], phi[keep])

    hanging = np.zeros(nnode, dtype=bool)
    hanging[list(hang_rows)] = True
    free = ~fixed & ~hanging
    if np.any(hanging[[m for ms, _ in hang_rows.values() for m in ms]]):
        raise UnbalancedMeshError("constraint masters must not be hanging")

    # global ids: free, fixed, hanging; each group keeps first-appearance order
    new_id = np.empty(nnode, dtype=np.int64)
    nfree, nfixed = int(free.sum()), int(fixed.sum())
    new_id[free] = np.arange(nfree)
    new_id[fixed] = nfree + np.arange(nfixed)
    new_id[hanging] = nfree + nfixed + np.arange(int(hanging.sum()))
    inv = np.argsort(new_id)

    constraints = []
    for g in np.flatnonzero(hanging):
        masters, coeffs = hang_rows[int(g)]
        constraints.append(HangingConstraint(
            int(new_id[g]), tuple(int(m) for m in new_id[masters]),
            tuple(float(c) for c in coeffs)))
    constraints.sort(key=lambda c: c.dof)

    coords = mesh.lattice_to_physical(uniq[inv], scale=order)
    return FeSpace(mesh, order, CG, new_id[node_of], coords, set_ids[inv],
                   nfree, nfixed, constraints, bcs)


def _build_dg(mesh: ForestMesh, elem: ReferenceElement) -> FeSpace:
    ncell, nloc = mesh.num_cells, elem.num_nodes
    cell_dofs = np.arange(ncell * nloc, dtype=np.int64).reshape(ncell, nloc)
    half = mesh.cell_size / 2
    coords = (mesh.cell_lower[:, None, :] + half[:, None, :] * (elem.nodes[None] + 1.0))
    return FeSpace(mesh, elem.order, DG, cell_dofs, coords.reshape(-1, mesh.dim),
                   np.zeros(ncell * nloc, dtype=np.int64), ncell * nloc, 0, [])


def interpolate_dirichlet_values(space: FeSpace, bcs: StrongBoundaryConditions | None = None
                                 ) -> np.ndarray:
    """Nodal interpolation of the Dirichlet data at the fixed DoFs."""
    if space.conformity != CG:
        raise ValueError("Dirichlet interpolation needs a CG space")
    bcs = space.bcs if bcs is None else bcs
    fixed = space.fixed_dofs
    out = np.zeros(len(fixed))
    sids = space.dof_set_ids[fixed]
    for s, func in bcs.conditions:
        sel = sids == s
        if np.any(sel):
            out[sel] = np.asarray(func(space.dof_coords[fixed[sel]]), dtype=float)
    return out


def interpolate(space: FeSpace, func) -> FeFunction:
    """Nodal interpolant of ``func``; hanging values follow the constraints."""
    vals = np.asarray(func(space.dof_coords), dtype=float)
    u = FeFunction.from_values(space, vals)
    return update_hanging_dof_values(space, u)


def update_hanging_dof_values(space: FeSpace, u: FeFunction) -> FeFunction:
    if space.num_hanging:
        u.hanging_values = space.constraint_matrix @ np.concatenate([u.free_values, u.fixed_values])
    return u


def transfer_fe_function(old_space: FeSpace, new_space: FeSpace,
                         transfer_map: CellTransferMap, u_old: FeFunction) -> FeFunction:
    """Move ``u_old`` onto the adapted mesh of ``new_space``.

    Kept cells copy their nodal values, refined cells evaluate the ancestor's
    polynomial at the new nodes, and coarsened cells inject the value of the
    child that contains each node.
    """
    if (old_space.order != new_space.order or old_space.conformity != new_space.conformity
            or old_space.dim != new_space.dim):
        raise ValueError("spaces differ in order, conformity or dimension")
    new_mesh, old_mesh = new_space.mesh, old_space.mesh
    if len(transfer_map.kind) != new_mesh.num_cells:
        raise ValueError("transfer map does not match the new mesh")
    elem = new_space.elem
    old_cell_vals = u_old.cell_values()
    nloc, d = elem.num_nodes, new_space.dim
    kinds = np.array(transfer_map.kind)
    new_vals = np.empty((new_mesh.num_cells, nloc))

    keep = np.flatnonzero(kinds == "keep")
    new_vals[keep] = old_cell_vals[[transfer_map.source[i] for i in keep]]

    # reference node locations of every new cell in physical space
    half_new = new_mesh.cell_size / 2
    phys = new_mesh.cell_lower[:, None, :] + half_new[:, None, :] * (elem.nodes[None] + 1.0)

    moved = np.flatnonzero(kinds != "keep")
    if len(moved):
        src = np.empty(len(moved), dtype=np.int64)
        for k, i in enumerate(moved):
            s = transfer_map.source[i]
            if kinds[i] == "refine":
                src[k] = s
            else:
                # child containing each node: pick by comparing with the parent midpoint
                mid = new_mesh.cell_lower[i] + half_new[i]
                bits = (phys[i] >= mid - 1e-12 * half_new[i]).astype(np.int64)
                child = bits @ (1 << np.arange(d))
                src[k] = -1
                cells = np.asarray(s)[child]
                xi = (phys[i] - old_mesh.cell_lower[cells]) / (old_mesh.cell_size[cells] / 2) - 1.0
                phi = elem.values(xi)
                new_vals[i] = np.einsum("nk,nk->n", phi, old_cell_vals[cells])
        ref = moved[src >= 0]
        if len(ref):
            anc = src[src >= 0]
            xi = ((phys[ref] - old_mesh.cell_lower[anc][:, None, :])
                  / (old_mesh.cell_size[anc][:, None, :] / 2) - 1.0)
            phi = elem.values(xi.reshape(-1, d)).reshape(len(ref), nloc, nloc)
            new_vals[ref] = np.einsum("cnk,ck->cn", phi, old_cell_vals[anc])

    values = np.zeros(new_space.num_dofs)
    values[new_space.cell_dofs.reshape(-1)] = new_vals.reshape(-1)
    u_new = FeFunction.from_values(new_space, values)
    return update_hanging_dof_values(new_space, u_new)
