"""Assembly of the Poisson operator for CG and interior penalty DG spaces.

Global matrices are accumulated as COO triplets in cell (and facet) order
and converted to CSR, which sums duplicates deterministically.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fespace import CG, DG, FeSpace
from .reference import ReferenceElement, gauss_quadrature


@dataclass(frozen=True)
class DgParameters:
    """Interior penalty parameters.

    ``tau`` selects the method (1 symmetric, -1 non-symmetric, 0 incomplete)
    and the penalty is ``penalty_factor * q**2`` scaled by ``1/|F|``.
    """
    tau: float = 1.0
    penalty_factor: float = 10.0

    def __post_init__(self):
        if self.tau not in (-1, 0, 1):
            raise ValueError(f"tau must be -1, 0 or 1, got {self.tau}")
        if self.penalty_factor <= 0:
            raise ValueError("penalty factor must be positive")

    def gamma(self, order: int) -> float:
        return self.penalty_factor * order ** 2


@dataclass
class AffineOperator:
    """Reduced linear system ``A u_free = f`` over the free DoFs."""
    matrix: sp.csr_matrix
    rhs: np.ndarray
    space: FeSpace
    dirichlet_values: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def _to_csr(rows, cols, vals, shape) -> sp.csr_matrix:
    A = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


# --------------------------------------------------------------------------
# Cell terms
# --------------------------------------------------------------------------

def _cell_tables(elem: ReferenceElement, npts: int):
    quad = gauss_quadrature(elem.dim, npts)
    phi = elem.values(quad.points)
    dphi = elem.gradients(quad.points)
    stiff = np.einsum("q,qia,qja->aij", quad.weights, dphi, dphi)
    return quad, phi, stiff


def element_stiffness(elem: ReferenceElement, half) -> np.ndarray:
    """Stiffness matrix of a brick with half side lengths ``half``."""
    _, _, stiff = _cell_tables(elem, elem.order + 1)
    half = np.asarray(half, dtype=float)
    return np.einsum("a,aij->ij", np.prod(half) / half ** 2, stiff)


def size_groups(mesh, cells, npts):
    """Split ``cells`` by cell diameter when ``npts`` is a callable of the diameter.

    Yields ``(cells, n)`` pairs with the number of Gauss points per axis.
    """
    if not callable(npts):
        yield cells, npts
        return
    diam = np.max(mesh.cell_size[cells], axis=1)
    for h in np.unique(diam):
        yield cells[diam == h], int(npts(float(h)))


def cell_matrices(space: FeSpace, f=None, cells=None, npts=None):
    """Local stiffness matrices and load vectors.

    Returns arrays of shape (n, nloc, nloc) and (n, nloc) for the selected
    cells (all by default). ``npts`` is the number of Gauss points per axis
    for the load vector (default q + 2), or a function of the cell diameter.
    """
    mesh, elem = space.mesh, space.elem
    cells = np.arange(mesh.num_cells) if cells is None else np.asarray(cells)
    _, _, stiff = _cell_tables(elem, elem.order + 1)
    half = mesh.cell_size[cells] / 2
    det = np.prod(half, axis=1)
    A = np.einsum("na,aij->nij", det[:, None] / half ** 2, stiff)
    b = np.zeros((len(cells), elem.num_nodes))
    if f is None:
        return A, b
    pos = np.arange(len(cells))
    for sel, n in size_groups(mesh, pos, npts or elem.order + 2):
        quad = gauss_quadrature(mesh.dim, n)
        phi = elem.values(quad.points)
        chunk = max(1, 400000 // quad.num_points)
        for start in range(0, len(sel), chunk):
            part = sel[start:start + chunk]
            c = cells[part]
            x = mesh.cell_lower[c][:, None, :] + half[part][:, None, :] * (quad.points[None] + 1.0)
            fx = np.asarray(f(x.reshape(-1, mesh.dim)), dtype=float).reshape(len(c), -1)
            b[part] = (det[part][:, None] * fx * quad.weights[None]) @ phi
    return A, b


def apply_constraints_to_cell(A_K, f_K, C_K):
    """Congruence transform of cell arrays by the local constraint matrix.

    ``C_K`` has shape (nloc, m) and maps the m unconstrained DoFs touching
    the cell to the local nodal values; rows of non-hanging DoFs are unit
    vectors.
    """
    C_K = np.asarray(C_K, dtype=float)
    return C_K.T @ A_K @ C_K, C_K.T @ f_K


def _assemble_full(space: FeSpace, f=None, cells=None, npts=None):
    cells = np.arange(space.mesh.num_cells) if cells is None else np.asarray(cells)
    A, b = cell_matrices(space, f, cells, npts)
    dofs = space.cell_dofs[cells]
    n = space.num_dofs
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).reshape(-1)
    cols = np.tile(dofs, (1, nloc)).reshape(-1)
    Af = _to_csr(rows, cols, A.reshape(-1), (n, n))
    bf = np.bincount(dofs.reshape(-1), weights=b.reshape(-1), minlength=n)
    return Af, bf


def constrained_system(space: FeSpace, f=None, cells=None, npts=None):
    """Assembled (free + fixed) system after applying the hanging constraints.

    Summing ``C_K^T A_K C_K`` over cells equals ``P^T A P`` with ``P`` the
    global prolongation, which is what is computed here.
    """
    Af, bf = _assemble_full(space, f, cells, npts)
    if space.num_hanging == 0:
        return Af, bf
    P = space.prolongation()
    A = (P.T @ Af @ P).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A, P.T @ bf


def integrate_cg(space: FeSpace, f=None, dirichlet_values=None, npts=None) -> AffineOperator:
    """Reduced CG system with hanging constraints and Dirichlet elimination.

    ``npts`` sets the load-vector quadrature as in :func:`cell_matrices`.
    """
    if space.conformity != CG:
        raise ValueError("integrate_cg needs a CG space")
    g = np.zeros(space.num_fixed) if dirichlet_values is None else np.asarray(dirichlet_values, float)
    if len(g) != space.num_fixed:
        raise ValueError(f"expected {space.num_fixed} Dirichlet values, got {len(g)}")
    A, b = constrained_system(space, f, None, npts)
    nf = space.num_free
    A_ff = A[:nf, :nf].tocsr()
    A_ff.sort_indices()
    rhs = b[:nf] - A[:nf, nf:] @ g
    return AffineOperator(A_ff, rhs, space, g)


def free_block(space: FeSpace, cells=None) -> sp.csr_matrix:
    """Constrained stiffness restricted to free DoFs, from the given cells only."""
    A, _ = constrained_system(space, None, cells)
    nf = space.num_free
    out = A[:nf, :nf].tocsr()
    out.sort_indices()
    return out


# --------------------------------------------------------------------------
# DG facet terms
# --------------------------------------------------------------------------

def dg_facets(mesh):
    """Interior and boundary facets for DG integration.

    Interior facets are ``(plus, minus, axis, side, subpos)`` where ``side``
    is the facet of ``plus`` and ``subpos`` locates a hanging fine facet
    inside the coarse one (``None`` for conforming facets). Conforming
    facets appear once, hanging ones from their fine side. Boundary facets
    are ``(cell, axis, side)``.
    """
    anchors, sizes, _ = mesh.lattice
    interior, boundary = [], []
    for i in range(mesh.num_cells):
        for axis in range(mesh.dim):
            for side in (0, 1):
                j, rel = mesh.facet_neighbor(i, axis, side)
                if rel == "boundary":
                    boundary.append((i, axis, side))
                elif rel == "same" and side == 1:
                    interior.append((i, j, axis, side, None))
                elif rel == "coarser":
                    tang = [a for a in range(mesh.dim) if a != axis]
                    sub = tuple(int((anchors[i, a] - anchors[j, a]) // sizes[i]) for a in tang)
                    interior.append((i, j, axis, side, sub))
    return interior, boundary


def _facet_tables(elem: ReferenceElement, axis: int, side: int, sub, npts: int):
    d = elem.dim
    quad = gauss_quadrature(d - 1, npts)
    tang = [a for a in range(d) if a != axis]
    xp = np.empty((quad.num_points, d))
    xp[:, tang] = quad.points
    xp[:, axis] = 1.0 if side else -1.0
    xm = xp.copy()
    xm[:, axis] = -xp[:, axis]
    if sub is not None:
        xm[:, tang] = (quad.points + 1.0) / 2 + np.asarray(sub) - 1.0
    out = []
    for xi in (xp, xm):
        out.append((elem.values(xi), elem.gradients(xi)[:, :, axis]))
    return quad.weights, out


def _interior_facet_matrices(elem, params, w, tabs, s, jf, area, hp, hm):
    # Blocks for (test side, trial side) in {+, -}, stacked into (n, 2 nloc, 2 nloc).
    gamma = params.gamma(elem.order)
    tau = params.tau
    sig = (1.0, -1.0)
    h = (hp, hm)
    n = len(jf)
    nloc = elem.num_nodes
    out = np.empty((n, 2 * nloc, 2 * nloc))
    for a in range(2):
        Va, Da = tabs[a]
        for b in range(2):
            Vb, Db = tabs[b]
            vv = np.einsum("q,qi,qj->ij", w, Va, Vb)
            vd = np.einsum("q,qi,qj->ij", w, Va, Db)
            dv = np.einsum("q,qi,qj->ij", w, Da, Vb)
            blk = (-0.5 * sig[a] * s * vd[None] / h[b][:, None, None]
                   - 0.5 * tau * sig[b] * s * dv[None] / h[a][:, None, None]
                   + gamma * sig[a] * sig[b] * vv[None] / area[:, None, None])
            out[:, a * nloc:(a + 1) * nloc, b * nloc:(b + 1) * nloc] = jf[:, None, None] * blk
    return out


def integrate_dg(space: FeSpace, f=None, g=None, params: DgParameters | None = None,
                 npts=None) -> AffineOperator:
    """Interior penalty DG system with weakly imposed Dirichlet data ``g``.

    The matrix row index is the test function and the column index the
    trial function.
    """
    if space.conformity != DG:
        raise ValueError("integrate_dg needs a DG space")
    params = params or DgParameters()
    mesh, elem = space.mesh, space.elem
    d, nloc, q = mesh.dim, elem.num_nodes, elem.order
    nq = q + 1
    gamma = params.gamma(q)
    n = space.num_dofs
    dofs = space.cell_dofs
    half = mesh.cell_size / 2

    A_cell, b = cell_matrices(space, f, None, npts)
    rows = [np.repeat(dofs, nloc, axis=1).reshape(-1)]
    cols = [np.tile(dofs, (1, nloc)).reshape(-1)]
    vals = [A_cell.reshape(-1)]
    rhs = b.reshape(-1).copy()

    interior, boundary = dg_facets(mesh)
    groups: dict = {}
    for plus, minus, axis, side, sub in interior:
        groups.setdefault((axis, side, sub), []).append((plus, minus))
    for (axis, side, sub), pairs in sorted(groups.items(), key=lambda kv: str(kv[0])):
        pairs = np.asarray(pairs)
        p, m = pairs[:, 0], pairs[:, 1]
        w, tabs = _facet_tables(elem, axis, side, sub, nq)
        tang = [a for a in range(d) if a != axis]
        jf = np.prod(half[p][:, tang], axis=1)
        area = np.prod(2 * half[p][:, tang], axis=1)
        s = 1.0 if side else -1.0
        M = _interior_facet_matrices(elem, params, w, tabs, s, jf, area,
                                     half[p, axis], half[m, axis])
        fd = np.concatenate([dofs[p], dofs[m]], axis=1)
        rows.append(np.repeat(fd, 2 * nloc, axis=1).reshape(-1))
        cols.append(np.tile(fd, (1, 2 * nloc)).reshape(-1))
        vals.append(M.reshape(-1))

    bgroups: dict = {}
    for cell, axis, side in boundary:
        bgroups.setdefault((axis, side), []).append(cell)
    quad = gauss_quadrature(d - 1, nq)
    for (axis, side), cells in sorted(bgroups.items()):
        cells = np.asarray(cells)
        w, tabs = _facet_tables(elem, axis, side, None, nq)
        V, D = tabs[0]
        tang = [a for a in range(d) if a != axis]
        jf = np.prod(half[cells][:, tang], axis=1)
        area = np.prod(2 * half[cells][:, tang], axis=1)
        h = half[cells, axis]
        s = 1.0 if side else -1.0
        vv = np.einsum("q,qi,qj->ij", w, V, V)
        vd = np.einsum("q,qi,qj->ij", w, V, D)
        M = jf[:, None, None] * (-s * vd[None] / h[:, None, None]
                                 - params.tau * s * vd.T[None] / h[:, None, None]
                                 + gamma * vv[None] / area[:, None, None])
        cd = dofs[cells]
        rows.append(np.repeat(cd, nloc, axis=1).reshape(-1))
        cols.append(np.tile(cd, (1, nloc)).reshape(-1))
        vals.append(M.reshape(-1))
        if g is not None:
            xi = np.empty((quad.num_points, d))
            xi[:, tang] = quad.points
            xi[:, axis] = s
            x = mesh.cell_lower[cells][:, None, :] + half[cells][:, None, :] * (xi[None] + 1.0)
            gx = np.asarray(g(x.reshape(-1, d)), dtype=float).reshape(len(cells), -1)
            gw = gx * w[None] * jf[:, None]
            r = (-params.tau * s * (gw / h[:, None]) @ D
                 + gamma * (gw / area[:, None]) @ V)
            np.add.at(rhs, cd.reshape(-1), r.reshape(-1))

    A = _to_csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (n, n))
    return AffineOperator(A, rhs, space)
