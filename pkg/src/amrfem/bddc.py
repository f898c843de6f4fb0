"""Two-level BDDC preconditioner for the CG Poisson system.

Subdomains are the parts of a cell :class:`~amrfem.mesh.Partition`. Each
subdomain keeps its sub-assembled Neumann matrix over the free DoFs its
cells touch (after hanging constraints are applied), so summing the
scattered local matrices gives the global matrix back.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .fespace import CG, FeSpace
from .integration import constrained_system
from .linalg import CholeskyFactor
from .mesh import Partition

CORNER, EDGE, FACE = "corner", "edge", "face"


class SingularSubdomainError(RuntimeError):
    pass


@dataclass
class SubdomainProblem:
    """Local Neumann problem of one subdomain.

    ``dofs`` are global free DoF ids in increasing order and ``matrix`` is
    the sub-assembled stiffness in that local numbering.
    """
    index: int
    cells: np.ndarray
    dofs: np.ndarray
    matrix: sp.csr_matrix
    multiplicity: np.ndarray | None = None

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(self.multiplicity == 1)

    @property
    def interface(self) -> np.ndarray:
        return np.flatnonzero(self.multiplicity > 1)


@dataclass(frozen=True)
class CoarseObject:
    kind: str
    dofs: tuple[int, ...]
    subdomains: tuple[int, ...]


def build_subdomain_problems(space: FeSpace, partition: Partition) -> list[SubdomainProblem]:
    if space.conformity != CG:
        raise ValueError("BDDC is only available for CG spaces")
    if partition.mesh is not space.mesh:
        raise ValueError("partition and space live on different meshes")
    nf = space.num_free
    problems = []
    for p in range(partition.num_parts):
        cells = partition.cells(p)
        A, _ = constrained_system(space, None, cells)
        A = A[:nf, :nf].tocsr()
        A.eliminate_zeros()
        dofs = np.unique(A.indices)
        local = A[dofs][:, dofs].tocsr()
        local.sort_indices()
        problems.append(SubdomainProblem(p, cells, dofs, local))
    mult = np.zeros(nf, dtype=np.int64)
    for prob in problems:
        mult[prob.dofs] += 1
    for prob in problems:
        prob.multiplicity = mult[prob.dofs]
    return problems


def assemble_from_subdomains(problems, n: int) -> sp.csr_matrix:
    """Scatter-sum of the local matrices."""
    rows, cols, vals = [], [], []
    for prob in problems:
        A = prob.matrix.tocoo()
        rows.append(prob.dofs[A.row])
        cols.append(prob.dofs[A.col])
        vals.append(A.data)
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def _sharers(problems, n):
    owners = [[] for _ in range(n)]
    for prob in problems:
        for g in prob.dofs:
            owners[g].append(prob.index)
    return owners


def classify_coarse_objects(space: FeSpace, partition: Partition, problems=None,
                            promote_boundary_corners: bool = True) -> list[CoarseObject]:
    """Group interface DoFs into corners, edges and faces.

    DoFs are grouped by their set of sharing subdomains and each group is
    split into connected pieces of the matrix graph. Single DoFs are
    corners. Larger pieces are edges in 2D; in 3D they are faces when
    shared by two subdomains and edges otherwise.

    With ``promote_boundary_corners`` a subdomain that ends up without any
    corner gets the DoFs of its edges and faces closest to the domain
    boundary turned into corners.
    """
    if problems is None:
        problems = build_subdomain_problems(space, partition)
    if len(problems) < 2:
        return []
    n = space.num_free
    A = assemble_from_subdomains(problems, n)
    owners = _sharers(problems, n)
    groups: dict = {}
    for g in range(n):
        if len(owners[g]) > 1:
            groups.setdefault(tuple(owners[g]), []).append(g)
    d = space.dim
    objects = []
    for subs, dofs in sorted(groups.items(), key=lambda kv: kv[1][0]):
        dofs = np.asarray(dofs)
        ncomp, labels = connected_components(A[dofs][:, dofs], directed=False)
        for c in range(ncomp):
            members = dofs[labels == c]
            if len(members) == 1 or (d == 2 and len(subs) > 2):
                objects.extend(CoarseObject(CORNER, (int(m),), subs) for m in members)
            elif d == 3 and len(subs) == 2:
                objects.append(CoarseObject(FACE, tuple(int(m) for m in members), subs))
            else:
                objects.append(CoarseObject(EDGE, tuple(int(m) for m in members), subs))
    if promote_boundary_corners:
        objects = _promote_boundary_corners(space, objects, len(problems))
    objects.sort(key=lambda o: o.dofs[0])
    return objects


def _promote_boundary_corners(space, objects, nparts):
    has_corner = np.zeros(nparts, dtype=bool)
    for o in objects:
        if o.kind == CORNER:
            has_corner[list(o.subdomains)] = True
    mesh = space.mesh
    out = []
    for o in objects:
        if o.kind == CORNER or all(has_corner[list(o.subdomains)]):
            out.append(o)
            continue
        x = space.dof_coords[list(o.dofs)]
        dist = np.minimum(x - mesh.lower, mesh.upper - x).min(axis=1)
        near = dist <= dist.min() * (1 + 1e-9)
        members = np.asarray(o.dofs)
        out.extend(CoarseObject(CORNER, (int(m),), o.subdomains) for m in members[near])
        if np.any(~near):
            out.append(CoarseObject(o.kind, tuple(int(m) for m in members[~near]), o.subdomains))
    return out


def all_interface_corners(problems) -> list[CoarseObject]:
    """Every interface DoF as its own corner object."""
    n = max(int(p.dofs.max()) for p in problems if len(p.dofs)) + 1
    owners = _sharers(problems, n)
    return [CoarseObject(CORNER, (g,), tuple(owners[g])) for g in range(n) if len(owners[g]) > 1]


class BddcPreconditioner:
    """Action of the two-level BDDC preconditioner.

    ``M r = P_I r + (I - P_I A) T (I - A P_I) r`` where ``P_I`` solves the
    subdomain interior problems and ``T`` is the weighted sum of the coarse
    correction and the local constrained Neumann corrections.
    """

    partition = None

    def __init__(self, problems, objects, matrix=None, selection=(CORNER, EDGE, FACE)):
        self.problems = problems
        if matrix is None:
            n = max(int(p.dofs.max()) + 1 for p in problems if len(p.dofs))
            matrix = assemble_from_subdomains(problems, n)
        self.A = sp.csr_matrix(matrix)
        self.n = self.A.shape[0]
        self.coarse_objects = [o for o in objects if o.kind in selection]
        self.num_coarse = len(self.coarse_objects)
        by_sub: list[list[int]] = [[] for _ in problems]
        for k, o in enumerate(self.coarse_objects):
            for s in o.subdomains:
                by_sub[s].append(k)

        self._interior = []
        self._local = []
        Ac = np.zeros((self.num_coarse, self.num_coarse))
        for prob, coarse_ids in zip(problems, by_sub):
            interior = prob.interior
            fac_I = CholeskyFactor(prob.matrix[interior][:, interior]) if len(interior) else None
            self._interior.append((prob.dofs[interior], fac_I))

            ni = len(prob.dofs)
            pos = {int(g): k for k, g in enumerate(prob.dofs)}
            rows, cols, vals = [], [], []
            for r, k in enumerate(coarse_ids):
                members = self.coarse_objects[k].dofs
                for g in members:
                    rows.append(r)
                    cols.append(pos[g])
                    vals.append(1.0 / len(members))
            nc = len(coarse_ids)
            C = sp.csr_matrix((vals, (rows, cols)), shape=(nc, ni))
            if nc == 0 and np.abs(prob.matrix @ np.ones(ni)).max() <= 1e-10 * abs(prob.matrix).max():
                raise SingularSubdomainError(
                    f"subdomain {prob.index} floats and has no coarse constraints")
            K = sp.bmat([[prob.matrix, C.T], [C, None]], format="csc")
            try:
                lu = splu(K)
            except RuntimeError as exc:
                raise SingularSubdomainError(
                    f"constrained Neumann problem of subdomain {prob.index} is singular") from exc
            rhs = np.zeros((ni + nc, nc))
            rhs[ni:] = np.eye(nc)
            phi = lu.solve(rhs)[:ni] if nc else np.zeros((ni, 0))
            if not np.all(np.isfinite(phi)):
                raise SingularSubdomainError(
                    f"constrained Neumann problem of subdomain {prob.index} is singular")
            Ac[np.ix_(coarse_ids, coarse_ids)] += phi.T @ (prob.matrix @ phi)
            weight = 1.0 / prob.multiplicity
            self._local.append((prob.dofs, weight, lu, phi, np.asarray(coarse_ids, dtype=np.int64), ni))
        self.coarse_matrix = Ac
        self._coarse = CholeskyFactor(sp.csr_matrix(Ac), check_symmetry=False) if self.num_coarse else None

    def _interior_solve(self, r):
        out = np.zeros(self.n)
        for dofs, fac in self._interior:
            if fac is not None:
                out[dofs] = fac.solve(r[dofs])
        return out

    def _t(self, r):
        out = np.zeros(self.n)
        rc = np.zeros(self.num_coarse)
        for dofs, w, lu, phi, cid, ni in self._local:
            rw = w * r[dofs]
            if len(cid):
                rc[cid] += phi.T @ rw
            sol = lu.solve(np.concatenate([rw, np.zeros(len(cid))]))[:ni]
            np.add.at(out, dofs, w * sol)
        if self._coarse is not None:
            uc = self._coarse.solve(rc)
            for dofs, w, lu, phi, cid, ni in self._local:
                if len(cid):
                    np.add.at(out, dofs, w * (phi @ uc[cid]))
        return out

    def apply(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        z0 = self._interior_solve(r)
        t = self._t(r - self.A @ z0)
        return z0 + t - self._interior_solve(self.A @ t)

    __call__ = apply


def setup_preconditioner(problems, objects, matrix=None, selection=(CORNER, EDGE, FACE)
                         ) -> BddcPreconditioner:
    return BddcPreconditioner(problems, objects, matrix, selection)


def apply_preconditioner(M: BddcPreconditioner, r) -> np.ndarray:
    return M.apply(r)


def bddc_preconditioner(space: FeSpace, num_parts: int, matrix=None,
                        selection=(CORNER, EDGE, FACE), all_corners: bool = False):
    """Partition the mesh along the SFC and set up BDDC in one call."""
    partition = Partition(space.mesh, num_parts)
    problems = build_subdomain_problems(space, partition)
    if all_corners:
        objects = all_interface_corners(problems)
    else:
        objects = classify_coarse_objects(space, partition, problems)
    M = setup_preconditioner(problems, objects, matrix, selection)
    M.partition = partition
    return M
