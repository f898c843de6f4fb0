import numpy as np
import pytest

from amrfem.bddc import (CORNER, EDGE, BddcPreconditioner, SingularSubdomainError,
                         all_interface_corners, apply_preconditioner, assemble_from_subdomains,
                         bddc_preconditioner, build_subdomain_problems, classify_coarse_objects,
                         setup_preconditioner)
from amrfem.fespace import CG, DG, StrongBoundaryConditions, build_fe_space
from amrfem.integration import integrate_cg
from amrfem.linalg import pcg
from amrfem.mesh import Partition, create_unit_box_mesh

from conftest import refine_cells


def zero(x):
    return np.zeros(len(x))


def cg_space(mesh, q=1):
    return build_fe_space(mesh, q, CG, StrongBoundaryConditions.everywhere(mesh.dim, zero))


def system(space):
    return integrate_cg(space, lambda x: np.ones(len(x))).matrix


class RandomPartition(Partition):
    def __init__(self, mesh, num_parts, seed):
        super().__init__(mesh, num_parts)
        rng = np.random.default_rng(seed)
        self.owner = rng.permutation(self.owner)


@pytest.mark.parametrize("seed", range(5))
def test_recomposition_random_partition(seed):
    space = cg_space(create_unit_box_mesh(2, 4), 2)
    part = RandomPartition(space.mesh, 3, seed)
    problems = build_subdomain_problems(space, part)
    A = system(space)
    R = assemble_from_subdomains(problems, space.num_free)
    assert abs(R - A).max() <= 1e-12 * abs(A).max()


def test_recomposition_on_hanging_mesh(three_level_mesh):
    space = cg_space(three_level_mesh, 2)
    problems = build_subdomain_problems(space, Partition(three_level_mesh, 4))
    A = system(space)
    assert abs(assemble_from_subdomains(problems, space.num_free) - A).max() <= 1e-12 * abs(A).max()


def test_single_subdomain_is_global():
    space = cg_space(create_unit_box_mesh(2, 4))
    problems = build_subdomain_problems(space, Partition(space.mesh, 1))
    assert abs(problems[0].matrix - system(space)).max() < 1e-14
    assert classify_coarse_objects(space, Partition(space.mesh, 1), problems) == []
    M = BddcPreconditioner(problems, [])
    r = np.random.default_rng(0).normal(size=space.num_free)
    z = M(r)
    assert np.allclose(system(space) @ z, r)


def test_interface_diagonal_sums():
    space = cg_space(create_unit_box_mesh(2, 4))
    problems = build_subdomain_problems(space, Partition(space.mesh, 2))
    A = system(space)
    shared = np.intersect1d(problems[0].dofs, problems[1].dofs)
    assert len(shared) == 3
    diag = np.zeros(space.num_free)
    for p in problems:
        diag[p.dofs] += p.matrix.diagonal()
    assert np.allclose(diag[shared], A.diagonal()[shared])
    # cardinality weights form a partition of unity
    w = np.zeros(space.num_free)
    for p in problems:
        w[p.dofs] += 1.0 / p.multiplicity
    assert np.allclose(w, 1.0)


def test_objects_on_2x2_grid():
    space = cg_space(create_unit_box_mesh(2, 8))
    objects = classify_coarse_objects(space, Partition(space.mesh, 4))
    kinds = sorted(o.kind for o in objects)
    assert kinds == [CORNER] + [EDGE] * 4
    corner = next(o for o in objects if o.kind == CORNER)
    assert np.allclose(space.dof_coords[corner.dofs[0]], [0.5, 0.5])
    assert corner.subdomains == (0, 1, 2, 3)
    assert all(len(o.dofs) == 3 for o in objects if o.kind == EDGE)


def test_objects_on_1x2_grid():
    space = cg_space(create_unit_box_mesh(2, 4))
    part = Partition(space.mesh, 2)
    raw = classify_coarse_objects(space, part, promote_boundary_corners=False)
    assert [o.kind for o in raw] == [EDGE]
    objects = classify_coarse_objects(space, part)
    corners = sorted(space.dof_coords[o.dofs[0]].tolist() for o in objects if o.kind == CORNER)
    assert corners == [[0.25, 0.5], [0.75, 0.5]]
    edges = [o for o in objects if o.kind == EDGE]
    assert len(edges) == 1 and np.allclose(space.dof_coords[list(edges[0].dofs)], [[0.5, 0.5]])


def test_3d_faces_and_edges():
    space = cg_space(create_unit_box_mesh(3, 8))
    objects = classify_coarse_objects(space, Partition(space.mesh, 8))
    assert all(len(o.dofs) == 9 for o in objects if o.kind == "face")
    kinds = [o.kind for o in objects]
    assert kinds.count("face") == 12
    assert kinds.count(EDGE) == 6
    assert kinds.count(CORNER) == 1


def coarse_functional_matrix(M):
    """Coarse functionals applied to every subdomain's coarse basis."""
    out = []
    for (dofs, _, _, phi, cid, _), prob in zip(M._local, M.problems):
        pos = {int(g): k for k, g in enumerate(dofs)}
        rows = []
        for k in cid:
            members = M.coarse_objects[k].dofs
            rows.append(np.mean([phi[pos[g]] for g in members], axis=0))
        out.append(np.array(rows).reshape(len(cid), len(cid)))
    return out


@pytest.mark.parametrize("all_corners", [False, True])
def test_coarse_basis_kronecker(all_corners):
    space = cg_space(create_unit_box_mesh(2, 8))
    M = bddc_preconditioner(space, 4, all_corners=all_corners)
    assert M.num_coarse > 0
    for block in coarse_functional_matrix(M):
        assert np.allclose(block, np.eye(len(block)), atol=1e-12)


def test_coarse_matrix_is_spd():
    space = cg_space(create_unit_box_mesh(2, 8))
    M = bddc_preconditioner(space, 4)
    Ac = M.coarse_matrix
    assert np.allclose(Ac, Ac.T, atol=1e-12)
    assert np.linalg.eigvalsh(Ac).min() > 0


@pytest.mark.parametrize("mesh_kind", ["uniform", "hanging"])
def test_preconditioner_symmetry(mesh_kind, three_level_mesh):
    mesh = create_unit_box_mesh(2, 8) if mesh_kind == "uniform" else three_level_mesh
    space = cg_space(mesh, 2)
    M = bddc_preconditioner(space, 4)
    rng = np.random.default_rng(1)
    for _ in range(10):
        u, v = rng.normal(size=(2, space.num_free))
        a, b = u @ M(v), v @ M(u)
        assert abs(a - b) <= 1e-10 * max(abs(a), 1.0)
    u = rng.normal(size=space.num_free)
    assert u @ apply_preconditioner(M, u) > 0


def test_pcg_iterations_4x4_subdomains():
    space = cg_space(create_unit_box_mesh(2, 16))
    A = system(space)
    M = bddc_preconditioner(space, 16, A)
    _, rep = pcg(A, np.ones(space.num_free), M, 1e-6)
    assert rep.converged and rep.iterations <= 25


def test_pcg_on_hanging_mesh(three_level_mesh):
    space = cg_space(refine_cells(three_level_mesh, [2, 7, 11]))
    A = system(space)
    M = bddc_preconditioner(space, 4, A)
    x, rep = pcg(A, np.ones(space.num_free), M, 1e-10)
    assert rep.converged and rep.iterations <= 15


def test_setup_with_explicit_objects():
    space = cg_space(create_unit_box_mesh(2, 8))
    part = Partition(space.mesh, 4)
    problems = build_subdomain_problems(space, part)
    M = setup_preconditioner(problems, all_interface_corners(problems))
    A = system(space)
    _, rep = pcg(A, np.ones(space.num_free), M, 1e-8)
    assert rep.iterations <= 2


def test_floating_subdomain_without_coarse_space():
    space = cg_space(create_unit_box_mesh(2, 8))
    part = Partition(space.mesh, 16)
    problems = build_subdomain_problems(space, part)
    with pytest.raises(SingularSubdomainError, match="subdomain 3"):
        setup_preconditioner(problems, classify_coarse_objects(space, part, problems), selection=())


def test_rejects_dg():
    space = build_fe_space(create_unit_box_mesh(2, 4), 1, DG)
    with pytest.raises(ValueError):
        bddc_preconditioner(space, 2)
