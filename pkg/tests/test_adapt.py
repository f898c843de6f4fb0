import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amrfem.adapt import (AmrConfig, ErrorEstimator, FixedFractionStrategy, ManufacturedSolution,
                          ProblemConfig, amr_loop, compute_local_true_errors, solve_problem,
                          source_term, update_refinement_flags)
from amrfem.fespace import CG, FeFunction, StrongBoundaryConditions, build_fe_space, interpolate
from amrfem.mesh import COARSEN, KEEP, REFINE, create_forest_mesh, create_unit_box_mesh


def fd_laplacian(func, x, h):
    # fourth-order central differences
    out = np.zeros(len(x))
    for e in np.eye(x.shape[1]):
        out += (-func(x + 2 * h * e) + 16 * func(x + h * e) - 30 * func(x)
                + 16 * func(x - h * e) - func(x - 2 * h * e)) / (12 * h ** 2)
    return out


@pytest.mark.parametrize("dim", [2, 3])
def test_source_matches_finite_difference_laplacian(dim):
    ms = ManufacturedSolution.benchmark(dim)
    x = np.random.default_rng(dim).uniform(0, 1, size=(2000, dim))
    # include points right on the front
    t = np.random.default_rng(1).normal(size=(50, dim))
    x = np.vstack([x, ms.center + 0.7 * t / np.linalg.norm(t, axis=1)[:, None]])
    f = source_term(ms, x)
    rel = np.abs(-fd_laplacian(ms.value, x, 1e-4) - f) / np.maximum(np.abs(f), 1.0)
    assert rel.max() < 1e-5


def test_gradient_matches_finite_differences():
    ms = ManufacturedSolution(50.0, 0.5, (0.1, 0.2))
    x = np.random.default_rng(0).uniform(0, 1, size=(100, 2))
    h = 1e-6
    fd = np.column_stack([(ms.value(x + h * e) - ms.value(x - h * e)) / (2 * h) for e in np.eye(2)])
    assert np.allclose(ms.gradient(x), fd, rtol=1e-6, atol=1e-4)


def test_benchmark_values():
    ms = ManufacturedSolution.benchmark()
    assert ms.center == (-0.05, -0.05) and ms.alpha == 200.0 and ms.radius == 0.7
    on_front = np.array([[0.65, -0.05]])
    assert ms.value(on_front)[0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        ManufacturedSolution(alpha=-1.0)


class Linear:
    def gradient(self, x):
        return np.column_stack([np.ones(len(x)), np.zeros(len(x))])


def test_error_of_zero_against_linear():
    mesh = create_unit_box_mesh(2, 1)
    space = build_fe_space(mesh, 1, CG, StrongBoundaryConditions.everywhere(2, lambda x: x[:, 0]))
    est = compute_local_true_errors(space, FeFunction.zeros(space), Linear())
    assert est.local_sq == pytest.approx([1.0])


@pytest.mark.parametrize("q", [1, 2, 3])
def test_error_vanishes_for_interpolated_polynomials(q, three_level_mesh):
    c = np.random.default_rng(q).normal(size=(q + 1, q + 1))

    class Poly:
        def value(self, x):
            return sum(c[i, j] * x[:, 0] ** i * x[:, 1] ** j
                       for i in range(q + 1) for j in range(q + 1))

        def gradient(self, x):
            gx = sum(i * c[i, j] * x[:, 0] ** max(i - 1, 0) * x[:, 1] ** j
                     for i in range(q + 1) for j in range(q + 1))
            gy = sum(j * c[i, j] * x[:, 0] ** i * x[:, 1] ** max(j - 1, 0)
                     for i in range(q + 1) for j in range(q + 1))
            return np.column_stack([gx, gy])

    p = Poly()
    space = build_fe_space(three_level_mesh, q, CG, StrongBoundaryConditions.everywhere(2, p.value))
    est = compute_local_true_errors(space, interpolate(space, p.value), p)
    assert est.local_sq.max() < 1e-20


def reference_error(mesh, uh, ms, n=10):
    """Energy error with 10 Gauss points per axis, bilinear gradients by hand."""
    t, w = np.polynomial.legendre.leggauss(n)
    s = (t + 1) / 2
    total = 0.0
    vals = uh.cell_values()
    for K in range(mesh.num_cells):
        lo, h = mesh.cell_lower[K], mesh.cell_size[K]
        u00, u10, u01, u11 = vals[K]
        for a, wa in zip(s, w / 2):
            for b, wb in zip(s, w / 2):
                gx = ((u10 - u00) * (1 - b) + (u11 - u01) * b) / h[0]
                gy = ((u01 - u00) * (1 - a) + (u11 - u10) * a) / h[1]
                g = ms.gradient(np.array([lo + h * [a, b]]))[0]
                total += wa * wb * h[0] * h[1] * ((g[0] - gx) ** 2 + (g[1] - gy) ** 2)
    return math.sqrt(total)


def test_benchmark_error_matches_reference_quadrature():
    mesh = create_unit_box_mesh(2, 16)
    res = solve_problem(mesh, ProblemConfig())
    oracle = reference_error(mesh, res.solution, ProblemConfig().solution())
    assert res.error == pytest.approx(oracle, rel=1e-3)
    assert res.error ** 2 == pytest.approx(res.errors.local_sq.sum(), rel=1e-12)
    assert np.array_equal(res.errors.estimated, res.errors.local_sq)


def test_flags_quartiles():
    flags = update_refinement_flags(FixedFractionStrategy(0.25, 0.25), np.array([4.0, 3.0, 2.0, 1.0]))
    assert flags.tolist() == [REFINE, KEEP, KEEP, COARSEN]


def test_flags_zero_fractions():
    flags = update_refinement_flags(FixedFractionStrategy(0.0, 0.0), np.arange(10.0))
    assert np.all(flags == KEEP)


def sort_oracle(e, ar, ac):
    n = len(e)
    ranked = sorted(range(n), key=lambda i: (-e[i], i))
    nr, nc = math.ceil(round(ar * n, 9)), math.ceil(round(ac * n, 9))
    coarsen = set(ranked[n - nc:]) if nc else set()
    refine = set(ranked[:nr])
    return refine, coarsen - refine


def test_flags_random_against_sort_oracle():
    e = np.random.default_rng(5).random(100)
    flags = update_refinement_flags(FixedFractionStrategy(0.1, 0.05), e)
    assert (flags == REFINE).sum() == 10 and (flags == COARSEN).sum() == 5
    refine, coarsen = sort_oracle(e, 0.1, 0.05)
    assert set(np.flatnonzero(flags == REFINE)) == refine
    assert set(np.flatnonzero(flags == COARSEN)) == coarsen


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 400), st.sampled_from([0, 0.05, 0.1, 0.25]),
       st.sampled_from([0, 0.05, 0.1, 0.25]), st.integers(0, 2 ** 32 - 1), st.booleans())
def test_flag_counts(n, ar, ac, seed, ties):
    rng = np.random.default_rng(seed)
    e = rng.integers(0, 3, n).astype(float) if ties else rng.random(n)
    flags = update_refinement_flags(FixedFractionStrategy(ar, ac), ErrorEstimator(e, e))
    refine, coarsen = sort_oracle(e, ar, ac)
    assert (flags == REFINE).sum() == math.ceil(round(ar * n, 9))
    assert set(np.flatnonzero(flags == REFINE)) == refine
    assert set(np.flatnonzero(flags == COARSEN)) == coarsen


def test_flags_validation():
    with pytest.raises(ValueError):
        FixedFractionStrategy(1.2, 0.0)
    with pytest.raises(ValueError):
        FixedFractionStrategy(0.7, 0.5)
    with pytest.raises(ValueError):
        update_refinement_flags(FixedFractionStrategy(), np.ones(3), create_forest_mesh(1))


def test_zero_amr_steps_equals_uniform_solve():
    recs = amr_loop(AmrConfig(ProblemConfig(), uniform_steps=3, amr_steps=0))
    assert len(recs) == 1
    uniform = solve_problem(create_unit_box_mesh(2, 8), ProblemConfig())
    assert recs[0].num_cells == 64 and recs[0].num_dofs == 49
    assert recs[0].error == pytest.approx(uniform.error, rel=1e-12)


def test_amr_records_and_localization():
    recs = amr_loop(AmrConfig(ProblemConfig(), amr_steps=8))
    assert [r.step for r in recs] == list(range(9))
    assert recs[0].num_cells == 16
    mesh = recs[-1].mesh
    fine = np.flatnonzero(mesh.levels == mesh.levels.max())
    lo = mesh.cell_lower[fine]
    hi = lo + mesh.cell_size[fine]
    c = np.array([-0.05, -0.05])
    dmin = np.linalg.norm(np.clip(c, lo, hi) - c, axis=1)
    dmax = np.linalg.norm(np.where(np.abs(lo - c) > np.abs(hi - c), lo, hi) - c, axis=1)
    hits = (dmin <= 0.8) & (dmax >= 0.6)
    assert hits.mean() >= 0.6


def test_amr_error_non_increasing_with_resolved_quadrature():
    recs = amr_loop(AmrConfig(ProblemConfig(quadrature="resolved"), amr_steps=5))
    errors = [r.error for r in recs]
    assert all(b <= a for a, b in zip(errors, errors[1:]))


def test_amr_with_pcg_reuses_previous_solution():
    cfg = ProblemConfig(solver="pcg", preconditioner="bddc", subdomains=4, rtol=1e-10)
    recs = amr_loop(AmrConfig(cfg, amr_steps=3))
    direct = amr_loop(AmrConfig(ProblemConfig(), amr_steps=3))
    for a, b in zip(recs, direct):
        assert a.num_cells == b.num_cells
        assert a.error == pytest.approx(b.error, rel=1e-6)
        assert a.iterations > 0


def test_amr_rejects_3d():
    with pytest.raises(ValueError):
        amr_loop(AmrConfig(ProblemConfig(dim=3)))


@pytest.mark.parametrize("pre", ["none", "jacobi", "bddc"])
def test_pcg_solves_agree_with_direct(pre):
    mesh = create_unit_box_mesh(2, 16)
    direct = solve_problem(mesh, ProblemConfig())
    it = solve_problem(mesh, ProblemConfig(solver="pcg", preconditioner=pre, rtol=1e-10))
    assert it.error == pytest.approx(direct.error, rel=1e-6)
    assert (it.partition is not None) == (pre == "bddc")


def test_dg_solve_converges():
    errs = [solve_problem(create_unit_box_mesh(2, n), ProblemConfig(formulation="DG", alpha=10.0)).error
            for n in (8, 16)]
    assert errs[1] < errs[0]


def test_solve_errors():
    mesh = create_unit_box_mesh(2, 4)
    with pytest.raises(ValueError):
        solve_problem(mesh, ProblemConfig(formulation="XX"))
    with pytest.raises(ValueError):
        solve_problem(mesh, ProblemConfig(formulation="DG", tau=-1, solver="pcg"))
    with pytest.raises(ValueError):
        solve_problem(mesh, ProblemConfig(solver="gmres"))
    with pytest.raises(ValueError):
        ProblemConfig(dim=2, center=(0.0, 0.0, 0.0)).solution()
    with pytest.raises(ValueError):
        solve_problem(mesh, ProblemConfig(formulation="DG", solver="pcg", preconditioner="bddc"))


def test_resolved_quadrature_rule():
    rule = ProblemConfig(quadrature="resolved").source_points()
    assert rule(1 / 4) == 52 and rule(1 / 1024) == 3 and rule(1.0) == 64
