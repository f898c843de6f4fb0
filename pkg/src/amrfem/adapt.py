"""Wave-front benchmark, energy-norm errors, fixed-fraction marking and the AMR loop."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .fespace import (CG, DG, FeFunction, StrongBoundaryConditions, build_fe_space,
                      interpolate_dirichlet_values, transfer_fe_function,
                      update_hanging_dof_values)
from .integration import DgParameters, integrate_cg, integrate_dg, size_groups
from .linalg import CholeskyFactor, LuFactor, jacobi, pcg
from .mesh import COARSEN, KEEP, REFINE, ForestMesh, create_forest_mesh, refine_and_coarsen
from .reference import gauss_quadrature


@dataclass(frozen=True)
class ManufacturedSolution:
    """``u(x) = arctan(alpha * (|x - center| - radius))``."""
    alpha: float = 200.0
    radius: float = 0.7
    center: tuple = (-0.05, -0.05)

    def __post_init__(self):
        if self.alpha <= 0 or self.radius <= 0:
            raise ValueError("alpha and radius must be positive")

    @classmethod
    def benchmark(cls, dim: int = 2) -> "ManufacturedSolution":
        return cls(200.0, 0.7, (-0.05,) * dim)

    @property
    def dim(self) -> int:
        return len(self.center)

    def _rho(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        dx = x - np.asarray(self.center)
        return dx, np.sqrt(np.sum(dx ** 2, axis=1))

    def value(self, x) -> np.ndarray:
        _, rho = self._rho(x)
        return np.arctan(self.alpha * (rho - self.radius))

    def gradient(self, x) -> np.ndarray:
        dx, rho = self._rho(x)
        s = self.alpha * (rho - self.radius)
        safe = np.where(rho > 0, rho, 1.0)
        scale = np.where(rho > 0, self.alpha / (1 + s ** 2) / safe, 0.0)
        return scale[:, None] * dx

    def quadrature_points(self, order: int, cap: int = 64):
        """Gauss points per axis as a function of the cell diameter.

        Cells much wider than the front width ``1/alpha`` need many points
        to integrate the source; fine cells fall back to ``q + 2``.
        """
        return lambda h: int(min(max(order + 2, math.ceil(self.alpha * h) + 2), cap))

    def source(self, x) -> np.ndarray:
        """``-Laplace(u)`` from the radial form ``u'' + (d - 1) u' / rho``."""
        _, rho = self._rho(x)
        a = self.alpha
        s = a * (rho - self.radius)
        d2 = -2 * a ** 2 * s / (1 + s ** 2) ** 2
        safe = np.where(rho > 0, rho, 1.0)
        d1 = np.where(rho > 0, (self.dim - 1) * a / ((1 + s ** 2) * safe), 0.0)
        return -(d2 + d1)


def solution_value(ms, x):
    return ms.value(x)


def solution_gradient(ms, x):
    return ms.gradient(x)


def source_term(ms, x):
    return ms.source(x)


# --------------------------------------------------------------------------
# Errors and marking
# --------------------------------------------------------------------------

@dataclass
class ErrorEstimator:
    local_sq: np.ndarray
    estimated: np.ndarray

    @property
    def total(self) -> float:
        return math.sqrt(float(np.sum(self.local_sq)))


def compute_local_true_errors(space, u_h: FeFunction, ms, npts=None) -> ErrorEstimator:
    """Per-cell ``e_K^2 = int_K |grad(u - u_h)|^2``.

    ``ms`` is anything with a vectorised ``gradient(x)``. ``npts`` is the
    number of Gauss points per axis (default ``max(10, 2q + 2)``) or a function of
    the cell diameter.
    """
    mesh, elem = space.mesh, space.elem
    half = mesh.cell_size / 2
    det = np.prod(half, axis=1)
    vals = u_h.cell_values()
    errs = np.empty(mesh.num_cells)
    for cells, n in size_groups(mesh, np.arange(mesh.num_cells), npts or max(10, 2 * elem.order + 2)):
        quad = gauss_quadrature(mesh.dim, n)
        dphi = elem.gradients(quad.points)
        chunk = max(1, 200000 // quad.num_points)
        for start in range(0, len(cells), chunk):
            c = cells[start:start + chunk]
            x = mesh.cell_lower[c][:, None, :] + half[c][:, None, :] * (quad.points[None] + 1.0)
            grad_u = ms.gradient(x.reshape(-1, mesh.dim)).reshape(x.shape)
            grad_h = np.einsum("qka,ck->cqa", dphi, vals[c]) / half[c][:, None, :]
            diff = np.sum((grad_u - grad_h) ** 2, axis=2)
            errs[c] = det[c] * (diff @ quad.weights)
    return ErrorEstimator(errs, errs.copy())


@dataclass(frozen=True)
class FixedFractionStrategy:
    refine_fraction: float = 0.1
    coarsen_fraction: float = 0.05

    def __post_init__(self):
        for a in (self.refine_fraction, self.coarsen_fraction):
            if not 0 <= a < 1:
                raise ValueError(f"fractions must lie in [0, 1), got {a}")
        if self.refine_fraction + self.coarsen_fraction > 1:
            raise ValueError("refine and coarsen fractions add up to more than 1")


def update_refinement_flags(strategy: FixedFractionStrategy, estimator, mesh=None) -> np.ndarray:
    """Refine the ``ceil(a_r N)`` largest errors and coarsen the ``ceil(a_c N)`` smallest.

    Ties are broken by cell (Morton) order; a cell in both sets is refined.
    """
    e = estimator.estimated if isinstance(estimator, ErrorEstimator) else np.asarray(estimator)
    n = len(e)
    if mesh is not None and mesh.num_cells != n:
        raise ValueError("estimator does not match the mesh")
    order = np.argsort(-e, kind="stable")
    nr = math.ceil(strategy.refine_fraction * n - 1e-12)
    nc = math.ceil(strategy.coarsen_fraction * n - 1e-12)
    flags = np.full(n, KEEP, dtype=np.int64)
    if nc:
        flags[order[n - nc:]] = COARSEN
    flags[order[:nr]] = REFINE
    return flags


# --------------------------------------------------------------------------
# Solving
# --------------------------------------------------------------------------

@dataclass
class ProblemConfig:
    dim: int = 2
    formulation: str = CG
    order: int = 1
    alpha: float = 200.0
    radius: float = 0.7
    center: tuple | None = None
    tau: float = 1.0
    penalty: float = 10.0
    solver: str = "direct"
    preconditioner: str = "none"
    subdomains: int = 4
    rtol: float = 1e-6
    maxit: int = 5000
    quadrature: str = "standard"

    def source_points(self):
        """Load-vector rule: ``q + 2`` points, or resolved to the front width."""
        if self.quadrature == "standard":
            return self.order + 2
        if self.quadrature == "resolved":
            return self.solution().quadrature_points(self.order)
        raise ValueError(f"unknown quadrature {self.quadrature!r}")

    def error_points(self):
        standard = max(10, 2 * self.order + 2)
        if self.quadrature == "resolved":
            rule = self.solution().quadrature_points(self.order)
            return lambda h: max(standard, rule(h))
        return standard

    def solution(self) -> ManufacturedSolution:
        center = self.center if self.center is not None else (-0.05,) * self.dim
        if len(center) != self.dim:
            raise ValueError(f"center {center} does not match dimension {self.dim}")
        return ManufacturedSolution(self.alpha, self.radius, tuple(center))


@dataclass
class SolveResult:
    space: object
    solution: FeFunction
    errors: ErrorEstimator
    iterations: int
    seconds: float
    operator: object = None
    partition: object = None

    @property
    def error(self) -> float:
        return self.errors.total


def solve_problem(mesh: ForestMesh, config: ProblemConfig, initial: FeFunction | None = None
                  ) -> SolveResult:
    """Build the space, assemble, solve and measure the error on ``mesh``."""
    t0 = time.perf_counter()
    ms = config.solution()
    form = config.formulation.upper()
    if form == CG:
        bcs = StrongBoundaryConditions.everywhere(mesh.dim, ms.value)
        space = build_fe_space(mesh, config.order, CG, bcs)
        g = interpolate_dirichlet_values(space)
        op = integrate_cg(space, ms.source, g, config.source_points())
    elif form == DG:
        space = build_fe_space(mesh, config.order, DG)
        g = np.zeros(0)
        op = integrate_dg(space, ms.source, ms.value, DgParameters(config.tau, config.penalty),
                          config.source_points())
    else:
        raise ValueError(f"unknown formulation {config.formulation!r}")

    symmetric = form == CG or config.tau == 1
    iterations = 0
    if config.solver == "direct":
        x = (CholeskyFactor(op.matrix) if symmetric else LuFactor(op.matrix)).solve(op.rhs)
    elif config.solver == "pcg":
        if not symmetric:
            raise ValueError("PCG needs a symmetric operator (tau = 1)")
        M = _preconditioner(space, op, config)
        # numbering is deterministic, so a function on an equal space can seed PCG
        same = (initial is not None and initial.space.mesh is mesh
                and initial.space.num_free == space.num_free)
        x0 = initial.free_values if same else None
        x, report = pcg(op.matrix, op.rhs, M, config.rtol, config.maxit, x0)
        if not report.converged:
            raise RuntimeError(f"PCG did not converge in {config.maxit} iterations")
        iterations = report.iterations
    else:
        raise ValueError(f"unknown solver {config.solver!r}")

    u = FeFunction(space, x, g, np.zeros(space.num_hanging))
    update_hanging_dof_values(space, u)
    errors = compute_local_true_errors(space, u, ms, config.error_points())
    partition = getattr(M, "partition", None) if config.solver == "pcg" else None
    return SolveResult(space, u, errors, iterations, time.perf_counter() - t0, op, partition)


def _preconditioner(space, op, config):
    kind = config.preconditioner
    if kind == "none":
        return None
    if kind == "jacobi":
        return jacobi(op.matrix)
    if kind == "bddc":
        if space.conformity != CG:
            raise ValueError("BDDC is only available for CG spaces")
        from .bddc import bddc_preconditioner
        return bddc_preconditioner(space, min(config.subdomains, space.mesh.num_cells), op.matrix)
    raise ValueError(f"unknown preconditioner {kind!r}")


# --------------------------------------------------------------------------
# AMR driver
# --------------------------------------------------------------------------

@dataclass
class AmrConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    uniform_steps: int = 2
    amr_steps: int = 8
    refine_fraction: float = 0.1
    coarsen_fraction: float = 0.05


@dataclass
class AmrRecord:
    step: int
    num_cells: int
    num_dofs: int
    num_hanging: int
    error: float
    iterations: int
    seconds: float
    mesh: ForestMesh
    solution: FeFunction
    errors: ErrorEstimator


def amr_loop(config: AmrConfig, callback=None) -> list[AmrRecord]:
    """Solve, measure, mark and adapt, ``amr_steps`` times after the first solve.

    Records hold one entry per solve, so there are ``amr_steps + 1`` of
    them. The previous solution is transferred to the new mesh and used as
    the PCG initial guess.
    """
    if config.problem.dim != 2:
        raise ValueError("adaptive refinement is only supported in 2D")
    strategy = FixedFractionStrategy(config.refine_fraction, config.coarsen_fraction)
    mesh = create_forest_mesh(config.uniform_steps)
    records: list[AmrRecord] = []
    initial = None
    for step in range(config.amr_steps + 1):
        res = solve_problem(mesh, config.problem, initial)
        rec = AmrRecord(step, mesh.num_cells, res.space.num_free, res.space.num_hanging,
                        res.error, res.iterations, res.seconds, mesh, res.solution, res.errors)
        records.append(rec)
        if callback is not None:
            callback(rec)
        if step == config.amr_steps:
            break
        flags = update_refinement_flags(strategy, res.errors, mesh)
        new_mesh, transfer = refine_and_coarsen(mesh, flags)
        if config.problem.solver == "pcg":
            new_space = _space_like(new_mesh, res.space)
            initial = transfer_fe_function(res.space, new_space, transfer, res.solution)
        mesh = new_mesh
    return records


def _space_like(mesh, space):
    return build_fe_space(mesh, space.order, space.conformity, space.bcs)
