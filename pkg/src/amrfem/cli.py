"""Command-line driver."""
from __future__ import annotations

import sys
from pathlib import Path

from .adapt import AmrConfig, ProblemConfig, solve_problem
from .linalg import write_matrix_market
from .mesh import create_unit_box_mesh
from .output import observed_orders, step_filename, write_solution_vtk
from .params import default_registry
from .study import StudyRecord, run_convergence_study


def _problem(v) -> ProblemConfig:
    return ProblemConfig(
        dim=v["dim"], formulation=v["formulation"], order=v["order"], alpha=v["alpha"],
        radius=v["radius"], center=tuple(v["center"]) if v["center"] else None,
        tau=v["tau"], penalty=v["penalty"], solver=v["solver"],
        preconditioner=v["preconditioner"], subdomains=v["subdomains"], rtol=v["rtol"],
        maxit=v["maxit"], quadrature=v["quadrature"])


def _print_record(rec: StudyRecord):
    print(f"{rec.mesh_or_step:>10} cells={rec.cells:<8d} dofs={rec.dofs:<8d} "
          f"hanging={rec.hanging:<6d} error={rec.error:.6e} it={rec.iterations:<5d} "
          f"time={rec.seconds:.3f}s", flush=True)


def main(argv=None) -> int:
    registry = default_registry()
    v = registry.parse(argv)
    if v["print_values"]:
        registry.print_values()
    try:
        problem = _problem(v)
        problem.solution()
        out = Path(v["output_dir"])
        vtk = v["output_format"] == "vtk"
        if v["mode"] == "single":
            out.mkdir(parents=True, exist_ok=True)
            mesh = create_unit_box_mesh(problem.dim, v["cells"])
            res = solve_problem(mesh, problem)
            rec = StudyRecord(f"{v['cells']}^{problem.dim}", mesh.num_cells, res.space.num_free,
                              res.space.num_hanging, res.error, res.iterations, res.seconds)
            _print_record(rec)
            if vtk:
                cells = {"error_sq": res.errors.local_sq}
                if res.partition is not None:
                    cells["subdomain"] = res.partition.owner
                write_solution_vtk(res.solution, out / step_filename("solution", 0), cells)
            if v["matrix_market"]:
                write_matrix_market(out / "system.mtx", res.operator.matrix, res.operator.rhs)
            return 0
        if v["mode"] == "uniform":
            records = run_convergence_study("uniform", problem, v["meshes"], out, vtk,
                                            _print_record)
            for (a, b), p in zip(zip(v["meshes"][:-1], v["meshes"][1:]),
                                 observed_orders([r.error for r in records])):
                print(f"observed order {a} -> {b}: {p:.3f}")
        else:
            amr = AmrConfig(problem, v["uniform_steps"], v["amr_steps"],
                            v["refine_fraction"], v["coarsen_fraction"])
            run_convergence_study("amr", amr, None, out, vtk, _print_record)
        print(f"wrote {out / 'convergence.csv'}")
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
