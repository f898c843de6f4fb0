"""Convergence studies on uniform meshes and along the AMR loop."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .adapt import AmrConfig, ProblemConfig, amr_loop, solve_problem
from .mesh import create_unit_box_mesh
from .output import step_filename, write_csv, write_solution_vtk


@dataclass
class StudyRecord:
    mesh_or_step: str
    cells: int
    dofs: int
    hanging: int
    error: float
    iterations: int
    seconds: float

    def __post_init__(self):
        if min(self.cells, self.dofs, self.hanging, self.iterations) < 0:
            raise ValueError("counts must be non-negative")


def _cell_fields(result):
    fields = {"error_sq": result.errors.local_sq}
    if result.partition is not None:
        fields["subdomain"] = result.partition.owner
    return fields


def run_uniform_study(config: ProblemConfig, meshes, output_dir=None, vtk: bool = False,
                      callback=None) -> list[StudyRecord]:
    records = []
    for k, n in enumerate(meshes):
        mesh = create_unit_box_mesh(config.dim, n)
        res = solve_problem(mesh, config)
        rec = StudyRecord(f"{n}^{config.dim}", mesh.num_cells, res.space.num_free,
                          res.space.num_hanging, res.error, res.iterations, res.seconds)
        records.append(rec)
        if vtk and output_dir is not None:
            write_solution_vtk(res.solution, Path(output_dir) / step_filename("uniform", k),
                               _cell_fields(res))
        if callback:
            callback(rec)
    return records


def run_amr_study(config: AmrConfig, output_dir=None, vtk: bool = False, callback=None
                  ) -> list[StudyRecord]:
    records = []

    def on_step(r):
        rec = StudyRecord(str(r.step), r.num_cells, r.num_dofs, r.num_hanging, r.error,
                          r.iterations, r.seconds)
        records.append(rec)
        if vtk and output_dir is not None:
            write_solution_vtk(r.solution, Path(output_dir) / step_filename("amr", r.step),
                               {"error_sq": r.errors.local_sq})
        if callback:
            callback(rec)

    amr_loop(config, on_step)
    return records


def run_convergence_study(mode: str, config, meshes=None, output_dir=None, vtk: bool = False,
                          callback=None) -> list[StudyRecord]:
    """Run a uniform (``config`` a ProblemConfig) or AMR (an AmrConfig) study.

    With ``output_dir`` the table is written to ``<output_dir>/convergence.csv``.
    """
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
    if mode == "uniform":
        records = run_uniform_study(config, meshes or [16, 32, 64, 128], output_dir, vtk, callback)
    elif mode == "amr":
        records = run_amr_study(config, output_dir, vtk, callback)
    else:
        raise ValueError(f"unknown study mode {mode!r}")
    if output_dir is not None:
        write_csv(records, Path(output_dir) / "convergence.csv")
    return records
